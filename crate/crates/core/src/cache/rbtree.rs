//! Arena-backed red-black tree supporting insert-or-replace and lookup.

use std::cmp::Ordering;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Color {
    Red,
    Black,
}

type Link = Option<usize>;

#[derive(Debug, Clone)]
struct Node<K, V> {
    key: K,
    value: V,
    color: Color,
    parent: Link,
    left: Link,
    right: Link,
}

/// Which red-black property a tree breaks, as reported by [`RbTree::validate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    /// (a) the root is red.
    RedRoot,
    /// (b) a red node has a red child.
    RedRed,
    /// (c) two root-to-leaf paths have different black heights.
    BlackHeight,
    /// (d) in-order traversal is not strictly increasing.
    KeyOrder,
    /// Parent/child links disagree or the size counter is off.
    Structure,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Violation::RedRoot => "root is red",
            Violation::RedRed => "red node with red child",
            Violation::BlackHeight => "unequal black height",
            Violation::KeyOrder => "keys out of order",
            Violation::Structure => "broken links",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct RbTree<K, V> {
    nodes: Vec<Node<K, V>>,
    root: Link,
}

impl<K, V> Default for RbTree<K, V> {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            root: None,
        }
    }
}

impl<K: Ord, V> RbTree<K, V> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, key: &K) -> Option<&V> {
        self.get_counting(key).0
    }

    pub fn get_mut(&mut self, key: &K) -> Option<&mut V> {
        let idx = self.find(key).0?;
        Some(&mut self.nodes[idx].value)
    }

    /// Lookup that also reports how many key comparisons it made.
    pub fn get_counting(&self, key: &K) -> (Option<&V>, usize) {
        let (idx, comparisons) = self.find(key);
        (idx.map(|i| &self.nodes[i].value), comparisons)
    }

    fn find(&self, key: &K) -> (Link, usize) {
        let mut cur = self.root;
        let mut comparisons = 0;
        while let Some(i) = cur {
            comparisons += 1;
            cur = match key.cmp(&self.nodes[i].key) {
                Ordering::Less => self.nodes[i].left,
                Ordering::Greater => self.nodes[i].right,
                Ordering::Equal => return (Some(i), comparisons),
            };
        }
        (None, comparisons)
    }

    /// Inserts `value` under `key`, returning the previous value if the key
    /// was already present.
    pub fn insert(&mut self, key: K, value: V) -> Option<V> {
        let mut parent = None;
        let mut cur = self.root;
        let mut went_left = false;
        while let Some(i) = cur {
            parent = Some(i);
            match key.cmp(&self.nodes[i].key) {
                Ordering::Less => {
                    went_left = true;
                    cur = self.nodes[i].left;
                }
                Ordering::Greater => {
                    went_left = false;
                    cur = self.nodes[i].right;
                }
                Ordering::Equal => {
                    return Some(std::mem::replace(&mut self.nodes[i].value, value));
                }
            }
        }

        let idx = self.nodes.len();
        self.nodes.push(Node {
            key,
            value,
            color: Color::Red,
            parent,
            left: None,
            right: None,
        });
        match parent {
            None => self.root = Some(idx),
            Some(p) if went_left => self.nodes[p].left = Some(idx),
            Some(p) => self.nodes[p].right = Some(idx),
        }
        self.fix_after_insert(idx);
        None
    }

    fn color(&self, link: Link) -> Color {
        link.map_or(Color::Black, |i| self.nodes[i].color)
    }

    fn fix_after_insert(&mut self, mut x: usize) {
        while let Some(p) = self.nodes[x].parent {
            if self.nodes[p].color == Color::Black {
                break;
            }
            // A red parent is never the root, so the grandparent exists.
            let g = self.nodes[p].parent.expect("red node has a parent");
            let parent_is_left = self.nodes[g].left == Some(p);
            let uncle = if parent_is_left {
                self.nodes[g].right
            } else {
                self.nodes[g].left
            };

            if self.color(uncle) == Color::Red {
                self.nodes[p].color = Color::Black;
                self.nodes[uncle.unwrap()].color = Color::Black;
                self.nodes[g].color = Color::Red;
                x = g;
                continue;
            }

            let mut p = p;
            if parent_is_left {
                if self.nodes[p].right == Some(x) {
                    self.rotate_left(p);
                    x = p;
                    p = self.nodes[x].parent.unwrap();
                }
                self.nodes[p].color = Color::Black;
                self.nodes[g].color = Color::Red;
                self.rotate_right(g);
            } else {
                if self.nodes[p].left == Some(x) {
                    self.rotate_right(p);
                    x = p;
                    p = self.nodes[x].parent.unwrap();
                }
                self.nodes[p].color = Color::Black;
                self.nodes[g].color = Color::Red;
                self.rotate_left(g);
            }
            break;
        }
        if let Some(r) = self.root {
            self.nodes[r].color = Color::Black;
        }
    }

    fn replace_child(&mut self, parent: Link, old: usize, new: usize) {
        match parent {
            None => self.root = Some(new),
            Some(p) => {
                if self.nodes[p].left == Some(old) {
                    self.nodes[p].left = Some(new);
                } else {
                    self.nodes[p].right = Some(new);
                }
            }
        }
    }

    fn rotate_left(&mut self, x: usize) {
        let y = self.nodes[x].right.expect("rotate_left needs a right child");
        let y_left = self.nodes[y].left;
        self.nodes[x].right = y_left;
        if let Some(b) = y_left {
            self.nodes[b].parent = Some(x);
        }
        let xp = self.nodes[x].parent;
        self.nodes[y].parent = xp;
        self.replace_child(xp, x, y);
        self.nodes[y].left = Some(x);
        self.nodes[x].parent = Some(y);
    }

    fn rotate_right(&mut self, x: usize) {
        let y = self.nodes[x].left.expect("rotate_right needs a left child");
        let y_right = self.nodes[y].right;
        self.nodes[x].left = y_right;
        if let Some(b) = y_right {
            self.nodes[b].parent = Some(x);
        }
        let xp = self.nodes[x].parent;
        self.nodes[y].parent = xp;
        self.replace_child(xp, x, y);
        self.nodes[y].right = Some(x);
        self.nodes[x].parent = Some(y);
    }

    /// Number of nodes on the longest root-to-leaf path.
    pub fn height(&self) -> usize {
        fn go<K, V>(t: &RbTree<K, V>, link: Link) -> usize {
            link.map_or(0, |i| 1 + go(t, t.nodes[i].left).max(go(t, t.nodes[i].right)))
        }
        go(self, self.root)
    }

    pub fn iter(&self) -> Iter<'_, K, V> {
        let mut it = Iter {
            tree: self,
            stack: Vec::new(),
        };
        it.push_left(self.root);
        it
    }

    /// Full traversal checking properties (a) through (d) plus link sanity.
    pub fn validate(&self) -> Result<(), Violation> {
        let Some(root) = self.root else {
            return if self.nodes.is_empty() {
                Ok(())
            } else {
                Err(Violation::Structure)
            };
        };
        if self.nodes[root].parent.is_some() {
            return Err(Violation::Structure);
        }
        if self.nodes[root].color == Color::Red {
            return Err(Violation::RedRoot);
        }

        // Returns black height of the subtree, or the first violation.
        fn check<K: Ord, V>(t: &RbTree<K, V>, i: usize, count: &mut usize) -> Result<usize, Violation> {
            *count += 1;
            let node = &t.nodes[i];
            let mut heights = [0usize; 2];
            for (slot, child) in [node.left, node.right].into_iter().enumerate() {
                if let Some(c) = child {
                    if t.nodes[c].parent != Some(i) {
                        return Err(Violation::Structure);
                    }
                    if node.color == Color::Red && t.nodes[c].color == Color::Red {
                        return Err(Violation::RedRed);
                    }
                    heights[slot] = check(t, c, count)?;
                }
            }
            if heights[0] != heights[1] {
                return Err(Violation::BlackHeight);
            }
            Ok(heights[0] + usize::from(node.color == Color::Black))
        }

        let mut count = 0;
        check(self, root, &mut count)?;
        if count != self.nodes.len() {
            return Err(Violation::Structure);
        }
        let mut prev: Option<&K> = None;
        for (k, _) in self.iter() {
            if prev.is_some_and(|p| p >= k) {
                return Err(Violation::KeyOrder);
            }
            prev = Some(k);
        }
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn force_color_of_key(&mut self, key: &K, color: Color) {
        if let Some(i) = self.find(key).0 {
            self.nodes[i].color = color;
        }
    }
}

pub struct Iter<'a, K, V> {
    tree: &'a RbTree<K, V>,
    stack: Vec<usize>,
}

impl<'a, K, V> Iter<'a, K, V> {
    fn push_left(&mut self, mut link: Link) {
        while let Some(i) = link {
            self.stack.push(i);
            link = self.tree.nodes[i].left;
        }
    }
}

impl<'a, K, V> Iterator for Iter<'a, K, V> {
    type Item = (&'a K, &'a V);

    fn next(&mut self) -> Option<Self::Item> {
        let i = self.stack.pop()?;
        let node = &self.tree.nodes[i];
        self.push_left(node.right);
        Some((&node.key, &node.value))
    }
}
