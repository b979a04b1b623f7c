//! A simulated name-server hierarchy served over DNS-over-TLS.
//!
//! Zone specs are line oriented; `#` starts a comment:
//!
//! ```text
//! node root a.root-servers.sim      # the first node is the root
//! node com a.gtld-servers.sim
//! node ans1 ns1.example.sim
//! delegate root com com             # parent, zone, child
//! delegate com example.com ans1
//! domain ans1 example.com 93.184.216.34 300   # owner, name, address, ttl
//! ```
//!
//! A node answers authoritatively for the domains it owns, refers queries
//! to the child whose delegated zone is the longest suffix of the name,
//! and returns NXDOMAIN otherwise.

mod server;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::net::Ipv4Addr;
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use thiserror::Error;

pub use server::{LogEntry, SimError, SimOptions, Simulation};

use crate::wire::{DnsMessage, DnsQuestion, DomainName, Rcode, RecordType, ResourceRecord};

pub const DEFAULT_TTL: u32 = 300;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpecError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("spec has no nodes")]
    Empty,
    #[error("node {0} declared twice")]
    DuplicateNode(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("node {0} has more than one parent")]
    MultipleParents(String),
    #[error("delegations form a cycle through {0}")]
    Cycle(String),
    #[error("the root node cannot be delegated to")]
    RootDelegated,
    #[error("domain {0} is served twice")]
    DuplicateDomain(String),
    #[error("domain {name} owned by {owner} is routed to {reached}")]
    Misrouted {
        name: String,
        owner: String,
        reached: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: String,
    pub hostname: DomainName,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delegation {
    pub parent: String,
    pub zone: DomainName,
    pub child: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainSpec {
    pub node: String,
    pub name: DomainName,
    pub addr: Ipv4Addr,
    pub ttl: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ZoneSpec {
    pub nodes: Vec<NodeSpec>,
    pub delegations: Vec<Delegation>,
    pub domains: Vec<DomainSpec>,
}

/// What a node does with a question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Answer(Vec<ResourceRecord>),
    NoData,
    Referral { zone: DomainName, child: usize },
    NxDomain,
}

impl Action {
    pub fn label(&self) -> &'static str {
        match self {
            Action::Answer(_) => "answer",
            Action::NoData => "nodata",
            Action::Referral { .. } => "referral",
            Action::NxDomain => "nxdomain",
        }
    }
}

impl ZoneSpec {
    pub fn node(mut self, id: &str, hostname: &str) -> Self {
        self.nodes.push(NodeSpec {
            id: id.to_string(),
            hostname: hostname.parse().expect("valid hostname"),
        });
        self
    }

    pub fn delegate(mut self, parent: &str, zone: &str, child: &str) -> Self {
        self.delegations.push(Delegation {
            parent: parent.to_string(),
            zone: zone.parse().expect("valid zone"),
            child: child.to_string(),
        });
        self
    }

    pub fn domain(mut self, node: &str, name: &str, addr: Ipv4Addr) -> Self {
        self.domains.push(DomainSpec {
            node: node.to_string(),
            name: name.parse().expect("valid domain"),
            addr,
            ttl: DEFAULT_TTL,
        });
        self
    }

    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let mut spec = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let bad = |reason: String| SpecError::Malformed { line: i + 1, reason };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let name = |s: &str| s.parse::<DomainName>().map_err(|e| bad(format!("{s}: {e}")));
            match fields.as_slice() {
                ["node", id, host] => spec.nodes.push(NodeSpec {
                    id: id.to_string(),
                    hostname: name(host)?,
                }),
                ["delegate", parent, zone, child] => spec.delegations.push(Delegation {
                    parent: parent.to_string(),
                    zone: name(zone)?,
                    child: child.to_string(),
                }),
                ["domain", node, domain, addr, rest @ ..] if rest.len() <= 1 => {
                    let ttl = match rest.first() {
                        Some(t) => t.parse().map_err(|_| bad(format!("bad ttl {t}")))?,
                        None => DEFAULT_TTL,
                    };
                    spec.domains.push(DomainSpec {
                        node: node.to_string(),
                        name: name(domain)?,
                        addr: addr.parse().map_err(|_| bad(format!("bad address {addr}")))?,
                        ttl,
                    });
                }
                _ => return Err(bad(format!("unrecognised line {line:?}"))),
            }
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, SpecError> {
        let text = std::fs::read_to_string(path).map_err(|e| SpecError::Malformed {
            line: 0,
            reason: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nodes {
            out.push_str(&format!("node {} {}\n", n.id, n.hostname));
        }
        for d in &self.delegations {
            out.push_str(&format!("delegate {} {} {}\n", d.parent, d.zone, d.child));
        }
        for d in &self.domains {
            out.push_str(&format!("domain {} {} {} {}\n", d.node, d.name, d.addr, d.ttl));
        }
        out
    }

    fn index(&self) -> Result<HashMap<&str, usize>, SpecError> {
        let mut index = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id.as_str(), i).is_some() {
                return Err(SpecError::DuplicateNode(n.id.clone()));
            }
        }
        Ok(index)
    }

    /// Checks that delegations form a tree rooted at the first node, that
    /// each domain has one owner and that resolution from the root reaches it.
    pub fn validate(&self) -> Result<(), SpecError> {
        let compiled = self.compile_unchecked()?;
        let mut parent: HashMap<usize, usize> = HashMap::new();
        for d in &compiled.delegations {
            if d.child == 0 {
                return Err(SpecError::RootDelegated);
            }
            match parent.insert(d.child, d.parent) {
                Some(p) if p != d.parent => {
                    return Err(SpecError::MultipleParents(self.nodes[d.child].id.clone()))
                }
                _ => {}
            }
        }
        for start in parent.keys() {
            let mut seen = HashSet::new();
            let mut cur = *start;
            while let Some(&p) = parent.get(&cur) {
                if !seen.insert(cur) {
                    return Err(SpecError::Cycle(self.nodes[*start].id.clone()));
                }
                cur = p;
            }
        }
        let mut owners = HashSet::new();
        for d in &self.domains {
            if !owners.insert(&d.name) {
                return Err(SpecError::DuplicateDomain(d.name.to_string()));
            }
        }
        for d in &self.domains {
            let path = compiled.route(&d.name);
            let reached = *path.last().expect("route starts at the root");
            if self.nodes[reached].id != d.node {
                return Err(SpecError::Misrouted {
                    name: d.name.to_string(),
                    owner: d.node.clone(),
                    reached: self.nodes[reached].id.clone(),
                });
            }
        }
        Ok(())
    }

    pub(crate) fn compile_unchecked(&self) -> Result<CompiledSpec, SpecError> {
        if self.nodes.is_empty() {
            return Err(SpecError::Empty);
        }
        let index = self.index()?;
        let lookup = |id: &str| index.get(id).copied().ok_or_else(|| SpecError::UnknownNode(id.to_string()));
        let mut delegations = Vec::new();
        for d in &self.delegations {
            delegations.push(CompiledDelegation {
                parent: lookup(&d.parent)?,
                zone: d.zone.clone(),
                child: lookup(&d.child)?,
            });
        }
        let mut records: Vec<BTreeMap<DomainName, Vec<ResourceRecord>>> = vec![BTreeMap::new(); self.nodes.len()];
        for d in &self.domains {
            records[lookup(&d.node)?]
                .entry(d.name.clone())
                .or_default()
                .push(ResourceRecord::a(d.name.clone(), d.ttl, d.addr));
        }
        Ok(CompiledSpec {
            hostnames: self.nodes.iter().map(|n| n.hostname.clone()).collect(),
            ids: self.nodes.iter().map(|n| n.id.clone()).collect(),
            delegations,
            records,
        })
    }

    /// Nodes visited when resolving `name` from the root.
    pub fn route(&self, name: &DomainName) -> Result<Vec<String>, SpecError> {
        let compiled = self.compile_unchecked()?;
        Ok(compiled
            .route(name)
            .into_iter()
            .map(|i| self.nodes[i].id.clone())
            .collect())
    }

    /// Served domains per owning node id.
    pub fn served_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for d in &self.domains {
            *counts.entry(d.node.clone()).or_insert(0) += 1;
        }
        counts
    }

    /// Writes the `domain,ans_id` mapping used by the anonymity analyzer.
    pub fn export_mapping<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["domain", "ans_id"])?;
        for d in &self.domains {
            w.write_record([d.name.to_string().as_str(), d.node.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// root → com → one authoritative node serving `names` (all under `.com`).
    pub fn three_level(names: &[&str]) -> Self {
        let mut spec = Self::default()
            .node("root", "a.root-servers.sim")
            .node("com", "a.gtld-servers.sim")
            .node("ans", "ns1.hosting.sim")
            .delegate("root", "com", "com");
        for (i, name) in names.iter().enumerate() {
            spec = spec
                .delegate("com", name, "ans")
                .domain("ans", name, Ipv4Addr::new(192, 0, 2, (i % 250 + 1) as u8));
        }
        spec
    }

    /// One authoritative node per group under `com`, each serving as many
    /// domains as its group size. Domain order is shuffled with `seed`.
    pub fn synthetic(group_sizes: &[usize], seed: u64) -> Self {
        let mut spec = Self::default()
            .node("root", "a.root-servers.sim")
            .node("com", "a.gtld-servers.sim")
            .delegate("root", "com", "com");
        let mut domains = Vec::new();
        for (g, &size) in group_sizes.iter().enumerate() {
            let id = format!("ans{g}");
            spec = spec.node(&id, &format!("ns.g{g}.sim"));
            for k in 0..size {
                domains.push((id.clone(), format!("site{k}-g{g}.com")));
            }
        }
        domains.shuffle(&mut StdRng::seed_from_u64(seed));
        for (n, (owner, name)) in domains.iter().enumerate() {
            let addr = Ipv4Addr::from(0x0a00_0000u32 + n as u32 + 1);
            spec = spec.delegate("com", name, owner).domain(owner, name, addr);
        }
        spec
    }
}

/// Group sizes for a 1000-domain population: 57 domains on singleton
/// servers, 286 on servers with 2–99 domains and 657 on servers with at
/// least 100.
pub fn reference_composition() -> Vec<usize> {
    let mut groups = vec![1; 57];
    groups.extend([2, 4, 10, 20, 50, 99, 99, 2]);
    groups.extend([100, 157, 400]);
    groups
}

#[derive(Debug, Clone)]
pub(crate) struct CompiledDelegation {
    pub parent: usize,
    pub zone: DomainName,
    pub child: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct CompiledSpec {
    pub hostnames: Vec<DomainName>,
    pub ids: Vec<String>,
    pub delegations: Vec<CompiledDelegation>,
    pub records: Vec<BTreeMap<DomainName, Vec<ResourceRecord>>>,
}

impl CompiledSpec {
    fn best_delegation(&self, node: usize, name: &DomainName) -> Option<&CompiledDelegation> {
        self.delegations
            .iter()
            .filter(|d| d.parent == node && name.is_subdomain_of(&d.zone))
            .max_by_key(|d| d.zone.labels().len())
    }

    /// Node indices visited from the root, bounded by the node count.
    pub fn route(&self, name: &DomainName) -> Vec<usize> {
        let mut path = vec![0];
        let mut cur = 0;
        while path.len() <= self.hostnames.len() {
            if self.records[cur].contains_key(name) {
                break;
            }
            match self.best_delegation(cur, name) {
                Some(d) => {
                    cur = d.child;
                    path.push(cur);
                }
                None => break,
            }
        }
        path
    }

    pub fn decide(&self, node: usize, question: &DnsQuestion) -> Action {
        if let Some(records) = self.records[node].get(&question.name) {
            return match question.qtype {
                RecordType::A => Action::Answer(records.clone()),
                RecordType::NS => Action::Answer(vec![ResourceRecord::ns(
                    question.name.clone(),
                    DEFAULT_TTL,
                    &self.hostnames[node],
                )]),
                _ => Action::NoData,
            };
        }
        match self.best_delegation(node, &question.name) {
            Some(d) => Action::Referral {
                zone: d.zone.clone(),
                child: d.child,
            },
            None => Action::NxDomain,
        }
    }

    /// Builds the response for `query` at `node`, given node addresses for glue.
    pub fn respond(&self, node: usize, query: &DnsMessage, addrs: &[Ipv4Addr]) -> (DnsMessage, Action) {
        let Some(question) = query.first_question().filter(|_| query.questions.len() == 1) else {
            let mut r = query.response_to(Rcode::FormErr);
            r.questions.clear();
            return (r, Action::NxDomain);
        };
        let action = self.decide(node, question);
        let mut response = query.response_to(Rcode::NoError);
        match &action {
            Action::Answer(records) => {
                response.flags.authoritative = true;
                response.answers = records.clone();
            }
            Action::NoData => response.flags.authoritative = true,
            Action::Referral { zone, child } => {
                let host = &self.hostnames[*child];
                response.authorities.push(ResourceRecord::ns(zone.clone(), DEFAULT_TTL, host));
                response.additionals.push(ResourceRecord::a(host.clone(), DEFAULT_TTL, addrs[*child]));
            }
            Action::NxDomain => {
                response.flags.authoritative = true;
                response.flags.rcode = Rcode::NxDomain;
            }
        }
        (response, action)
    }
}
