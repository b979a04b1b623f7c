//! In-enclave record cache keyed by (domain, record type).
//!
//! Entries expire once their age exceeds the smallest TTL among their
//! records; expiry is checked lazily at lookup and an expired slot is
//! simply overwritten by the next insert for the same key.

mod rbtree;

use std::io::BufRead;
use std::net::Ipv4Addr;
use std::path::Path;
use std::time::{Duration, Instant};

use parking_lot::RwLock;
use thiserror::Error;

pub use rbtree::{Color, RbTree, Violation};

use crate::wire::{DomainName, RecordType, ResourceRecord};

pub const DEFAULT_MAX_ENTRIES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheKey {
    pub name: DomainName,
    pub qtype: RecordType,
}

impl CacheKey {
    pub fn new(name: DomainName, qtype: RecordType) -> Self {
        Self { name, qtype }
    }
}

#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub records: Vec<ResourceRecord>,
    pub insert_time: Instant,
}

impl CacheEntry {
    fn expired_at(&self, now: Instant) -> bool {
        let ttl = self.records.iter().map(|r| r.ttl).min().unwrap_or(0);
        now.saturating_duration_since(self.insert_time) > Duration::from_secs(u64::from(ttl))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Lookup {
    Hit(Vec<ResourceRecord>),
    Miss,
}

#[derive(Debug)]
pub struct RbCache {
    tree: RbTree<CacheKey, CacheEntry>,
    max_entries: usize,
}

impl Default for RbCache {
    fn default() -> Self {
        Self::with_max_entries(DEFAULT_MAX_ENTRIES)
    }
}

impl RbCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_max_entries(max_entries: usize) -> Self {
        Self {
            tree: RbTree::new(),
            max_entries,
        }
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    /// Stores `records` under `key`. Empty record sets and new keys past
    /// the entry limit are ignored; returns whether the entry was stored.
    pub fn insert(&mut self, key: CacheKey, records: Vec<ResourceRecord>) -> bool {
        self.insert_at(key, records, Instant::now())
    }

    pub fn insert_at(&mut self, key: CacheKey, records: Vec<ResourceRecord>, now: Instant) -> bool {
        if records.is_empty() {
            return false;
        }
        let entry = CacheEntry {
            records,
            insert_time: now,
        };
        if let Some(slot) = self.tree.get_mut(&key) {
            *slot = entry;
            return true;
        }
        if self.tree.len() >= self.max_entries {
            return false;
        }
        self.tree.insert(key, entry);
        true
    }

    pub fn lookup(&self, key: &CacheKey) -> Lookup {
        self.lookup_at(key, Instant::now())
    }

    pub fn lookup_at(&self, key: &CacheKey, now: Instant) -> Lookup {
        match self.tree.get(key) {
            Some(entry) if !entry.expired_at(now) => Lookup::Hit(entry.records.clone()),
            _ => Lookup::Miss,
        }
    }

    /// Key comparisons a lookup of `key` performs.
    pub fn lookup_cost(&self, key: &CacheKey) -> usize {
        self.tree.get_counting(key).1
    }

    pub fn height(&self) -> usize {
        self.tree.height()
    }

    pub fn validate(&self) -> Result<(), Violation> {
        self.tree.validate()
    }

    pub fn keys(&self) -> impl Iterator<Item = &CacheKey> {
        self.tree.iter().map(|(k, _)| k)
    }
}

/// Cache shared by the handler pool: many readers or one writer.
#[derive(Debug, Default)]
pub struct SharedCache {
    inner: RwLock<RbCache>,
}

impl SharedCache {
    pub fn new(cache: RbCache) -> Self {
        Self {
            inner: RwLock::new(cache),
        }
    }

    pub fn lookup(&self, key: &CacheKey) -> Lookup {
        self.inner.read().lookup(key)
    }

    pub fn insert(&self, key: CacheKey, records: Vec<ResourceRecord>) -> bool {
        self.inner.write().insert(key, records)
    }

    pub fn len(&self) -> usize {
        self.inner.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.read().is_empty()
    }

    pub fn validate(&self) -> Result<(), Violation> {
        self.inner.read().validate()
    }

    pub fn prepopulate(&self, records: &[PrepopRecord]) -> usize {
        let mut cache = self.inner.write();
        let mut stored = 0;
        for rec in records {
            let key = CacheKey::new(rec.domain.clone(), RecordType::A);
            let rr = ResourceRecord::a(rec.domain.clone(), rec.ttl, rec.address);
            if cache.insert(key, vec![rr]) {
                stored += 1;
            }
        }
        stored
    }
}

#[derive(Debug, Error)]
pub enum PrepopError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One line of a cache pre-population file: `domain,qtype,address,ttl`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepopRecord {
    pub domain: DomainName,
    pub address: Ipv4Addr,
    pub ttl: u32,
}

impl PrepopRecord {
    pub fn to_line(&self) -> String {
        format!("{},A,{},{}", self.domain, self.address, self.ttl)
    }
}

pub fn parse_prepopulation<R: BufRead>(reader: R) -> Result<Vec<PrepopRecord>, PrepopError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| PrepopError::Malformed {
            line: line_no,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad("expected domain,qtype,address,ttl"));
        }
        let domain: DomainName = fields[0].parse().map_err(|e| bad(&format!("{e}")))?;
        let qtype: RecordType = fields[1].parse().map_err(|e: String| bad(&e))?;
        if qtype != RecordType::A {
            return Err(bad("only A records can be pre-populated"));
        }
        let address = fields[2].parse().map_err(|_| bad("bad IPv4 address"))?;
        let ttl = fields[3].parse().map_err(|_| bad("bad ttl"))?;
        out.push(PrepopRecord {
            domain,
            address,
            ttl,
        });
    }
    Ok(out)
}

pub fn load_prepopulation(path: &Path) -> Result<Vec<PrepopRecord>, PrepopError> {
    let file = std::fs::File::open(path)?;
    parse_prepopulation(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(name: &str) -> CacheKey {
        CacheKey::new(name.parse().unwrap(), RecordType::A)
    }

    fn a(name: &str, ttl: u32, last: u8) -> ResourceRecord {
        ResourceRecord::a(name.parse().unwrap(), ttl, Ipv4Addr::new(10, 0, 0, last))
    }

    #[test]
    fn empty_cache_misses() {
        let c = RbCache::new();
        assert_eq!(c.lookup(&key("example.com")), Lookup::Miss);
        assert_eq!(c.validate(), Ok(()));
    }

    #[test]
    fn insert_then_lookup_hits() {
        let mut c = RbCache::new();
        let recs = vec![a("example.com", 300, 1)];
        assert!(c.insert(key("example.com"), recs.clone()));
        assert_eq!(c.lookup(&key("EXAMPLE.com")), Lookup::Hit(recs));
    }

    #[test]
    fn reinsert_replaces_records() {
        let mut c = RbCache::new();
        c.insert(key("example.com"), vec![a("example.com", 300, 1)]);
        c.insert(key("example.com"), vec![a("example.com", 300, 2)]);
        assert_eq!(c.len(), 1);
        assert_eq!(c.lookup(&key("example.com")), Lookup::Hit(vec![a("example.com", 300, 2)]));
    }

    #[test]
    fn qtype_is_part_of_key() {
        let mut c = RbCache::new();
        c.insert(key("example.com"), vec![a("example.com", 300, 1)]);
        let ns_key = CacheKey::new("example.com".parse().unwrap(), RecordType::NS);
        assert_eq!(c.lookup(&ns_key), Lookup::Miss);
    }

    #[test]
    fn entries_expire_after_min_ttl() {
        let mut c = RbCache::new();
        let t0 = Instant::now();
        c.insert_at(key("x.com"), vec![a("x.com", 10, 1), a("x.com", 5, 2)], t0);
        assert!(matches!(c.lookup_at(&key("x.com"), t0 + Duration::from_secs(5)), Lookup::Hit(_)));
        assert_eq!(c.lookup_at(&key("x.com"), t0 + Duration::from_secs(6)), Lookup::Miss);
    }

    #[test]
    fn limit_rejects_new_keys_but_allows_overwrite() {
        let mut c = RbCache::with_max_entries(2);
        assert!(c.insert(key("a.com"), vec![a("a.com", 60, 1)]));
        assert!(c.insert(key("b.com"), vec![a("b.com", 60, 1)]));
        assert!(!c.insert(key("c.com"), vec![a("c.com", 60, 1)]));
        assert!(c.insert(key("a.com"), vec![a("a.com", 60, 9)]));
        assert_eq!(c.len(), 2);
        assert!(!c.insert(key("d.com"), vec![]));
    }

    #[test]
    fn prepopulated_domains_all_hit() {
        for n in [10usize, 100, 1000] {
            let recs: Vec<PrepopRecord> = (0..n)
                .map(|i| PrepopRecord {
                    domain: format!("site{i}.com").parse().unwrap(),
                    address: Ipv4Addr::new(10, 1, (i / 256) as u8, (i % 256) as u8),
                    ttl: 3600,
                })
                .collect();
            let cache = SharedCache::default();
            assert_eq!(cache.prepopulate(&recs), n);
            for r in &recs {
                assert!(matches!(cache.lookup(&key(&r.domain.to_string())), Lookup::Hit(_)));
            }
            assert_eq!(cache.validate(), Ok(()));
        }
    }

    #[test]
    fn prepopulation_file_parsing() {
        let text = "# comment\nexample.com,A,10.0.0.1,300\n\nfoo.org,a,10.0.0.2,60\n";
        let recs = parse_prepopulation(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].to_line(), "foo.org,A,10.0.0.2,60");
        let err = parse_prepopulation("x.com,A,nope,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, PrepopError::Malformed { line: 1, .. }));
    }
}
