//! Anonymity sets of authoritative name servers.
//!
//! An observer of resolver-to-server traffic who sees a query go to a server
//! holding `R` records guesses the queried domain with probability `1/R`.
//! Given a `domain,ans_id` mapping this module derives `R` per server and
//! the fraction of domains served by servers with at least `N` records.

use std::collections::{BTreeMap, HashSet};
use std::fs::OpenOptions;
use std::io::{self, BufRead, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use crate::stub::Stub;
use crate::wire::{DnsQuestion, DomainName, Rcode, RecordType};

#[derive(Debug, Error)]
pub enum AnonError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("expected header `domain,ans_id`")]
    Header,
    #[error("mapping is empty")]
    Empty,
    #[error("rate limit must be positive")]
    BadRate,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DomainAnsMap {
    pub rows: Vec<(DomainName, String)>,
    /// Rows dropped because their domain had already appeared.
    pub duplicates: usize,
}

impl DomainAnsMap {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Keeps the first mapping for each domain.
    pub fn from_rows(rows: impl IntoIterator<Item = (DomainName, String)>) -> Self {
        let mut seen = HashSet::new();
        let mut map = Self::default();
        for (domain, ans) in rows {
            if seen.insert(domain.clone()) {
                map.rows.push((domain, ans));
            } else {
                map.duplicates += 1;
            }
        }
        map
    }
}

pub fn parse_mapping<R: Read>(input: R) -> Result<DomainAnsMap, AnonError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = reader.headers()?;
    if header.len() != 2 || &header[0] != "domain" || &header[1] != "ans_id" {
        return Err(AnonError::Header);
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| AnonError::Malformed {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            reason: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let bad = |reason: String| AnonError::Malformed { line, reason };
        if record.len() != 2 {
            return Err(bad(format!("expected 2 fields, found {}", record.len())));
        }
        let domain: DomainName = record[0].parse().map_err(|e| bad(format!("{}: {e}", &record[0])))?;
        let ans = record[1].trim();
        if ans.is_empty() {
            return Err(bad("empty ans_id".into()));
        }
        rows.push((domain, ans.to_string()));
    }
    let map = DomainAnsMap::from_rows(rows);
    if map.duplicates > 0 {
        log::warn!("{} duplicate domain rows ignored", map.duplicates);
    }
    Ok(map)
}

pub fn load_mapping(path: &Path) -> Result<DomainAnsMap, AnonError> {
    parse_mapping(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnonymityDistribution {
    pub r_of_ans: BTreeMap<String, usize>,
    pub per_domain: Vec<(String, usize)>,
}

impl AnonymityDistribution {
    pub fn domains(&self) -> usize {
        self.per_domain.len()
    }

    /// Fraction of domains whose server holds at least `n` records.
    pub fn fraction_at_least(&self, n: usize) -> f64 {
        let count = self.per_domain.iter().filter(|(_, r)| *r >= n).count();
        count as f64 / self.per_domain.len() as f64
    }

    /// `(N, fraction with R >= N)` for every distinct `R`, ascending.
    pub fn cdf(&self) -> Vec<(usize, f64)> {
        let mut rs: Vec<usize> = self.r_of_ans.values().copied().collect();
        rs.sort_unstable();
        rs.dedup();
        rs.into_iter().map(|n| (n, self.fraction_at_least(n))).collect()
    }

    pub fn summary(&self, thresholds: &[usize]) -> Vec<(usize, f64)> {
        thresholds.iter().map(|&n| (n, self.fraction_at_least(n))).collect()
    }
}

pub fn compute_distribution(map: &DomainAnsMap) -> Result<AnonymityDistribution, AnonError> {
    if map.is_empty() {
        return Err(AnonError::Empty);
    }
    let mut r_of_ans = BTreeMap::new();
    for (_, ans) in &map.rows {
        *r_of_ans.entry(ans.clone()).or_insert(0) += 1;
    }
    let per_domain = map
        .rows
        .iter()
        .map(|(d, ans)| (d.to_string(), r_of_ans[ans]))
        .collect();
    Ok(AnonymityDistribution { r_of_ans, per_domain })
}

/// Fractions are rounded to four decimals.
pub fn emit_cdf<W: Write>(dist: &AnonymityDistribution, out: W) -> Result<(), AnonError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "fraction"])?;
    for (n, f) in dist.cdf() {
        let rounded = (f * 10_000.0).round() / 10_000.0;
        w.write_record([n.to_string(), format!("{rounded:?}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Result of a live collection run.
#[derive(Debug, Default)]
pub struct CollectReport {
    pub written: usize,
    pub skipped: usize,
    pub failures: Vec<(String, String)>,
}

/// Spaces out permits at least `1/rate` apart, with no burst allowance.
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(rate: f64) -> Result<Self, AnonError> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(AnonError::BadRate);
        }
        Ok(Self {
            interval: Duration::from_secs_f64(1.0 / rate),
            next: Mutex::new(None),
        })
    }

    pub fn acquire(&self) {
        let slot = {
            let mut next = self.next.lock();
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            thread::sleep(slot - now);
        }
    }
}

/// Canonical server id for a domain: its NS host names, sorted and joined.
pub fn ns_lookup(stub: &Stub, domain: &DomainName) -> Result<String, String> {
    let reply = stub.resolve(DnsQuestion::new(domain.clone(), RecordType::NS));
    if reply.rcode() != Rcode::NoError {
        return Err(format!("rcode {}", reply.rcode()));
    }
    let mut names: Vec<String> = reply
        .answers
        .iter()
        .filter_map(|rr| rr.as_ns_target())
        .map(|n| n.to_string())
        .collect();
    if names.is_empty() {
        return Err("no NS records".into());
    }
    names.sort();
    names.dedup();
    Ok(names.join(";"))
}

fn already_collected(path: &Path) -> Result<HashSet<DomainName>, AnonError> {
    if !path.exists() {
        return Ok(HashSet::new());
    }
    Ok(load_mapping(path)?.rows.into_iter().map(|(d, _)| d).collect())
}

/// Looks up every domain not already present in `out`, appending one
/// flushed row per success so an interrupted run can be resumed. At most
/// `workers` lookups run at once and they start no faster than `rate` per
/// second. Setting `stop` ends the run after in-flight lookups finish.
pub fn collect_mapping_live<F>(
    domains: &[DomainName],
    rate: f64,
    workers: usize,
    out: &Path,
    stop: &AtomicBool,
    lookup: F,
) -> Result<CollectReport, AnonError>
where
    F: Fn(&DomainName) -> Result<String, String> + Sync,
{
    let limiter = RateLimiter::new(rate)?;
    let done = already_collected(out)?;
    let fresh = !out.exists() || std::fs::metadata(out)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(out)?;
    let mut writer = csv::WriterBuilder::new().from_writer(file);
    if fresh {
        writer.write_record(["domain", "ans_id"])?;
        writer.flush()?;
    }

    let todo: Vec<&DomainName> = domains.iter().filter(|d| !done.contains(*d)).collect();
    let mut report = CollectReport {
        skipped: domains.len() - todo.len(),
        ..CollectReport::default()
    };
    let queue = Mutex::new(todo.into_iter());
    let (tx, rx) = mpsc::channel();
    thread::scope(|scope| -> Result<(), AnonError> {
        for _ in 0..workers.max(1) {
            let (tx, queue, limiter, lookup) = (tx.clone(), &queue, &limiter, &lookup);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Some(domain) = queue.lock().next() else { break };
                limiter.acquire();
                let _ = tx.send((domain.clone(), lookup(domain)));
            });
        }
        drop(tx);
        for (domain, result) in rx {
            match result {
                Ok(ans) => {
                    writer.write_record([domain.to_string(), ans])?;
                    writer.flush()?;
                    report.written += 1;
                }
                Err(reason) => report.failures.push((domain.to_string(), reason)),
            }
        }
        Ok(())
    })?;
    Ok(report)
}

/// Reads one domain per line, ignoring blanks and `#` comments.
pub fn read_domain_list<R: BufRead>(input: R) -> Result<Vec<DomainName>, AnonError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(line.parse().map_err(|e| AnonError::Malformed {
            line: i + 1,
            reason: format!("{line}: {e}"),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE: &str = "domain,ans_id\nd1.com,A\nd2.com,A\nd3.com,B\n";

    #[test]
    fn three_row_example() {
        let map = parse_mapping(THREE.as_bytes()).unwrap();
        assert_eq!(map.len(), 3);
        let dist = compute_distribution(&map).unwrap();
        assert_eq!(dist.r_of_ans["A"], 2);
        assert_eq!(dist.r_of_ans["B"], 1);
        assert_eq!(dist.fraction_at_least(2), 2.0 / 3.0);
        let mut out = Vec::new();
        emit_cdf(&dist, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "n,fraction\n1,1.0\n2,0.6667\n");
    }

    #[test]
    fn duplicates_are_counted_not_kept() {
        let map = parse_mapping(format!("{THREE}d1.com,C\n").as_bytes()).unwrap();
        assert_eq!((map.len(), map.duplicates), (3, 1));
        assert_eq!(map.rows[0].1, "A");
    }

    #[test]
    fn malformed_rows_report_their_line() {
        let err = parse_mapping("domain,ans_id\nok.com,A\nbad..com,B\n".as_bytes()).unwrap_err();
        assert!(matches!(err, AnonError::Malformed { line: 3, .. }), "{err:?}");
        assert!(matches!(parse_mapping("name,server\n".as_bytes()), Err(AnonError::Header)));
        assert!(matches!(compute_distribution(&DomainAnsMap::default()), Err(AnonError::Empty)));
    }

    #[test]
    fn extremes() {
        let one = DomainAnsMap::from_rows((0..5).map(|i| (format!("d{i}.com").parse().unwrap(), "X".to_string())));
        let d = compute_distribution(&one).unwrap();
        assert_eq!((d.fraction_at_least(5), d.fraction_at_least(6)), (1.0, 0.0));
        let solo = DomainAnsMap::from_rows((0..5).map(|i| (format!("d{i}.com").parse().unwrap(), i.to_string())));
        assert_eq!(compute_distribution(&solo).unwrap().fraction_at_least(2), 0.0);
    }

    #[test]
    fn limiter_spaces_permits() {
        let limiter = RateLimiter::new(20.0).unwrap();
        let start = Instant::now();
        for _ in 0..5 {
            limiter.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(200));
        assert!(RateLimiter::new(0.0).is_err());
    }
}
