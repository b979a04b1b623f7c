//! Latency, throughput and cache experiments, plus the statistics used to
//! report them.
//!
//! Quartiles use linear interpolation between order statistics: for sorted
//! samples `x[0..n]` the `p`-quantile is read at position `h = (n-1)p`, so
//! `[1..9]` gives q1 = 3, median = 5, q3 = 7. Whiskers reach the most
//! extreme samples within 1.5·IQR of the box.

use std::io::Write;
use std::net::Ipv4Addr;
use std::path::Path;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::PrepopRecord;
use crate::nssim::ZoneSpec;
use crate::stub::{Pending, Stub, StubConfig, StubError};
use crate::testbed::Testbed;
use crate::wire::{DnsMessage, DnsQuestion, DomainName, Rcode, RecordType};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no samples")]
    Empty,
    #[error("need samples in at least two time buckets")]
    InsufficientSamples,
    #[error("{domain} answered {rcode} on repeat {repeat}")]
    BadAnswer {
        domain: String,
        repeat: usize,
        rcode: Rcode,
    },
    #[error("the resolver cache is disabled")]
    CacheDisabled,
    #[error("probe {0} is not in the pre-population set")]
    ProbeNotPrepopulated(String),
    #[error(transparent)]
    Stub(#[from] StubError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_lo: f64,
    pub whisker_hi: f64,
    pub n: usize,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Box-plot statistics. A whisker snaps to the most extreme sample inside
/// its fence; when that sample would fall inside the box (possible with
/// interpolated quartiles and very few distinct values) it is clamped to
/// the quartile instead, so `whisker_lo <= q1` and `q3 <= whisker_hi` hold.
pub fn compute_box_stats(samples: &[f64]) -> Result<BoxStats, BenchError> {
    if samples.is_empty() {
        return Err(BenchError::Empty);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75));
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
    let whisker_lo = sorted.iter().copied().find(|&x| x >= lo_fence).unwrap_or(q1).min(q1);
    let whisker_hi = sorted.iter().rev().copied().find(|&x| x <= hi_fence).unwrap_or(q3).max(q3);
    Ok(BoxStats {
        q1,
        median,
        q3,
        whisker_lo,
        whisker_hi,
        n: sorted.len(),
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub const SUSTAINABLE_MEAN_MS: f64 = 1000.0;
pub const SUSTAINABLE_GROWTH: f64 = 1.25;
pub const DEFAULT_BUCKETS: usize = 20;

/// Whether `(time_s, latency_ms)` samples describe a sustainable rate: the
/// mean latency is under one second and the mean over the final quarter of
/// time buckets is at most 1.25 times the mean over the first quarter.
pub fn detect_sustainable(samples: &[(f64, f64)], buckets: usize) -> Result<bool, BenchError> {
    if samples.is_empty() {
        return Err(BenchError::Empty);
    }
    let buckets = buckets.max(2);
    let t0 = samples.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let t1 = samples.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let width = (t1 - t0) / buckets as f64;
    let mut sums = vec![(0.0, 0usize); buckets];
    for &(t, latency) in samples {
        let b = if width > 0.0 {
            (((t - t0) / width) as usize).min(buckets - 1)
        } else {
            0
        };
        sums[b].0 += latency;
        sums[b].1 += 1;
    }
    let means: Vec<f64> = sums.iter().filter(|(_, n)| *n > 0).map(|(s, n)| s / *n as f64).collect();
    if means.len() < 2 {
        return Err(BenchError::InsufficientSamples);
    }
    let quarter = means.len().div_ceil(4);
    let first = mean(&means[..quarter]);
    let last = mean(&means[means.len() - quarter..]);
    let overall = mean(&samples.iter().map(|s| s.1).collect::<Vec<_>>());
    Ok(overall < SUSTAINABLE_MEAN_MS && last <= SUSTAINABLE_GROWTH * first)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartMode {
    /// A fresh TLS session for every query.
    Cold,
    /// One untimed warm-up query, then a reused session.
    Warm,
}

impl std::str::FromStr for StartMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cold" => Ok(StartMode::Cold),
            "warm" => Ok(StartMode::Warm),
            _ => Err(format!("mode must be cold or warm, not {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatencyRow {
    pub domain: String,
    pub stats: BoxStats,
    pub samples_ms: Vec<f64>,
}

fn a_query(name: &DomainName) -> DnsMessage {
    DnsMessage::query(rand::random(), DnsQuestion::new(name.clone(), RecordType::A), true)
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

fn expect_answer(msg: &DnsMessage, domain: &DomainName, repeat: usize) -> Result<(), BenchError> {
    match msg.rcode() {
        Rcode::NoError => Ok(()),
        rcode => Err(BenchError::BadAnswer {
            domain: domain.to_string(),
            repeat,
            rcode,
        }),
    }
}

/// Sends `repeats` sequential queries for each domain in turn.
pub fn run_latency(
    config: &StubConfig,
    mode: StartMode,
    domains: &[DomainName],
    repeats: usize,
    warmup: &DomainName,
) -> Result<Vec<LatencyRow>, BenchError> {
    let warm = match mode {
        StartMode::Warm => {
            let stub = Stub::new(config.clone())?;
            let reply = stub.resolve_message(&a_query(warmup));
            expect_answer(&reply, warmup, 0)?;
            Some(stub)
        }
        StartMode::Cold => None,
    };
    let mut rows = Vec::new();
    for domain in domains {
        let mut samples = Vec::with_capacity(repeats);
        for repeat in 0..repeats {
            let query = a_query(domain);
            let (reply, elapsed) = match &warm {
                Some(stub) => {
                    let start = Instant::now();
                    let reply = stub.resolve_message(&query);
                    (reply, start.elapsed())
                }
                None => {
                    let start = Instant::now();
                    let stub = Stub::new(config.clone())?;
                    let reply = stub.resolve_message(&query);
                    let elapsed = start.elapsed();
                    drop(stub);
                    (reply, elapsed)
                }
            };
            expect_answer(&reply, domain, repeat)?;
            samples.push(ms(elapsed));
        }
        rows.push(LatencyRow {
            domain: domain.to_string(),
            stats: compute_box_stats(&samples)?,
            samples_ms: samples,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub client: usize,
    /// Seconds since the start of the run, at send time.
    pub sent_at_s: f64,
    pub latency_ms: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThroughputRun {
    pub clients: usize,
    pub rate: f64,
    pub duration_s: f64,
    pub sent: usize,
    pub failures: usize,
    pub mean_latency_ms: f64,
    pub sustainable: bool,
    #[serde(skip)]
    pub samples: Vec<Sample>,
}

impl ThroughputRun {
    /// Mean gap between consecutive sends of each client, in seconds.
    pub fn mean_interarrival_s(&self) -> f64 {
        let mut gaps = Vec::new();
        for c in 0..self.clients {
            let times: Vec<f64> = self.samples.iter().filter(|s| s.client == c).map(|s| s.sent_at_s).collect();
            gaps.extend(times.windows(2).map(|w| w[1] - w[0]));
        }
        if gaps.is_empty() {
            0.0
        } else {
            mean(&gaps)
        }
    }
}

/// Open-loop load: each client owns a session and sends queries for
/// `domain` every `clients / rate` seconds regardless of outstanding answers.
pub fn run_throughput(
    config: &StubConfig,
    clients: usize,
    rate: f64,
    duration: Duration,
    domain: &DomainName,
) -> Result<ThroughputRun, BenchError> {
    assert!(clients > 0 && rate > 0.0);
    let interval = Duration::from_secs_f64(clients as f64 / rate);
    let per_client = (duration.as_secs_f64() / interval.as_secs_f64()).round() as usize;

    let mut stubs = Vec::new();
    for _ in 0..clients {
        let stub = Stub::new(config.clone())?;
        let mut connected = Err(StubError::NoResolvers);
        for i in 0..config.resolvers.len() {
            connected = stub.connect(i);
            if connected.is_ok() {
                break;
            }
        }
        connected?;
        stubs.push(stub);
    }

    let start = Instant::now() + Duration::from_millis(50);
    let samples = thread::scope(|scope| {
        let handles: Vec<_> = stubs
            .iter()
            .enumerate()
            .map(|(client, stub)| {
                scope.spawn(move || {
                    let (tx, rx) = mpsc::channel::<(Instant, Result<Pending, StubError>)>();
                    let collector = thread::spawn(move || {
                        rx.into_iter()
                            .map(|(sent, pending)| {
                                let outcome = pending.and_then(|p| p.wait());
                                let (latency, ok) = match outcome {
                                    Ok((msg, at)) => (ms(at.saturating_duration_since(sent)), msg.rcode() == Rcode::NoError),
                                    Err(_) => (ms(sent.elapsed()), false),
                                };
                                Sample {
                                    client,
                                    sent_at_s: sent.saturating_duration_since(start).as_secs_f64(),
                                    latency_ms: latency,
                                    ok,
                                }
                            })
                            .collect::<Vec<_>>()
                    });
                    let offset = interval.mul_f64(client as f64 / clients as f64);
                    for k in 0..per_client {
                        let due = start + offset + interval * k as u32;
                        let now = Instant::now();
                        if due > now {
                            thread::sleep(due - now);
                        }
                        let sent = Instant::now();
                        let _ = tx.send((sent, stub.submit(&a_query(domain))));
                    }
                    drop(tx);
                    collector.join().expect("collector panicked")
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("client panicked"))
            .collect::<Vec<_>>()
    });

    let failures = samples.iter().filter(|s| !s.ok).count();
    let ok: Vec<(f64, f64)> = samples.iter().filter(|s| s.ok).map(|s| (s.sent_at_s, s.latency_ms)).collect();
    let sustainable = failures == 0 && detect_sustainable(&ok, DEFAULT_BUCKETS).unwrap_or(false);
    let mean_latency_ms = if ok.is_empty() {
        f64::NAN
    } else {
        mean(&ok.iter().map(|s| s.1).collect::<Vec<_>>())
    };
    Ok(ThroughputRun {
        clients,
        rate,
        duration_s: duration.as_secs_f64(),
        sent: samples.len(),
        failures,
        mean_latency_ms,
        sustainable,
        samples,
    })
}

/// Zone for cache experiments: `probe0.com..` (served and pre-populated),
/// `miss0.com..` (served, never pre-populated) and `warmup.com`.
pub fn cache_zone(probes: usize, misses: usize) -> ZoneSpec {
    let names: Vec<String> = (0..probes)
        .map(|i| format!("probe{i}.com"))
        .chain((0..misses).map(|i| format!("miss{i}.com")))
        .chain(["warmup.com".to_string()])
        .collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    ZoneSpec::three_level(&refs)
}

/// `count` records starting with `probes`, padded with filler domains.
pub fn prepopulation(probes: &[DomainName], count: usize) -> Vec<PrepopRecord> {
    let filler = (0..).map(|i| format!("filler{i}.net").parse().expect("valid filler name"));
    probes
        .iter()
        .cloned()
        .chain(filler)
        .take(count.max(probes.len()))
        .enumerate()
        .map(|(i, domain)| PrepopRecord {
            domain,
            address: Ipv4Addr::from(0xc633_6400u32 + i as u32),
            ttl: 86_400,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEval {
    pub prepopulated: usize,
    pub hit: BoxStats,
    pub miss: BoxStats,
    pub hit_samples_ms: Vec<f64>,
    pub miss_samples_ms: Vec<f64>,
}

/// Loads `records` into the resolver cache, then measures warm-session
/// latency for `repeats` rounds over `probes` (hits) and for `misses`
/// distinct uncached domains.
pub fn run_cache_eval(
    bed: &Testbed,
    records: &[PrepopRecord],
    probes: &[DomainName],
    misses: &[DomainName],
    repeats: usize,
) -> Result<CacheEval, BenchError> {
    let enclave = bed.server.gate().enclave();
    if !enclave.config().cache_enabled {
        return Err(BenchError::CacheDisabled);
    }
    for p in probes {
        if !records.iter().any(|r| &r.domain == p) {
            return Err(BenchError::ProbeNotPrepopulated(p.to_string()));
        }
    }
    enclave.cache().prepopulate(records);

    let stub = bed.stub();
    let warmup: DomainName = "warmup.com".parse().expect("valid name");
    expect_answer(&stub.resolve_message(&a_query(&warmup)), &warmup, 0)?;

    let timed = |name: &DomainName, repeat: usize| -> Result<f64, BenchError> {
        let start = Instant::now();
        let reply = stub.resolve_message(&a_query(name));
        let elapsed = ms(start.elapsed());
        expect_answer(&reply, name, repeat)?;
        Ok(elapsed)
    };
    let mut hits = Vec::new();
    for repeat in 0..repeats {
        for p in probes {
            hits.push(timed(p, repeat)?);
        }
    }
    let mut miss = Vec::new();
    for m in misses {
        miss.push(timed(m, 0)?);
    }
    Ok(CacheEval {
        prepopulated: records.len(),
        hit: compute_box_stats(&hits)?,
        miss: compute_box_stats(&miss)?,
        hit_samples_ms: hits,
        miss_samples_ms: miss,
    })
}

pub fn write_latency_csv<W: Write>(out: W, rows: &[LatencyRow]) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["domain", "repeat", "latency_ms"])?;
    for row in rows {
        for (i, s) in row.samples_ms.iter().enumerate() {
            w.write_record([row.domain.clone(), i.to_string(), format!("{s:.3}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_throughput_csv<W: Write>(out: W, run: &ThroughputRun) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for s in &run.samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cache_csv<W: Write>(out: W, eval: &CacheEval) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["kind", "latency_ms"])?;
    for (kind, samples) in [("hit", &eval.hit_samples_ms), ("miss", &eval.miss_samples_ms)] {
        for s in samples {
            w.write_record([kind.to_string(), format!("{s:.3}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), BenchError> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}
