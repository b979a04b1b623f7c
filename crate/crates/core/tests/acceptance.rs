//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 7`.

mod common;

use std::collections::BTreeMap;
use std::io::Cursor;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{forge, gen, measurement, workload, CertServer, Tamper, TAMPERS};
use pdot::anon::{self, DomainAnsMap};
use pdot::attestation::{AttestationError, Authorities, TrustPolicy};
use pdot::bench::{self, StartMode};
use pdot::cache::RbTree;
use pdot::endpoint::Endpoint;
use pdot::host::{GateTap, Purpose};
use pdot::nssim::{reference_composition, ZoneSpec};
use pdot::stub::{Stub, StubConfig, StubError, WireTap, WritePhase};
use pdot::testbed::{Testbed, TestbedOptions};
use pdot::tls::VerificationFailure;
use pdot::wire::{self, DnsMessage, DnsQuestion, DomainName, Rcode, RecordType};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}.com")).collect()
}

fn parse_all(list: &[String]) -> Vec<DomainName> {
    list.iter().map(|n| n.parse().unwrap()).collect()
}

fn bed(zone: ZoneSpec, delay: Duration, cache: bool) -> Testbed {
    let mut options = TestbedOptions {
        zone,
        ns_delay: delay,
        ..TestbedOptions::default()
    };
    options.resolver.cache_enabled = cache;
    Testbed::start(options).unwrap()
}

fn expected_failure(err: &StubError, kind: Tamper, allowed: &pdot::attestation::EnclaveMeasurement) -> bool {
    use VerificationFailure::{Attestation, MeasurementNotAllowed};
    match (err, kind) {
        (StubError::Verification(Attestation(e)), Tamper::MissingAttestation) => *e == AttestationError::MissingAttestation,
        (StubError::Verification(MeasurementNotAllowed(m)), Tamper::WrongMeasurement) => m != allowed,
        (StubError::Verification(Attestation(e)), Tamper::MutatedSignature) => *e == AttestationError::BadReportSignature,
        (StubError::Verification(Attestation(e)), Tamper::MismatchedPubkey) => *e == AttestationError::PubkeyMismatch,
        _ => false,
    }
}

fn security() -> Outcome {
    const TRIALS: usize = 1000;
    const GENUINE: usize = 100;
    let start = Instant::now();
    let auth = Authorities::generate().unwrap();
    let allowed = measurement("trusted");
    let policy = TrustPolicy::attested([allowed], vec![auth.root()]);
    let mut rng = StdRng::seed_from_u64(0xacce);
    let mut kinds: Vec<Tamper> = TAMPERS.iter().copied().cycle().take(TRIALS).collect();
    kinds.shuffle(&mut rng);

    let mut rejected = 0;
    let mut leaks = 0;
    let mut wrong_reason = Vec::new();
    for kind in kinds {
        let (chain, key) = forge(kind, &auth, allowed, &mut rng);
        let server = CertServer::start(chain, &key, 1);
        let tap = Arc::new(WireTap::default());
        let config = StubConfig::attested(vec![Endpoint::localhost(server.addr)], policy.clone());
        let stub = Stub::new(config).unwrap().with_tap(tap.clone());
        match stub.connect(0) {
            Err(e) if expected_failure(&e, kind, &allowed) => rejected += 1,
            other => wrong_reason.push(format!("{kind:?}: {other:?}")),
        }
        drop(stub);
        if tap.bytes_in(WritePhase::Established) > 0 || server.plaintext_bytes.load(Ordering::SeqCst) > 0 {
            leaks += 1;
        }
    }

    let mut accepted = 0;
    for _ in 0..GENUINE {
        let (key, cert) = common::genuine(&auth, allowed);
        let server = CertServer::start(cert.presented_chain(), &key, 1);
        let stub = Stub::new(StubConfig::attested(vec![Endpoint::localhost(server.addr)], policy.clone())).unwrap();
        if stub.connect(0).is_ok() {
            accepted += 1;
        }
    }
    let elapsed = start.elapsed();
    check(
        rejected == TRIALS && leaks == 0 && accepted == GENUINE && elapsed < Duration::from_secs(60),
        format!(
            "{rejected}/{TRIALS} tampered rejected with the expected reason, {leaks} sent query bytes, \
             {accepted}/{GENUINE} genuine accepted, {:.1} s{}",
            elapsed.as_secs_f64(),
            wrong_reason.first().map(|w| format!(", first mismatch {w}")).unwrap_or_default()
        ),
    )
}

fn wire_name(name: &DomainName) -> Vec<u8> {
    let raw = common::a_query(0, &name.to_string()).encode().unwrap();
    raw[12..12 + name.encoded_len()].to_vec()
}

fn crossings(bed: &Testbed, n: usize) -> Vec<u64> {
    let stub = bed.stub();
    stub.connect(0).unwrap();
    let gate = bed.server.gate();
    (0..n)
        .map(|_| {
            let before = gate.stats();
            let reply = stub.resolve(DnsQuestion::new("probe0.com".parse().unwrap(), RecordType::A));
            assert_eq!(reply.rcode(), Rcode::NoError);
            let after = gate.stats();
            (after.calls_in - before.calls_in) + (after.out(Purpose::ClientRecords) - before.out(Purpose::ClientRecords))
        })
        .collect()
}

fn boundary() -> Outcome {
    let mut list = names("probe", 10);
    list.push("warmup.com".into());
    let refs: Vec<&str> = list.iter().map(String::as_str).collect();
    let zone = ZoneSpec::three_level(&refs);

    let tapped = bed(zone.clone(), Duration::ZERO, true);
    let tap = Arc::new(GateTap::default());
    tapped.server.gate().host().set_tap(Some(tap.clone()));
    let all = parse_all(&list);
    let (domains, warmup) = (&all[..10], &all[10]);
    for mode in [StartMode::Cold, StartMode::Warm] {
        bench::run_latency(&tapped.stub_config(), mode, domains, 100, warmup).map_err(|e| e.to_string())?;
    }
    let leaked: Vec<String> = all
        .iter()
        .filter(|d| tap.contains(&wire_name(d)) || tap.contains(d.to_string().as_bytes()))
        .map(|d| d.to_string())
        .collect();

    let fast = crossings(&bed(zone.clone(), Duration::ZERO, false), 5);
    let slow = crossings(&bed(zone, Duration::from_millis(500), false), 5);
    check(
        leaked.is_empty() && tap.total_bytes() > 0 && fast.iter().all(|&c| c <= 6) && fast == slow,
        format!(
            "{} tapped bytes, leaked names {leaked:?}; crossings per warm query {fast:?} at 0 ms, {slow:?} at 500 ms",
            tap.total_bytes()
        ),
    )
}

fn threading() -> Outcome {
    let start = Instant::now();
    let bed = workload::testbed();
    let r = workload::run(&bed, 10_000, 8, 0x7ead);
    let s = &r.final_stats;
    let elapsed = start.elapsed();
    let ok = r.sent == 10_000
        && s.queries_received == 10_000
        && s.in_flight == 0
        && r.fifo_violations.is_empty()
        && r.fifo_checked_sessions > 0
        && r.conservation_violations.is_empty()
        && r.pool_violations.is_empty()
        && r.pool_samples > 0
        && r.stall_answered == 0
        && r.lost.is_empty()
        && s.dropped_disconnected > 0
        && s.dropped_timeout > 0
        && elapsed < Duration::from_secs(120);
    check(
        ok,
        format!(
            "{} queries: answered {}, timed out {}, dropped on disconnect {}; FIFO checked on {} sessions with {} violations; \
             {} conservation and {} pool-size violations over {} samples; {} batches lost answers{}; {:.1} s",
            s.queries_received,
            s.answered,
            s.dropped_timeout,
            s.dropped_disconnected,
            r.fifo_checked_sessions,
            r.fifo_violations.len(),
            r.conservation_violations.len(),
            r.pool_violations.len(),
            r.pool_samples,
            r.lost.len(),
            r.lost.first().map(|l| format!(" (first: {l})")).unwrap_or_default(),
            elapsed.as_secs_f64()
        ),
    )
}

fn throughput() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let domain: DomainName = "example.com".parse().unwrap();
    for clients in [1, 5, 10, 25] {
        let bed = bed(ZoneSpec::three_level(&["example.com"]), Duration::from_millis(10), false);
        let run = bench::run_throughput(&bed.stub_config(), clients, 100.0, Duration::from_secs(60), &domain)
            .map_err(|e| e.to_string())?;
        ok &= run.sustainable && run.failures == 0 && run.mean_latency_ms < 1000.0;
        lines.push(format!(
            "{clients} clients: {} sent, {} failed, mean {:.1} ms, sustainable={}",
            run.sent, run.failures, run.mean_latency_ms, run.sustainable
        ));
    }
    check(ok, lines.join("; "))
}

fn median(samples: &[f64]) -> f64 {
    bench::compute_box_stats(samples).unwrap().median
}

fn latency() -> Outcome {
    let mut list = names("probe", 10);
    list.push("warmup.com".into());
    let refs: Vec<&str> = list.iter().map(String::as_str).collect();
    let bed = bed(ZoneSpec::three_level(&refs), Duration::ZERO, true);
    let all = parse_all(&list);
    let (domains, warmup) = (&all[..10], &all[10]);
    let cold = bench::run_latency(&bed.stub_config(), StartMode::Cold, domains, 100, warmup).map_err(|e| format!("cold: {e}"))?;
    let warm = bench::run_latency(&bed.stub_config(), StartMode::Warm, domains, 100, warmup).map_err(|e| format!("warm: {e}"))?;
    let worse: Vec<&str> = cold
        .iter()
        .zip(&warm)
        .filter(|(c, w)| w.stats.median >= c.stats.median)
        .map(|(c, _)| c.domain.as_str())
        .collect();
    let all_cold: Vec<f64> = cold.iter().flat_map(|r| r.samples_ms.clone()).collect();
    let all_warm: Vec<f64> = warm.iter().flat_map(|r| r.samples_ms.clone()).collect();
    let counts_ok = cold.iter().chain(&warm).all(|r| r.stats.n == 100);
    check(
        worse.is_empty() && counts_ok,
        format!(
            "0 SERVFAIL over 2000 queries; overall median cold {:.2} ms, warm {:.2} ms; domains where warm was not faster: {worse:?}",
            median(&all_cold),
            median(&all_warm)
        ),
    )
}

#[derive(Default)]
struct AssocList(Vec<(u32, u32)>);

impl AssocList {
    fn insert(&mut self, k: u32, v: u32) -> Option<u32> {
        match self.0.iter().position(|(key, _)| *key >= k) {
            Some(i) if self.0[i].0 == k => Some(std::mem::replace(&mut self.0[i].1, v)),
            Some(i) => {
                self.0.insert(i, (k, v));
                None
            }
            None => {
                self.0.push((k, v));
                None
            }
        }
    }

    fn get(&self, k: u32) -> Option<u32> {
        self.0.iter().find(|(key, _)| *key == k).map(|(_, v)| *v)
    }
}

fn cache() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let probes = parse_all(&names("probe", 10));
    let misses = parse_all(&names("miss", 20));
    for count in [10, 100, 1000] {
        let bed = bed(bench::cache_zone(10, 20), Duration::from_millis(50), true);
        let eval = bench::run_cache_eval(&bed, &bench::prepopulation(&probes, count), &probes, &misses, 10)
            .map_err(|e| e.to_string())?;
        let ratio = eval.hit.median / eval.miss.median;
        ok &= ratio < 0.25;
        lines.push(format!(
            "prepopulate {count}: hit median {:.2} ms, miss median {:.2} ms, ratio {ratio:.3}",
            eval.hit.median, eval.miss.median
        ));
    }

    let mut rng = StdRng::seed_from_u64(0xcace);
    let mut tree = RbTree::new();
    let mut oracle = AssocList::default();
    let mut mismatches = 0;
    let mut invalid = 0;
    for _ in 0..10_000 {
        let k = rng.gen_range(0..4_000u32);
        if rng.gen_bool(0.6) {
            let v = rng.gen();
            mismatches += usize::from(tree.insert(k, v) != oracle.insert(k, v));
        } else {
            mismatches += usize::from(tree.get(&k).copied() != oracle.get(k));
        }
        invalid += usize::from(tree.validate().is_err());
    }
    let contents: Vec<(u32, u32)> = tree.iter().map(|(k, v)| (*k, *v)).collect();
    mismatches += usize::from(contents != oracle.0);
    ok &= mismatches == 0 && invalid == 0;
    lines.push(format!(
        "10000 tree operations: {mismatches} oracle mismatches, {invalid} invariant failures, {} keys, height {}",
        tree.len(),
        tree.height()
    ));
    check(ok, lines.join("; "))
}

/// Per-domain R by scanning every row for the same server.
fn recount(rows: &[(String, String)]) -> Vec<usize> {
    rows.iter()
        .map(|(_, ans)| rows.iter().filter(|(_, other)| other == ans).count())
        .collect()
}

fn oracle_fraction(counts: &[usize], n: usize) -> f64 {
    counts.iter().filter(|&&r| r >= n).count() as f64 / counts.len() as f64
}

fn anonymity() -> Outcome {
    let spec = ZoneSpec::synthetic(&reference_composition(), 7);
    let mut csv = Vec::new();
    spec.export_mapping(&mut csv).unwrap();
    let map = anon::parse_mapping(csv.as_slice()).map_err(|e| e.to_string())?;
    let dist = anon::compute_distribution(&map).map_err(|e| e.to_string())?;
    let rows: Vec<(String, String)> = map.rows.iter().map(|(d, a)| (d.to_string(), a.clone())).collect();
    let max = *dist.r_of_ans.values().max().unwrap();
    let counts = recount(&rows);
    let exact = (1..=max + 1).all(|n| dist.fraction_at_least(n) == oracle_fraction(&counts, n));
    let reference = dist.summary(&[1, 2, 100]);
    let shape = reference == vec![(1, 1.0), (2, 0.943), (100, 0.657)] && dist.r_of_ans == spec.served_counts();

    let mut rng = StdRng::seed_from_u64(0xa11);
    let mut broken = 0;
    for _ in 0..100 {
        let servers = rng.gen_range(1..50);
        let domains = rng.gen_range(1..500);
        let map = DomainAnsMap::from_rows(
            (0..domains).map(|i| (format!("d{i}.com").parse().unwrap(), format!("ns{}", rng.gen_range(0..servers)))),
        );
        let d = anon::compute_distribution(&map).unwrap();
        let rows: Vec<(String, String)> = map.rows.iter().map(|(d, a)| (d.to_string(), a.clone())).collect();
        let conserved = d.r_of_ans.values().sum::<usize>() == map.len();
        let top = *d.r_of_ans.values().max().unwrap();
        let sweep: Vec<f64> = (1..=top + 1).map(|n| d.fraction_at_least(n)).collect();
        let monotone = sweep[0] == 1.0 && sweep.windows(2).all(|w| w[0] >= w[1]);
        let counts = recount(&rows);
        let matches = (1..=top + 1).all(|n| d.fraction_at_least(n) == oracle_fraction(&counts, n));
        broken += usize::from(!(conserved && monotone && matches));
    }
    check(
        exact && shape && broken == 0,
        format!(
            "reference population of {} domains on {} servers: R>=1 {:?}, R>=2 {:?}, R>=100 {:?}, oracle match {exact}; \
             {broken}/100 random datasets broke conservation, monotonicity or the recount",
            map.len(),
            dist.r_of_ans.len(),
            reference[0].1,
            reference[1].1,
            reference[2].1
        ),
    )
}

fn mutate(rng: &mut StdRng, seed: &[u8]) -> Vec<u8> {
    let mut bytes = seed.to_vec();
    for _ in 0..rng.gen_range(1..8) {
        match rng.gen_range(0..4) {
            0 if !bytes.is_empty() => {
                let i = rng.gen_range(0..bytes.len());
                bytes[i] = rng.gen();
            }
            1 if !bytes.is_empty() => bytes.truncate(rng.gen_range(0..bytes.len())),
            2 => {
                let i = rng.gen_range(0..=bytes.len());
                bytes.insert(i, rng.gen());
            }
            _ if bytes.len() > 13 => {
                // Plant a compression pointer somewhere past the header.
                let i = rng.gen_range(12..bytes.len() - 1);
                bytes[i] = 0xc0 | rng.gen_range(0..0x40u8);
                bytes[i + 1] = rng.gen();
            }
            _ => {}
        }
    }
    bytes
}

fn wire_layer() -> Outcome {
    let config = Config {
        cases: 100_000,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let round_trips = runner.run(&gen::any_message(), |m| {
        let bytes = m.encode().map_err(|e| proptest::test_runner::TestCaseError::fail(e.to_string()))?;
        proptest::prop_assert_eq!(DnsMessage::decode(&bytes).unwrap(), m);
        Ok(())
    });

    let mut rng = StdRng::seed_from_u64(0xf4a);
    let mut framing_ok = true;
    for _ in 0..2_000 {
        let payloads: Vec<Vec<u8>> = (0..rng.gen_range(0..6))
            .map(|_| {
                let mut p = vec![0; rng.gen_range(0..2_000)];
                rng.fill_bytes(&mut p);
                p
            })
            .collect();
        let stream: Vec<u8> = payloads.iter().flat_map(|p| wire::frame(p).unwrap()).collect();
        let mut cursor = Cursor::new(stream);
        for p in &payloads {
            framing_ok &= wire::unframe(&mut cursor).ok().flatten().as_ref() == Some(p);
        }
        framing_ok &= matches!(wire::unframe(&mut cursor), Ok(None));
    }
    framing_ok &= wire::frame(&vec![0; wire::MAX_FRAME_LEN]).is_ok() && wire::frame(&vec![0; wire::MAX_FRAME_LEN + 1]).is_err();
    let cut = wire::frame(&[1, 2, 3, 4]).unwrap();
    framing_ok &= wire::unframe(&mut Cursor::new(&cut[..4])).is_err();

    // Seeds for mutation: valid messages with and without compression.
    let mut seeds: Vec<Vec<u8>> = Vec::new();
    let mut seed_runner = TestRunner::new_with_rng(Config::default(), TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    for _ in 0..200 {
        use proptest::strategy::{Strategy, ValueTree};
        let m = gen::any_message().new_tree(&mut seed_runner).unwrap().current();
        seeds.push(m.encode().unwrap());
    }
    seeds.push(hex_referral());

    let previous_hook = panic::take_hook();
    panic::set_hook(Box::new(|_| {}));
    let deadline = Instant::now() + Duration::from_secs(60);
    let (mut execs, mut accepted, mut crashes, mut unstable) = (0u64, 0u64, 0u64, 0u64);
    let mut first_crash = None;
    while Instant::now() < deadline {
        for _ in 0..256 {
            let input = if rng.gen_bool(0.3) {
                let mut b = vec![0; rng.gen_range(0..600)];
                rng.fill_bytes(&mut b);
                b
            } else {
                let seed = seeds.choose(&mut rng).unwrap().clone();
                mutate(&mut rng, &seed)
            };
            execs += 1;
            match panic::catch_unwind(AssertUnwindSafe(|| DnsMessage::decode(&input))) {
                Ok(Ok(m)) => {
                    accepted += 1;
                    // Accepted input must re-encode to something that decodes identically.
                    let stable = m.encode().ok().and_then(|b| DnsMessage::decode(&b).ok()) == Some(m);
                    unstable += u64::from(!stable);
                }
                Ok(Err(_)) => {}
                Err(_) => {
                    crashes += 1;
                    first_crash.get_or_insert(input);
                }
            }
        }
    }
    panic::set_hook(previous_hook);

    check(
        round_trips.is_ok() && framing_ok && crashes == 0 && unstable == 0,
        format!(
            "100000 round trips {}; framing {}; decoder fuzz ran {execs} inputs for 60 s ({accepted} accepted): \
             {crashes} crashes, {unstable} unstable re-encodings{}",
            match &round_trips {
                Ok(()) => "identical".to_string(),
                Err(e) => format!("failed: {e}"),
            },
            if framing_ok { "ok" } else { "broken" },
            first_crash.map(|c| format!(", first crash input {c:02x?}")).unwrap_or_default()
        ),
    )
}

/// A compressed referral as a reference encoder lays it out.
fn hex_referral() -> Vec<u8> {
    let mut m = DnsMessage::query(9, DnsQuestion::new("www.example.com".parse().unwrap(), RecordType::A), false);
    m.flags.is_response = true;
    let mut bytes = m.encode().unwrap();
    bytes[7] = 1; // one authority record
    // example.com NS ns1.example.com, names as pointers into the question.
    bytes.extend([0xc0, 16, 0, 2, 0, 1, 0, 0, 0x0e, 0x10, 0, 6, 3, b'n', b's', b'1', 0xc0, 16]);
    bytes
}

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "security", security),
        (2, "boundary confidentiality", boundary),
        (3, "threading model", threading),
        (4, "throughput", throughput),
        (5, "latency", latency),
        (6, "cache", cache),
        (7, "anonymity analyzer", anonymity),
        (8, "wire layer", wire_layer),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut summary = BTreeMap::new();
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(run).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (verdict, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let line = format!("criterion {n} ({name}): {verdict} [{:.1} s] {detail}", start.elapsed().as_secs_f64());
        println!("{line}");
        summary.insert(n, verdict);
    }
    println!("acceptance: {} passed, {failed} failed", summary.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
