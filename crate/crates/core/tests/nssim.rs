use std::net::{Ipv4Addr, SocketAddr};
use std::time::{Duration, Instant};

use pdot::attestation::Authorities;
use pdot::enclave::{self, ResolverConfig};
use pdot::nssim::{LogEntry, SimOptions, Simulation, SpecError, ZoneSpec};
use pdot::testbed::{start_resolver, Testbed, TestbedOptions};
use pdot::wire::{DnsQuestion, Rcode, RecordType};

fn a(name: &str) -> DnsQuestion {
    DnsQuestion::new(name.parse().unwrap(), RecordType::A)
}

fn uncached(zone: ZoneSpec) -> Testbed {
    let mut options = TestbedOptions {
        zone,
        ..TestbedOptions::default()
    };
    options.resolver.cache_enabled = false;
    Testbed::start(options).unwrap()
}

fn strip(log: Vec<LogEntry>) -> Vec<(String, Option<String>, String)> {
    log.into_iter().map(|e| (e.node, e.qname, e.action)).collect()
}

/// root, com, example.com on its own server, and shop.example.com one level deeper.
fn four_level() -> ZoneSpec {
    ZoneSpec::default()
        .node("root", "a.root-servers.sim")
        .node("com", "a.gtld-servers.sim")
        .node("ex", "ns.example.com")
        .node("shop", "ns.shop.example.com")
        .delegate("root", "com", "com")
        .delegate("com", "example.com", "ex")
        .delegate("ex", "shop.example.com", "shop")
        .domain("ex", "example.com", Ipv4Addr::new(192, 0, 2, 10))
        .domain("ex", "www.example.com", Ipv4Addr::new(192, 0, 2, 11))
        .domain("shop", "shop.example.com", Ipv4Addr::new(192, 0, 2, 20))
}

#[test]
fn identical_runs_produce_identical_logs() {
    let spec = ZoneSpec::synthetic(&[3, 2], 5);
    let names = ["site0-g0.com", "site1-g1.com", "absent.com", "site2-g0.com", "site0-g0.com"];
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let bed = uncached(spec.clone());
            let stub = bed.stub();
            for n in names {
                stub.resolve(a(n));
            }
            strip(bed.sim.log())
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert!(runs[0].iter().any(|(_, _, action)| action == "nxdomain"));
}

#[test]
fn sessions_per_query_equal_the_owner_depth() {
    let bed = uncached(four_level());
    let stub = bed.stub();
    for (name, path) in [
        ("example.com", vec!["root", "com", "ex"]),
        ("www.example.com", vec!["root", "com", "ex"]),
        ("shop.example.com", vec!["root", "com", "ex", "shop"]),
    ] {
        bed.sim.clear_log();
        let reply = stub.resolve(a(name));
        assert_eq!(reply.rcode(), Rcode::NoError, "{name}");
        assert_eq!(bed.sim.connections(), path, "{name}");
        assert_eq!(four_level().route(&name.parse().unwrap()).unwrap(), path);
        let actions: Vec<String> = bed.sim.log().into_iter().filter(|e| e.action != "connect").map(|e| e.action).collect();
        let mut expected = vec!["referral"; path.len() - 1];
        expected.push("answer");
        assert_eq!(actions, expected);
    }
}

#[test]
fn ns_query_is_answered_with_the_owner_hostname() {
    let bed = uncached(four_level());
    let reply = bed.stub().resolve(DnsQuestion::new("shop.example.com".parse().unwrap(), RecordType::NS));
    assert_eq!(reply.rcode(), Rcode::NoError);
    assert_eq!(reply.answers[0].as_ns_target().unwrap().to_string(), "ns.shop.example.com");
}

#[test]
fn referral_loop_ends_in_servfail() {
    let spec = ZoneSpec::default()
        .node("root", "a.root-servers.sim")
        .node("com", "a.gtld-servers.sim")
        .node("loop", "ns.loop.sim")
        .delegate("root", "com", "com")
        .delegate("com", "loop.com", "loop")
        .delegate("loop", "loop.com", "com");
    assert!(matches!(spec.validate(), Err(SpecError::MultipleParents(_) | SpecError::Cycle(_))));

    let sim = Simulation::start_unchecked(&spec, SimOptions::default()).unwrap();
    let config = ResolverConfig {
        root_hints: vec![sim.root_hint()],
        cache_enabled: false,
        ..ResolverConfig::default()
    };
    let authorities = Authorities::generate().unwrap();
    let measurement = enclave::trusted_measurement();
    let server = start_resolver(SocketAddr::from((Ipv4Addr::LOCALHOST, 0)), config, measurement, &authorities, None, &sim).unwrap();
    let stub_config = pdot::stub::StubConfig::attested(
        vec![pdot::endpoint::Endpoint::localhost(server.addr())],
        pdot::attestation::TrustPolicy::attested([measurement], vec![authorities.root()]),
    );
    let stub = pdot::stub::Stub::new(stub_config).unwrap();
    let reply = stub.resolve(a("www.loop.com"));
    assert_eq!(reply.rcode(), Rcode::ServFail);
    // The resolver gave up after a bounded number of hops.
    assert!(sim.connections().len() < 64);
    let deadline = Instant::now() + Duration::from_secs(5);
    while server.gate().resolver_stats().in_flight > 0 && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    assert_eq!(server.gate().resolver_stats().in_flight, 0);
}

#[test]
fn fixed_delay_applies_to_every_response() {
    let mut options = TestbedOptions {
        ns_delay: Duration::from_millis(150),
        ..TestbedOptions::default()
    };
    options.resolver.cache_enabled = false;
    let bed = Testbed::start(options).unwrap();
    let stub = bed.stub();
    stub.connect(0).unwrap();
    let start = Instant::now();
    assert_eq!(stub.resolve(a("example.com")).rcode(), Rcode::NoError);
    assert!(start.elapsed() >= Duration::from_millis(450), "{:?}", start.elapsed());

    bed.sim.set_delay(Duration::ZERO);
    let start = Instant::now();
    stub.resolve(a("example.com"));
    assert!(start.elapsed() < Duration::from_millis(450));
    assert!(!bed.sim.set_node_delay("nope", Duration::ZERO));
}

#[test]
fn log_file_holds_one_json_object_per_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ns.log");
    let spec = ZoneSpec::three_level(&["example.com"]);
    let sim = Simulation::start(
        &spec,
        SimOptions {
            log_path: Some(path.clone()),
            ..SimOptions::default()
        },
    )
    .unwrap();
    let config = ResolverConfig {
        root_hints: vec![sim.root_hint()],
        ..ResolverConfig::default()
    };
    let authorities = Authorities::generate().unwrap();
    let measurement = enclave::trusted_measurement();
    let server = start_resolver(SocketAddr::from((Ipv4Addr::LOCALHOST, 0)), config, measurement, &authorities, None, &sim).unwrap();
    let stub = pdot::stub::Stub::new(pdot::stub::StubConfig::attested(
        vec![pdot::endpoint::Endpoint::localhost(server.addr())],
        pdot::attestation::TrustPolicy::attested([measurement], vec![authorities.root()]),
    ))
    .unwrap();
    stub.resolve(a("example.com"));

    let text = std::fs::read_to_string(&path).unwrap();
    let entries: Vec<LogEntry> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let live = sim.log();
    assert_eq!(strip(entries.clone()), strip(live.clone()));
    for (file, mem) in entries.iter().zip(&live) {
        assert!((file.timestamp - mem.timestamp).abs() < 1e-3);
    }
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["timestamp", "node", "peer", "qname", "action"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
    assert_eq!(entries.iter().filter(|e| e.action == "answer").count(), 1);
}

#[test]
fn spec_file_round_trips_through_text() {
    let spec = four_level();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zone.spec");
    std::fs::write(&path, spec.to_text()).unwrap();
    assert_eq!(ZoneSpec::load(&path).unwrap(), spec);
}
