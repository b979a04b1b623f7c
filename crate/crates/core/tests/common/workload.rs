//! Randomized multi-client load against a resolver with fast, slow and
//! stalled authorities, checking the threading invariants as it runs.
//! The handler timeout leaves fast and slow queries wide headroom so that
//! only stalled ones time out, even on a single busy core.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicU16, AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use pdot::enclave::{ResolverStats, SessionId};
use pdot::nssim::ZoneSpec;
use pdot::testbed::{Testbed, TestbedOptions};
use pdot::wire::Rcode;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::{a_query, RawClient};

const FAST: usize = 20;
const SLOW: usize = 10;
const STALL: usize = 5;
pub const HANDLER_TIMEOUT: Duration = Duration::from_millis(1000);

#[derive(Debug, Default)]
pub struct WorkloadReport {
    pub sent: u64,
    pub stalled_sent: u64,
    pub answers_read: u64,
    pub disconnects: u64,
    pub fifo_checked_sessions: u64,
    pub fifo_violations: Vec<String>,
    pub conservation_violations: Vec<String>,
    pub pool_samples: u64,
    pub pool_violations: Vec<String>,
    pub stall_answered: u64,
    /// Answers expected but not delivered before the read timeout.
    pub lost: Vec<String>,
    pub final_stats: ResolverStats,
}

fn conserved(s: &ResolverStats) -> bool {
    s.queries_received == s.answered + s.dropped_timeout + s.dropped_disconnected + s.in_flight
}

fn find_history(bed: &Testbed, any_id: u16, upper: u64) -> Option<Vec<u16>> {
    let enclave = bed.server.gate().enclave();
    (0..=upper).filter_map(|k| enclave.session(SessionId(k))).find_map(|s| {
        let h = s.out_queue().history();
        h.contains(&any_id).then_some(h)
    })
}

pub fn testbed() -> Testbed {
    let mut options = TestbedOptions {
        zone: ZoneSpec::synthetic(&[FAST, SLOW, STALL], 11),
        ..TestbedOptions::default()
    };
    options.resolver.cache_enabled = false;
    options.resolver.handler_timeout = HANDLER_TIMEOUT;
    let bed = Testbed::start(options).unwrap();
    bed.sim.set_node_delay("ans1", Duration::from_millis(60));
    bed.sim.set_node_delay("ans2", HANDLER_TIMEOUT * 4);
    bed
}

/// Sends `total` queries from `clients` concurrent connections.
pub fn run(bed: &Testbed, total: u64, clients: usize, seed: u64) -> WorkloadReport {
    let policy = bed.policy();
    let addr = bed.server.addr();
    let budget = AtomicU64::new(total);
    let next_id = AtomicU16::new(1);
    let done = AtomicBool::new(false);
    let gate = bed.server.gate();
    let pool = gate.enclave().config().num_handlers;

    let (mut per_client, monitor) = thread::scope(|scope| {
        let monitor = scope.spawn(|| {
            let mut samples = 0u64;
            let mut pool_bad = Vec::new();
            let mut cons_bad = Vec::new();
            while !done.load(Ordering::SeqCst) {
                let s = gate.resolver_stats();
                if !conserved(&s) {
                    cons_bad.push(format!("{s:?}"));
                }
                let live = gate.enclave().live_handlers();
                if live != pool || s.handler_pool_size != pool as u64 {
                    pool_bad.push(format!("live {live}, reported {}", s.handler_pool_size));
                }
                samples += 1;
                thread::sleep(Duration::from_millis(5));
            }
            (samples, pool_bad, cons_bad)
        });
        let workers: Vec<_> = (0..clients)
            .map(|c| {
                let (policy, budget, next_id) = (&policy, &budget, &next_id);
                scope.spawn(move || {
                    let mut rng = StdRng::seed_from_u64(seed ^ (c as u64 + 1).wrapping_mul(0x9e37_79b9));
                    let mut report = WorkloadReport::default();
                    loop {
                        let want = rng.gen_range(1..=16u64);
                        let taken = budget.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| (b > 0).then(|| b - want.min(b)));
                        let Ok(left) = taken else { break };
                        let batch = want.min(left);
                        let mut client = RawClient::connect(addr, policy);
                        let mut expected = HashSet::new();
                        let mut stalled = HashSet::new();
                        for _ in 0..batch {
                            let id = next_id.fetch_add(1, Ordering::SeqCst);
                            let roll: f64 = rng.gen();
                            let name = if roll < 0.82 {
                                format!("site{}-g0.com", rng.gen_range(0..FAST))
                            } else if roll < 0.97 {
                                format!("site{}-g1.com", rng.gen_range(0..SLOW))
                            } else {
                                stalled.insert(id);
                                format!("site{}-g2.com", rng.gen_range(0..STALL))
                            };
                            if !stalled.contains(&id) {
                                expected.insert(id);
                            }
                            client.send(&a_query(id, &name));
                        }
                        report.sent += batch;
                        report.stalled_sent += stalled.len() as u64;

                        let disconnect_early = rng.gen_bool(0.25);
                        let to_read = if disconnect_early {
                            rng.gen_range(0..=expected.len())
                        } else {
                            expected.len()
                        };
                        let mut order: Vec<u16> = Vec::new();
                        for _ in 0..to_read {
                            let Some(msg) = client.recv() else {
                                let missing: Vec<u16> = expected.iter().filter(|id| !order.contains(id)).copied().collect();
                                report.lost.push(format!("ids {missing:?} unanswered, {:?}", gate.resolver_stats()));
                                break;
                            };
                            if stalled.contains(&msg.id) {
                                report.stall_answered += 1;
                            }
                            assert_eq!(msg.rcode(), Rcode::NoError, "{msg}");
                            assert!(expected.contains(&msg.id) || stalled.contains(&msg.id));
                            order.push(msg.id);
                        }
                        report.answers_read += order.len() as u64;
                        if !disconnect_early && !order.is_empty() && order.len() == to_read {
                            let upper = gate.resolver_stats().sessions_opened + 1;
                            match find_history(bed, order[0], upper) {
                                Some(history) => {
                                    report.fifo_checked_sessions += 1;
                                    if history != order {
                                        report
                                            .fifo_violations
                                            .push(format!("enqueued {history:?}, delivered {order:?}"));
                                    }
                                }
                                None => report.fifo_violations.push(format!("no session holds id {}", order[0])),
                            }
                        }
                        if disconnect_early {
                            report.disconnects += 1;
                        }
                        drop(client);
                    }
                    report
                })
            })
            .collect();
        let reports: Vec<WorkloadReport> = workers.into_iter().map(|w| w.join().unwrap()).collect();
        done.store(true, Ordering::SeqCst);
        (reports, monitor.join().unwrap())
    });

    let deadline = Instant::now() + HANDLER_TIMEOUT * 4 + Duration::from_secs(20);
    let mut stats = gate.resolver_stats();
    while (stats.in_flight > 0 || stats.active_sessions > 0) && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(20));
        stats = gate.resolver_stats();
    }

    let mut report = WorkloadReport::default();
    for r in per_client.drain(..) {
        report.sent += r.sent;
        report.stalled_sent += r.stalled_sent;
        report.answers_read += r.answers_read;
        report.disconnects += r.disconnects;
        report.fifo_checked_sessions += r.fifo_checked_sessions;
        report.fifo_violations.extend(r.fifo_violations);
        report.stall_answered += r.stall_answered;
        report.lost.extend(r.lost);
    }
    let (samples, pool_bad, mut cons_bad) = monitor;
    report.pool_samples = samples;
    report.pool_violations = pool_bad;
    if !conserved(&stats) {
        cons_bad.push(format!("final {stats:?}"));
    }
    report.conservation_violations = cons_bad;
    report.final_stats = stats;
    report
}
