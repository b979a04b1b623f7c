//! Assembles a complete local deployment: simulated name servers, the
//! attestation authorities, a resolver and matching stub configuration.

use std::collections::HashMap;
use std::io::{self, Write};
use std::net::{Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;
use rustls::{ServerConnection, StreamOwned};
use thiserror::Error;

use crate::attestation::{
    Authorities, BuildError, CertificateOptions, EnclaveIdentity, EnclaveMeasurement, TrustPolicy,
};
use crate::enclave::{self, ResolverConfig};
use crate::endpoint::Endpoint;
use crate::host::{ResolverServer, ServerError};
use crate::nssim::{SimError, SimOptions, Simulation, ZoneSpec};
use crate::pki::{LocalCa, PkiError, ServerIdentity};
use crate::stub::{Stub, StubConfig, StubError};
use crate::tls;
use crate::wire::{self, DnsMessage, DomainName, Rcode, ResourceRecord};

#[derive(Debug, Error)]
pub enum TestbedError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pki(#[from] PkiError),
    #[error(transparent)]
    Build(#[from] BuildError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Stub(#[from] StubError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct TestbedOptions {
    pub zone: ZoneSpec,
    /// Root hints are filled in from the simulation.
    pub resolver: ResolverConfig,
    pub ns_delay: Duration,
    /// Defaults to the measurement of this build.
    pub measurement: Option<EnclaveMeasurement>,
    /// Also issue the resolver certificate from a conventional CA.
    pub dual_sign: bool,
    pub bind: SocketAddr,
}

impl Default for TestbedOptions {
    fn default() -> Self {
        Self {
            zone: ZoneSpec::three_level(&["example.com"]),
            resolver: ResolverConfig::default(),
            ns_delay: Duration::ZERO,
            measurement: None,
            dual_sign: false,
            bind: SocketAddr::from((Ipv4Addr::LOCALHOST, 0)),
        }
    }
}

pub struct Testbed {
    pub server: ResolverServer,
    pub sim: Simulation,
    pub authorities: Authorities,
    pub legacy_ca: Option<LocalCa>,
    pub measurement: EnclaveMeasurement,
}

impl Testbed {
    pub fn start(options: TestbedOptions) -> Result<Self, TestbedError> {
        let sim = Simulation::start(
            &options.zone,
            SimOptions {
                delay: options.ns_delay,
                ..SimOptions::default()
            },
        )?;
        let authorities = Authorities::generate()?;
        let legacy_ca = if options.dual_sign {
            Some(LocalCa::new("Legacy DNS-over-TLS CA")?)
        } else {
            None
        };
        let measurement = options.measurement.unwrap_or_else(enclave::trusted_measurement);
        let mut config = options.resolver;
        config.root_hints = vec![sim.root_hint()];
        let server = start_resolver(
            options.bind,
            config,
            measurement,
            &authorities,
            legacy_ca.as_ref(),
            &sim,
        )?;
        Ok(Self {
            server,
            sim,
            authorities,
            legacy_ca,
            measurement,
        })
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::localhost(self.server.addr())
    }

    pub fn policy(&self) -> TrustPolicy {
        TrustPolicy::attested([self.measurement], vec![self.authorities.root()])
    }

    pub fn stub_config(&self) -> StubConfig {
        StubConfig::attested(vec![self.endpoint()], self.policy())
    }

    pub fn stub(&self) -> Stub {
        Stub::new(self.stub_config()).expect("testbed policy is valid")
    }
}

/// Starts a resolver whose certificate attests `measurement`.
pub fn start_resolver(
    bind: SocketAddr,
    config: ResolverConfig,
    measurement: EnclaveMeasurement,
    authorities: &Authorities,
    dual_sign_with: Option<&LocalCa>,
    sim: &Simulation,
) -> Result<ResolverServer, TestbedError> {
    let options = CertificateOptions {
        dual_sign_with,
        ..CertificateOptions::default()
    };
    let identity = EnclaveIdentity::provision(measurement, authorities, &options)?;
    Ok(ResolverServer::start(bind, config, identity, &[sim.ca_certificate()])?)
}

/// An ordinary DNS-over-TLS server with a CA-issued certificate and no
/// attestation evidence. Answers A queries from a fixed table.
pub struct PlainDotServer {
    addr: SocketAddr,
    ca: LocalCa,
    queries: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
    conns: Arc<Mutex<Vec<TcpStream>>>,
    thread: Option<JoinHandle<()>>,
}

impl PlainDotServer {
    pub fn start(records: HashMap<DomainName, Ipv4Addr>) -> Result<Self, TestbedError> {
        let ca = LocalCa::new("Plain DNS-over-TLS CA")?;
        let identity = ServerIdentity::issued_by(&ca, &["localhost".to_string()])?;
        let config = tls::server_config(identity.chain, &identity.key).map_err(io::Error::other)?;
        let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, 0))?;
        let addr = listener.local_addr()?;
        let queries = Arc::new(AtomicU64::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let conns = Arc::new(Mutex::new(Vec::new()));
        let records = Arc::new(records);
        let thread = {
            let (queries, stop, conns) = (queries.clone(), stop.clone(), conns.clone());
            thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    if let Ok(c) = stream.try_clone() {
                        conns.lock().push(c);
                    }
                    let (config, queries, records) = (config.clone(), queries.clone(), records.clone());
                    thread::spawn(move || {
                        let Ok(conn) = ServerConnection::new(config) else { return };
                        let mut tls = StreamOwned::new(conn, stream);
                        while let Ok(Some(raw)) = wire::unframe(&mut tls) {
                            queries.fetch_add(1, Ordering::SeqCst);
                            let Ok(query) = DnsMessage::decode(&raw) else { break };
                            let response = plain_answer(&query, &records);
                            let Ok(bytes) = response.encode().and_then(|p| wire::frame(&p)) else { break };
                            if tls.write_all(&bytes).and_then(|_| tls.flush()).is_err() {
                                break;
                            }
                        }
                    });
                }
            })
        };
        Ok(Self {
            addr,
            ca,
            queries,
            stop,
            conns,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn ca(&self) -> &LocalCa {
        &self.ca
    }

    /// DNS queries decrypted so far.
    pub fn queries_received(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }
}

fn plain_answer(query: &DnsMessage, records: &HashMap<DomainName, Ipv4Addr>) -> DnsMessage {
    let Some(q) = query.first_question() else {
        return query.response_to(Rcode::FormErr);
    };
    match records.get(&q.name) {
        Some(addr) => {
            let mut r = query.response_to(Rcode::NoError);
            r.flags.recursion_available = true;
            r.answers.push(ResourceRecord::a(q.name.clone(), 60, *addr));
            r
        }
        None => query.response_to(Rcode::NxDomain),
    }
}

impl Drop for PlainDotServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        for c in self.conns.lock().drain(..) {
            let _ = c.shutdown(Shutdown::Both);
        }
    }
}
