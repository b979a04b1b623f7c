use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use rustls::pki_types::CertificateDer;
use rustls::{ServerConfig, ServerConnection, StreamOwned};
use serde::{Deserialize, Serialize};

use super::{CompiledSpec, SpecError, ZoneSpec};
use crate::endpoint::Endpoint;
use crate::pki::{LocalCa, PkiError, ServerIdentity};
use crate::tls;
use crate::wire::{self, DnsMessage};

/// One line of the connection log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
    pub node: String,
    pub peer: String,
    pub qname: Option<String>,
    pub action: String,
}

#[derive(Default)]
struct SimLog {
    entries: Mutex<Vec<LogEntry>>,
    sink: Option<Mutex<BufWriter<File>>>,
}

impl SimLog {
    fn append(&self, node: &str, peer: Ipv4Addr, qname: Option<String>, action: &str) {
        let entry = LogEntry {
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            node: node.to_string(),
            peer: peer.to_string(),
            qname,
            action: action.to_string(),
        };
        if let Some(sink) = &self.sink {
            let mut sink = sink.lock();
            let _ = serde_json::to_writer(&mut *sink, &entry);
            let _ = sink.write_all(b"\n");
            let _ = sink.flush();
        }
        self.entries.lock().push(entry);
    }
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Address of the first node; the rest follow consecutively.
    pub base_ip: Ipv4Addr,
    /// Shared port, 0 to pick a free one.
    pub port: u16,
    pub delay: Duration,
    pub log_path: Option<std::path::PathBuf>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            base_ip: Ipv4Addr::new(127, 53, 0, 1),
            port: 0,
            delay: Duration::ZERO,
            log_path: None,
        }
    }
}

struct Shared {
    spec: CompiledSpec,
    addrs: Vec<Ipv4Addr>,
    delay_ms: AtomicU64,
    /// Added to `delay_ms` for individual nodes.
    node_delay_ms: Vec<AtomicU64>,
    log: SimLog,
    stop: AtomicBool,
    conns: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
}

/// Running name servers, one listener per node.
pub struct Simulation {
    shared: Arc<Shared>,
    ca: LocalCa,
    port: u16,
    acceptors: Mutex<Vec<JoinHandle<()>>>,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Pki(#[from] PkiError),
    #[error("TLS setup failed: {0}")]
    Tls(#[from] rustls::Error),
    #[error("cannot bind: {0}")]
    Io(#[from] io::Error),
}

const BIND_ATTEMPTS: usize = 20;

impl Simulation {
    pub fn start(spec: &ZoneSpec, options: SimOptions) -> Result<Self, SimError> {
        spec.validate()?;
        Self::start_unchecked(spec, options)
    }

    /// Serves a spec without tree validation, for referral-loop fixtures.
    pub fn start_unchecked(spec: &ZoneSpec, options: SimOptions) -> Result<Self, SimError> {
        let compiled = spec.compile_unchecked()?;
        let base = u32::from(options.base_ip);
        let addrs: Vec<Ipv4Addr> = (0..compiled.hostnames.len())
            .map(|i| Ipv4Addr::from(base + i as u32))
            .collect();

        let ca = LocalCa::new("Simulated name-server CA")?;
        let mut configs = Vec::new();
        for host in &compiled.hostnames {
            let id = ServerIdentity::issued_by(&ca, &[host.to_string()])?;
            configs.push(tls::server_config(id.chain, &id.key)?);
        }
        let (listeners, port) = bind_all(&addrs, options.port)?;

        let sink = match &options.log_path {
            Some(p) => Some(Mutex::new(BufWriter::new(File::create(p)?))),
            None => None,
        };
        let shared = Arc::new(Shared {
            spec: compiled,
            addrs: addrs.clone(),
            delay_ms: AtomicU64::new(options.delay.as_millis() as u64),
            node_delay_ms: (0..addrs.len()).map(|_| AtomicU64::new(0)).collect(),
            log: SimLog {
                entries: Mutex::default(),
                sink,
            },
            stop: AtomicBool::new(false),
            conns: Mutex::default(),
            next_conn: AtomicU64::new(0),
        });

        let mut acceptors = Vec::new();
        for (node, (listener, config)) in listeners.into_iter().zip(configs).enumerate() {
            let shared = shared.clone();
            acceptors.push(
                thread::Builder::new()
                    .name(format!("ns-{}", shared.spec.ids[node]))
                    .spawn(move || accept_loop(node, listener, config, shared))?,
            );
        }
        Ok(Self {
            shared,
            ca,
            port,
            acceptors: Mutex::new(acceptors),
        })
    }

    /// CA the resolver must trust for upstream connections.
    pub fn ca_certificate(&self) -> CertificateDer<'static> {
        self.ca.certificate()
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn node_addr(&self, id: &str) -> Option<SocketAddr> {
        let i = self.shared.spec.ids.iter().position(|n| n == id)?;
        Some(SocketAddr::from((self.shared.addrs[i], self.port)))
    }

    pub fn root_hint(&self) -> Endpoint {
        Endpoint::new(
            self.shared.spec.hostnames[0].to_string(),
            SocketAddr::from((self.shared.addrs[0], self.port)),
        )
    }

    pub fn set_delay(&self, delay: Duration) {
        self.shared.delay_ms.store(delay.as_millis() as u64, Ordering::SeqCst);
    }

    /// Extra delay for one node on top of the shared delay. Returns false
    /// for an unknown id.
    pub fn set_node_delay(&self, id: &str, delay: Duration) -> bool {
        match self.shared.spec.ids.iter().position(|n| n == id) {
            Some(i) => {
                self.shared.node_delay_ms[i].store(delay.as_millis() as u64, Ordering::SeqCst);
                true
            }
            None => false,
        }
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.shared.log.entries.lock().clone()
    }

    pub fn clear_log(&self) {
        self.shared.log.entries.lock().clear();
    }

    /// Connections accepted per node id since the last clear.
    pub fn connections(&self) -> Vec<String> {
        self.log()
            .into_iter()
            .filter(|e| e.action == "connect")
            .map(|e| e.node)
            .collect()
    }

    pub fn shutdown(&self) {
        let acceptors: Vec<_> = self.acceptors.lock().drain(..).collect();
        if acceptors.is_empty() {
            return;
        }
        self.shared.stop.store(true, Ordering::SeqCst);
        for addr in &self.shared.addrs {
            let _ = TcpStream::connect((*addr, self.port));
        }
        for a in acceptors {
            let _ = a.join();
        }
        for s in self.shared.conns.lock().values() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for Simulation {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn bind_all(addrs: &[Ipv4Addr], port: u16) -> io::Result<(Vec<TcpListener>, u16)> {
    let mut last_err = None;
    for _ in 0..BIND_ATTEMPTS {
        let first = TcpListener::bind((addrs[0], port))?;
        let chosen = first.local_addr()?.port();
        let mut listeners = vec![first];
        let rest: io::Result<Vec<TcpListener>> = addrs[1..].iter().map(|a| TcpListener::bind((*a, chosen))).collect();
        match rest {
            Ok(more) => {
                listeners.extend(more);
                return Ok((listeners, chosen));
            }
            Err(e) if port == 0 && e.kind() == io::ErrorKind::AddrInUse => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| io::Error::new(io::ErrorKind::AddrInUse, "no common port")))
}

fn accept_loop(node: usize, listener: TcpListener, config: Arc<ServerConfig>, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let peer = match stream.peer_addr() {
            Ok(SocketAddr::V4(a)) => *a.ip(),
            _ => Ipv4Addr::UNSPECIFIED,
        };
        shared.log.append(&shared.spec.ids[node], peer, None, "connect");
        let key = shared.next_conn.fetch_add(1, Ordering::Relaxed);
        if let Ok(clone) = stream.try_clone() {
            shared.conns.lock().insert(key, clone);
        }
        let (shared, config) = (shared.clone(), config.clone());
        let spawned = thread::Builder::new().name("ns-conn".into()).spawn(move || {
            if let Err(e) = serve_connection(node, peer, stream, config, &shared) {
                log::debug!("name-server connection ended: {e}");
            }
            shared.conns.lock().remove(&key);
        });
        if let Err(e) = spawned {
            log::error!("cannot spawn name-server connection: {e}");
        }
    }
}

fn serve_connection(
    node: usize,
    peer: Ipv4Addr,
    stream: TcpStream,
    config: Arc<ServerConfig>,
    shared: &Shared,
) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let conn = ServerConnection::new(config).map_err(io::Error::other)?;
    let mut tls = StreamOwned::new(conn, stream);
    while let Some(raw) = wire::unframe(&mut tls)? {
        let delay = shared.delay_ms.load(Ordering::SeqCst) + shared.node_delay_ms[node].load(Ordering::SeqCst);
        if delay > 0 {
            thread::sleep(Duration::from_millis(delay));
        }
        let node_id = &shared.spec.ids[node];
        let response = match DnsMessage::decode(&raw) {
            Ok(query) => {
                let (response, action) = shared.spec.respond(node, &query, &shared.addrs);
                let qname = query.first_question().map(|q| q.name.to_string());
                shared.log.append(node_id, peer, qname, action.label());
                response
            }
            Err(_) => {
                shared.log.append(node_id, peer, None, "formerr");
                let mut r = DnsMessage::default().response_to(crate::wire::Rcode::FormErr);
                if raw.len() >= 2 {
                    r.id = u16::from_be_bytes([raw[0], raw[1]]);
                }
                r
            }
        };
        let bytes = response.encode().and_then(|p| wire::frame(&p)).map_err(io::Error::other)?;
        tls.write_all(&bytes)?;
        tls.flush()?;
    }
    tls.conn.send_close_notify();
    let _ = tls.flush();
    Ok(())
}
