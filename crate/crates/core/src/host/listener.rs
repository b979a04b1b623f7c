use std::collections::HashMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use rustls::pki_types::CertificateDer;
use thiserror::Error;

use super::{CallGate, HostServices};
use crate::attestation::EnclaveIdentity;
use crate::enclave::{Enclave, ResolverConfig, StartError};

/// What the host does to client traffic. Security tests use everything
/// except `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdversaryMode {
    #[default]
    None,
    DropInbound,
    Delay(Duration),
    /// Splices new client connections to another TLS server.
    Redirect(SocketAddr),
}

impl fmt::Display for AdversaryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdversaryMode::None => f.write_str("none"),
            AdversaryMode::DropInbound => f.write_str("drop_inbound"),
            AdversaryMode::Delay(d) => write!(f, "delay:{}", d.as_millis()),
            AdversaryMode::Redirect(a) => write!(f, "redirect:{a}"),
        }
    }
}

impl FromStr for AdversaryMode {
    type Err = String;

    /// `none`, `drop_inbound`, `delay:<ms>` or `redirect:<ip:port>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        match (kind, arg) {
            ("none", None) => Ok(AdversaryMode::None),
            ("drop_inbound", None) => Ok(AdversaryMode::DropInbound),
            ("delay", Some(ms)) => ms
                .parse()
                .map(|ms| AdversaryMode::Delay(Duration::from_millis(ms)))
                .map_err(|_| format!("bad delay {ms:?}")),
            ("redirect", Some(addr)) => addr
                .parse()
                .map(AdversaryMode::Redirect)
                .map_err(|_| format!("bad redirect target {addr:?}")),
            _ => Err(format!("unknown adversary mode {s:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot bind {0}: {1}")]
    Bind(SocketAddr, io::Error),
    #[error(transparent)]
    Start(#[from] StartError),
}

#[derive(Default)]
struct Connections {
    streams: Mutex<HashMap<u64, TcpStream>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    next: AtomicU64,
}

impl Connections {
    fn track(&self, stream: &TcpStream) -> u64 {
        let key = self.next.fetch_add(1, Ordering::Relaxed);
        if let Ok(clone) = stream.try_clone() {
            self.streams.lock().insert(key, clone);
        }
        key
    }

    fn untrack(&self, key: u64) {
        self.streams.lock().remove(&key);
    }

    fn spawn(&self, name: String, f: impl FnOnce() + Send + 'static) {
        let mut threads = self.threads.lock();
        threads.retain(|h| !h.is_finished());
        match thread::Builder::new().name(name).spawn(f) {
            Ok(h) => threads.push(h),
            Err(e) => log::error!("cannot spawn relay: {e}"),
        }
    }

    fn close_all(&self) {
        for stream in self.streams.lock().values() {
            let _ = stream.shutdown(Shutdown::Both);
        }
        let threads: Vec<_> = self.threads.lock().drain(..).collect();
        for h in threads {
            let _ = h.join();
        }
    }
}

fn wake_address(addr: SocketAddr) -> SocketAddr {
    if addr.ip().is_unspecified() {
        SocketAddr::new(IpAddr::V4(Ipv4Addr::LOCALHOST), addr.port())
    } else {
        addr
    }
}

/// A listening resolver: acceptor, relays, gate and trusted component.
pub struct ResolverServer {
    addr: SocketAddr,
    gate: Arc<CallGate>,
    mode: Arc<RwLock<AdversaryMode>>,
    stop: Arc<AtomicBool>,
    conns: Arc<Connections>,
    acceptor: Mutex<Option<JoinHandle<()>>>,
}

impl ResolverServer {
    pub fn start(
        bind: SocketAddr,
        config: ResolverConfig,
        identity: EnclaveIdentity,
        upstream_roots: &[CertificateDer<'static>],
    ) -> Result<Self, ServerError> {
        let listener = TcpListener::bind(bind).map_err(|e| ServerError::Bind(bind, e))?;
        let host = Arc::new(HostServices::new());
        let enclave = Enclave::start(config, identity, upstream_roots, host.clone())?;
        Ok(Self::run_listener(listener, CallGate::new(enclave, host)))
    }

    /// Serves `listener` until [`shutdown`](Self::shutdown).
    pub fn run_listener(listener: TcpListener, gate: CallGate) -> Self {
        let addr = listener.local_addr().expect("bound listener has an address");
        let gate = Arc::new(gate);
        let mode = Arc::new(RwLock::new(AdversaryMode::None));
        let stop = Arc::new(AtomicBool::new(false));
        let conns = Arc::new(Connections::default());
        let acceptor = {
            let (gate, mode, stop, conns) = (gate.clone(), mode.clone(), stop.clone(), conns.clone());
            thread::Builder::new()
                .name("acceptor".into())
                .spawn(move || accept_loop(listener, gate, mode, stop, conns))
                .expect("spawn acceptor")
        };
        Self {
            addr,
            gate,
            mode,
            stop,
            conns,
            acceptor: Mutex::new(Some(acceptor)),
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn gate(&self) -> &Arc<CallGate> {
        &self.gate
    }

    pub fn set_adversary_mode(&self, mode: AdversaryMode) {
        *self.mode.write() = mode;
    }

    pub fn adversary_mode(&self) -> AdversaryMode {
        *self.mode.read()
    }

    pub fn shutdown(&self) {
        let Some(acceptor) = self.acceptor.lock().take() else {
            return;
        };
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(wake_address(self.addr));
        let _ = acceptor.join();
        self.conns.close_all();
        self.gate.shutdown();
    }
}

impl Drop for ResolverServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(
    listener: TcpListener,
    gate: Arc<CallGate>,
    mode: Arc<RwLock<AdversaryMode>>,
    stop: Arc<AtomicBool>,
    conns: Arc<Connections>,
) {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        match *mode.read() {
            AdversaryMode::Redirect(target) => splice(stream, target, &conns),
            _ => serve_connection(stream, &gate, &mode, &conns),
        }
    }
}

fn serve_connection(stream: TcpStream, gate: &Arc<CallGate>, mode: &Arc<RwLock<AdversaryMode>>, conns: &Arc<Connections>) {
    let id = match gate.open_session() {
        Ok(id) => id,
        Err(e) => {
            log::info!("refusing connection: {e}");
            return;
        }
    };
    let Ok(out_stream) = stream.try_clone() else {
        let _ = gate.close_session(id);
        return;
    };
    let key = conns.track(&stream);

    let out_gate = gate.clone();
    conns.spawn(format!("relay-out-{}", id.0), move || {
        let mut out = out_stream;
        while let Some(bytes) = out_gate.emit_outbound(id) {
            if out.write_all(&bytes).is_err() {
                break;
            }
        }
        let _ = out.shutdown(Shutdown::Both);
    });

    let (in_gate, in_mode, in_conns) = (gate.clone(), mode.clone(), conns.clone());
    conns.spawn(format!("relay-in-{}", id.0), move || {
        let mut input = stream;
        let mut buf = vec![0u8; 16 * 1024];
        loop {
            let n = match input.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            match *in_mode.read() {
                AdversaryMode::DropInbound => continue,
                AdversaryMode::Delay(d) => thread::sleep(d),
                _ => {}
            }
            if in_gate.deliver_inbound(id, &buf[..n]).is_err() {
                break;
            }
        }
        let _ = in_gate.close_session(id);
        let _ = input.shutdown(Shutdown::Both);
        in_conns.untrack(key);
    });
}

fn splice(client: TcpStream, target: SocketAddr, conns: &Arc<Connections>) {
    let server = match TcpStream::connect(target) {
        Ok(s) => s,
        Err(e) => {
            log::warn!("redirect to {target} failed: {e}");
            return;
        }
    };
    let _ = server.set_nodelay(true);
    let pairs = [
        (client.try_clone(), server.try_clone()),
        (server.try_clone(), client.try_clone()),
    ];
    let keys = [conns.track(&client), conns.track(&server)];
    for (n, (from, to)) in pairs.into_iter().enumerate() {
        let (Ok(mut from), Ok(mut to)) = (from, to) else {
            continue;
        };
        let conns2 = conns.clone();
        conns.spawn(format!("splice-{n}"), move || {
            let _ = io::copy(&mut from, &mut to);
            let _ = to.shutdown(Shutdown::Both);
            let _ = from.shutdown(Shutdown::Both);
            conns2.untrack(keys[n]);
        });
    }
}

/// Local control socket: every connection receives one JSON object with
/// resolver and gate counters, then is closed.
pub struct ControlServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl ControlServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&self) {
        if let Some(t) = self.thread.lock().take() {
            self.stop.store(true, Ordering::SeqCst);
            let _ = TcpStream::connect(wake_address(self.addr));
            let _ = t.join();
        }
    }
}

impl Drop for ControlServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn serve_control(bind: SocketAddr, gate: Arc<CallGate>) -> io::Result<ControlServer> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let thread = thread::Builder::new().name("control".into()).spawn(move || {
        for stream in listener.incoming() {
            if stop2.load(Ordering::SeqCst) {
                break;
            }
            let Ok(mut stream) = stream else { continue };
            let body = serde_json::json!({
                "resolver": gate.resolver_stats(),
                "gate": gate.stats(),
                "live_handlers": gate.enclave().live_handlers(),
            });
            let _ = writeln!(stream, "{body}");
        }
    })?;
    Ok(ControlServer {
        addr,
        stop,
        thread: Mutex::new(Some(thread)),
    })
}
