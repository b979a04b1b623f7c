//! The trusted half of the resolver.
//!
//! Client TLS sessions terminate here. Inbound bytes arrive through
//! [`Enclave::deliver_inbound`]; decoded queries go onto the shared
//! [`InQueryList`], a fixed pool of handler threads resolves them, and each
//! session's writer thread drains its own [`OutQueryList`]. Everything that
//! leaves (client TLS records, name-server traffic) goes out through
//! [`HostCalls`], which is the only way this module touches the network.

pub mod config;
pub mod queue;
pub mod resolve;

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use rustls::pki_types::CertificateDer;
use rustls::{ClientConfig, ServerConfig, ServerConnection};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ConfigError, ResolverConfig};
pub use queue::{AnswerTicket, InQueryList, OutQueryList, QueryTicket, SessionId};
pub use resolve::{Resolution, ResolveError, Upstream};

use crate::attestation::{AttestedCertificate, BuildManifest, EnclaveIdentity, EnclaveMeasurement};
use crate::cache::{CacheKey, Lookup, RbCache, SharedCache};
use crate::tls;
use crate::wire::{self, DnsMessage, FrameBuffer, Rcode, ResourceRecord};

/// Services the untrusted host provides to the trusted component.
///
/// Implementations must not call back into the [`Enclave`] from inside
/// these methods.
pub trait HostCalls: Send + Sync {
    /// Hands TLS records for a client session to the host for sending.
    fn emit(&self, session: SessionId, bytes: &[u8]);
    /// The trusted side has finished with a session; the host should close
    /// the connection.
    fn session_closed(&self, session: SessionId);
    fn net_connect(&self, addr: SocketAddr, deadline: Instant) -> io::Result<u64>;
    fn net_send(&self, handle: u64, bytes: &[u8]) -> io::Result<()>;
    /// Returns the next chunk received, an empty vector on EOF, or
    /// `TimedOut` once `deadline` passes.
    fn net_recv(&self, handle: u64, deadline: Instant) -> io::Result<Vec<u8>>;
    fn net_close(&self, handle: u64);
}

#[derive(Debug, Error)]
pub enum StartError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("TLS setup failed: {0}")]
    Tls(#[from] rustls::Error),
    #[error("cannot spawn worker: {0}")]
    Spawn(io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("client limit of {0} reached")]
    CapacityExceeded(usize),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("resolver is shutting down")]
    ShuttingDown,
}

/// Counter snapshot. `queries_received` always equals
/// `answered + dropped_timeout + dropped_disconnected + in_flight`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolverStats {
    pub queries_received: u64,
    pub answered: u64,
    pub dropped_timeout: u64,
    pub dropped_disconnected: u64,
    pub in_flight: u64,
    pub malformed: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub active_sessions: u64,
    pub sessions_opened: u64,
    pub handler_pool_size: u64,
    pub upstream_sessions: u64,
}

enum Fate {
    Answered,
    Timeout,
    Disconnected,
}

struct TlsState {
    conn: ServerConnection,
    inbound: FrameBuffer,
}

pub struct ClientSession {
    id: SessionId,
    tls: Mutex<TlsState>,
    accepting: AtomicBool,
    out_queue: OutQueryList,
    writer: Mutex<Option<JoinHandle<()>>>,
}

impl ClientSession {
    pub fn id(&self) -> SessionId {
        self.id
    }

    pub fn accepting_answers(&self) -> bool {
        self.accepting.load(Ordering::SeqCst)
    }

    pub fn out_queue(&self) -> &OutQueryList {
        &self.out_queue
    }

    /// Returns true the first time only.
    fn stop_accepting(&self) -> bool {
        let was = self.accepting.swap(false, Ordering::SeqCst);
        self.out_queue.close();
        was
    }
}

struct Inner {
    config: ResolverConfig,
    server_tls: Arc<ServerConfig>,
    upstream_tls: Arc<ClientConfig>,
    host: Arc<dyn HostCalls>,
    in_queue: InQueryList,
    sessions: RwLock<HashMap<SessionId, Arc<ClientSession>>>,
    cache: SharedCache,
    stats: Mutex<ResolverStats>,
    next_session: AtomicU64,
    live_handlers: AtomicUsize,
    shutting_down: AtomicBool,
    measurement: EnclaveMeasurement,
    certificate: AttestedCertificate,
}

/// A running trusted component.
pub struct Enclave {
    inner: Arc<Inner>,
    handlers: Mutex<Vec<JoinHandle<()>>>,
}

impl Enclave {
    /// Spawns the handler pool. `upstream_roots` are the CAs that name
    /// server certificates chain to.
    pub fn start(
        config: ResolverConfig,
        identity: EnclaveIdentity,
        upstream_roots: &[CertificateDer<'static>],
        host: Arc<dyn HostCalls>,
    ) -> Result<Self, StartError> {
        config.validate()?;
        let server_tls = tls::server_config(identity.certificate.presented_chain(), &identity.key)?;
        let upstream_tls = tls::webpki_client_config(upstream_roots)?;
        let inner = Arc::new(Inner {
            in_queue: InQueryList::new(config.in_queue_capacity),
            cache: SharedCache::new(RbCache::with_max_entries(config.cache_max_entries)),
            stats: Mutex::new(ResolverStats {
                handler_pool_size: config.num_handlers as u64,
                ..ResolverStats::default()
            }),
            sessions: RwLock::default(),
            next_session: AtomicU64::new(1),
            live_handlers: AtomicUsize::new(0),
            shutting_down: AtomicBool::new(false),
            measurement: identity.measurement,
            certificate: identity.certificate,
            server_tls,
            upstream_tls,
            host,
            config,
        });

        let enclave = Self {
            inner: inner.clone(),
            handlers: Mutex::new(Vec::new()),
        };
        let (ready_tx, ready_rx) = mpsc::channel();
        for n in 0..inner.config.num_handlers {
            let inner = inner.clone();
            let ready = ready_tx.clone();
            let handle = thread::Builder::new()
                .name(format!("query-handler-{n}"))
                .spawn(move || inner.handler_loop(ready))
                .map_err(StartError::Spawn)?;
            enclave.handlers.lock().push(handle);
        }
        drop(ready_tx);
        // Serve only once the whole pool is waiting on the in-queue.
        for _ in ready_rx {}
        Ok(enclave)
    }

    pub fn config(&self) -> &ResolverConfig {
        &self.inner.config
    }

    pub fn measurement(&self) -> EnclaveMeasurement {
        self.inner.measurement
    }

    pub fn certificate(&self) -> &AttestedCertificate {
        &self.inner.certificate
    }

    pub fn cache(&self) -> &SharedCache {
        &self.inner.cache
    }

    pub fn in_queue(&self) -> &InQueryList {
        &self.inner.in_queue
    }

    /// Handler threads currently running.
    pub fn live_handlers(&self) -> usize {
        self.inner.live_handlers.load(Ordering::SeqCst)
    }

    pub fn stats(&self) -> ResolverStats {
        self.inner.stats.lock().clone()
    }

    pub fn session(&self, id: SessionId) -> Option<Arc<ClientSession>> {
        self.inner.session(id)
    }

    /// Creates the in-enclave TLS endpoint and writer for a new connection.
    pub fn open_session(&self) -> Result<SessionId, SessionError> {
        let inner = &self.inner;
        if inner.shutting_down.load(Ordering::SeqCst) {
            return Err(SessionError::ShuttingDown);
        }
        let mut sessions = inner.sessions.write();
        if sessions.len() >= inner.config.max_clients {
            return Err(SessionError::CapacityExceeded(inner.config.max_clients));
        }
        let conn = ServerConnection::new(inner.server_tls.clone()).expect("server config is valid");
        let id = SessionId(inner.next_session.fetch_add(1, Ordering::SeqCst));
        let session = Arc::new(ClientSession {
            id,
            tls: Mutex::new(TlsState {
                conn,
                inbound: FrameBuffer::new(),
            }),
            accepting: AtomicBool::new(true),
            out_queue: OutQueryList::new(),
            writer: Mutex::new(None),
        });
        let writer = {
            let inner = self.inner.clone();
            let session = session.clone();
            thread::Builder::new()
                .name(format!("client-writer-{}", id.0))
                .spawn(move || inner.writer_loop(&session))
                .map_err(|_| SessionError::ShuttingDown)?
        };
        *session.writer.lock() = Some(writer);
        sessions.insert(id, session);
        let mut stats = inner.stats.lock();
        stats.active_sessions += 1;
        stats.sessions_opened += 1;
        Ok(id)
    }

    /// Feeds TLS bytes received from the client; runs the reader step for
    /// every complete query they carry.
    pub fn deliver_inbound(&self, id: SessionId, bytes: &[u8]) -> Result<(), SessionError> {
        let session = self.inner.session(id).ok_or(SessionError::UnknownSession(id))?;
        self.inner.reader_step(&session, bytes);
        Ok(())
    }

    /// The host has dropped the connection.
    pub fn close_session(&self, id: SessionId) -> Result<(), SessionError> {
        let session = self
            .inner
            .sessions
            .write()
            .remove(&id)
            .ok_or(SessionError::UnknownSession(id))?;
        session.stop_accepting();
        self.inner.stats.lock().active_sessions -= 1;
        let writer = session.writer.lock().take();
        if let Some(w) = writer {
            let _ = w.join();
        }
        Ok(())
    }

    /// Closes every queue, wakes all blocked threads and joins them.
    pub fn shutdown(&self) {
        let inner = &self.inner;
        inner.shutting_down.store(true, Ordering::SeqCst);
        inner.in_queue.close();
        let ids: Vec<SessionId> = inner.sessions.read().keys().copied().collect();
        for id in ids {
            let _ = self.close_session(id);
        }
        for h in self.handlers.lock().drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for Enclave {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn drain_tls(conn: &mut ServerConnection) -> Vec<u8> {
    let mut out = Vec::new();
    while conn.wants_write() {
        if conn.write_tls(&mut out).is_err() {
            break;
        }
    }
    out
}

fn response_for(ticket: &QueryTicket, rcode: Rcode, answers: Vec<ResourceRecord>) -> DnsMessage {
    let mut response = DnsMessage::query(ticket.original_id, ticket.question.clone(), ticket.recursion_desired)
        .response_to(rcode);
    response.flags.recursion_available = true;
    response.answers = answers;
    response
}

impl Inner {
    fn session(&self, id: SessionId) -> Option<Arc<ClientSession>> {
        self.sessions.read().get(&id).cloned()
    }

    /// Ends a session from the inside, after a TLS failure or close_notify.
    fn terminate(&self, session: &ClientSession) {
        if session.stop_accepting() {
            self.host.session_closed(session.id);
        }
    }

    fn reader_step(&self, session: &ClientSession, bytes: &[u8]) {
        let mut failed = false;
        let mut peer_closed = false;
        let mut frames = Vec::new();
        {
            let mut st = session.tls.lock();
            let mut rest = bytes;
            while !rest.is_empty() && !failed {
                failed = st.conn.read_tls(&mut rest).is_err() || st.conn.process_new_packets().is_err();
            }
            let mut buf = [0u8; 4096];
            while !failed {
                match st.conn.reader().read(&mut buf) {
                    Ok(0) => {
                        peer_closed = true;
                        break;
                    }
                    Ok(n) => st.inbound.extend(&buf[..n]),
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                    Err(_) => failed = true,
                }
            }
            while let Some(frame) = st.inbound.next_frame() {
                frames.push(frame);
            }
            // Alerts included: the client learns why the session failed.
            let out = drain_tls(&mut st.conn);
            if !out.is_empty() {
                self.host.emit(session.id, &out);
            }
        }
        for frame in frames {
            self.accept_query(session, &frame);
        }
        if failed || peer_closed {
            self.terminate(session);
        }
    }

    fn accept_query(&self, session: &ClientSession, raw: &[u8]) {
        let reject = |response: DnsMessage| {
            self.stats.lock().malformed += 1;
            let _ = session.out_queue.push(AnswerTicket {
                client_id: session.id,
                response,
                completion_time: Instant::now(),
            });
        };
        let msg = match DnsMessage::decode(raw) {
            Ok(m) => m,
            Err(_) => {
                let mut response = DnsMessage::default().response_to(Rcode::FormErr);
                if raw.len() >= 2 {
                    response.id = u16::from_be_bytes([raw[0], raw[1]]);
                }
                return reject(response);
            }
        };
        if msg.flags.is_response || msg.questions.len() != 1 {
            let mut response = msg.response_to(Rcode::FormErr);
            response.flags.is_response = true;
            return reject(response);
        }
        if msg.flags.opcode != 0 {
            return reject(msg.response_to(Rcode::NotImp));
        }

        let ticket = QueryTicket {
            client_id: session.id,
            question: msg.questions[0].clone(),
            original_id: msg.id,
            recursion_desired: msg.flags.recursion_desired,
            enqueue_time: Instant::now(),
        };
        {
            let mut stats = self.stats.lock();
            stats.queries_received += 1;
            stats.in_flight += 1;
        }
        if self.in_queue.push(ticket).is_err() {
            self.finish(Fate::Disconnected);
        }
    }

    fn finish(&self, fate: Fate) {
        let mut stats = self.stats.lock();
        stats.in_flight -= 1;
        match fate {
            Fate::Answered => stats.answered += 1,
            Fate::Timeout => stats.dropped_timeout += 1,
            Fate::Disconnected => stats.dropped_disconnected += 1,
        }
    }

    fn handler_loop(&self, ready: mpsc::Sender<()>) {
        self.live_handlers.fetch_add(1, Ordering::SeqCst);
        drop(ready);
        while let Some(ticket) = self.in_queue.pop() {
            self.handler_step(ticket);
        }
        self.live_handlers.fetch_sub(1, Ordering::SeqCst);
    }

    fn handler_step(&self, ticket: QueryTicket) {
        let Some(session) = self.session(ticket.client_id).filter(|s| s.accepting_answers()) else {
            return self.finish(Fate::Disconnected);
        };

        let key = CacheKey::new(ticket.question.name.clone(), ticket.question.qtype);
        let mut response = None;
        if self.config.cache_enabled {
            match self.cache.lookup(&key) {
                Lookup::Hit(records) => {
                    self.stats.lock().cache_hits += 1;
                    let ready_at = ticket.enqueue_time + self.config.cache_delay_floor;
                    let now = Instant::now();
                    if ready_at > now {
                        thread::sleep(ready_at - now);
                    }
                    response = Some(response_for(&ticket, Rcode::NoError, records));
                }
                Lookup::Miss => self.stats.lock().cache_misses += 1,
            }
        }

        let response = match response {
            Some(r) => r,
            None => {
                let upstream = Upstream {
                    host: &*self.host,
                    tls: self.upstream_tls.clone(),
                    port: self.config.upstream_port().unwrap_or(wire::DOT_PORT),
                    max_depth: self.config.max_referral_depth,
                };
                let deadline = Instant::now() + self.config.handler_timeout;
                match upstream.resolve_recursive(&ticket.question, &self.config.root_hints, deadline) {
                    Ok(res) => {
                        self.stats.lock().upstream_sessions += res.sessions as u64;
                        if self.config.cache_enabled && res.rcode == Rcode::NoError && !res.answers.is_empty() {
                            self.cache.insert(key, res.answers.clone());
                        }
                        response_for(&ticket, res.rcode, res.answers)
                    }
                    Err(ResolveError::Timeout) => return self.finish(Fate::Timeout),
                    Err(e) => {
                        log::debug!("resolution of {} failed: {e}", ticket.question.name);
                        response_for(&ticket, Rcode::ServFail, Vec::new())
                    }
                }
            }
        };

        // Checked again: the client may have left while we were resolving.
        if !session.accepting_answers() {
            return self.finish(Fate::Disconnected);
        }
        let answer = AnswerTicket {
            client_id: session.id,
            response,
            completion_time: Instant::now(),
        };
        match session.out_queue.push(answer) {
            Ok(()) => self.finish(Fate::Answered),
            Err(_) => self.finish(Fate::Disconnected),
        }
    }

    fn writer_loop(&self, session: &ClientSession) {
        while let Some(ticket) = session.out_queue.pop_head() {
            if !self.writer_step(session, &ticket) {
                self.terminate(session);
                break;
            }
        }
    }

    fn writer_step(&self, session: &ClientSession, ticket: &AnswerTicket) -> bool {
        let framed = match ticket.response.encode().and_then(|p| wire::frame(&p)) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("cannot encode answer for {}: {e}", session.id);
                return true;
            }
        };
        let mut st = session.tls.lock();
        if st.conn.writer().write_all(&framed).is_err() {
            return false;
        }
        let out = drain_tls(&mut st.conn);
        self.host.emit(session.id, &out);
        true
    }
}

/// The sources that make up the trusted component, as built into this binary.
pub fn trusted_manifest() -> BuildManifest {
    BuildManifest::new(env!("CARGO_PKG_VERSION"))
        .with_unit("enclave/mod.rs", include_bytes!("mod.rs"))
        .with_unit("enclave/config.rs", include_bytes!("config.rs"))
        .with_unit("enclave/queue.rs", include_bytes!("queue.rs"))
        .with_unit("enclave/resolve.rs", include_bytes!("resolve.rs"))
        .with_unit("cache/mod.rs", include_bytes!("../cache/mod.rs"))
        .with_unit("cache/rbtree.rs", include_bytes!("../cache/rbtree.rs"))
        .with_unit("wire.rs", include_bytes!("../wire.rs"))
        .with_unit("tls.rs", include_bytes!("../tls.rs"))
}

pub fn trusted_measurement() -> EnclaveMeasurement {
    trusted_manifest().measure()
}
