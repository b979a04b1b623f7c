//! Verifying DNS-over-TLS client.
//!
//! Keeps at most one verified session per resolver, pipelines queries on it
//! (responses are matched by wire id, which the stub assigns itself) and
//! fails over to the next resolver when a handshake or verification fails.
//! Callers always get a message back carrying their own id; timeouts and
//! total failure become SERVFAIL.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU16, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, SyncSender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rustls::pki_types::{CertificateDer, ServerName};
use rustls::{ClientConfig, ClientConnection};
use thiserror::Error;

use crate::attestation::{PolicyError, TrustPolicy};
use crate::endpoint::Endpoint;
use crate::pki;
use crate::tls::{self, VerificationFailure, VerificationSlot};
use crate::wire::{self, DnsMessage, DnsQuestion, FrameBuffer, Rcode};

pub const DEFAULT_QUERY_TIMEOUT: Duration = Duration::from_millis(5000);

#[derive(Debug, Error)]
pub enum StubError {
    #[error("server failed verification: {0}")]
    Verification(VerificationFailure),
    #[error("TLS failure: {0}")]
    Tls(String),
    #[error("I/O failure: {0}")]
    Io(#[from] io::Error),
    #[error("timed out")]
    Timeout,
    #[error("session closed")]
    Closed,
    #[error("no resolver configured")]
    NoResolvers,
    #[error("configuration: {0}")]
    Config(String),
}

impl From<PolicyError> for StubError {
    fn from(e: PolicyError) -> Self {
        StubError::Config(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct StubConfig {
    pub resolvers: Vec<Endpoint>,
    pub policy: TrustPolicy,
    pub query_timeout: Duration,
    /// CA roots for legacy mode (`policy.require_attestation == false`).
    pub legacy_roots: Vec<CertificateDer<'static>>,
}

impl StubConfig {
    pub fn attested(resolvers: Vec<Endpoint>, policy: TrustPolicy) -> Self {
        Self {
            resolvers,
            policy,
            query_timeout: DEFAULT_QUERY_TIMEOUT,
            legacy_roots: Vec::new(),
        }
    }

    pub fn legacy(resolvers: Vec<Endpoint>, roots: Vec<CertificateDer<'static>>) -> Self {
        Self {
            resolvers,
            policy: TrustPolicy::legacy(),
            query_timeout: DEFAULT_QUERY_TIMEOUT,
            legacy_roots: roots,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.query_timeout = timeout;
        self
    }

    /// Reads `resolver = name@ip:port` (repeatable), `query_timeout_ms`,
    /// `policy = <file>` and `legacy_ca = <pem>`; paths are relative to
    /// the config file. Without a policy the stub runs in legacy mode.
    pub fn load(path: &Path) -> Result<Self, StubError> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut config = Self::legacy(Vec::new(), Vec::new());
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |r: String| StubError::Config(format!("{}:{}: {r}", path.display(), i + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value".into()))?;
            let value = value.trim();
            match key.trim() {
                "resolver" => config.resolvers.push(value.parse().map_err(bad)?),
                "query_timeout_ms" => {
                    config.query_timeout =
                        Duration::from_millis(value.parse().map_err(|_| bad(format!("not a number: {value}")))?)
                }
                "policy" => config.policy = TrustPolicy::load(&base.join(value))?,
                "legacy_ca" => {
                    let bytes = std::fs::read(base.join(value))?;
                    config
                        .legacy_roots
                        .push(pki::certificate_from_pem_or_der(&bytes).map_err(|e| bad(e.to_string()))?);
                }
                other => return Err(bad(format!("unknown key {other}"))),
            }
        }
        if config.resolvers.is_empty() {
            return Err(StubError::NoResolvers);
        }
        Ok(config)
    }
}

/// Which bytes a session wrote to its socket, and when.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WritePhase {
    Handshake,
    Established,
}

/// Records every write the stub makes to a socket.
#[derive(Debug, Default)]
pub struct WireTap {
    writes: Mutex<Vec<(WritePhase, usize)>>,
}

impl WireTap {
    fn record(&self, phase: WritePhase, len: usize) {
        if len > 0 {
            self.writes.lock().push((phase, len));
        }
    }

    pub fn bytes_in(&self, phase: WritePhase) -> usize {
        self.writes.lock().iter().filter(|(p, _)| *p == phase).map(|(_, n)| n).sum()
    }
}

type Waiter = SyncSender<(DnsMessage, Instant)>;

struct StubSession {
    socket: TcpStream,
    conn: Mutex<ClientConnection>,
    pending: Mutex<HashMap<u16, Waiter>>,
    alive: AtomicBool,
    next_id: AtomicU16,
    reader: Mutex<Option<JoinHandle<()>>>,
    tap: Option<Arc<WireTap>>,
}

impl StubSession {
    fn write_out(&self, conn: &mut ClientConnection, phase: WritePhase) -> io::Result<()> {
        let mut out = Vec::new();
        while conn.wants_write() {
            conn.write_tls(&mut out)?;
        }
        if let Some(tap) = &self.tap {
            tap.record(phase, out.len());
        }
        (&self.socket).write_all(&out)
    }

    fn reader_loop(&self) {
        let mut buf = vec![0u8; 16 * 1024];
        let mut frames = FrameBuffer::new();
        let mut plain = vec![0u8; 16 * 1024];
        loop {
            let n = match (&self.socket).read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            let mut ok = true;
            {
                let mut conn = self.conn.lock();
                let mut rest = &buf[..n];
                while !rest.is_empty() && ok {
                    ok = conn.read_tls(&mut rest).is_ok() && conn.process_new_packets().is_ok();
                }
                loop {
                    match conn.reader().read(&mut plain) {
                        Ok(0) => {
                            ok = false;
                            break;
                        }
                        Ok(k) => frames.extend(&plain[..k]),
                        Err(_) => break,
                    }
                }
                let _ = self.write_out(&mut conn, WritePhase::Established);
            }
            let now = Instant::now();
            while let Some(frame) = frames.next_frame() {
                if let Ok(msg) = DnsMessage::decode(&frame) {
                    if let Some(waiter) = self.pending.lock().remove(&msg.id) {
                        let _ = waiter.try_send((msg, now));
                    }
                }
            }
            if !ok {
                break;
            }
        }
        self.alive.store(false, Ordering::SeqCst);
        self.pending.lock().clear();
        let _ = self.socket.shutdown(Shutdown::Both);
    }

    fn send(&self, mut query: DnsMessage) -> Result<Receiver<(DnsMessage, Instant)>, StubError> {
        if !self.alive.load(Ordering::SeqCst) {
            return Err(StubError::Closed);
        }
        let (tx, rx) = mpsc::sync_channel(1);
        let id = {
            let mut pending = self.pending.lock();
            let mut id = self.next_id.fetch_add(1, Ordering::Relaxed);
            while pending.contains_key(&id) {
                id = self.next_id.fetch_add(1, Ordering::Relaxed);
            }
            pending.insert(id, tx);
            id
        };
        query.id = id;
        let framed = query
            .encode()
            .and_then(|p| wire::frame(&p))
            .map_err(|e| StubError::Tls(e.to_string()))?;
        let mut conn = self.conn.lock();
        let result = conn
            .writer()
            .write_all(&framed)
            .and_then(|_| self.write_out(&mut conn, WritePhase::Established));
        if let Err(e) = result {
            self.pending.lock().remove(&id);
            self.alive.store(false, Ordering::SeqCst);
            return Err(e.into());
        }
        Ok(rx)
    }

    fn close(&self) {
        self.alive.store(false, Ordering::SeqCst);
        {
            let mut conn = self.conn.lock();
            conn.send_close_notify();
            let _ = self.write_out(&mut conn, WritePhase::Established);
        }
        let _ = self.socket.shutdown(Shutdown::Both);
        if let Some(r) = self.reader.lock().take() {
            let _ = r.join();
        }
    }
}

/// A query in flight. Resolves to the response and its arrival time.
pub struct Pending {
    caller_id: u16,
    rx: Option<Receiver<(DnsMessage, Instant)>>,
    question: DnsQuestion,
    deadline: Instant,
}

impl Pending {
    /// Waits until the stub's deadline. The response carries the caller's id.
    pub fn wait(self) -> Result<(DnsMessage, Instant), StubError> {
        let Some(rx) = self.rx else {
            return Err(StubError::Closed);
        };
        let timeout = self.deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(timeout) {
            Ok((mut msg, at)) => {
                msg.id = self.caller_id;
                Ok((msg, at))
            }
            Err(RecvTimeoutError::Timeout) => Err(StubError::Timeout),
            Err(RecvTimeoutError::Disconnected) => Err(StubError::Closed),
        }
    }

    /// Like [`wait`](Self::wait) but never fails: errors become SERVFAIL.
    pub fn response(self) -> DnsMessage {
        let servfail = servfail(self.caller_id, &self.question);
        self.wait().map(|(m, _)| m).unwrap_or(servfail)
    }
}

fn servfail(id: u16, question: &DnsQuestion) -> DnsMessage {
    DnsMessage::query(id, question.clone(), true).response_to(Rcode::ServFail)
}

pub struct Stub {
    config: StubConfig,
    pool: Vec<Mutex<Option<Arc<StubSession>>>>,
    handshakes: AtomicU64,
    tap: Option<Arc<WireTap>>,
}

impl Stub {
    pub fn new(config: StubConfig) -> Result<Self, StubError> {
        if config.resolvers.is_empty() {
            return Err(StubError::NoResolvers);
        }
        config.policy.validate()?;
        let pool = config.resolvers.iter().map(|_| Mutex::new(None)).collect();
        Ok(Self {
            config,
            pool,
            handshakes: AtomicU64::new(0),
            tap: None,
        })
    }

    pub fn with_tap(mut self, tap: Arc<WireTap>) -> Self {
        self.tap = Some(tap);
        self
    }

    pub fn config(&self) -> &StubConfig {
        &self.config
    }

    /// Completed handshakes so far.
    pub fn handshake_count(&self) -> u64 {
        self.handshakes.load(Ordering::SeqCst)
    }

    fn client_config(&self) -> Result<(Arc<ClientConfig>, Option<VerificationSlot>), StubError> {
        if self.config.policy.require_attestation {
            let (config, slot) = tls::attested_client_config(&self.config.policy).map_err(|e| StubError::Tls(e.to_string()))?;
            Ok((config, Some(slot)))
        } else {
            let config = tls::webpki_client_config(&self.config.legacy_roots).map_err(|e| StubError::Tls(e.to_string()))?;
            Ok((config, None))
        }
    }

    /// Connects to `endpoint` and completes a handshake that succeeds only
    /// if the server passes verification under the stub's policy.
    fn handshake_and_verify(&self, endpoint: &Endpoint, deadline: Instant) -> Result<Arc<StubSession>, StubError> {
        let remaining = deadline.saturating_duration_since(Instant::now());
        if remaining.is_zero() {
            return Err(StubError::Timeout);
        }
        let (config, slot) = self.client_config()?;
        let name = ServerName::try_from(endpoint.name.clone()).map_err(|e| StubError::Config(e.to_string()))?;
        let conn = ClientConnection::new(config, name).map_err(|e| StubError::Tls(e.to_string()))?;
        let socket = TcpStream::connect_timeout(&endpoint.addr, remaining)?;
        socket.set_nodelay(true)?;
        let session = StubSession {
            socket,
            conn: Mutex::new(conn),
            pending: Mutex::default(),
            alive: AtomicBool::new(true),
            next_id: AtomicU16::new(rand::random()),
            reader: Mutex::new(None),
            tap: self.tap.clone(),
        };

        let outcome = (|| -> Result<(), StubError> {
            let mut conn = session.conn.lock();
            let mut buf = vec![0u8; 16 * 1024];
            while conn.is_handshaking() {
                session.write_out(&mut conn, WritePhase::Handshake)?;
                if !conn.is_handshaking() {
                    break;
                }
                let left = deadline.saturating_duration_since(Instant::now());
                if left.is_zero() {
                    return Err(StubError::Timeout);
                }
                session.socket.set_read_timeout(Some(left))?;
                let n = match (&session.socket).read(&mut buf) {
                    Ok(0) => return Err(StubError::Closed),
                    Ok(n) => n,
                    Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                        return Err(StubError::Timeout)
                    }
                    Err(e) => return Err(e.into()),
                };
                let mut rest = &buf[..n];
                while !rest.is_empty() {
                    conn.read_tls(&mut rest)?;
                    if let Err(e) = conn.process_new_packets() {
                        // Let the server see the alert before we hang up.
                        let _ = session.write_out(&mut conn, WritePhase::Handshake);
                        return Err(StubError::Tls(e.to_string()));
                    }
                }
            }
            session.write_out(&mut conn, WritePhase::Handshake)?;
            session.socket.set_read_timeout(None)?;
            Ok(())
        })();

        if let Err(e) = outcome {
            let _ = session.socket.shutdown(Shutdown::Both);
            if let Some(Err(failure)) = slot.and_then(|s| s.lock().take()) {
                return Err(StubError::Verification(failure));
            }
            return Err(e);
        }
        self.handshakes.fetch_add(1, Ordering::SeqCst);

        let session = Arc::new(session);
        let reader = {
            let s = session.clone();
            thread::Builder::new()
                .name("stub-reader".into())
                .spawn(move || s.reader_loop())?
        };
        *session.reader.lock() = Some(reader);
        Ok(session)
    }

    /// Pooled session for resolver `index`, establishing one if needed.
    fn session(&self, index: usize, deadline: Instant) -> Result<Arc<StubSession>, StubError> {
        let mut slot = self.pool[index].lock();
        if let Some(s) = slot.as_ref() {
            if s.alive.load(Ordering::SeqCst) {
                return Ok(s.clone());
            }
        }
        if let Some(dead) = slot.take() {
            dead.close();
        }
        let fresh = self.handshake_and_verify(&self.config.resolvers[index], deadline)?;
        *slot = Some(fresh.clone());
        Ok(fresh)
    }

    /// Establishes (or reuses) a verified session with resolver `index`.
    pub fn connect(&self, index: usize) -> Result<(), StubError> {
        self.session(index, Instant::now() + self.config.query_timeout).map(|_| ())
    }

    /// Sends `query` on the first resolver that verifies.
    pub fn submit(&self, query: &DnsMessage) -> Result<Pending, StubError> {
        let deadline = Instant::now() + self.config.query_timeout;
        let question = query
            .first_question()
            .cloned()
            .ok_or_else(|| StubError::Config("query has no question".into()))?;
        let mut last = StubError::NoResolvers;
        for index in 0..self.pool.len() {
            // One retry covers a pooled session the server has since closed.
            for _ in 0..2 {
                match self.session(index, deadline).and_then(|s| s.send(query.clone())) {
                    Ok(rx) => {
                        return Ok(Pending {
                            caller_id: query.id,
                            rx: Some(rx),
                            question,
                            deadline,
                        })
                    }
                    Err(StubError::Closed) => last = StubError::Closed,
                    Err(StubError::Io(e)) => {
                        last = StubError::Io(e);
                    }
                    Err(e) => {
                        log::warn!("resolver {} rejected: {e}", self.config.resolvers[index]);
                        last = e;
                        break;
                    }
                }
            }
        }
        Err(last)
    }

    /// Resolves `query`; failures and timeouts come back as SERVFAIL with
    /// the caller's id.
    pub fn resolve_message(&self, query: &DnsMessage) -> DnsMessage {
        match self.submit(query) {
            Ok(p) => p.response(),
            Err(e) => {
                log::warn!("query for {:?} failed: {e}", query.first_question().map(|q| q.name.to_string()));
                let question = query.first_question().cloned().unwrap_or_else(|| {
                    DnsQuestion::new(crate::wire::DomainName::root(), crate::wire::RecordType::A)
                });
                servfail(query.id, &question)
            }
        }
    }

    pub fn resolve(&self, question: DnsQuestion) -> DnsMessage {
        self.resolve_message(&DnsMessage::query(rand::random(), question, true))
    }

    /// Closes pooled sessions.
    pub fn close(&self) {
        for slot in &self.pool {
            if let Some(s) = slot.lock().take() {
                s.close();
            }
        }
    }
}

impl Drop for Stub {
    fn drop(&mut self) {
        self.close();
    }
}
