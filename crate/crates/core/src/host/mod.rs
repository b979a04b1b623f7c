//! The untrusted half of the resolver: sockets, the call gate and the
//! hooks used by security tests. Nothing here parses TLS.

mod listener;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

pub use listener::{serve_control, AdversaryMode, ControlServer, ResolverServer, ServerError};

use crate::enclave::{Enclave, HostCalls, ResolverStats, SessionError, SessionId};

/// Why the trusted side called out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Purpose {
    ClientRecords,
    SessionClosed,
    NetConnect,
    NetSend,
    NetRecv,
    NetClose,
}

impl Purpose {
    const ALL: [Purpose; 6] = [
        Purpose::ClientRecords,
        Purpose::SessionClosed,
        Purpose::NetConnect,
        Purpose::NetSend,
        Purpose::NetRecv,
        Purpose::NetClose,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::ClientRecords => "client_records",
            Purpose::SessionClosed => "session_closed",
            Purpose::NetConnect => "net_connect",
            Purpose::NetSend => "net_send",
            Purpose::NetRecv => "net_recv",
            Purpose::NetClose => "net_close",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallGateStats {
    pub calls_in: u64,
    pub calls_out: BTreeMap<String, u64>,
}

impl CallGateStats {
    pub fn out(&self, purpose: Purpose) -> u64 {
        self.calls_out.get(purpose.as_str()).copied().unwrap_or(0)
    }

    pub fn total_out(&self) -> u64 {
        self.calls_out.values().sum()
    }
}

#[derive(Debug, Default)]
struct GateCounters {
    calls_in: AtomicU64,
    calls_out: [AtomicU64; 6],
}

impl GateCounters {
    fn out(&self, purpose: Purpose) {
        self.calls_out[purpose as usize].fetch_add(1, Ordering::Relaxed);
    }

    fn snapshot(&self) -> CallGateStats {
        CallGateStats {
            calls_in: self.calls_in.load(Ordering::Relaxed),
            calls_out: Purpose::ALL
                .iter()
                .map(|p| (p.as_str().to_owned(), self.calls_out[*p as usize].load(Ordering::Relaxed)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Inbound,
    Outbound,
}

#[derive(Debug, Clone)]
pub struct TapRecord {
    pub direction: Direction,
    pub purpose: Option<Purpose>,
    pub bytes: Vec<u8>,
}

/// Records a copy of every buffer that crosses the gate.
#[derive(Debug, Default)]
pub struct GateTap {
    records: Mutex<Vec<TapRecord>>,
}

impl GateTap {
    fn record(&self, direction: Direction, purpose: Option<Purpose>, bytes: &[u8]) {
        self.records.lock().push(TapRecord {
            direction,
            purpose,
            bytes: bytes.to_vec(),
        });
    }

    pub fn records(&self) -> Vec<TapRecord> {
        self.records.lock().clone()
    }

    pub fn total_bytes(&self) -> usize {
        self.records.lock().iter().map(|r| r.bytes.len()).sum()
    }

    /// Whether `needle` occurs inside any single recorded buffer.
    pub fn contains(&self, needle: &[u8]) -> bool {
        !needle.is_empty()
            && self
                .records
                .lock()
                .iter()
                .any(|r| r.bytes.windows(needle.len()).any(|w| w == needle))
    }
}

#[derive(Default)]
struct Outbox {
    chunks: VecDeque<Vec<u8>>,
    closed: bool,
}

/// Host-side implementation of the calls the trusted component makes.
#[derive(Default)]
pub struct HostServices {
    counters: GateCounters,
    tap: Mutex<Option<Arc<GateTap>>>,
    outboxes: Mutex<HashMap<SessionId, Outbox>>,
    outbox_ready: Condvar,
    upstream: Mutex<HashMap<u64, Arc<TcpStream>>>,
    next_handle: AtomicU64,
}

impl HostServices {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> CallGateStats {
        self.counters.snapshot()
    }

    pub fn set_tap(&self, tap: Option<Arc<GateTap>>) {
        *self.tap.lock() = tap;
    }

    fn tap(&self, direction: Direction, purpose: Option<Purpose>, bytes: &[u8]) {
        if let Some(tap) = self.tap.lock().as_ref() {
            tap.record(direction, purpose, bytes);
        }
    }

    fn open_outbox(&self, id: SessionId) {
        self.outboxes.lock().insert(id, Outbox::default());
    }

    fn close_outbox(&self, id: SessionId) {
        if let Some(o) = self.outboxes.lock().get_mut(&id) {
            o.closed = true;
        }
        self.outbox_ready.notify_all();
    }

    fn remove_outbox(&self, id: SessionId) {
        self.outboxes.lock().remove(&id);
        self.outbox_ready.notify_all();
    }

    /// Blocks until the trusted side has emitted bytes for `id`; `None`
    /// once the session is closed and everything was collected.
    fn take_outbound(&self, id: SessionId) -> Option<Vec<u8>> {
        let mut boxes = self.outboxes.lock();
        loop {
            let outbox = boxes.get_mut(&id)?;
            if !outbox.chunks.is_empty() {
                let mut bytes = Vec::new();
                for chunk in outbox.chunks.drain(..) {
                    bytes.extend_from_slice(&chunk);
                }
                return Some(bytes);
            }
            if outbox.closed {
                return None;
            }
            self.outbox_ready.wait(&mut boxes);
        }
    }

    fn stream(&self, handle: u64) -> io::Result<Arc<TcpStream>> {
        self.upstream
            .lock()
            .get(&handle)
            .cloned()
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotConnected, "unknown handle"))
    }
}

fn remaining(deadline: Instant) -> io::Result<std::time::Duration> {
    deadline
        .checked_duration_since(Instant::now())
        .filter(|d| !d.is_zero())
        .ok_or_else(|| io::Error::new(io::ErrorKind::TimedOut, "deadline passed"))
}

impl HostCalls for HostServices {
    fn emit(&self, session: SessionId, bytes: &[u8]) {
        self.counters.out(Purpose::ClientRecords);
        self.tap(Direction::Outbound, Some(Purpose::ClientRecords), bytes);
        if let Some(o) = self.outboxes.lock().get_mut(&session) {
            o.chunks.push_back(bytes.to_vec());
        }
        self.outbox_ready.notify_all();
    }

    fn session_closed(&self, session: SessionId) {
        self.counters.out(Purpose::SessionClosed);
        self.close_outbox(session);
    }

    fn net_connect(&self, addr: SocketAddr, deadline: Instant) -> io::Result<u64> {
        self.counters.out(Purpose::NetConnect);
        let stream = TcpStream::connect_timeout(&addr, remaining(deadline)?)?;
        stream.set_nodelay(true)?;
        let handle = self.next_handle.fetch_add(1, Ordering::Relaxed);
        self.upstream.lock().insert(handle, Arc::new(stream));
        Ok(handle)
    }

    fn net_send(&self, handle: u64, bytes: &[u8]) -> io::Result<()> {
        self.counters.out(Purpose::NetSend);
        self.tap(Direction::Outbound, Some(Purpose::NetSend), bytes);
        self.stream(handle)?.as_ref().write_all(bytes)
    }

    fn net_recv(&self, handle: u64, deadline: Instant) -> io::Result<Vec<u8>> {
        self.counters.out(Purpose::NetRecv);
        let stream = self.stream(handle)?;
        stream.set_read_timeout(Some(remaining(deadline)?))?;
        let mut buf = vec![0u8; 16 * 1024];
        let n = match stream.as_ref().read(&mut buf) {
            Ok(n) => n,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                return Err(io::Error::new(io::ErrorKind::TimedOut, "deadline passed"))
            }
            Err(e) => return Err(e),
        };
        buf.truncate(n);
        self.tap(Direction::Inbound, Some(Purpose::NetRecv), &buf);
        Ok(buf)
    }

    fn net_close(&self, handle: u64) {
        if let Some(stream) = self.upstream.lock().remove(&handle) {
            self.counters.out(Purpose::NetClose);
            let _ = stream.shutdown(Shutdown::Both);
        }
    }
}

/// The only entry points from the host into the trusted component.
pub struct CallGate {
    enclave: Enclave,
    host: Arc<HostServices>,
}

impl CallGate {
    pub fn new(enclave: Enclave, host: Arc<HostServices>) -> Self {
        Self { enclave, host }
    }

    pub fn enclave(&self) -> &Enclave {
        &self.enclave
    }

    pub fn host(&self) -> &Arc<HostServices> {
        &self.host
    }

    pub fn stats(&self) -> CallGateStats {
        self.host.stats()
    }

    pub fn resolver_stats(&self) -> ResolverStats {
        self.enclave.stats()
    }

    pub fn open_session(&self) -> Result<SessionId, SessionError> {
        self.host.counters.calls_in.fetch_add(1, Ordering::Relaxed);
        let id = self.enclave.open_session()?;
        self.host.open_outbox(id);
        Ok(id)
    }

    pub fn deliver_inbound(&self, id: SessionId, bytes: &[u8]) -> Result<(), SessionError> {
        self.host.counters.calls_in.fetch_add(1, Ordering::Relaxed);
        self.host.tap(Direction::Inbound, None, bytes);
        self.enclave.deliver_inbound(id, bytes)
    }

    /// Blocks for the next bytes the trusted side emitted for `id`.
    pub fn emit_outbound(&self, id: SessionId) -> Option<Vec<u8>> {
        self.host.take_outbound(id)
    }

    pub fn close_session(&self, id: SessionId) -> Result<(), SessionError> {
        self.host.counters.calls_in.fetch_add(1, Ordering::Relaxed);
        self.host.close_outbox(id);
        let result = self.enclave.close_session(id);
        self.host.remove_outbox(id);
        result
    }

    pub fn shutdown(&self) {
        self.enclave.shutdown();
    }
}
