//! The shared inbound query FIFO and the per-client answer FIFOs.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use parking_lot::{Condvar, Mutex};

use crate::wire::{DnsMessage, DnsQuestion};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SessionId(pub u64);

impl std::fmt::Display for SessionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone)]
pub struct QueryTicket {
    pub client_id: SessionId,
    pub question: DnsQuestion,
    pub original_id: u16,
    pub recursion_desired: bool,
    pub enqueue_time: Instant,
}

#[derive(Debug, Clone)]
pub struct AnswerTicket {
    pub client_id: SessionId,
    pub response: DnsMessage,
    pub completion_time: Instant,
}

struct InState {
    items: VecDeque<QueryTicket>,
    closed: bool,
}

/// Bounded multi-producer/multi-consumer blocking FIFO. Producers block
/// while it is full; closing wakes everyone.
pub struct InQueryList {
    state: Mutex<InState>,
    not_empty: Condvar,
    not_full: Condvar,
    capacity: usize,
}

impl InQueryList {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            state: Mutex::new(InState {
                items: VecDeque::with_capacity(capacity.min(1024)),
                closed: false,
            }),
            not_empty: Condvar::new(),
            not_full: Condvar::new(),
            capacity,
        }
    }

    /// Blocks while full. Returns the ticket back if the list is closed.
    pub fn push(&self, ticket: QueryTicket) -> Result<(), QueryTicket> {
        let mut st = self.state.lock();
        while st.items.len() >= self.capacity && !st.closed {
            self.not_full.wait(&mut st);
        }
        if st.closed {
            return Err(ticket);
        }
        st.items.push_back(ticket);
        drop(st);
        self.not_empty.notify_one();
        Ok(())
    }

    /// Blocks until a ticket is available; `None` once closed and drained.
    pub fn pop(&self) -> Option<QueryTicket> {
        let mut st = self.state.lock();
        loop {
            if let Some(t) = st.items.pop_front() {
                drop(st);
                self.not_full.notify_one();
                return Some(t);
            }
            if st.closed {
                return None;
            }
            self.not_empty.wait(&mut st);
        }
    }

    pub fn close(&self) {
        self.state.lock().closed = true;
        self.not_empty.notify_all();
        self.not_full.notify_all();
    }

    pub fn len(&self) -> usize {
        self.state.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }
}

/// Response ids remembered per out-queue, oldest dropped first.
pub const HISTORY_CAP: usize = 4096;

struct OutState {
    items: VecDeque<AnswerTicket>,
    closed: bool,
    history: VecDeque<u16>,
}

/// One client's answers. Any handler pushes; only that client's writer
/// pops, and it only ever takes the head.
pub struct OutQueryList {
    state: Mutex<OutState>,
    ready: Condvar,
    pops: AtomicU64,
    inspected: AtomicU64,
}

impl Default for OutQueryList {
    fn default() -> Self {
        Self::new()
    }
}

impl OutQueryList {
    pub fn new() -> Self {
        Self {
            state: Mutex::new(OutState {
                items: VecDeque::new(),
                closed: false,
                history: VecDeque::new(),
            }),
            ready: Condvar::new(),
            pops: AtomicU64::new(0),
            inspected: AtomicU64::new(0),
        }
    }

    /// Appends unless the list was closed, in which case the ticket is handed back.
    #[allow(clippy::result_large_err)]
    pub fn push(&self, ticket: AnswerTicket) -> Result<(), AnswerTicket> {
        let mut st = self.state.lock();
        if st.closed {
            return Err(ticket);
        }
        if st.history.len() == HISTORY_CAP {
            st.history.pop_front();
        }
        st.history.push_back(ticket.response.id);
        st.items.push_back(ticket);
        drop(st);
        self.ready.notify_one();
        Ok(())
    }

    /// Blocks for the head element; `None` once closed. Pending answers are
    /// discarded on close since the client is gone.
    pub fn pop_head(&self) -> Option<AnswerTicket> {
        let mut st = self.state.lock();
        loop {
            if st.closed {
                return None;
            }
            if let Some(t) = st.items.pop_front() {
                self.pops.fetch_add(1, Ordering::Relaxed);
                self.inspected.fetch_add(1, Ordering::Relaxed);
                return Some(t);
            }
            self.ready.wait(&mut st);
        }
    }

    pub fn close(&self) {
        self.state.lock().closed = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().closed
    }

    pub fn len(&self) -> usize {
        self.state.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ids of the most recent answers in the order they were enqueued.
    pub fn history(&self) -> Vec<u16> {
        self.state.lock().history.iter().copied().collect()
    }

    /// (pops, elements inspected while popping).
    pub fn instrumentation(&self) -> (u64, u64) {
        (self.pops.load(Ordering::Relaxed), self.inspected.load(Ordering::Relaxed))
    }
}
