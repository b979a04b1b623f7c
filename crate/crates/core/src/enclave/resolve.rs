//! Iterative resolution over DNS-over-TLS, driven from inside the trusted
//! component. Sockets belong to the host, so every byte to or from a name
//! server goes through [`HostCalls`].

use std::io::{Read, Write};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use rustls::pki_types::ServerName;
use rustls::{ClientConfig, ClientConnection};
use thiserror::Error;

use super::HostCalls;
use crate::endpoint::Endpoint;
use crate::wire::{self, DnsMessage, DnsQuestion, FrameBuffer, Rcode, RecordType, ResourceRecord};

pub const DEFAULT_MAX_REFERRAL_DEPTH: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ResolveError {
    #[error("referral depth limit of {0} exceeded")]
    DepthExceeded(usize),
    #[error("no name server could be reached")]
    Unreachable,
    #[error("resolution deadline passed")]
    Timeout,
    #[error("referral without glue for {0}")]
    NoGlue(String),
    #[error("unusable response from {0}")]
    BadResponse(String),
    #[error("no root hints configured")]
    NoRootHints,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub rcode: Rcode,
    pub answers: Vec<ResourceRecord>,
    /// Name-server sessions opened along the way.
    pub sessions: usize,
}

#[derive(Debug)]
enum SessionError {
    Timeout,
    Failed(String),
}

impl From<std::io::Error> for SessionError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => SessionError::Timeout,
            _ => SessionError::Failed(e.to_string()),
        }
    }
}

impl From<rustls::Error> for SessionError {
    fn from(e: rustls::Error) -> Self {
        SessionError::Failed(e.to_string())
    }
}

/// One TLS session to a name server, tunnelled through the host.
struct NsSession<'a> {
    host: &'a dyn HostCalls,
    handle: u64,
    conn: ClientConnection,
}

impl<'a> NsSession<'a> {
    fn open(
        host: &'a dyn HostCalls,
        tls: &Arc<ClientConfig>,
        server: &Endpoint,
        deadline: Instant,
    ) -> Result<Self, SessionError> {
        let name = ServerName::try_from(server.name.clone())
            .map_err(|_| SessionError::Failed(format!("bad server name {}", server.name)))?;
        let conn = ClientConnection::new(tls.clone(), name)?;
        let handle = host.net_connect(server.addr, deadline)?;
        let mut session = Self { host, handle, conn };
        while session.conn.is_handshaking() {
            session.flush()?;
            if !session.conn.is_handshaking() {
                break;
            }
            session.pull(deadline)?;
        }
        session.flush()?;
        Ok(session)
    }

    fn flush(&mut self) -> Result<(), SessionError> {
        let mut out = Vec::new();
        while self.conn.wants_write() {
            self.conn
                .write_tls(&mut out)
                .map_err(|e| SessionError::Failed(e.to_string()))?;
        }
        if !out.is_empty() {
            self.host.net_send(self.handle, &out)?;
        }
        Ok(())
    }

    fn pull(&mut self, deadline: Instant) -> Result<(), SessionError> {
        let data = self.host.net_recv(self.handle, deadline)?;
        if data.is_empty() {
            return Err(SessionError::Failed("connection closed".into()));
        }
        let mut rest = data.as_slice();
        while !rest.is_empty() {
            self.conn
                .read_tls(&mut rest)
                .map_err(|e| SessionError::Failed(e.to_string()))?;
            self.conn.process_new_packets()?;
        }
        Ok(())
    }

    fn exchange(&mut self, query: &DnsMessage, deadline: Instant) -> Result<DnsMessage, SessionError> {
        let payload = query.encode().map_err(|e| SessionError::Failed(e.to_string()))?;
        let framed = wire::frame(&payload).map_err(|e| SessionError::Failed(e.to_string()))?;
        self.conn
            .writer()
            .write_all(&framed)
            .map_err(|e| SessionError::Failed(e.to_string()))?;
        self.flush()?;

        let mut frames = FrameBuffer::new();
        let mut buf = [0u8; 4096];
        loop {
            loop {
                match self.conn.reader().read(&mut buf) {
                    Ok(0) => return Err(SessionError::Failed("peer closed".into())),
                    Ok(n) => frames.extend(&buf[..n]),
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => break,
                    Err(e) => return Err(SessionError::Failed(e.to_string())),
                }
            }
            if let Some(frame) = frames.next_frame() {
                return DnsMessage::decode(&frame).map_err(|e| SessionError::Failed(e.to_string()));
            }
            self.pull(deadline)?;
        }
    }

    fn close(mut self) {
        self.conn.send_close_notify();
        let _ = self.flush();
    }
}

impl Drop for NsSession<'_> {
    fn drop(&mut self) {
        self.host.net_close(self.handle);
    }
}

/// Upstream context for iterative resolution.
pub struct Upstream<'a> {
    pub host: &'a dyn HostCalls,
    pub tls: Arc<ClientConfig>,
    /// Port name servers listen on; referral glue only carries addresses.
    pub port: u16,
    pub max_depth: usize,
}

impl Upstream<'_> {
    fn ask(&self, server: &Endpoint, question: &DnsQuestion, deadline: Instant) -> Result<DnsMessage, SessionError> {
        let mut session = NsSession::open(self.host, &self.tls, server, deadline)?;
        let query = DnsMessage::query(rand::random(), question.clone(), false);
        let response = session.exchange(&query, deadline)?;
        session.close();
        if response.id != query.id || !response.flags.is_response {
            return Err(SessionError::Failed(format!("mismatched response from {server}")));
        }
        Ok(response)
    }

    /// Walks referrals from `root_hints` until an authoritative answer or
    /// NXDOMAIN, bounded by `max_depth` referrals and by `deadline`.
    pub fn resolve_recursive(
        &self,
        question: &DnsQuestion,
        root_hints: &[Endpoint],
        deadline: Instant,
    ) -> Result<Resolution, ResolveError> {
        if root_hints.is_empty() {
            return Err(ResolveError::NoRootHints);
        }
        let mut servers = root_hints.to_vec();
        let mut sessions = 0;

        for _ in 0..self.max_depth {
            let mut response = None;
            for server in &servers {
                if Instant::now() >= deadline {
                    return Err(ResolveError::Timeout);
                }
                match self.ask(server, question, deadline) {
                    Ok(r) => {
                        sessions += 1;
                        response = Some((server.to_string(), r));
                        break;
                    }
                    Err(SessionError::Timeout) => return Err(ResolveError::Timeout),
                    Err(SessionError::Failed(e)) => {
                        log::debug!("name server {server} failed: {e}");
                    }
                }
            }
            let (server, response) = response.ok_or(ResolveError::Unreachable)?;

            match response.rcode() {
                Rcode::NoError => {}
                Rcode::NxDomain => {
                    return Ok(Resolution {
                        rcode: Rcode::NxDomain,
                        answers: Vec::new(),
                        sessions,
                    })
                }
                other => {
                    return Ok(Resolution {
                        rcode: other,
                        answers: Vec::new(),
                        sessions,
                    })
                }
            }

            if response.flags.authoritative || !response.answers.is_empty() {
                let answers = response
                    .answers
                    .into_iter()
                    .filter(|rr| rr.name == question.name)
                    .collect();
                return Ok(Resolution {
                    rcode: Rcode::NoError,
                    answers,
                    sessions,
                });
            }

            servers = self.referral_targets(&response, question)?;
            if servers.is_empty() {
                return Err(ResolveError::BadResponse(server));
            }
        }
        Err(ResolveError::DepthExceeded(self.max_depth))
    }

    fn referral_targets(&self, response: &DnsMessage, question: &DnsQuestion) -> Result<Vec<Endpoint>, ResolveError> {
        let mut targets = Vec::new();
        let mut missing_glue = None;
        for ns in response
            .authorities
            .iter()
            .filter(|rr| rr.rtype == RecordType::NS && question.name.is_subdomain_of(&rr.name))
        {
            let Some(target) = ns.as_ns_target() else {
                continue;
            };
            let glue = response
                .additionals
                .iter()
                .filter(|rr| rr.name == target)
                .filter_map(ResourceRecord::as_ipv4)
                .next();
            match glue {
                Some(ip) => targets.push(Endpoint::new(
                    target.to_string(),
                    SocketAddr::from((ip, self.port)),
                )),
                None => missing_glue = Some(target.to_string()),
            }
        }
        match (targets.is_empty(), missing_glue) {
            (true, Some(name)) => Err(ResolveError::NoGlue(name)),
            _ => Ok(targets),
        }
    }
}
