use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;

/// A TLS server address plus the name its certificate is checked against.
///
/// Written `name@ip:port`; a bare `ip:port` uses the name `localhost`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Endpoint {
    pub name: String,
    pub addr: SocketAddr,
}

impl Endpoint {
    pub fn new(name: impl Into<String>, addr: SocketAddr) -> Self {
        Self {
            name: name.into(),
            addr,
        }
    }

    pub fn localhost(addr: SocketAddr) -> Self {
        Self::new("localhost", addr)
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.addr)
    }
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, addr) = match s.split_once('@') {
            Some((name, addr)) => (name.trim(), addr.trim()),
            None => ("localhost", s.trim()),
        };
        if name.is_empty() {
            return Err(format!("empty server name in {s:?}"));
        }
        let addr = addr.parse().map_err(|e| format!("bad address in {s:?}: {e}"))?;
        Ok(Self::new(name, addr))
    }
}
