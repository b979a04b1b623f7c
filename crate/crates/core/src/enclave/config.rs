//! Resolver configuration and its `key = value` file format.
//!
//! ```text
//! num_handlers = 30
//! max_clients = 50
//! handler_timeout_ms = 5000
//! cache_enabled = true
//! cache_delay_floor_ms = 0
//! root_hint = a.root.sim@127.0.1.0:8853
//! ```

use std::path::Path;
use std::time::Duration;

use thiserror::Error;

use super::resolve::DEFAULT_MAX_REFERRAL_DEPTH;
use crate::cache::DEFAULT_MAX_ENTRIES;
use crate::endpoint::Endpoint;

pub const DEFAULT_HANDLER_TIMEOUT: Duration = Duration::from_millis(5000);
pub const DEFAULT_IN_QUEUE_CAPACITY: usize = 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("num_handlers must be at least 1")]
    NoHandlers,
    #[error("max_clients must be at least 1")]
    NoClients,
    #[error("handler_timeout must be positive")]
    ZeroTimeout,
    #[error("in_queue_capacity must be at least 1")]
    ZeroQueue,
    #[error("max_referral_depth must be at least 1")]
    ZeroDepth,
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolverConfig {
    pub num_handlers: usize,
    pub max_clients: usize,
    pub handler_timeout: Duration,
    /// Recorded and reported, not enforced.
    pub per_thread_memory_budget: usize,
    pub cache_enabled: bool,
    pub cache_delay_floor: Duration,
    pub cache_max_entries: usize,
    /// Name servers are contacted on the port of the first hint.
    pub root_hints: Vec<Endpoint>,
    pub in_queue_capacity: usize,
    pub max_referral_depth: usize,
}

impl Default for ResolverConfig {
    fn default() -> Self {
        Self {
            num_handlers: 30,
            max_clients: 50,
            handler_timeout: DEFAULT_HANDLER_TIMEOUT,
            per_thread_memory_budget: 256 * 1024,
            cache_enabled: true,
            cache_delay_floor: Duration::ZERO,
            cache_max_entries: DEFAULT_MAX_ENTRIES,
            root_hints: Vec::new(),
            in_queue_capacity: DEFAULT_IN_QUEUE_CAPACITY,
            max_referral_depth: DEFAULT_MAX_REFERRAL_DEPTH,
        }
    }
}

impl ResolverConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_handlers == 0 {
            return Err(ConfigError::NoHandlers);
        }
        if self.max_clients == 0 {
            return Err(ConfigError::NoClients);
        }
        if self.handler_timeout.is_zero() {
            return Err(ConfigError::ZeroTimeout);
        }
        if self.in_queue_capacity == 0 {
            return Err(ConfigError::ZeroQueue);
        }
        if self.max_referral_depth == 0 {
            return Err(ConfigError::ZeroDepth);
        }
        Ok(())
    }

    pub fn upstream_port(&self) -> Option<u16> {
        self.root_hints.first().map(|e| e.addr.port())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let bad = |reason: String| ConfigError::Malformed { line: i + 1, reason };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("expected key = value".into()))?;
            let value = value.trim();
            let number = || value.parse::<u64>().map_err(|_| bad(format!("not a number: {value}")));
            match key.trim() {
                "num_handlers" => config.num_handlers = number()? as usize,
                "max_clients" => config.max_clients = number()? as usize,
                "handler_timeout_ms" => config.handler_timeout = Duration::from_millis(number()?),
                "per_thread_memory_budget" => config.per_thread_memory_budget = number()? as usize,
                "cache_enabled" => {
                    config.cache_enabled = value.parse().map_err(|_| bad(format!("not a boolean: {value}")))?
                }
                "cache_delay_floor_ms" => config.cache_delay_floor = Duration::from_millis(number()?),
                "cache_max_entries" => config.cache_max_entries = number()? as usize,
                "in_queue_capacity" => config.in_queue_capacity = number()? as usize,
                "max_referral_depth" => config.max_referral_depth = number()? as usize,
                "root_hint" => config.root_hints.push(value.parse().map_err(bad)?),
                other => return Err(bad(format!("unknown key {other}"))),
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_file_text(&self) -> String {
        let mut out = format!(
            "num_handlers = {}\nmax_clients = {}\nhandler_timeout_ms = {}\nper_thread_memory_budget = {}\n\
             cache_enabled = {}\ncache_delay_floor_ms = {}\ncache_max_entries = {}\nin_queue_capacity = {}\n\
             max_referral_depth = {}\n",
            self.num_handlers,
            self.max_clients,
            self.handler_timeout.as_millis(),
            self.per_thread_memory_budget,
            self.cache_enabled,
            self.cache_delay_floor.as_millis(),
            self.cache_max_entries,
            self.in_queue_capacity,
            self.max_referral_depth,
        );
        for hint in &self.root_hints {
            out.push_str(&format!("root_hint = {hint}\n"));
        }
        out
    }
}
