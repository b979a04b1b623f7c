//! Attested DNS-over-TLS recursive resolution.

pub mod anon;
pub mod attestation;
pub mod bench;
pub mod cache;
pub mod enclave;
pub mod endpoint;
pub mod host;
pub mod nssim;
pub mod pki;
pub mod stub;
pub mod testbed;
pub mod tls;
pub mod wire;
