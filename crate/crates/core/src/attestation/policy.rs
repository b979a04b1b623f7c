//! Client trust policy and its file format.
//!
//! ```text
//! require_attestation = true
//! measurement = 3f1c...e2          # one line per allowed measurement
//! attestation_root = ias-root.pem  # relative to the policy file
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rustls::pki_types::CertificateDer;
use thiserror::Error;

use super::EnclaveMeasurement;
use crate::pki;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("attestation is required but no measurement is allowed")]
    EmptyAllowlist,
    #[error("attestation is required but no attestation root is configured")]
    NoRoots,
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrustPolicy {
    pub allowed_measurements: BTreeSet<EnclaveMeasurement>,
    pub trusted_attestation_roots: Vec<CertificateDer<'static>>,
    pub require_attestation: bool,
}

impl TrustPolicy {
    pub fn attested(
        measurements: impl IntoIterator<Item = EnclaveMeasurement>,
        roots: Vec<CertificateDer<'static>>,
    ) -> Self {
        Self {
            allowed_measurements: measurements.into_iter().collect(),
            trusted_attestation_roots: roots,
            require_attestation: true,
        }
    }

    /// Policy for legacy DNS-over-TLS: attestation evidence is ignored.
    pub fn legacy() -> Self {
        Self {
            allowed_measurements: BTreeSet::new(),
            trusted_attestation_roots: Vec::new(),
            require_attestation: false,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.require_attestation {
            if self.allowed_measurements.is_empty() {
                return Err(PolicyError::EmptyAllowlist);
            }
            if self.trusted_attestation_roots.is_empty() {
                return Err(PolicyError::NoRoots);
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|e| PolicyError::Io(path.to_path_buf(), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let policy = Self::parse(&text, base, path)?;
        policy.validate()?;
        Ok(policy)
    }

    fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self, PolicyError> {
        let mut policy = Self {
            allowed_measurements: BTreeSet::new(),
            trusted_attestation_roots: Vec::new(),
            require_attestation: true,
        };
        for (i, raw) in text.lines().enumerate() {
            let bad = |reason: String| PolicyError::Malformed {
                path: origin.to_path_buf(),
                line: i + 1,
                reason,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(bad("expected key = value".into()));
            };
            let value = value.trim();
            match key.trim() {
                "require_attestation" => {
                    policy.require_attestation =
                        value.parse().map_err(|_| bad(format!("not a boolean: {value}")))?;
                }
                "measurement" => {
                    let m: EnclaveMeasurement =
                        value.parse().map_err(|_| bad(format!("not a measurement: {value}")))?;
                    policy.allowed_measurements.insert(m);
                }
                "attestation_root" => {
                    let root_path = base.join(value);
                    let bytes = std::fs::read(&root_path).map_err(|e| PolicyError::Io(root_path.clone(), e))?;
                    let cert = pki::certificate_from_pem_or_der(&bytes).map_err(|e| bad(e.to_string()))?;
                    policy.trusted_attestation_roots.push(cert);
                }
                other => return Err(bad(format!("unknown key {other}"))),
            }
        }
        Ok(policy)
    }

    /// Writes the policy next to its root certificates (`root-N.pem`).
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut text = format!("require_attestation = {}\n", self.require_attestation);
        for m in &self.allowed_measurements {
            text.push_str(&format!("measurement = {m}\n"));
        }
        for (i, root) in self.trusted_attestation_roots.iter().enumerate() {
            let name = format!("root-{i}.pem");
            std::fs::write(dir.join(&name), pki::der_to_pem(root))?;
            text.push_str(&format!("attestation_root = {name}\n"));
        }
        std::fs::write(path, text)
    }
}
