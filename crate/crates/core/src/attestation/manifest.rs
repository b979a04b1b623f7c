//! Build manifests and the measurement derived from them.
//!
//! Canonical manifest text:
//!
//! ```text
//! version <string>
//! unit <path> <sha256-hex>
//! unit <path> <sha256-hex>
//! ```
//!
//! Unit lines are sorted by path with no duplicates, every line ends in
//! `\n`, and nothing else is allowed. The measurement is the SHA-256 of
//! those exact bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ManifestError {
    #[error("line {0}: {1}")]
    Malformed(usize, &'static str),
    #[error("manifest is not valid UTF-8")]
    Encoding,
    #[error("bad measurement hex")]
    BadHex,
}

/// MRENCLAVE analogue: SHA-256 over a canonical build manifest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EnclaveMeasurement(pub [u8; 32]);

impl EnclaveMeasurement {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for EnclaveMeasurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EnclaveMeasurement({})", self.to_hex())
    }
}

impl fmt::Display for EnclaveMeasurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for EnclaveMeasurement {
    type Err = ManifestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s.trim()).map_err(|_| ManifestError::BadHex)?;
        let arr: [u8; 32] = bytes.try_into().map_err(|_| ManifestError::BadHex)?;
        Ok(Self(arr))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildManifest {
    pub version: String,
    pub units: BTreeMap<String, [u8; 32]>,
}

impl BuildManifest {
    pub fn new(version: impl Into<String>) -> Self {
        Self {
            version: version.into(),
            units: BTreeMap::new(),
        }
    }

    pub fn with_unit(mut self, path: &str, content: &[u8]) -> Self {
        self.units.insert(path.to_string(), Sha256::digest(content).into());
        self
    }

    pub fn to_canonical(&self) -> String {
        let mut out = format!("version {}\n", self.version);
        for (path, digest) in &self.units {
            out.push_str(&format!("unit {} {}\n", path, hex::encode(digest)));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        if !text.ends_with('\n') {
            return Err(ManifestError::Malformed(text.lines().count().max(1), "missing final newline"));
        }
        let mut lines = text.split_terminator('\n').enumerate();
        let version = match lines.next() {
            Some((_, line)) => line
                .strip_prefix("version ")
                .filter(|v| !v.is_empty() && !v.contains(char::is_whitespace))
                .ok_or(ManifestError::Malformed(1, "expected `version <string>`"))?,
            None => return Err(ManifestError::Malformed(1, "empty manifest")),
        };
        let mut units = BTreeMap::new();
        let mut last: Option<String> = None;
        for (i, line) in lines {
            let line_no = i + 1;
            let mut parts = line.split(' ');
            let (Some("unit"), Some(path), Some(digest), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(ManifestError::Malformed(line_no, "expected `unit <path> <sha256>`"));
            };
            if path.is_empty() {
                return Err(ManifestError::Malformed(line_no, "empty path"));
            }
            if last.as_deref().is_some_and(|prev| prev >= path) {
                return Err(ManifestError::Malformed(line_no, "units not strictly sorted"));
            }
            let bytes = hex::decode(digest)
                .ok()
                .filter(|_| digest.bytes().all(|b| !b.is_ascii_uppercase()))
                .and_then(|b| <[u8; 32]>::try_from(b).ok())
                .ok_or(ManifestError::Malformed(line_no, "digest is not 64 lowercase hex chars"))?;
            units.insert(path.to_string(), bytes);
            last = Some(path.to_string());
        }
        Ok(Self {
            version: version.to_string(),
            units,
        })
    }

    pub fn measure(&self) -> EnclaveMeasurement {
        EnclaveMeasurement(Sha256::digest(self.to_canonical().as_bytes()).into())
    }
}

/// Validates canonical manifest bytes and hashes them.
pub fn measure_trusted_component(manifest: &[u8]) -> Result<EnclaveMeasurement, ManifestError> {
    let text = std::str::from_utf8(manifest).map_err(|_| ManifestError::Encoding)?;
    let parsed = BuildManifest::parse(text)?;
    // parse() accepts only canonical text, so re-rendering is byte-identical.
    debug_assert_eq!(parsed.to_canonical(), text);
    Ok(EnclaveMeasurement(Sha256::digest(manifest).into()))
}
