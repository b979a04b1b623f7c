//! Key material and small local certificate authorities.
//!
//! Every signer in the suite (quoting authority, attestation service, TLS
//! identities, CAs) uses ECDSA P-256 with SHA-256.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use rcgen::{
    BasicConstraints, CertificateParams, CustomExtension, DistinguishedName, DnType,
    ExtendedKeyUsagePurpose, IsCa, KeyPair, KeyUsagePurpose, PKCS_ECDSA_P256_SHA256,
};
use ring::rand::SystemRandom;
use ring::signature::{self, EcdsaKeyPair, KeyPair as _};
use rustls::pki_types::{CertificateDer, PrivateKeyDer, PrivatePkcs8KeyDer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PkiError {
    #[error("key generation failed")]
    KeyGen,
    #[error("signing failed")]
    Signing,
    #[error("certificate construction failed: {0}")]
    Certificate(#[from] rcgen::Error),
    #[error("PEM decoding failed: {0}")]
    Pem(String),
}

/// ECDSA P-256 signing key. Cheap to clone.
#[derive(Clone)]
pub struct SigningKey {
    inner: Arc<KeyInner>,
}

struct KeyInner {
    pkcs8: Vec<u8>,
    ring: EcdsaKeyPair,
}

impl fmt::Debug for SigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SigningKey")
            .field("public", &hex::encode(self.public_key_raw()))
            .finish()
    }
}

impl SigningKey {
    pub fn generate() -> Result<Self, PkiError> {
        let rng = SystemRandom::new();
        let doc = EcdsaKeyPair::generate_pkcs8(&signature::ECDSA_P256_SHA256_ASN1_SIGNING, &rng)
            .map_err(|_| PkiError::KeyGen)?;
        Self::from_pkcs8(doc.as_ref())
    }

    pub fn from_pkcs8(pkcs8: &[u8]) -> Result<Self, PkiError> {
        let rng = SystemRandom::new();
        let ring = EcdsaKeyPair::from_pkcs8(&signature::ECDSA_P256_SHA256_ASN1_SIGNING, pkcs8, &rng)
            .map_err(|_| PkiError::KeyGen)?;
        Ok(Self {
            inner: Arc::new(KeyInner {
                pkcs8: pkcs8.to_vec(),
                ring,
            }),
        })
    }

    pub fn pkcs8_der(&self) -> &[u8] {
        &self.inner.pkcs8
    }

    pub fn private_key_der(&self) -> PrivateKeyDer<'static> {
        PrivateKeyDer::Pkcs8(PrivatePkcs8KeyDer::from(self.inner.pkcs8.clone()))
    }

    /// Uncompressed EC point.
    pub fn public_key_raw(&self) -> &[u8] {
        self.inner.ring.public_key().as_ref()
    }

    /// DER SubjectPublicKeyInfo, as it appears inside a certificate.
    pub fn spki_der(&self) -> Vec<u8> {
        self.rcgen_key().public_key_der()
    }

    pub fn sign(&self, msg: &[u8]) -> Result<Vec<u8>, PkiError> {
        let rng = SystemRandom::new();
        self.inner
            .ring
            .sign(&rng, msg)
            .map(|s| s.as_ref().to_vec())
            .map_err(|_| PkiError::Signing)
    }

    pub(crate) fn rcgen_key(&self) -> KeyPair {
        KeyPair::try_from(self.inner.pkcs8.as_slice()).expect("pkcs8 produced by ring parses")
    }

    pub fn to_pem(&self) -> String {
        self.rcgen_key().serialize_pem()
    }

    pub fn from_pem(pem: &str) -> Result<Self, PkiError> {
        let kp = KeyPair::from_pem(pem).map_err(|e| PkiError::Pem(e.to_string()))?;
        Self::from_pkcs8(&kp.serialize_der())
    }
}

/// Verifies an ASN.1 ECDSA P-256/SHA-256 signature against a raw EC point.
pub fn verify_signature(public_key_raw: &[u8], msg: &[u8], sig: &[u8]) -> bool {
    signature::UnparsedPublicKey::new(&signature::ECDSA_P256_SHA256_ASN1, public_key_raw)
        .verify(msg, sig)
        .is_ok()
}

/// Validity window used for every certificate the suite issues.
pub(crate) fn apply_validity(params: &mut CertificateParams, lifetime: Duration) {
    let now = SystemTime::now();
    params.not_before = (now - Duration::from_secs(3600)).into();
    params.not_after = (now + lifetime).into();
}

pub(crate) const DEFAULT_LIFETIME: Duration = Duration::from_secs(30 * 24 * 3600);

fn distinguished_name(common_name: &str) -> DistinguishedName {
    let mut dn = DistinguishedName::new();
    dn.push(DnType::CommonName, common_name);
    dn
}

/// Leaf certificate parameters for a TLS server answering to `names`.
pub(crate) fn server_params(
    common_name: &str,
    names: &[String],
    extensions: Vec<CustomExtension>,
) -> Result<CertificateParams, PkiError> {
    let mut params = CertificateParams::new(names.to_vec())?;
    params.distinguished_name = distinguished_name(common_name);
    params.extended_key_usages = vec![ExtendedKeyUsagePurpose::ServerAuth];
    params.key_usages = vec![KeyUsagePurpose::DigitalSignature];
    params.custom_extensions = extensions;
    apply_validity(&mut params, DEFAULT_LIFETIME);
    Ok(params)
}

/// Self-signed certificate over `key` with no extensions beyond the basics.
pub fn self_signed_certificate(
    common_name: &str,
    key: &SigningKey,
) -> Result<CertificateDer<'static>, PkiError> {
    let mut params = CertificateParams::new(Vec::<String>::new())?;
    params.distinguished_name = distinguished_name(common_name);
    params.key_usages = vec![KeyUsagePurpose::DigitalSignature, KeyUsagePurpose::KeyCertSign];
    apply_validity(&mut params, DEFAULT_LIFETIME);
    Ok(params.self_signed(&key.rcgen_key())?.der().clone())
}

/// A conventional certificate authority that issues server certificates.
pub struct LocalCa {
    name: String,
    key: KeyPair,
    cert: rcgen::Certificate,
}

impl fmt::Debug for LocalCa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LocalCa").field("name", &self.name).finish()
    }
}

impl LocalCa {
    pub fn new(name: &str) -> Result<Self, PkiError> {
        let key = KeyPair::generate_for(&PKCS_ECDSA_P256_SHA256)?;
        let mut params = CertificateParams::new(Vec::<String>::new())?;
        params.distinguished_name = distinguished_name(name);
        params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        params.key_usages = vec![KeyUsagePurpose::KeyCertSign, KeyUsagePurpose::DigitalSignature];
        apply_validity(&mut params, DEFAULT_LIFETIME);
        let cert = params.self_signed(&key)?;
        Ok(Self {
            name: name.to_string(),
            key,
            cert,
        })
    }

    pub fn certificate(&self) -> CertificateDer<'static> {
        self.cert.der().clone()
    }

    pub fn certificate_pem(&self) -> String {
        self.cert.pem()
    }

    pub(crate) fn sign_params(
        &self,
        params: CertificateParams,
        subject: &SigningKey,
    ) -> Result<CertificateDer<'static>, PkiError> {
        Ok(params
            .signed_by(&subject.rcgen_key(), &self.cert, &self.key)?
            .der()
            .clone())
    }

    /// Issues a plain server certificate for `names` over `key`.
    pub fn issue_server(
        &self,
        names: &[String],
        key: &SigningKey,
    ) -> Result<CertificateDer<'static>, PkiError> {
        let cn = names.first().map(String::as_str).unwrap_or("server");
        self.sign_params(server_params(cn, names, Vec::new())?, key)
    }
}

/// A key plus the certificate chain a TLS server presents for it.
#[derive(Debug, Clone)]
pub struct ServerIdentity {
    pub key: SigningKey,
    pub chain: Vec<CertificateDer<'static>>,
}

impl ServerIdentity {
    pub fn issued_by(ca: &LocalCa, names: &[String]) -> Result<Self, PkiError> {
        let key = SigningKey::generate()?;
        let leaf = ca.issue_server(names, &key)?;
        Ok(Self {
            key,
            chain: vec![leaf],
        })
    }
}

pub fn der_to_pem(der: &[u8]) -> String {
    use base64::Engine;
    let body = base64::engine::general_purpose::STANDARD.encode(der);
    let mut out = String::from("-----BEGIN CERTIFICATE-----\n");
    for chunk in body.as_bytes().chunks(64) {
        out.push_str(std::str::from_utf8(chunk).expect("base64 is ascii"));
        out.push('\n');
    }
    out.push_str("-----END CERTIFICATE-----\n");
    out
}

/// Accepts either a PEM certificate or raw DER bytes.
pub fn certificate_from_pem_or_der(bytes: &[u8]) -> Result<CertificateDer<'static>, PkiError> {
    if bytes.starts_with(b"-----BEGIN") {
        let (_, pem) = x509_parser::pem::parse_x509_pem(bytes).map_err(|e| PkiError::Pem(e.to_string()))?;
        Ok(CertificateDer::from(pem.contents))
    } else {
        Ok(CertificateDer::from(bytes.to_vec()))
    }
}
