//! Simulated remote attestation bound into a TLS certificate.
//!
//! Pipeline: the trusted component generates a key, produces a report that
//! carries its measurement and the hash of that key, the quoting authority
//! signs the report into a quote, and the attestation service checks the
//! quote and signs a verification report. The verification report, its
//! signature and the service's signing certificate ride in three private
//! extensions of the TLS certificate:
//!
//! | OID                         | content                                   |
//! |-----------------------------|-------------------------------------------|
//! | `1.3.6.1.4.1.59917.853.1`   | verification report body (JSON)           |
//! | `1.3.6.1.4.1.59917.853.2`   | ECDSA signature over the body             |
//! | `1.3.6.1.4.1.59917.853.3`   | DER signing certificate of the service    |

mod manifest;
mod policy;

use std::collections::BTreeMap;
use std::time::{SystemTime, UNIX_EPOCH};

use rcgen::CustomExtension;
use rustls::pki_types::CertificateDer;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x509_parser::prelude::*;

pub use manifest::{measure_trusted_component, BuildManifest, EnclaveMeasurement, ManifestError};
pub use policy::{PolicyError, TrustPolicy};

use crate::pki::{self, LocalCa, PkiError, SigningKey};

pub const OID_REPORT: &[u64] = &[1, 3, 6, 1, 4, 1, 59917, 853, 1];
pub const OID_REPORT_SIGNATURE: &[u64] = &[1, 3, 6, 1, 4, 1, 59917, 853, 2];
pub const OID_SIGNING_CERT: &[u64] = &[1, 3, 6, 1, 4, 1, 59917, 853, 3];

const VERDICT_OK: &str = "OK";
const VERDICT_BAD_QUOTE: &str = "SIGNATURE_INVALID";

fn oid_string(oid: &[u64]) -> String {
    oid.iter().map(u64::to_string).collect::<Vec<_>>().join(".")
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer, T: AsRef<[u8]>>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>, T: TryFrom<Vec<u8>>>(d: D) -> Result<T, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(s).map_err(serde::de::Error::custom)?;
        T::try_from(bytes).map_err(|_| serde::de::Error::custom("wrong length"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationReport {
    #[serde(with = "hex_bytes")]
    pub measurement: [u8; 32],
    #[serde(with = "hex_bytes")]
    pub pubkey_hash: [u8; 32],
    pub platform_attrs: BTreeMap<String, String>,
}

impl AttestationReport {
    pub fn new(measurement: EnclaveMeasurement, public_key_spki: &[u8]) -> Self {
        let mut platform_attrs = BTreeMap::new();
        platform_attrs.insert("debug".to_string(), "false".to_string());
        platform_attrs.insert("platform".to_string(), "simulated".to_string());
        Self {
            measurement: measurement.0,
            pubkey_hash: Sha256::digest(public_key_spki).into(),
            platform_attrs,
        }
    }

    pub fn measurement(&self) -> EnclaveMeasurement {
        EnclaveMeasurement(self.measurement)
    }

    fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    pub report: AttestationReport,
    #[serde(with = "hex_bytes")]
    pub quoting_signature: Vec<u8>,
}

/// Signs reports on behalf of the platform (quoting enclave analogue).
#[derive(Debug, Clone)]
pub struct QuotingAuthority {
    key: SigningKey,
}

impl QuotingAuthority {
    pub fn new(key: SigningKey) -> Self {
        Self { key }
    }

    pub fn generate() -> Result<Self, PkiError> {
        Ok(Self::new(SigningKey::generate()?))
    }

    pub fn public_key(&self) -> &[u8] {
        self.key.public_key_raw()
    }

    pub fn quote(&self, report: AttestationReport) -> Result<Quote, PkiError> {
        let quoting_signature = self.key.sign(&report.to_bytes())?;
        Ok(Quote {
            report,
            quoting_signature,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ReportBody {
    id: String,
    timestamp: u64,
    verdict: String,
    quote: Quote,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationReport {
    pub body: Vec<u8>,
    pub ias_signature: Vec<u8>,
    pub signing_cert: CertificateDer<'static>,
}

/// Local stand-in for the attestation service: checks quotes against the
/// quoting authority's key and signs a verdict.
#[derive(Debug, Clone)]
pub struct AttestationService {
    key: SigningKey,
    signing_cert: CertificateDer<'static>,
    quoting_public_key: Vec<u8>,
}

impl AttestationService {
    pub fn new(key: SigningKey, quoting_public_key: &[u8]) -> Result<Self, PkiError> {
        let signing_cert = pki::self_signed_certificate("Simulated Attestation Report Signing", &key)?;
        Ok(Self {
            key,
            signing_cert,
            quoting_public_key: quoting_public_key.to_vec(),
        })
    }

    pub fn generate(quoting: &QuotingAuthority) -> Result<Self, PkiError> {
        Self::new(SigningKey::generate()?, quoting.public_key())
    }

    /// The self-signed certificate clients hold as a trusted root.
    pub fn signing_certificate(&self) -> &CertificateDer<'static> {
        &self.signing_cert
    }

    pub fn verify_quote(&self, quote: &Quote) -> Result<VerificationReport, PkiError> {
        let genuine = pki::verify_signature(
            &self.quoting_public_key,
            &quote.report.to_bytes(),
            &quote.quoting_signature,
        );
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let body = ReportBody {
            id: hex::encode(rand::random::<[u8; 16]>()),
            timestamp,
            verdict: if genuine { VERDICT_OK } else { VERDICT_BAD_QUOTE }.to_string(),
            quote: quote.clone(),
        };
        let body = serde_json::to_vec(&body).expect("body serializes");
        let ias_signature = self.key.sign(&body)?;
        Ok(VerificationReport {
            body,
            ias_signature,
            signing_cert: self.signing_cert.clone(),
        })
    }
}

/// TLS certificate of the trusted component carrying attestation evidence.
#[derive(Debug, Clone)]
pub struct AttestedCertificate {
    /// Self-signed by the enclave key.
    pub self_signed: CertificateDer<'static>,
    /// Same subject key and extensions, issued by a conventional CA, plus
    /// that CA's certificate. Present in dual-signing mode.
    pub ca_signed: Option<(CertificateDer<'static>, CertificateDer<'static>)>,
}

impl AttestedCertificate {
    /// Chain the TLS server presents.
    pub fn presented_chain(&self) -> Vec<CertificateDer<'static>> {
        match &self.ca_signed {
            Some((leaf, ca)) => vec![leaf.clone(), ca.clone()],
            None => vec![self.self_signed.clone()],
        }
    }

    pub fn leaf(&self) -> &CertificateDer<'static> {
        match &self.ca_signed {
            Some((leaf, _)) => leaf,
            None => &self.self_signed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CertificateOptions<'a> {
    pub names: Vec<String>,
    /// Dual-signing: also issue the certificate from this CA.
    pub dual_sign_with: Option<&'a LocalCa>,
}

impl Default for CertificateOptions<'_> {
    fn default() -> Self {
        Self {
            names: vec!["localhost".to_string()],
            dual_sign_with: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error(transparent)]
    Pki(#[from] PkiError),
    #[error("attestation service rejected the quote")]
    QuoteRejected,
}

/// Runs report -> quote -> verification report -> certificate for `keypair`.
pub fn build_attested_certificate(
    keypair: &SigningKey,
    measurement: EnclaveMeasurement,
    quoting: &QuotingAuthority,
    ias: &AttestationService,
    options: &CertificateOptions<'_>,
) -> Result<AttestedCertificate, BuildError> {
    let report = AttestationReport::new(measurement, &keypair.spki_der());
    let quote = quoting.quote(report)?;
    let vr = ias.verify_quote(&quote)?;
    let verdict: ReportBody = serde_json::from_slice(&vr.body).expect("own body parses");
    if verdict.verdict != VERDICT_OK {
        return Err(BuildError::QuoteRejected);
    }

    let extensions = vec![
        CustomExtension::from_oid_content(OID_REPORT, vr.body.clone()),
        CustomExtension::from_oid_content(OID_REPORT_SIGNATURE, vr.ias_signature.clone()),
        CustomExtension::from_oid_content(OID_SIGNING_CERT, vr.signing_cert.to_vec()),
    ];
    let params = pki::server_params("Attested DNS-over-TLS Resolver", &options.names, extensions)?;
    let self_signed = params.clone().self_signed(&keypair.rcgen_key()).map_err(PkiError::from)?.der().clone();
    let ca_signed = match options.dual_sign_with {
        Some(ca) => Some((ca.sign_params(params, keypair)?, ca.certificate())),
        None => None,
    };
    Ok(AttestedCertificate {
        self_signed,
        ca_signed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttestationError {
    #[error("certificate does not parse: {0}")]
    MalformedCertificate(String),
    #[error("certificate carries no attestation evidence")]
    MissingAttestation,
    #[error("attestation signing certificate is not a trusted root")]
    UntrustedAttestationRoot,
    #[error("verification report signature does not verify")]
    BadReportSignature,
    #[error("verification report is malformed")]
    MalformedReport,
    #[error("attestation service did not accept the quote: {0}")]
    QuoteNotOk(String),
    #[error("report public-key hash does not match the certificate key")]
    PubkeyMismatch,
    #[error("certificate is outside its validity period")]
    Expired,
}

/// What a successful certificate verification establishes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedIdentity {
    pub measurement: EnclaveMeasurement,
    /// DER SubjectPublicKeyInfo of the certificate.
    pub public_key: Vec<u8>,
}

/// Checks the attestation evidence in `cert` against `roots`:
/// extract the three extensions, require the signing certificate to be a
/// trusted root, verify the report signature under its key, then check
/// that the report's key hash matches the certificate's subject key.
pub fn verify_attested_certificate(
    cert: &[u8],
    roots: &[CertificateDer<'_>],
) -> Result<VerifiedIdentity, AttestationError> {
    verify_attested_certificate_at(cert, roots, SystemTime::now())
}

pub fn verify_attested_certificate_at(
    cert: &[u8],
    roots: &[CertificateDer<'_>],
    now: SystemTime,
) -> Result<VerifiedIdentity, AttestationError> {
    let (_, parsed) = X509Certificate::from_der(cert)
        .map_err(|e| AttestationError::MalformedCertificate(e.to_string()))?;

    let (report_oid, sig_oid, cert_oid) = (
        oid_string(OID_REPORT),
        oid_string(OID_REPORT_SIGNATURE),
        oid_string(OID_SIGNING_CERT),
    );
    let (mut body, mut signature, mut signing_cert) = (None, None, None);
    for ext in parsed.extensions() {
        let id = ext.oid.to_id_string();
        let slot = if id == report_oid {
            &mut body
        } else if id == sig_oid {
            &mut signature
        } else if id == cert_oid {
            &mut signing_cert
        } else {
            continue;
        };
        *slot = Some(ext.value);
    }
    let (Some(body), Some(signature), Some(signing_cert)) = (body, signature, signing_cert) else {
        return Err(AttestationError::MissingAttestation);
    };

    if !roots.iter().any(|r| r.as_ref() == signing_cert) {
        return Err(AttestationError::UntrustedAttestationRoot);
    }
    let (_, root) = X509Certificate::from_der(signing_cert)
        .map_err(|e| AttestationError::MalformedCertificate(e.to_string()))?;
    let root_key = &root.public_key().subject_public_key.data;
    if !pki::verify_signature(root_key, body, signature) {
        return Err(AttestationError::BadReportSignature);
    }

    let body: ReportBody =
        serde_json::from_slice(body).map_err(|_| AttestationError::MalformedReport)?;
    if body.verdict != VERDICT_OK {
        return Err(AttestationError::QuoteNotOk(body.verdict));
    }
    let spki = parsed.public_key().raw;
    let key_hash: [u8; 32] = Sha256::digest(spki).into();
    if key_hash != body.quote.report.pubkey_hash {
        return Err(AttestationError::PubkeyMismatch);
    }

    let secs = now.duration_since(UNIX_EPOCH).map(|d| d.as_secs() as i64).unwrap_or(0);
    let at = ASN1Time::from_timestamp(secs).map_err(|_| AttestationError::Expired)?;
    if !parsed.validity().is_valid_at(at) {
        return Err(AttestationError::Expired);
    }

    Ok(VerifiedIdentity {
        measurement: body.quote.report.measurement(),
        public_key: spki.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectReason {
    MeasurementNotAllowed(EnclaveMeasurement),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrustDecision {
    Accept,
    Reject(RejectReason),
}

pub fn decide_trust(identity: &VerifiedIdentity, policy: &TrustPolicy) -> TrustDecision {
    if policy.allowed_measurements.contains(&identity.measurement) {
        TrustDecision::Accept
    } else {
        TrustDecision::Reject(RejectReason::MeasurementNotAllowed(identity.measurement))
    }
}

/// Everything a trusted component needs to present an attested identity.
#[derive(Debug, Clone)]
pub struct EnclaveIdentity {
    pub key: SigningKey,
    pub measurement: EnclaveMeasurement,
    pub certificate: AttestedCertificate,
}

impl EnclaveIdentity {
    /// Generates a fresh key inside the trusted component and runs the
    /// attestation pipeline for it.
    pub fn provision(
        measurement: EnclaveMeasurement,
        authorities: &Authorities,
        options: &CertificateOptions<'_>,
    ) -> Result<Self, BuildError> {
        let key = SigningKey::generate()?;
        let certificate =
            build_attested_certificate(&key, measurement, &authorities.quoting, &authorities.ias, options)?;
        Ok(Self {
            key,
            measurement,
            certificate,
        })
    }
}

/// Quoting authority plus attestation service, generated together.
#[derive(Debug, Clone)]
pub struct Authorities {
    pub quoting: QuotingAuthority,
    pub ias: AttestationService,
}

impl Authorities {
    pub fn generate() -> Result<Self, PkiError> {
        let quoting = QuotingAuthority::generate()?;
        let ias = AttestationService::generate(&quoting)?;
        Ok(Self { quoting, ias })
    }

    pub fn root(&self) -> CertificateDer<'static> {
        self.ias.signing_certificate().clone()
    }
}
