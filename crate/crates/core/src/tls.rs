//! rustls configuration shared by the resolver, the stub and the simulator.

use std::sync::Arc;

use parking_lot::Mutex;
use rustls::client::danger::{HandshakeSignatureValid, ServerCertVerified, ServerCertVerifier};
use rustls::crypto::{self, CryptoProvider};
use rustls::pki_types::{CertificateDer, ServerName, UnixTime};
use rustls::{CertificateError, ClientConfig, DigitallySignedStruct, RootCertStore, ServerConfig, SignatureScheme};

use crate::attestation::{
    decide_trust, verify_attested_certificate, AttestationError, RejectReason, TrustDecision, TrustPolicy,
    VerifiedIdentity,
};
use crate::pki::SigningKey;

pub fn provider() -> Arc<CryptoProvider> {
    Arc::new(crypto::ring::default_provider())
}

/// Server configuration presenting `chain`. Session tickets are disabled,
/// which keeps the number of records per exchange fixed.
pub fn server_config(
    chain: Vec<CertificateDer<'static>>,
    key: &SigningKey,
) -> Result<Arc<ServerConfig>, rustls::Error> {
    let mut config = ServerConfig::builder_with_provider(provider())
        .with_safe_default_protocol_versions()?
        .with_no_client_auth()
        .with_single_cert(chain, key.private_key_der())?;
    config.send_tls13_tickets = 0;
    Ok(Arc::new(config))
}

/// Client configuration doing ordinary web-PKI validation against `roots`.
pub fn webpki_client_config(roots: &[CertificateDer<'static>]) -> Result<Arc<ClientConfig>, rustls::Error> {
    let mut store = RootCertStore::empty();
    for root in roots {
        store.add(root.clone())?;
    }
    let config = ClientConfig::builder_with_provider(provider())
        .with_safe_default_protocol_versions()?
        .with_root_certificates(store)
        .with_no_client_auth();
    Ok(Arc::new(config))
}

/// Why an attested handshake was refused.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VerificationFailure {
    #[error(transparent)]
    Attestation(#[from] AttestationError),
    #[error("measurement {0} is not in the allowlist")]
    MeasurementNotAllowed(crate::attestation::EnclaveMeasurement),
}

/// Outcome of certificate verification for one handshake.
pub type VerificationSlot = Arc<Mutex<Option<Result<VerifiedIdentity, VerificationFailure>>>>;

/// Certificate verifier that trusts a server for the code it runs: the
/// attestation evidence must verify and its measurement must be allowed.
/// The server name is not consulted.
#[derive(Debug)]
pub struct AttestedServerVerifier {
    policy: TrustPolicy,
    provider: Arc<CryptoProvider>,
    outcome: VerificationSlot,
}

impl AttestedServerVerifier {
    pub fn new(policy: TrustPolicy) -> Self {
        Self {
            policy,
            provider: provider(),
            outcome: Arc::default(),
        }
    }

    pub fn outcome(&self) -> VerificationSlot {
        self.outcome.clone()
    }

    fn check(&self, cert: &CertificateDer<'_>) -> Result<VerifiedIdentity, VerificationFailure> {
        let identity = verify_attested_certificate(cert, &self.policy.trusted_attestation_roots)?;
        match decide_trust(&identity, &self.policy) {
            TrustDecision::Accept => Ok(identity),
            TrustDecision::Reject(RejectReason::MeasurementNotAllowed(m)) => {
                Err(VerificationFailure::MeasurementNotAllowed(m))
            }
        }
    }
}

impl ServerCertVerifier for AttestedServerVerifier {
    fn verify_server_cert(
        &self,
        end_entity: &CertificateDer<'_>,
        _intermediates: &[CertificateDer<'_>],
        _server_name: &ServerName<'_>,
        _ocsp_response: &[u8],
        _now: UnixTime,
    ) -> Result<ServerCertVerified, rustls::Error> {
        let result = self.check(end_entity);
        let ok = result.is_ok();
        *self.outcome.lock() = Some(result);
        if ok {
            Ok(ServerCertVerified::assertion())
        } else {
            Err(rustls::Error::InvalidCertificate(CertificateError::ApplicationVerificationFailure))
        }
    }

    fn verify_tls12_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        crypto::verify_tls12_signature(message, cert, dss, &self.provider.signature_verification_algorithms)
    }

    fn verify_tls13_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        crypto::verify_tls13_signature(message, cert, dss, &self.provider.signature_verification_algorithms)
    }

    fn supported_verify_schemes(&self) -> Vec<SignatureScheme> {
        self.provider.signature_verification_algorithms.supported_schemes()
    }
}

/// Client configuration whose verifier enforces `policy`, plus the slot it
/// reports into. One per handshake.
pub fn attested_client_config(policy: &TrustPolicy) -> Result<(Arc<ClientConfig>, VerificationSlot), rustls::Error> {
    let verifier = Arc::new(AttestedServerVerifier::new(policy.clone()));
    let slot = verifier.outcome();
    let config = ClientConfig::builder_with_provider(provider())
        .with_safe_default_protocol_versions()?
        .dangerous()
        .with_custom_certificate_verifier(verifier)
        .with_no_client_auth();
    Ok((Arc::new(config), slot))
}
