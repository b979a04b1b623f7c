#![allow(dead_code)]

pub mod gen;
pub mod workload;

use std::io::{Read, Write};
use std::net::{Ipv4Addr, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use pdot::attestation::{
    build_attested_certificate, AttestedCertificate, Authorities, BuildManifest, CertificateOptions,
    EnclaveMeasurement, TrustPolicy, OID_REPORT, OID_REPORT_SIGNATURE, OID_SIGNING_CERT,
};
use pdot::pki::{LocalCa, SigningKey};
use pdot::tls;
use pdot::wire::{self, DnsMessage, DnsQuestion, RecordType};
use rand::Rng;
use rcgen::{CertificateParams, CustomExtension, DistinguishedName, DnType, KeyPair};
use rustls::pki_types::{CertificateDer, ServerName};
use rustls::{ClientConnection, ServerConnection, StreamOwned};
use x509_parser::prelude::{FromDer, X509Certificate};

pub fn measurement(tag: &str) -> EnclaveMeasurement {
    BuildManifest::new(tag).with_unit("src/resolver.rs", tag.as_bytes()).measure()
}

pub fn a_query(id: u16, name: &str) -> DnsMessage {
    DnsMessage::query(id, DnsQuestion::new(name.parse().unwrap(), RecordType::A), true)
}

/// The ways a certificate can fail attestation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tamper {
    MissingAttestation,
    WrongMeasurement,
    MutatedSignature,
    MismatchedPubkey,
}

pub const TAMPERS: [Tamper; 4] = [
    Tamper::MissingAttestation,
    Tamper::WrongMeasurement,
    Tamper::MutatedSignature,
    Tamper::MismatchedPubkey,
];

fn extension_values(cert: &[u8]) -> Vec<(&'static [u64], Vec<u8>)> {
    let (_, parsed) = X509Certificate::from_der(cert).unwrap();
    [OID_REPORT, OID_REPORT_SIGNATURE, OID_SIGNING_CERT]
        .into_iter()
        .map(|oid| {
            let dotted = oid.iter().map(u64::to_string).collect::<Vec<_>>().join(".");
            let value = parsed
                .extensions()
                .iter()
                .find(|e| e.oid.to_id_string() == dotted)
                .expect("attested certificate carries all extensions")
                .value
                .to_vec();
            (oid, value)
        })
        .collect()
}

/// Self-signed certificate over `key` carrying `extensions`.
pub fn self_signed_with(key: &SigningKey, extensions: Vec<(&'static [u64], Vec<u8>)>) -> CertificateDer<'static> {
    let mut params = CertificateParams::new(vec!["localhost".to_string()]).unwrap();
    let mut dn = DistinguishedName::new();
    dn.push(DnType::CommonName, "Resolver");
    params.distinguished_name = dn;
    params.custom_extensions = extensions
        .into_iter()
        .map(|(oid, v)| CustomExtension::from_oid_content(oid, v))
        .collect();
    let kp = KeyPair::try_from(key.pkcs8_der()).unwrap();
    params.self_signed(&kp).unwrap().der().clone()
}

/// A genuine attested certificate for `m`.
pub fn genuine(auth: &Authorities, m: EnclaveMeasurement) -> (SigningKey, AttestedCertificate) {
    let key = SigningKey::generate().unwrap();
    let cert = build_attested_certificate(&key, m, &auth.quoting, &auth.ias, &CertificateOptions::default()).unwrap();
    (key, cert)
}

/// Certificate and key a server would present after the given tampering,
/// against a policy that allows `allowed` under `auth`.
pub fn forge<R: Rng>(
    kind: Tamper,
    auth: &Authorities,
    allowed: EnclaveMeasurement,
    rng: &mut R,
) -> (Vec<CertificateDer<'static>>, SigningKey) {
    match kind {
        Tamper::MissingAttestation => {
            let key = SigningKey::generate().unwrap();
            (vec![self_signed_with(&key, Vec::new())], key)
        }
        Tamper::WrongMeasurement => {
            let other = measurement(&format!("rogue-{}", rng.gen::<u64>()));
            assert_ne!(other, allowed);
            let (key, cert) = genuine(auth, other);
            (cert.presented_chain(), key)
        }
        Tamper::MutatedSignature => {
            let (key, cert) = genuine(auth, allowed);
            let mut exts = extension_values(&cert.self_signed);
            let sig = &mut exts[1].1;
            let byte = rng.gen_range(0..sig.len());
            sig[byte] ^= 1 << rng.gen_range(0..8);
            (vec![self_signed_with(&key, exts)], key)
        }
        Tamper::MismatchedPubkey => {
            let (_, cert) = genuine(auth, allowed);
            let exts = extension_values(&cert.self_signed);
            let attacker = SigningKey::generate().unwrap();
            (vec![self_signed_with(&attacker, exts)], attacker)
        }
    }
}

/// TLS server presenting a fixed chain. Counts application bytes it
/// decrypts, which must stay zero when clients refuse the handshake.
pub struct CertServer {
    pub addr: SocketAddr,
    pub plaintext_bytes: Arc<AtomicUsize>,
}

impl CertServer {
    /// Serves exactly `connections` connections, then exits.
    pub fn start(chain: Vec<CertificateDer<'static>>, key: &SigningKey, connections: usize) -> Self {
        let config = tls::server_config(chain, key).unwrap();
        let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, 0)).unwrap();
        let addr = listener.local_addr().unwrap();
        let plaintext_bytes = Arc::new(AtomicUsize::new(0));
        let counter = plaintext_bytes.clone();
        thread::spawn(move || {
            for stream in listener.incoming().take(connections) {
                let Ok(stream) = stream else { continue };
                let _ = stream.set_read_timeout(Some(Duration::from_secs(5)));
                let mut tls = StreamOwned::new(ServerConnection::new(config.clone()).unwrap(), stream);
                let mut buf = [0u8; 1024];
                while let Ok(n) = tls.read(&mut buf) {
                    if n == 0 {
                        break;
                    }
                    counter.fetch_add(n, Ordering::SeqCst);
                }
            }
        });
        Self { addr, plaintext_bytes }
    }
}

/// A verified TLS connection that sends and reads frames without
/// rewriting ids, so the order of responses on the wire is visible.
pub struct RawClient {
    tls: StreamOwned<ClientConnection, TcpStream>,
}

impl RawClient {
    pub fn connect(addr: SocketAddr, policy: &TrustPolicy) -> Self {
        let (config, _) = tls::attested_client_config(policy).unwrap();
        let conn = ClientConnection::new(config, ServerName::try_from("localhost").unwrap()).unwrap();
        let sock = TcpStream::connect(addr).unwrap();
        sock.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
        let mut tls = StreamOwned::new(conn, sock);
        while tls.conn.is_handshaking() {
            tls.conn.complete_io(&mut tls.sock).unwrap();
        }
        Self { tls }
    }

    pub fn send(&mut self, msg: &DnsMessage) {
        self.send_raw(&msg.encode().unwrap());
    }

    pub fn send_raw(&mut self, payload: &[u8]) {
        let framed = wire::frame(payload).unwrap();
        self.tls.write_all(&framed).unwrap();
        self.tls.flush().unwrap();
    }

    pub fn recv(&mut self) -> Option<DnsMessage> {
        let raw = wire::unframe(&mut self.tls).ok()??;
        Some(DnsMessage::decode(&raw).unwrap())
    }

    pub fn local_is_open(&self) -> bool {
        self.tls.sock.peer_addr().is_ok()
    }
}

/// Conventional CA plus a plain (non-attested) certificate from it.
pub fn plain_ca_chain() -> (LocalCa, Vec<CertificateDer<'static>>, SigningKey) {
    let ca = LocalCa::new("Plain CA").unwrap();
    let key = SigningKey::generate().unwrap();
    let leaf = ca.issue_server(&["localhost".into()], &key).unwrap();
    let chain = vec![leaf, ca.certificate()];
    (ca, chain, key)
}
