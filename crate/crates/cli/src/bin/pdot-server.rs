//! Runs the attested resolver behind the untrusted host listener.
//!
//! Without root hints in the config file an embedded name-server
//! simulation is started and used as the upstream hierarchy.

use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Parser;
use pdot::attestation::{measure_trusted_component, Authorities, CertificateOptions, EnclaveIdentity};
use pdot::enclave::{self, ResolverConfig};
use pdot::host::{serve_control, AdversaryMode, ResolverServer};
use pdot::nssim::{SimOptions, Simulation, ZoneSpec};
use pdot::pki::{self, LocalCa};

#[derive(Parser)]
#[command(about = "Attested DNS-over-TLS recursive resolver")]
struct Args {
    /// Resolver config file (key = value).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8853")]
    bind: SocketAddr,
    /// none | drop_inbound | delay:<ms> | redirect:<ip:port>
    #[arg(long, default_value = "none")]
    adversary: AdversaryMode,
    /// Serve resolver statistics as one JSON line per connection.
    #[arg(long)]
    control: Option<SocketAddr>,
    /// CA certificate for upstream name servers given as root hints.
    #[arg(long)]
    upstream_ca: Option<PathBuf>,
    /// Zone for the embedded simulation.
    #[arg(long)]
    zone: Option<PathBuf>,
    /// Measure this manifest instead of the built-in trusted component.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Also sign the certificate with a conventional CA for legacy clients.
    #[arg(long)]
    dual_sign: bool,
    /// Where to write policy.conf, stub.conf and the trust roots.
    #[arg(long, default_value = "pdot-state")]
    state_dir: PathBuf,
    /// Print the measurement and exit.
    #[arg(long)]
    print_measurement: bool,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();

    let measurement = match &args.manifest {
        Some(path) => measure_trusted_component(&std::fs::read(path)?)
            .with_context(|| format!("measuring {}", path.display()))?,
        None => enclave::trusted_measurement(),
    };
    if args.print_measurement {
        println!("{measurement}");
        return Ok(());
    }

    let mut config = match &args.config {
        Some(path) => ResolverConfig::load(path)?,
        None => ResolverConfig::default(),
    };
    let mut sim = None;
    let upstream_roots = if config.root_hints.is_empty() {
        let zone = match &args.zone {
            Some(path) => ZoneSpec::load(path)?,
            None => ZoneSpec::three_level(&["example.com"]),
        };
        let s = Simulation::start(&zone, SimOptions::default())?;
        config.root_hints = vec![s.root_hint()];
        log::info!("embedded name-server simulation, root at {}", s.root_hint());
        let roots = vec![s.ca_certificate()];
        sim = Some(s);
        roots
    } else {
        let Some(ca) = &args.upstream_ca else {
            bail!("root hints are configured, so --upstream-ca is required");
        };
        vec![pki::certificate_from_pem_or_der(&std::fs::read(ca)?)?]
    };

    let authorities = Authorities::generate()?;
    let legacy_ca = if args.dual_sign {
        Some(LocalCa::new("Legacy DNS-over-TLS CA")?)
    } else {
        None
    };
    let options = CertificateOptions {
        dual_sign_with: legacy_ca.as_ref(),
        ..CertificateOptions::default()
    };
    let identity = EnclaveIdentity::provision(measurement, &authorities, &options)?;
    let server = ResolverServer::start(args.bind, config, identity, &upstream_roots)?;
    server.set_adversary_mode(args.adversary);

    std::fs::create_dir_all(&args.state_dir)?;
    let policy_path = args.state_dir.join("policy.conf");
    pdot::attestation::TrustPolicy::attested([measurement], vec![authorities.root()]).save(&policy_path)?;
    let mut stub_conf = format!("resolver = localhost@{}\npolicy = policy.conf\n", server.addr());
    if let Some(ca) = &legacy_ca {
        std::fs::write(args.state_dir.join("legacy-ca.pem"), ca.certificate_pem())?;
        stub_conf.push_str("legacy_ca = legacy-ca.pem\n");
    }
    std::fs::write(args.state_dir.join("stub.conf"), stub_conf)?;

    let _control = match args.control {
        Some(addr) => {
            let c = serve_control(addr, server.gate().clone())?;
            log::info!("control socket on {}", c.addr());
            Some(c)
        }
        None => None,
    };
    log::info!(
        "resolver on {} (measurement {measurement}, adversary {}); stub config in {}",
        server.addr(),
        server.adversary_mode(),
        args.state_dir.join("stub.conf").display()
    );
    let _sim = sim;
    loop {
        std::thread::park();
    }
}
