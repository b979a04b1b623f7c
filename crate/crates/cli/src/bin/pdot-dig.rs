use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::Parser;
use pdot::attestation::TrustPolicy;
use pdot::stub::{Stub, StubConfig};
use pdot::wire::{DnsQuestion, DomainName, Rcode, RecordType};

#[derive(Parser)]
#[command(about = "Query a resolver over attested DNS-over-TLS")]
struct Args {
    name: DomainName,
    #[arg(long = "type", default_value = "A")]
    qtype: RecordType,
    /// Stub config file (resolver, policy, legacy_ca, query_timeout_ms).
    #[arg(long, default_value = "pdot-state/stub.conf")]
    config: PathBuf,
    /// Skip attestation checks and rely on the conventional CA chain.
    #[arg(long)]
    legacy: bool,
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let mut config = StubConfig::load(&args.config)?;
    if args.legacy {
        config.policy = TrustPolicy::legacy();
    }
    let stub = Stub::new(config)?;
    let started = std::time::Instant::now();
    let reply = stub.resolve(DnsQuestion::new(args.name, args.qtype));
    print!("{reply}");
    println!(";; Query time: {} msec", started.elapsed().as_millis());
    stub.close();
    Ok(if reply.rcode() == Rcode::ServFail {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}
