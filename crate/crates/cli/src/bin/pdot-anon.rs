use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;

use anyhow::Result;
use clap::{Parser, Subcommand};
use pdot::anon::{self, AnonymityDistribution};
use pdot::nssim::{reference_composition, ZoneSpec};
use pdot::stub::{Stub, StubConfig};

#[derive(Parser)]
#[command(about = "Anonymity sets of authoritative name servers")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Derive R per server and the fraction of domains with R >= N.
    Compute {
        /// CSV with header `domain,ans_id`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,100")]
        thresholds: Vec<usize>,
    },
    /// Build a mapping by asking a resolver for each domain's NS records.
    Collect {
        /// One domain per line.
        #[arg(long)]
        domains: PathBuf,
        /// Lookups per second.
        #[arg(long, default_value_t = 5.0)]
        rate: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "pdot-state/stub.conf")]
        config: PathBuf,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Write the mapping of a zone file, or of a synthetic reference zone.
    Export {
        #[arg(long)]
        zone: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_summary(dist: &AnonymityDistribution, thresholds: &[usize]) {
    println!("{} domains on {} servers", dist.domains(), dist.r_of_ans.len());
    for (n, f) in dist.summary(thresholds) {
        println!("R >= {n:<6} {:>7.2}%", f * 100.0);
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Args::parse().command {
        Command::Compute { input, out, thresholds } => {
            let map = anon::load_mapping(&input)?;
            if map.duplicates > 0 {
                eprintln!("ignored {} duplicate rows", map.duplicates);
            }
            let dist = anon::compute_distribution(&map)?;
            anon::emit_cdf(&dist, File::create(&out)?)?;
            print_summary(&dist, &thresholds);
        }
        Command::Collect { domains, rate, out, config, workers } => {
            let list = anon::read_domain_list(BufReader::new(File::open(&domains)?))?;
            let stub = Stub::new(StubConfig::load(&config)?)?;
            let stop = AtomicBool::new(false);
            let report = anon::collect_mapping_live(&list, rate, workers, &out, &stop, |d| anon::ns_lookup(&stub, d))?;
            stub.close();
            println!(
                "wrote {} rows, skipped {} already present, {} failures",
                report.written,
                report.skipped,
                report.failures.len()
            );
            let mut err = io::stderr().lock();
            for (domain, reason) in &report.failures {
                writeln!(err, "{domain}: {reason}")?;
            }
        }
        Command::Export { zone, seed, out } => {
            let spec = match zone {
                Some(path) => ZoneSpec::load(&path)?,
                None => ZoneSpec::synthetic(&reference_composition(), seed),
            };
            spec.export_mapping(File::create(&out)?)?;
        }
    }
    Ok(())
}
