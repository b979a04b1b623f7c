use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pdot::anon::read_domain_list;
use pdot::bench::{self, StartMode};
use pdot::nssim::ZoneSpec;
use pdot::testbed::{Testbed, TestbedOptions};
use pdot::wire::DomainName;

#[derive(Parser)]
#[command(about = "Latency, throughput and cache experiments on a local testbed")]
struct Args {
    /// Output directory for CSV samples and JSON summaries.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    /// Per-response delay of every simulated name server.
    #[arg(long, global = true)]
    ns_delay_ms: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Latency {
        #[arg(long, default_value = "warm")]
        mode: StartMode,
        /// One domain per line; defaults to probe0.com..probe9.com.
        #[arg(long)]
        domains: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        repeats: usize,
    },
    Throughput {
        #[arg(long, default_value_t = 1)]
        clients: usize,
        /// Aggregate queries per second.
        #[arg(long, default_value_t = 100.0)]
        rate: f64,
        #[arg(long, default_value_t = 60)]
        duration: u64,
        /// Keep the resolver cache on (every query is then a hit).
        #[arg(long)]
        cache: bool,
    },
    Cache {
        #[arg(long, default_value_t = 100)]
        prepopulate: usize,
        #[arg(long, default_value_t = 10)]
        probes: usize,
        #[arg(long, default_value_t = 20)]
        misses: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
    },
}

fn delay(args_delay: Option<u64>, default_ms: u64) -> Duration {
    Duration::from_millis(args_delay.unwrap_or(default_ms))
}

fn names(list: &[DomainName]) -> Vec<String> {
    list.iter().map(ToString::to_string).collect()
}

fn create(dir: &Path, name: &str) -> Result<File> {
    let path = dir.join(name);
    File::create(&path).with_context(|| format!("creating {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    std::fs::create_dir_all(&args.out)?;
    match args.command {
        Command::Latency { mode, domains, repeats } => {
            let domains: Vec<DomainName> = match domains {
                Some(path) => read_domain_list(BufReader::new(File::open(&path)?))?,
                None => (0..10).map(|i| format!("probe{i}.com").parse()).collect::<Result<_, _>>()?,
            };
            let warmup: DomainName = "warmup.com".parse()?;
            let mut zone_names = names(&domains);
            zone_names.push(warmup.to_string());
            let refs: Vec<&str> = zone_names.iter().map(String::as_str).collect();
            let bed = Testbed::start(TestbedOptions {
                zone: ZoneSpec::three_level(&refs),
                ns_delay: delay(args.ns_delay_ms, 0),
                ..TestbedOptions::default()
            })?;
            let rows = bench::run_latency(&bed.stub_config(), mode, &domains, repeats, &warmup)?;
            let tag = format!("latency_{}", serde_json::to_value(mode)?.as_str().unwrap_or("run"));
            bench::write_latency_csv(create(&args.out, &format!("{tag}.csv"))?, &rows)?;
            let stats: Vec<_> = rows.iter().map(|r| serde_json::json!({"domain": r.domain, "stats": r.stats})).collect();
            bench::write_json(&args.out.join(format!("{tag}.json")), &stats)?;
            for r in &rows {
                println!("{:<24} median {:>8.2} ms  iqr [{:.2}, {:.2}]", r.domain, r.stats.median, r.stats.q1, r.stats.q3);
            }
        }
        Command::Throughput { clients, rate, duration, cache } => {
            let mut options = TestbedOptions {
                ns_delay: delay(args.ns_delay_ms, 10),
                ..TestbedOptions::default()
            };
            options.resolver.cache_enabled = cache;
            let bed = Testbed::start(options)?;
            let domain: DomainName = "example.com".parse()?;
            let run = bench::run_throughput(&bed.stub_config(), clients, rate, Duration::from_secs(duration), &domain)?;
            let tag = format!("throughput_c{clients}_r{rate}");
            bench::write_throughput_csv(create(&args.out, &format!("{tag}.csv"))?, &run)?;
            bench::write_json(&args.out.join(format!("{tag}.json")), &run)?;
            println!(
                "clients {clients} rate {rate} qps: sent {} failures {} mean {:.2} ms sustainable {}",
                run.sent, run.failures, run.mean_latency_ms, run.sustainable
            );
        }
        Command::Cache { prepopulate, probes, misses, repeats } => {
            let bed = Testbed::start(TestbedOptions {
                zone: bench::cache_zone(probes, misses),
                ns_delay: delay(args.ns_delay_ms, 50),
                ..TestbedOptions::default()
            })?;
            let probe_names: Vec<DomainName> =
                (0..probes).map(|i| format!("probe{i}.com").parse()).collect::<Result<_, _>>()?;
            let miss_names: Vec<DomainName> =
                (0..misses).map(|i| format!("miss{i}.com").parse()).collect::<Result<_, _>>()?;
            let records = bench::prepopulation(&probe_names, prepopulate);
            let eval = bench::run_cache_eval(&bed, &records, &probe_names, &miss_names, repeats)?;
            let tag = format!("cache_{prepopulate}");
            bench::write_cache_csv(create(&args.out, &format!("{tag}.csv"))?, &eval)?;
            bench::write_json(&args.out.join(format!("{tag}.json")), &eval)?;
            println!(
                "prepopulated {}: hit median {:.2} ms, miss median {:.2} ms",
                eval.prepopulated, eval.hit.median, eval.miss.median
            );
        }
    }
    Ok(())
}
