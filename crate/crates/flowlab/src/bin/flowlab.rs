use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowlab::harness::{run_experiment, ExperimentConfig, EXPERIMENTS};
use flowlab::metrics::{certify_bounds, CompactBox, Kernel};
use flowlab::transport::GridMeasure;

#[derive(Parser)]
#[command(name = "flowlab", about = "Invertible-flow experiments and IPM certificates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its JSON report.
    Run {
        /// Experiment name (see `flowlab list`).
        experiment: String,
        /// Flat key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// RNG seed; fixed seed means byte-identical report.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path for the JSON report.
        #[arg(long)]
        out: PathBuf,
    },
    /// List available experiments.
    List,
    /// Certify the IPM inequality chain between two saved grid measures.
    CertifyIpm {
        /// Path to the first measure file.
        #[arg(long)]
        mu: PathBuf,
        /// Path to the second measure file.
        #[arg(long)]
        nu: PathBuf,
        /// Compact box as lo,hi per axis: lo,hi,lo,hi,…
        #[arg(long, value_name = "lo,hi,…", allow_hyphen_values = true)]
        r#box: String,
        /// Gaussian kernel bandwidth parameter.
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
    },
}

fn parse_box(spec: &str) -> anyhow::Result<CompactBox> {
    let nums: Vec<f64> = spec
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| anyhow::anyhow!("bad box spec {spec:?}: {e}"))?;
    if nums.len() < 2 || nums.len() % 2 != 0 {
        anyhow::bail!("box spec needs an even number of values (lo,hi per axis)");
    }
    Ok(CompactBox::new(nums.chunks(2).map(|c| (c[0], c[1])).collect())?)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::List => {
            for name in EXPERIMENTS {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Run { experiment, config, seed, out } => {
            let mut cfg = ExperimentConfig::new(&experiment, seed, out.clone());
            if let Some(path) = config {
                cfg.load_params(&path)?;
            }
            let report = run_experiment(&cfg)?;
            report.write(&out)?;
            println!(
                "{}: {} (report written to {})",
                experiment,
                if report.pass { "PASS" } else { "FAIL" },
                out.display()
            );
            Ok(if report.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::CertifyIpm { mu, nu, r#box, gamma } => {
            let mu = GridMeasure::load(&mu)?;
            let nu = GridMeasure::load(&nu)?;
            let k = parse_box(&r#box)?;
            let report = certify_bounds(&mu, &nu, &k, &Kernel::Gaussian { gamma })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.all_pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
