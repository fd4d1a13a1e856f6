use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use dyadhops_cli::commands::{self, RunFlags};
use dyadhops_cli::format::OutputDir;
use dyadhops_cli::RunConfig;

#[derive(Parser)]
#[command(name = "dyadhops", version, about = "Linear and third-order response of exciton aggregates")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration, or a JSON sidecar from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides `sampling.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Merge trajectory sums strictly in trajectory order.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides `output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the sampled noise against the bath correlation function.
    NoiseCheck,
    /// Linear response with both estimators and the absorption spectrum.
    Linear,
    /// Third-order response grids and 2D spectra.
    #[command(name = "2d")]
    TwoD,
    /// Deterministic hierarchy reference spectra.
    HeomReference {
        /// Skip the depth + 2 convergence run.
        #[arg(long)]
        no_convergence: bool,
        /// Output directory of a `2d` run to compare with.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Bootstrap error curves of the 2D signals.
    ErrorAnalysis {
        /// Reuse a trajectory container instead of running new trajectories.
        #[arg(long)]
        trajectories: Option<PathBuf>,
    },
}

const EXIT_CHECK_FAILED: u8 = 3;

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.sampling.seed = s;
    }
    if let Some(o) = &cli.common.out {
        cfg.output = o.clone();
    }
    cfg.validate()?;
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let flags = RunFlags {
        deterministic: cli.common.deterministic,
    };
    let (name, method) = match &cli.command {
        Command::NoiseCheck => ("noise-check", "spectral"),
        Command::Linear => ("linear", "hops"),
        Command::TwoD => ("2d", "hops"),
        Command::HeomReference { .. } => ("heom-reference", "heom"),
        Command::ErrorAnalysis { .. } => ("error-analysis", "hops"),
    };
    let out = OutputDir::create(&cfg.output, &cfg, name, method, flags.deterministic)?;
    match cli.command {
        Command::NoiseCheck => {
            let r = commands::noise_check(&cfg, &out)?;
            println!("noise-check: {}", if r.pass { "PASS" } else { "FAIL" });
            if !r.pass {
                return Ok(ExitCode::from(EXIT_CHECK_FAILED));
            }
        }
        Command::Linear => {
            let s = commands::linear(&cfg, &flags, &out)?;
            println!("linear: {} trajectories, estimators differ by at most {:.2} SE", s.n_traj, s.max_deviation_sigma);
        }
        Command::TwoD => {
            let s = commands::two_d(&cfg, &flags, &out)?;
            println!("2d: {} trajectories, {} failed", s.n_traj, s.failed.len());
        }
        Command::HeomReference { no_convergence, compare } => {
            let s = commands::heom_reference(&cfg, &out, !no_convergence, compare.as_deref())?;
            println!("heom-reference: {} auxiliaries, trace drift {:.2e}", s.n_auxiliaries, s.trace_drift);
        }
        Command::ErrorAnalysis { trajectories } => {
            let s = commands::error_analysis(&cfg, &flags, &out, trajectories.as_deref())?;
            for c in &s.curves {
                println!("T = {}: slopes GSB {:.3} SE {:.3} ESA {:.3}", c.waiting, c.slopes[0], c.slopes[1], c.slopes[2]);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let err = serde_json::json!({
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{err}");
            ExitCode::FAILURE
        }
    }
}
