//! Command-line front end. Exit codes: 0 success, 2 usage, 3 config
//! invariant violation, 4 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::config::parse_variant;
use super::{ablate_msth, ablation_csv, evaluate, EvalOptions, RunConfig};
use crate::error::Error;
use crate::onlinehpr::{curve_csv, run_improvement, Strategy};
use crate::rng;
use crate::trainkit::{generate_demos, trace_csv, train_stage1, train_stage2, Dataset, ModelBundle, TrainConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "act2goal", version, about = "Goal-conditioned world-model policy at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record scripted-expert demonstrations.
    GenDemos {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, alias = "episodes")]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Joint world-model and action training; writes the bundle and a loss trace.
    TrainStage1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// End-to-end action-loss fine-tuning of a stage-1 bundle.
    TrainStage2 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-loop evaluation on a fixed seed block.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        disturb: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// MSTH policy vs fixed-horizon baseline per length class.
    AblateMsth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Hindsight-relabeled adapter rounds with evaluation after each.
    OnlineImprove {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        rounds: usize,
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        variant: Option<String>,
        /// Round index of `--bundle` when it is a snapshot to continue from.
        #[arg(long, default_value_t = 0)]
        resume_after: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, body: &str) -> Result<(), Failure> {
    fs::write(path, body).map_err(|e| Failure::Lib(Error::Io(e)))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenDemos { config, n, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let data = generate_demos(&cfg.env, n, rng::derive_named(cfg.seed, "demos"))?;
            data.save(&out)?;
            eprintln!("wrote {} trajectories to {}", data.len(), out.display());
        }
        Command::TrainStage1 { config, dataset, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let data = Dataset::load(&dataset)?;
            let tc = TrainConfig {
                steps: cfg.budget.stage1_steps,
                ..cfg.train.clone()
            };
            let (bundle, trace) = train_stage1(&data, cfg.spec.clone(), &tc)?;
            bundle.save(&out)?;
            write(&sibling(&out, ".stage1.csv"), &trace_csv(&trace, &cfg.fingerprint()))?;
        }
        Command::TrainStage2 {
            config,
            dataset,
            bundle,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let data = Dataset::load(&dataset)?;
            let mut b = ModelBundle::load_expecting(&bundle, &cfg.spec)?;
            let tc = TrainConfig {
                steps: cfg.budget.stage2_steps,
                seed: rng::derive_named(cfg.train.seed, "stage2"),
                ..cfg.train.clone()
            };
            let trace = train_stage2(&mut b, &data, &tc)?;
            b.save(&out)?;
            write(&sibling(&out, ".stage2.csv"), &trace_csv(&trace, &cfg.fingerprint()))?;
        }
        Command::Eval {
            config,
            bundle,
            episodes,
            variant,
            disturb,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let variant = variant.map(|v| parse_variant(&v)).transpose()?.unwrap_or(cfg.variant);
            let env = cfg.env_for(variant);
            let b = ModelBundle::load_expecting(&bundle, &cfg.spec)?;
            let opts = EvalOptions {
                episodes: episodes.unwrap_or(cfg.eval_episodes),
                seed: rng::derive_named(cfg.seed, "eval"),
                max_cycles: cfg.eval_max_cycles,
                disturb,
            };
            let summary = evaluate(&env, &b, &opts)?;
            let csv = summary.to_csv(&cfg.fingerprint());
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
            eprintln!(
                "success rate {:.3} ({}/{})",
                summary.success_rate(),
                summary.successes(),
                summary.reports.len()
            );
        }
        Command::AblateMsth {
            config,
            out,
            episodes,
            seed,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(e) = episodes {
                cfg.eval_episodes = e;
            }
            let rows = ablate_msth(&cfg)?;
            let csv = ablation_csv(&rows, &cfg.fingerprint());
            match out {
                Some(p) => write(&p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::OnlineImprove {
            config,
            bundle,
            rounds,
            strategy,
            out,
            episodes,
            variant,
            resume_after,
            seed,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(s) = strategy {
                cfg.round.strategy = Strategy::parse(&s)?;
            }
            let variant = variant.map(|v| parse_variant(&v)).transpose()?.unwrap_or(cfg.variant);
            let env = cfg.env_for(variant);
            let mut b = ModelBundle::load(&bundle)?;
            let arch = crate::trainkit::BundleSpec {
                adapter_rank: b.spec.adapter_rank,
                ..cfg.spec.clone()
            };
            if b.spec.fingerprint() != arch.fingerprint() {
                return Err(Error::Fingerprint {
                    expected: arch.fingerprint(),
                    found: b.spec.fingerprint(),
                }
                .into());
            }
            fs::create_dir_all(&out).map_err(|e| Failure::Lib(Error::Io(e)))?;
            let curve = run_improvement(
                &env,
                &mut b,
                rounds,
                episodes.unwrap_or(cfg.eval_episodes),
                &cfg.round,
                cfg.seed,
                resume_after,
                Some(&out),
            )?;
            let name = if resume_after == 0 {
                "curve.csv".to_string()
            } else {
                format!("curve_from{resume_after}.csv")
            };
            write(&out.join(name), &curve_csv(&curve, &cfg.fingerprint()))?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Schedule(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            }
        }
    }
}
