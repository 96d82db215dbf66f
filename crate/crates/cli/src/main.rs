use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use nowcast_cli::config::{parse_assignment, RunConfig};
use nowcast_cli::{
    cmd_augment, cmd_eval, cmd_gen_data, cmd_run_all, cmd_train_baseline, cmd_train_long, cmd_train_short, snapshot_config,
    EvalTarget, EVAL_DIR,
};

/// Radar nowcasting pipeline: synthetic data, short-horizon teacher,
/// rollout augmentation, long-horizon student and verification.
#[derive(Parser)]
#[command(name = "nowcast", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Named override set applied after the file (`smoke`).
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Override a configuration key, e.g. `--set train.max_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shortcut for `--set paths.run_dir=<DIR>`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Shortcut for `--set train.seed=<N>`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shortcut for `--set train.max_epochs=<N>`.
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and split the synthetic dataset.
    GenData,
    /// Train the short-horizon teacher.
    TrainShort {
        #[arg(long)]
        resume: bool,
    },
    /// Extend the training set with teacher rollouts.
    Augment {
        /// Teacher checkpoint (default: the run's teacher/best.ckpt).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Train the long-horizon student on the augmented set.
    TrainLong {
        #[arg(long)]
        resume: bool,
        /// Teacher checkpoint whose hash should match the augmented data.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Train the long-horizon model directly on ground truth.
    TrainBaseline {
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint and write the report and lead-time plot.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset directory (default: the run's test split).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory (default: <run_dir>/eval/<checkpoint name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the ground truth against itself.
        #[arg(long)]
        self_check: bool,
    },
    /// Run every stage and print the comparison table.
    RunAll {
        #[arg(long)]
        skip_baseline: bool,
        #[arg(long)]
        resume: bool,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut overrides = c.set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>>>()?;
    if let Some(d) = &c.run_dir {
        overrides.push(("paths.run_dir".into(), format!("{:?}", d.display().to_string())));
    }
    if let Some(s) = c.seed {
        overrides.push(("train.seed".into(), s.to_string()));
    }
    if let Some(e) = c.epochs {
        overrides.push(("train.max_epochs".into(), e.to_string()));
    }
    RunConfig::load(c.config.as_deref(), c.profile.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::RunAll { skip_baseline, resume } => {
            cmd_run_all(&cfg, skip_baseline, resume)?;
            return Ok(());
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
            self_check,
        } => {
            let name = if self_check {
                "self_check".to_string()
            } else {
                checkpoint
                    .as_deref()
                    .and_then(|p| p.parent())
                    .and_then(|p| p.file_name())
                    .map_or("model".into(), |n| n.to_string_lossy().into_owned())
            };
            let out_dir = out.unwrap_or_else(|| cfg.run_dir().join(EVAL_DIR).join(name));
            cmd_eval(
                &cfg,
                &EvalTarget {
                    checkpoint,
                    dataset,
                    out_dir,
                    self_check,
                },
            )?;
            return Ok(());
        }
        _ => {}
    }
    snapshot_config(&cfg)?;
    match cli.command {
        Command::GenData => {
            cmd_gen_data(&cfg)?;
        }
        Command::TrainShort { resume } => {
            cmd_train_short(&cfg, resume)?;
        }
        Command::Augment { teacher } => {
            cmd_augment(&cfg, teacher.as_deref())?;
        }
        Command::TrainLong { resume, teacher } => {
            cmd_train_long(&cfg, resume, teacher.as_deref())?;
        }
        Command::TrainBaseline { resume } => {
            cmd_train_baseline(&cfg, resume)?;
        }
        Command::Eval { .. } | Command::RunAll { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
