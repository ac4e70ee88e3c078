use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gar::config::RunConfig;
use gar::harness;
use gar::{GarError, Result};

#[derive(Parser)]
#[command(name = "gar", version, about = "Actor-transformer group activity recognition on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Run configuration (key = value lines).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Root seed; overrides `seed` from the config.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Checkpoint to evaluate, inspect, or resume training from.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test scene files.
    Generate,
    /// Train a model and write a checkpoint and loss curve.
    Train {
        /// Training set; overrides `data.train`.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: accuracies and confusion matrices.
    Evaluate {
        /// Test set; overrides `data.test`.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Train and evaluate every cell of the configured ablation grid.
    Ablate,
    /// Write per-scene attention matrices.
    AttentionDump {
        /// Test set; overrides `data.test`.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Comma-separated scene ids.
        #[arg(long, value_delimiter = ',')]
        scenes: Option<Vec<u64>>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.set("seed", s.to_string())?;
    }
    Ok(cfg)
}

fn set_path(cfg: &mut RunConfig, key: &str, p: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = p {
        cfg.set(key, p.display().to_string())?;
    }
    Ok(())
}

fn require_checkpoint(common: &Common) -> Result<&PathBuf> {
    common
        .checkpoint
        .as_ref()
        .ok_or_else(|| GarError::Usage("--checkpoint is required".into()))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    match &cli.command {
        Command::Generate => {
            let (train, test) = harness::cmd_generate(&cfg, out)?;
            println!(
                "wrote {} training and {} test scenes to {}",
                train.len(),
                test.len(),
                out.display()
            );
        }
        Command::Train { data } => {
            set_path(&mut cfg, "data.train", data)?;
            let o = harness::cmd_train(&cfg, out, cli.common.checkpoint.as_deref())?;
            match o.curve.last() {
                Some(r) => println!(
                    "trained to iteration {}, last loss {} (activity {}, action {})",
                    o.iteration, r.total, r.activity, r.action
                ),
                None => println!("already at iteration {}, nothing to do", o.iteration),
            }
            println!("checkpoint: {}", o.checkpoint.display());
        }
        Command::Evaluate { data } => {
            set_path(&mut cfg, "data.test", data)?;
            let report = harness::cmd_evaluate(&cfg, out, require_checkpoint(&cli.common)?)?;
            println!("{}", report.summary_line());
        }
        Command::Ablate => {
            let rows = harness::cmd_ablate(&cfg, out)?;
            for r in &rows {
                println!(
                    "{} seed {}: group {} action {}",
                    r.config, r.seed, r.group_accuracy, r.action_accuracy
                );
            }
        }
        Command::AttentionDump { data, scenes } => {
            set_path(&mut cfg, "data.test", data)?;
            let files = harness::cmd_attention_dump(
                &cfg,
                out,
                require_checkpoint(&cli.common)?,
                scenes.as_deref(),
            )?;
            println!("wrote {} attention matrices", files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
