use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slcpl::harness::{self, RunConfig};
use slcpl::{Error, Result};

/// Prototype-based open-set recognition experiments.
#[derive(Parser)]
#[command(name = "slcpl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set loss.variant=gcpl`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run once per seed (comma separated), overriding `seed`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint and training log.
    Train(Common),
    /// Evaluate checkpoints and write report.jsonl.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the run directory of each seed.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Evaluate one model against growing sets of unknown classes.
    SweepOpenness {
        #[command(flatten)]
        common: Common,
        /// Existing checkpoint; trains one first when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Unknown class counts, overriding eval.sweep_unknown.
        #[arg(long, value_delimiter = ',')]
        unknown: Vec<usize>,
    },
    /// Dump test embeddings and prototypes to features.csv.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Common {
    fn configs(&self) -> Result<Vec<RunConfig>> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides)?,
            None => RunConfig::with_overrides("", &self.overrides)?,
        };
        if self.seeds.is_empty() {
            return Ok(vec![base]);
        }
        Ok(self
            .seeds
            .iter()
            .map(|&s| RunConfig {
                seed: s,
                ..base.clone()
            })
            .collect())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            for config in common.configs()? {
                let seed = config.seed;
                harness::cmd_train(&config, |log, secs| {
                    let acc = log.val_accuracy.map(|a| format!(" val_acc {a:.4}")).unwrap_or_default();
                    eprintln!(
                        "seed {seed} epoch {} lr {:.4} loss {:.4} (ce {:.4} pl {:.4} slc {:.3e}){acc} [{secs:.1}s]",
                        log.epoch, log.lr, log.loss.total, log.loss.ce_term, log.loss.pl_term, log.loss.slc_term
                    );
                })?;
                eprintln!("wrote {}", harness::checkpoint_path(&config).display());
            }
        }
        Command::Eval { common, checkpoint } => {
            let configs = common.configs()?;
            let paths = if checkpoint.is_empty() && !common.seeds.is_empty() {
                configs.iter().map(harness::checkpoint_path).collect()
            } else {
                checkpoint
            };
            let (records, agg) = harness::cmd_eval(&configs[0], &paths)?;
            for r in &records {
                let f1 = r
                    .report
                    .macro_f1
                    .map(|f| format!(" macro_f1 {f:.4}"))
                    .unwrap_or_default();
                println!(
                    "seed {} closed_acc {:.4} auroc {:.4}{f1} radii_std {:.3e}",
                    r.seed, r.report.closed_accuracy, r.report.auroc, r.radii_std
                );
            }
            if let Some(a) = agg {
                println!(
                    "mean over {} runs: closed_acc {:.4}±{:.4} auroc {:.4}±{:.4}",
                    a.runs, a.closed_accuracy.mean, a.closed_accuracy.std, a.auroc.mean, a.auroc.std
                );
            }
        }
        Command::SweepOpenness {
            common,
            checkpoint,
            unknown,
        } => {
            for config in common.configs()? {
                let rows = harness::cmd_sweep_openness(&config, checkpoint.as_deref(), &unknown)?;
                for r in rows {
                    println!(
                        "n_unknown {} openness {:.2}% macro_f1 {:.4} auroc {:.4}",
                        r.n_unknown,
                        100.0 * r.openness,
                        r.macro_f1,
                        r.auroc
                    );
                }
            }
        }
        Command::ExportFeatures { common, checkpoint } => {
            for config in common.configs()? {
                let out = harness::cmd_export_features(&config, checkpoint.as_deref())?;
                eprintln!("wrote {}", out.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not failures; bad arguments
            // share the usage exit code.
            return if e.use_stderr() {
                ExitCode::from(Error::Usage(String::new()).exit_code() as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
