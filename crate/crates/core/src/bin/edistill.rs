use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use edu_distill::config::RunConfig;
use edu_distill::pipeline::{self, DistillOptions, RunLock};
use edu_distill::trainer::{NoObserver, RunOutcome};
use edu_distill::Error;

#[derive(Parser, Debug)]
#[command(name = "edistill", version, about = "Staged distillation over disjoint sub-datasets")]
struct Cli {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Zero wall-clock fields so logs are bitwise reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    Kd,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split the training set into sub-datasets and write the partition file.
    Partition,
    /// Train (or validate) one teacher per sub-dataset.
    TrainTeachers {
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Run staged distillation.
    Distill {
        #[arg(long)]
        resume: bool,
        /// Single-stage vanilla KD over the full dataset instead.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long, hide = true)]
        interrupt_after: Option<usize>,
    },
    /// Print full-set and per-subset test top-1 of a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Regenerate tables and plots from a run's metrics log.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(cli: &Cli, baseline: Option<Baseline>) -> anyhow::Result<RunConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config <FILE> is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.output.out_dir = dir.clone();
    }
    cfg.output.deterministic |= cli.deterministic;
    if baseline == Some(Baseline::Kd) {
        cfg = cfg.kd_baseline();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a mutating phase under the run lock, leaving an ERROR marker on failure.
fn guarded<T>(cfg: &RunConfig, phase: impl FnOnce() -> anyhow::Result<T>) -> anyhow::Result<T> {
    let dir = cfg.run_dir();
    let _lock = RunLock::acquire(&dir)?;
    pipeline::clear_error_marker(&dir)?;
    pipeline::snapshot_config(cfg)?;
    phase().inspect_err(|e| {
        let _ = pipeline::write_error_marker(&dir, &format!("{e:#}"));
    })
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if cli.device != "cpu" {
        return Err(Error::Config(format!("--device {:?} is not available; only cpu is supported", cli.device)).into());
    }
    match &cli.command {
        Command::Partition => {
            let cfg = load_config(cli, None)?;
            guarded(&cfg, || {
                let data = pipeline::load_dataset(&cfg)?;
                let (path, part) = pipeline::write_partition(&cfg, &data)?;
                let sizes: Vec<String> = part.group_sizes().iter().map(usize::to_string).collect();
                println!("group sizes: {}", sizes.join("/"));
                println!("partition written to {}", path.display());
                Ok(())
            })
        }
        Command::TrainTeachers { baseline } => {
            let cfg = load_config(cli, *baseline)?;
            guarded(&cfg, || {
                let rows = pipeline::train_teachers(&cfg)?;
                print!("{}", pipeline::teacher_table(&rows));
                Ok(())
            })
        }
        Command::Distill {
            resume,
            baseline,
            interrupt_after,
        } => {
            let cfg = load_config(cli, *baseline)?;
            guarded(&cfg, || {
                let opts = DistillOptions {
                    resume: *resume,
                    stop_after_epoch: *interrupt_after,
                };
                match pipeline::distill(&cfg, &opts, &mut NoObserver)? {
                    RunOutcome::Completed(report) => {
                        println!("final top-1: {:.2}", report.final_top1);
                        for (t, v) in &report.final_per_subset {
                            println!("subset {t}: {v:.2}");
                        }
                        println!("report written to {}", cfg.run_dir().join(pipeline::REPORT_DIR).display());
                    }
                    RunOutcome::Stopped { epoch, checkpoint } => {
                        println!("stopped after epoch {epoch}; checkpoint {}", checkpoint.display());
                    }
                }
                Ok(())
            })
        }
        Command::Evaluate { checkpoint } => {
            let cfg = load_config(cli, None)?;
            let ev = pipeline::evaluate(&cfg, checkpoint)
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            print!("{}", pipeline::format_evaluation(&ev));
            Ok(())
        }
        Command::Report { run } => {
            let files = pipeline::report(run).inspect_err(|e| {
                if Path::new(run).is_dir() {
                    let _ = pipeline::write_error_marker(run, e);
                }
            })?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err
                .chain()
                .find_map(|e| e.downcast_ref::<Error>())
                .is_some_and(Error::is_config_error);
            ExitCode::from(if config_error { 2 } else { 3 })
        }
    }
}
