use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use replaycl::datasets::{self, synth};
use replaycl::harness::{
    emit_plots, load_record, run_experiment, run_grid, ExperimentConfig, GridConfig, ReplayMode,
};

/// Continual learning with shared/private conditional VAEs and
/// generative replay.
#[derive(Parser)]
#[command(name = "replaycl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment end to end.
    Run(RunArgs),
    /// Run a sweep of (epochs, replay, seed) combinations from a JSON file.
    Grid {
        /// Path to a grid configuration (JSON).
        #[arg(long)]
        config: PathBuf,
    },
    /// Regenerate plots from a persisted run directory.
    Plot {
        /// Run directory containing config.json / r_matrix.csv / summary.json.
        #[arg(long)]
        record: PathBuf,
    },
    /// Write a synthetic cache for a preset (smoke tests, offline use).
    SynthData(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: String,
    /// Number of tasks; defaults to the preset's split.
    #[arg(long, default_value_t = 0)]
    tasks: usize,
    #[arg(long)]
    epochs: usize,
    /// Synthetic samples per class; 0 disables replay.
    #[arg(long, default_value_t = 4)]
    replay_per_class: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the REPLAYCL_DATA_ROOT environment variable.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Loss coefficients λ1 (task), λ2 (shared VAE), λ3 (private VAE).
    #[arg(long, num_args = 3, value_names = ["L1", "L2", "L3"], default_values_t = [1.0, 1.0, 1.0])]
    lambdas: Vec<f64>,
    /// Run only the first k tasks.
    #[arg(long)]
    truncate_tasks: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 64)]
    per_class_train: usize,
    #[arg(long, default_value_t = 16)]
    per_class_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    data_root: Option<PathBuf>,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run(a) => {
            let config = ExperimentConfig {
                dataset: a.dataset,
                num_tasks: a.tasks,
                epochs: a.epochs,
                replay_per_class: a.replay_per_class,
                replay_mode: if a.replay_per_class == 0 {
                    ReplayMode::None
                } else {
                    ReplayMode::Generative
                },
                lambdas: (a.lambdas[0], a.lambdas[1], a.lambdas[2]),
                learning_rate: a.learning_rate,
                batch_size: a.batch_size,
                seed: a.seed,
                out_dir: a.out,
                data_root: a.data_root,
                truncate_tasks: a.truncate_tasks,
            };
            let rec = run_experiment(&config).context("experiment failed")?;
            println!(
                "acc {:.2}  acc_final {:.2}  bwt {}  params {}  ({:.1}s)",
                rec.acc,
                rec.acc_final,
                rec.bwt.map_or("n/a".into(), |b| format!("{b:.2}")),
                rec.params.total,
                rec.total_seconds
            );
        }
        Command::Grid { config } => {
            let grid: GridConfig = serde_json::from_slice(
                &std::fs::read(&config).with_context(|| format!("reading {}", config.display()))?,
            )
            .context("parsing grid config")?;
            let cells = run_grid(&grid).context("grid failed")?;
            for c in &cells {
                println!(
                    "E={} S={}  acc {:.2}±{:.2}  bwt {}  failures {}",
                    c.epochs,
                    c.replay_per_class,
                    c.acc_mean,
                    c.acc_std,
                    c.bwt_mean
                        .map_or("n/a".into(), |b| format!("{b:.2}±{:.2}", c.bwt_std.unwrap())),
                    c.failures.len()
                );
            }
        }
        Command::Plot { record } => {
            let rec = load_record(&record).context("loading record")?;
            emit_plots(&rec, &record).context("drawing plots")?;
            println!("plots written to {}", record.display());
        }
        Command::SynthData(a) => {
            let root = datasets::data_root(a.data_root.as_deref());
            synth::make_synthetic_cache(
                &a.dataset,
                &root,
                a.per_class_train,
                a.per_class_test,
                a.seed,
            )
            .context("writing synthetic cache")?;
            println!("synthetic cache for {} written under {}", a.dataset, root.display());
        }
    }
    Ok(())
}
