//! Config-driven experiment harness: sequential-task runs with
//! checkpoint/resume, grid sweeps, and static result artifacts
//! (`config.json`, `r_matrix.csv`, `summary.json`, `losses.csv`, plots).

pub mod plots;

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::continual::{
    build_replay, grow_private, init_learner, load_learner, save_learner, train_task, evaluate_row,
    LearnerState,
};
use crate::datasets::{build_task_sequence, data_root, load_task_data, preset, Sample, Split, TaskSequence};
use crate::error::{Error, Result};
use crate::metrics::{count_params, AccMatrix, ParamBreakdown};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayMode {
    Generative,
    None,
}

fn default_lambdas() -> (f64, f64, f64) {
    (1.0, 1.0, 1.0)
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: String,
    /// 0 means the preset default.
    #[serde(default)]
    pub num_tasks: usize,
    pub epochs: usize,
    pub replay_per_class: usize,
    pub replay_mode: ReplayMode,
    #[serde(default = "default_lambdas")]
    pub lambdas: (f64, f64, f64),
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    /// Run only the first k tasks of the sequence (smoke tests).
    #[serde(default)]
    pub truncate_tasks: Option<usize>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match self.replay_mode {
            ReplayMode::None if self.replay_per_class != 0 => {
                return Err(Error::Config(
                    "replay mode `none` requires replay_per_class = 0".into(),
                ))
            }
            ReplayMode::Generative if self.replay_per_class == 0 => {
                return Err(Error::Config(
                    "generative replay requires replay_per_class > 0".into(),
                ))
            }
            _ => {}
        }
        if self.epochs == 0 || self.batch_size == 0 || self.learning_rate <= 0.0 {
            return Err(Error::Config(
                "epochs, batch size, and learning rate must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Task count with the preset default and truncation applied.
    pub fn resolved_tasks(&self) -> Result<(usize, usize)> {
        let p = preset(&self.dataset)?;
        let total = if self.num_tasks == 0 {
            p.default_tasks
        } else {
            self.num_tasks
        };
        let run = self.truncate_tasks.map_or(total, |k| k.min(total)).max(1);
        Ok((total, run))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub task: usize,
    pub epoch: usize,
    pub l_task: f64,
    pub l_shared: f64,
    pub l_private: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct ResultsRecord {
    pub config: ExperimentConfig,
    pub r: AccMatrix,
    pub acc: f64,
    pub acc_final: f64,
    pub bwt: Option<f64>,
    pub params: ParamBreakdown,
    pub seconds_per_task: Vec<f64>,
    pub total_seconds: f64,
    pub losses: Vec<LossRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Summary {
    acc: f64,
    acc_final: f64,
    bwt: Option<f64>,
    params: ParamBreakdown,
    seconds_per_task: Vec<f64>,
    total_seconds: f64,
}

fn write_losses_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = String::from("task,epoch,l_task,l_shared,l_private,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.task, r.epoch, r.l_task, r.l_shared, r.l_private, r.total
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_losses_csv(path: &Path) -> Result<Vec<LossRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Config(format!("bad losses row: {line}")));
        }
        let p = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| Error::Config(format!("bad losses value {s}: {e}")))
        };
        rows.push(LossRow {
            task: f[0].parse().map_err(|e| Error::Config(format!("{e}")))?,
            epoch: f[1].parse().map_err(|e| Error::Config(format!("{e}")))?,
            l_task: p(f[2])?,
            l_shared: p(f[3])?,
            l_private: p(f[4])?,
            total: p(f[5])?,
        });
    }
    Ok(rows)
}

/// Run Algorithm-style sequential training: grow, build replay, train,
/// evaluate a row — persisting after every task so a killed run resumes
/// at the last finished task boundary. Deterministic given the seed.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultsRecord> {
    config.validate()?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out)?;
    match run_inner(config) {
        Ok(rec) => Ok(rec),
        Err(e) => {
            // Leave a failure marker next to whatever partial artifacts
            // made it to disk.
            let _ = std::fs::write(out.join("FAILED"), format!("{e}\n"));
            Err(e)
        }
    }
}

fn run_inner(config: &ExperimentConfig) -> Result<ResultsRecord> {
    let (total_tasks, run_tasks) = config.resolved_tasks()?;
    let seq = build_task_sequence(&config.dataset, total_tasks, config.seed)?;
    let root = data_root(config.data_root.as_deref());
    let out = &config.out_dir;
    let ckpt_dir = out.join("checkpoint");

    std::fs::write(out.join("config.json"), serde_json::to_vec_pretty(config)?)?;

    // Resume from the newest finished task boundary if a checkpoint and a
    // matching partial R matrix are present.
    let mut state: LearnerState<f32>;
    let mut r;
    let mut losses: Vec<LossRow>;
    let mut seconds: Vec<f64>;
    let r_path = out.join("r_matrix.csv");
    if ckpt_dir.join("manifest.json").exists() && r_path.exists() {
        state = load_learner(&ckpt_dir)?;
        r = AccMatrix::from_csv(&std::fs::read_to_string(&r_path)?)?;
        if r.num_tasks() != run_tasks || state.dataset != seq.dataset_name {
            return Err(Error::Checkpoint(
                "existing artifacts do not match this configuration".into(),
            ));
        }
        losses = read_losses_csv(&out.join("losses.csv")).unwrap_or_default();
        losses.retain(|row| row.task <= state.current_task);
        seconds = vec![0.0; state.current_task];
    } else {
        state = init_learner(
            &config.dataset,
            config.lambdas,
            config.learning_rate,
            config.replay_per_class,
            config.seed,
        )?;
        r = AccMatrix::new(run_tasks);
        losses = Vec::new();
        seconds = Vec::new();
    }

    let mut tests: Vec<Vec<Sample>> = Vec::new();
    for t in 1..=run_tasks {
        tests.push(load_task_data(&seq, t, Split::Test, &root)?);
    }

    let start_task = state.current_task + 1;
    for t in start_task..=run_tasks {
        let t0 = Instant::now();
        grow_private(&mut state, t)?;
        let replay = match config.replay_mode {
            ReplayMode::Generative => build_replay(&state, &seq, t)?,
            ReplayMode::None => Vec::new(),
        };
        let real = load_task_data(&seq, t, Split::Train, &root)?;
        let snapshots = out.join("snapshots");
        let report = train_task(
            &mut state,
            &seq,
            t,
            &real,
            &replay,
            config.epochs,
            config.batch_size,
            |st, epoch| save_learner(&snapshots.join(format!("task{t}_epoch{epoch}")), st, &seq),
        )?;
        for e in &report.epoch_losses {
            losses.push(LossRow {
                task: t,
                epoch: e.epoch,
                l_task: e.l_task,
                l_shared: e.l_shared,
                l_private: e.l_private,
                total: e.total,
            });
        }
        let row = evaluate_row(&state, &seq, &tests)?;
        for (i, v) in row.iter().enumerate() {
            r.set(t, i + 1, *v)?;
        }
        seconds.push(t0.elapsed().as_secs_f64());

        save_learner(&ckpt_dir, &state, &seq)?;
        std::fs::write(&r_path, r.to_csv())?;
        write_losses_csv(&out.join("losses.csv"), &losses)?;
    }

    let params = count_params(&state);
    let acc = r.acc()?;
    let acc_final = r.acc_final()?;
    let bwt = if run_tasks >= 2 { Some(r.bwt()?) } else { None };
    let total_seconds: f64 = seconds.iter().sum();
    let summary = Summary {
        acc,
        acc_final,
        bwt,
        params: params.clone(),
        seconds_per_task: seconds.clone(),
        total_seconds,
    };
    std::fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;

    let record = ResultsRecord {
        config: config.clone(),
        r,
        acc,
        acc_final,
        bwt,
        params,
        seconds_per_task: seconds,
        total_seconds,
        losses,
    };
    emit_plots(&record, out)?;
    Ok(record)
}

/// Reload a persisted run directory into a [`ResultsRecord`].
pub fn load_record(dir: &Path) -> Result<ResultsRecord> {
    let config: ExperimentConfig =
        serde_json::from_slice(&std::fs::read(dir.join("config.json"))?)?;
    let r = AccMatrix::from_csv(&std::fs::read_to_string(dir.join("r_matrix.csv"))?)?;
    let summary: Summary = serde_json::from_slice(&std::fs::read(dir.join("summary.json"))?)?;
    let losses = read_losses_csv(&dir.join("losses.csv"))?;
    Ok(ResultsRecord {
        config,
        r,
        acc: summary.acc,
        acc_final: summary.acc_final,
        bwt: summary.bwt,
        params: summary.params,
        seconds_per_task: summary.seconds_per_task,
        total_seconds: summary.total_seconds,
        losses,
    })
}

/// Final-row accuracy series and the `(E, S)` legend label of one run.
fn acc_series(record: &ResultsRecord) -> (String, Vec<(usize, f64)>) {
    let t = record.r.num_tasks();
    let label = format!(
        "(E={}, S={})",
        record.config.epochs, record.config.replay_per_class
    );
    let pts = (1..=t)
        .map(|i| (i, record.r.get(t, i).unwrap_or(0.0)))
        .collect();
    (label, pts)
}

/// Emit the per-task accuracy plot and the loss-trace plot for one run.
pub fn emit_plots(record: &ResultsRecord, out: &Path) -> Result<()> {
    let (label, pts) = acc_series(record);
    plots::plot_accuracy(
        &out.join("plot_acc.png"),
        &format!("{} final per-task accuracy", record.config.dataset),
        &[(label, pts)],
    )?;
    plots::plot_losses(&out.join("plot_loss.png"), &record.losses)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub base: ExperimentConfig,
    /// Empty sweeps fall back to the base value.
    #[serde(default)]
    pub epochs: Vec<usize>,
    #[serde(default)]
    pub replay_per_class: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridCell {
    pub epochs: usize,
    pub replay_per_class: usize,
    pub seeds: Vec<u64>,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub acc_final_mean: f64,
    pub acc_final_std: f64,
    pub bwt_mean: Option<f64>,
    pub bwt_std: Option<f64>,
    pub failures: Vec<String>,
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Run every `(epochs, replay)` combination for every seed, each in its
/// own subdirectory, continuing past per-cell failures. Aggregates
/// mean/std over seeds and draws one accuracy series per combination.
pub fn run_grid(grid: &GridConfig) -> Result<Vec<GridCell>> {
    let epochs = if grid.epochs.is_empty() {
        vec![grid.base.epochs]
    } else {
        grid.epochs.clone()
    };
    let replays = if grid.replay_per_class.is_empty() {
        vec![grid.base.replay_per_class]
    } else {
        grid.replay_per_class.clone()
    };
    let seeds = if grid.seeds.is_empty() {
        vec![grid.base.seed]
    } else {
        grid.seeds.clone()
    };
    let out_root = grid.base.out_dir.clone();
    std::fs::create_dir_all(&out_root)?;

    let mut cells = Vec::new();
    let mut series = Vec::new();
    for &e in &epochs {
        for &n in &replays {
            let mut accs = Vec::new();
            let mut acc_finals = Vec::new();
            let mut bwts = Vec::new();
            let mut failures = Vec::new();
            let mut last_record = None;
            for &s in &seeds {
                let mut cfg = grid.base.clone();
                cfg.epochs = e;
                cfg.replay_per_class = n;
                cfg.replay_mode = if n == 0 {
                    ReplayMode::None
                } else {
                    ReplayMode::Generative
                };
                cfg.seed = s;
                cfg.out_dir = out_root.join(format!("e{e}_n{n}_s{s}"));
                match run_experiment(&cfg) {
                    Ok(rec) => {
                        accs.push(rec.acc);
                        acc_finals.push(rec.acc_final);
                        if let Some(b) = rec.bwt {
                            bwts.push(b);
                        }
                        last_record = Some(rec);
                    }
                    Err(err) => failures.push(format!("seed {s}: {err}")),
                }
            }
            if let Some(rec) = &last_record {
                series.push(acc_series(rec));
            }
            if !accs.is_empty() {
                let (am, asd) = mean_std(&accs);
                let (fm, fsd) = mean_std(&acc_finals);
                let (bm, bsd) = if bwts.is_empty() {
                    (None, None)
                } else {
                    let (m, sd) = mean_std(&bwts);
                    (Some(m), Some(sd))
                };
                cells.push(GridCell {
                    epochs: e,
                    replay_per_class: n,
                    seeds: seeds.clone(),
                    acc_mean: am,
                    acc_std: asd,
                    acc_final_mean: fm,
                    acc_final_std: fsd,
                    bwt_mean: bm,
                    bwt_std: bsd,
                    failures,
                });
            } else {
                cells.push(GridCell {
                    epochs: e,
                    replay_per_class: n,
                    seeds: seeds.clone(),
                    acc_mean: f64::NAN,
                    acc_std: f64::NAN,
                    acc_final_mean: f64::NAN,
                    acc_final_std: f64::NAN,
                    bwt_mean: None,
                    bwt_std: None,
                    failures,
                });
            }
        }
    }
    std::fs::write(
        out_root.join("grid_summary.json"),
        serde_json::to_vec_pretty(&cells)?,
    )?;
    if !series.is_empty() {
        plots::plot_accuracy(
            &out_root.join("plot_acc.png"),
            &format!("{} per-task accuracy across the grid", grid.base.dataset),
            &series,
        )?;
    }
    Ok(cells)
}

pub use crate::datasets::TaskSequence as Sequence;

// Re-exported so integration tests can build sequences through one path.
pub fn task_sequence_for(config: &ExperimentConfig) -> Result<TaskSequence> {
    let (total, _) = config.resolved_tasks()?;
    build_task_sequence(&config.dataset, total, config.seed)
}
