//! Release gate. Each criterion prints one PASS/FAIL line (run with
//! `--nocapture` to see them) and the test fails if any criterion fails.
//!
//! The full training runs live under `target/acceptance/` and resume from
//! task boundaries, so a finished run is never repeated. First execution
//! trains several full MNIST / Fashion-MNIST models and takes hours on a
//! laptop-class CPU; later executions reuse the artifacts.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use replaycl::continual::{
    build_replay, grow_private, init_learner, task_loss_grads, train_task, HeadConfig,
    LearnerState,
};
use replaycl::datasets::{
    derive_seed, synth::make_synthetic_cache, Provenance, Sample, TaskSequence, TaskSpec,
};
use replaycl::harness::{run_experiment, ExperimentConfig, ReplayMode, ResultsRecord};
use replaycl::metrics::{count_params, AccMatrix};
use replaycl::nn::ParamBundle;
use replaycl::vae::{kl_sum, reparameterize_batch, ConditionalVae, VaeConfig};

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

fn acceptance_dir() -> PathBuf {
    workspace().join("target/acceptance")
}

fn experiment(
    name: &str,
    dataset: &str,
    epochs: usize,
    replay_per_class: usize,
    data_root: PathBuf,
    truncate: Option<usize>,
) -> replaycl::Result<ResultsRecord> {
    let config = ExperimentConfig {
        dataset: dataset.into(),
        num_tasks: 0,
        epochs,
        replay_per_class,
        replay_mode: if replay_per_class == 0 {
            ReplayMode::None
        } else {
            ReplayMode::Generative
        },
        lambdas: (1.0, 1.0, 1.0),
        learning_rate: 1e-3,
        batch_size: 64,
        seed: 1,
        out_dir: acceptance_dir().join(name),
        data_root: Some(data_root),
        truncate_tasks: truncate,
    };
    run_experiment(&config)
}

struct Gate {
    results: Vec<(String, bool)>,
}

impl Gate {
    fn check(&mut self, name: &str, outcome: std::result::Result<bool, String>) {
        let (ok, detail) = match outcome {
            Ok(ok) => (ok, String::new()),
            Err(e) => (false, format!(" ({e})")),
        };
        println!(
            "[{}] {name}{detail}",
            if ok { "PASS" } else { "FAIL" }
        );
        self.results.push((name.to_string(), ok));
    }
}

// ---------------------------------------------------------------------
// Criterion 1: ACC and BWT agree with brute-force oracles.
// ---------------------------------------------------------------------

fn criterion_metrics_oracle() -> std::result::Result<bool, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC);
    for _ in 0..1000 {
        let t = rng.gen_range(2..=8usize);
        let mut m = AccMatrix::new(t);
        let mut cells = vec![vec![0.0f64; t + 1]; t + 1];
        #[allow(clippy::needless_range_loop)]
        for i in 1..=t {
            for j in 1..=i {
                let v = rng.gen_range(0.0..100.0);
                m.set(i, j, v).map_err(|e| e.to_string())?;
                cells[i][j] = v;
            }
        }
        let acc_oracle = (1..=t).map(|i| cells[t][i]).sum::<f64>() / t as f64;
        let bwt_oracle =
            (1..t).map(|i| cells[t][i] - cells[i][i]).sum::<f64>() / (t - 1) as f64;
        let acc = m.acc().map_err(|e| e.to_string())?;
        let bwt = m.bwt().map_err(|e| e.to_string())?;
        if (acc - acc_oracle).abs() > 1e-9 || (bwt - bwt_oracle).abs() > 1e-9 {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------
// Criterion 2: loss primitives against analytic values, and the full
// composite-loss gradient against central finite differences at f64.
// ---------------------------------------------------------------------

fn tiny_state_f64(seed: u64) -> LearnerState<f64> {
    let vae_config = VaeConfig {
        input_shape: (1, 4, 4),
        latent_dim: 2,
        num_condition_classes: 2,
        encoder_channels: vec![2],
        kernel: 4,
        stride: 2,
        pad: 1,
    };
    let head_config = HeadConfig {
        input_shape: (2, 4, 4),
        channels: vec![2],
        fc_hidden: None,
        num_classes: 2,
        kernel: 4,
        stride: 2,
        pad: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x61]));
    LearnerState {
        dataset: "tiny".into(),
        shared: ConditionalVae::new(vae_config.clone(), &mut rng).unwrap(),
        privates: Vec::new(),
        current_task: 0,
        lambdas: (1.0, 1.0, 1.0),
        lr: 1e-3,
        replay_per_class: 0,
        seed,
        vae_config,
        head_config,
    }
}

fn criterion_loss_primitives() -> std::result::Result<bool, String> {
    let zeros = ndarray::Array1::<f64>::zeros(3);
    let kl0 = kl_sum(&zeros, &zeros);
    let one = ndarray::Array1::from_vec(vec![1.0f64]);
    let zero1 = ndarray::Array1::zeros(1);
    let kl_half = kl_sum(&one, &zero1);
    if kl0.abs() > 1e-12 || (kl_half - 0.5).abs() > 1e-12 {
        return Err(format!("kl values {kl0} {kl_half}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mu = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-2.0..2.0f64));
    let lv = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-2.0..2.0f64));
    let z = reparameterize_batch(&mu, &lv, &Array2::zeros((3, 2)));
    if z != mu {
        return Err("reparameterize with zero noise is not the mean".into());
    }

    // Full composite loss on a 4x4 / latent-2 configuration: analytic
    // gradient vs central differences in f64.
    let mut state = tiny_state_f64(17);
    grow_private(&mut state, 1).map_err(|e| e.to_string())?;
    let batch: Vec<Sample> = (0..3)
        .map(|i| Sample {
            image: Array3::from_shape_fn((1, 4, 4), |_| rng.gen_range(0.1..0.9f32)),
            class_label: i % 2,
            task_label: 1,
            provenance: Provenance::Real,
        })
        .collect();
    let eps_s = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0f64));
    let eps_p = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0f64));
    let seen = [0usize, 1];
    let (_, grads) =
        task_loss_grads(&state, &batch, &seen, &eps_s, &eps_p).map_err(|e| e.to_string())?;
    let base = state.trainable_params();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, g) in grads.iter().enumerate() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        state.set_trainable_params(&p);
        let up = task_loss(&state, &batch, &seen, &eps_s, &eps_p)?;
        p[i] = base[i] - h;
        state.set_trainable_params(&p);
        let dn = task_loss(&state, &batch, &seen, &eps_s, &eps_p)?;
        let numeric = (up - dn) / (2.0 * h);
        let denom = g.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((g - numeric).abs() / denom);
    }
    state.set_trainable_params(&base);
    if worst > 1e-3 {
        return Err(format!("max relative gradient error {worst:e}"));
    }
    Ok(true)
}

fn task_loss(
    state: &LearnerState<f64>,
    batch: &[Sample],
    seen: &[usize],
    eps_s: &Array2<f64>,
    eps_p: &Array2<f64>,
) -> std::result::Result<f64, String> {
    replaycl::continual::task_loss(state, batch, seen, eps_s, eps_p)
        .map(|c| c.total)
        .map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------
// Criterion 6 helpers: a tiny trainable 2-task problem.
// ---------------------------------------------------------------------

fn toy_sequence(seed: u64) -> TaskSequence {
    TaskSequence {
        dataset_name: "toy".into(),
        input_shape: (1, 8, 8),
        tasks: vec![
            TaskSpec {
                task_id: 1,
                class_labels: vec![0, 1],
            },
            TaskSpec {
                task_id: 2,
                class_labels: vec![2, 3],
            },
        ],
        train_count: 0,
        test_count: 0,
        permutations: None,
        seed,
    }
}

fn toy_state(seed: u64, replay_per_class: usize) -> LearnerState<f32> {
    let vae_config = VaeConfig {
        input_shape: (1, 8, 8),
        latent_dim: 4,
        num_condition_classes: 4,
        encoder_channels: vec![3, 6],
        kernel: 4,
        stride: 2,
        pad: 1,
    };
    let head_config = HeadConfig {
        input_shape: (2, 8, 8),
        channels: vec![4, 8],
        fc_hidden: None,
        num_classes: 4,
        kernel: 4,
        stride: 2,
        pad: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xF00D]));
    LearnerState {
        dataset: "toy".into(),
        shared: ConditionalVae::new(vae_config.clone(), &mut rng).unwrap(),
        privates: Vec::new(),
        current_task: 0,
        lambdas: (1.0, 1.0, 1.0),
        lr: 3e-3,
        replay_per_class,
        seed,
        vae_config,
        head_config,
    }
}

fn toy_task_data(task: usize, per_class: usize, seed: u64) -> Vec<Sample> {
    let classes: [usize; 2] = if task == 1 { [0, 1] } else { [2, 3] };
    classes
        .iter()
        .flat_map(|&c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xDA7A, c as u64]));
            (0..per_class)
                .map(|_| {
                    let image = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| {
                        let quadrant = (y / 4) * 2 + x / 4;
                        let base = if quadrant == c { 0.9 } else { 0.1 };
                        (base + rng.gen_range(-0.05..0.05f32)).clamp(0.0, 1.0)
                    });
                    Sample {
                        image,
                        class_label: c,
                        task_label: task,
                        provenance: Provenance::Real,
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn criterion_growth_and_replay_invariants() -> std::result::Result<bool, String> {
    // Frozen priors stay bitwise identical through later training.
    let seq = toy_sequence(23);
    let mut state = toy_state(23, 3);
    grow_private(&mut state, 1).map_err(|e| e.to_string())?;
    let t1 = toy_task_data(1, 10, 23);
    train_task(&mut state, &seq, 1, &t1, &[], 4, 8, |_, _| Ok(())).map_err(|e| e.to_string())?;
    grow_private(&mut state, 2).map_err(|e| e.to_string())?;
    let frozen_vae = state.privates[0].vae.flat_params();
    let frozen_head = state.privates[0].head.flat_params();
    let replay = build_replay(&state, &seq, 2).map_err(|e| e.to_string())?;
    // Replay size is exactly replay_per_class x classes seen so far.
    if replay.len() != 3 * 2 {
        return Err(format!("replay size {}", replay.len()));
    }
    for c in [0usize, 1] {
        if replay.iter().filter(|s| s.class_label == c).count() != 3 {
            return Err("replay not balanced per class".into());
        }
    }
    let t2 = toy_task_data(2, 10, 23);
    train_task(&mut state, &seq, 2, &t2, &replay, 4, 8, |_, _| Ok(()))
        .map_err(|e| e.to_string())?;
    if state.privates[0].vae.flat_params() != frozen_vae
        || state.privates[0].head.flat_params() != frozen_head
    {
        return Err("frozen module changed during later training".into());
    }

    // Growth adds a constant per-task parameter delta on a real preset.
    let mut m = init_learner::<f32>("mnist", (1.0, 1.0, 1.0), 1e-4, 4, 1)
        .map_err(|e| e.to_string())?;
    let mut totals = Vec::new();
    for t in 1..=5 {
        grow_private(&mut m, t).map_err(|e| e.to_string())?;
        totals.push(count_params(&m).total);
    }
    let deltas: Vec<usize> = totals.windows(2).map(|w| w[1] - w[0]).collect();
    if !deltas.windows(2).all(|w| w[0] == w[1]) {
        return Err(format!("growth deltas vary: {deltas:?}"));
    }

    // Replay size check at a later task on the preset: 4 per class over
    // the 4 classes of tasks 1..2 (untrained priors are still valid
    // samplers for the size invariant).
    let seq5 = replaycl::datasets::build_task_sequence("mnist", 5, 1).map_err(|e| e.to_string())?;
    let mut m3 = init_learner::<f32>("mnist", (1.0, 1.0, 1.0), 1e-4, 4, 1)
        .map_err(|e| e.to_string())?;
    for t in 1..=3 {
        grow_private(&mut m3, t).map_err(|e| e.to_string())?;
    }
    let buf = build_replay(&m3, &seq5, 3).map_err(|e| e.to_string())?;
    if buf.len() != 4 * 4 {
        return Err(format!("preset replay size {}", buf.len()));
    }
    Ok(true)
}

// ---------------------------------------------------------------------

#[test]
fn acceptance() {
    let data = workspace().join("data");
    let mut gate = Gate {
        results: Vec::new(),
    };

    gate.check(
        "1. ACC/BWT match brute-force oracles on 1000 random matrices",
        criterion_metrics_oracle(),
    );
    gate.check(
        "2. loss primitives and full-loss gradients check out at f64",
        criterion_loss_primitives(),
    );

    let e20 = experiment("mnist_e20_n20", "mnist", 20, 20, data.clone(), None);
    gate.check(
        "3a. MNIST 20 epochs, 20 replay/class: ACC >= 95 and BWT >= -3",
        e20.as_ref()
            .map(|r| r.acc >= 95.0 && r.bwt.unwrap_or(-100.0) >= -3.0)
            .map_err(|e| e.to_string()),
    );
    let e50 = experiment("mnist_e50_n20", "mnist", 50, 20, data.clone(), None);
    gate.check(
        "3b. MNIST 50 epochs, 20 replay/class: ACC >= 98",
        e50.as_ref().map(|r| r.acc >= 98.0).map_err(|e| e.to_string()),
    );

    let none = experiment("mnist_e20_none", "mnist", 20, 0, data.clone(), None);
    gate.check(
        "4. no-replay MNIST forgets: BWT <= -15 and >= 10 points below replay",
        match (&none, &e20) {
            (Ok(n), Ok(r)) => Ok(n.bwt.unwrap_or(0.0) <= -15.0
                && r.bwt.unwrap_or(-100.0) - n.bwt.unwrap_or(0.0) >= 10.0),
            (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
        },
    );

    let f4 = experiment("fashion_e20_n4", "fashion_mnist", 20, 4, data.clone(), None);
    let f100 = experiment("fashion_e20_n100", "fashion_mnist", 20, 100, data.clone(), None);
    gate.check(
        "5. Fashion-MNIST: 100 replay/class >= 4 replay/class (ACC within 1, BWT)",
        match (&f4, &f100) {
            (Ok(a), Ok(b)) => Ok(b.acc >= a.acc - 1.0
                && b.bwt.unwrap_or(-100.0) >= a.bwt.unwrap_or(0.0)),
            (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
        },
    );

    gate.check(
        "6. frozen priors are bitwise stable; growth and replay sizes are exact",
        criterion_growth_and_replay_invariants(),
    );

    let da = experiment("det_a", "mnist", 1, 4, data.clone(), None);
    let db = experiment("det_b", "mnist", 1, 4, data.clone(), None);
    gate.check(
        "7. identical configurations reproduce r_matrix.csv byte for byte",
        match (&da, &db) {
            (Ok(_), Ok(_)) => {
                let a = std::fs::read(acceptance_dir().join("det_a/r_matrix.csv")).unwrap();
                let b = std::fs::read(acceptance_dir().join("det_b/r_matrix.csv")).unwrap();
                Ok(a == b)
            }
            (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
        },
    );

    let synth_root = acceptance_dir().join("synthdata");
    let smoke = (|| -> std::result::Result<bool, String> {
        for name in ["cifar100", "mini_imagenet"] {
            if !synth_root.join(name).join("train.rclc").exists() {
                make_synthetic_cache(name, &synth_root, 3, 2, 9).map_err(|e| e.to_string())?;
            }
            let rec = experiment(
                &format!("{name}_t2"),
                name,
                1,
                2,
                synth_root.clone(),
                Some(2),
            )
            .map_err(|e| e.to_string())?;
            if rec.r.num_tasks() != 2 || rec.bwt.is_none() {
                return Ok(false);
            }
        }
        Ok(true)
    })();
    gate.check(
        "8. CIFAR100 and miniImageNet two-task pipelines run end to end",
        smoke,
    );

    gate.check(
        "9. MNIST parameter count within 25% of 199019",
        e20.as_ref()
            .map(|r| {
                let total = r.params.total as f64;
                let ok = (total - 199019.0).abs() / 199019.0 <= 0.25;
                println!(
                    "   params: total {} (shared {}, private VAEs {:?}, heads {:?})",
                    r.params.total, r.params.shared, r.params.private_vaes, r.params.heads
                );
                ok
            })
            .map_err(|e| e.to_string()),
    );

    let failed: Vec<&str> = gate
        .results
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(n, _)| n.as_str())
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
