//! Dataset acquisition, caching, normalization, and deterministic T-split
//! task sequences.

pub mod cache;
pub mod cifar;
pub mod download;
pub mod idx;
pub mod presets;
pub mod synth;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use cache::Split;
pub use presets::{preset, Preset, RawFormat};

/// Environment variable naming the data root; CLI flags override it.
pub const DATA_ROOT_ENV: &str = "REPLAYCL_DATA_ROOT";

/// Resolve the data root: explicit flag, then env var, then `./data`.
pub fn data_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Ok(p) = std::env::var(DATA_ROOT_ENV) {
        return PathBuf::from(p);
    }
    PathBuf::from("data")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Provenance {
    Real,
    Synthetic,
}

/// One labeled image: the (X, Y, T) tuple plus a real/synthetic flag.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `(channels, height, width)`, values in `[0, 1]`.
    pub image: Array3<f32>,
    pub class_label: usize,
    /// 1-based task id.
    pub task_label: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub class_labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskSequence {
    pub dataset_name: String,
    pub input_shape: (usize, usize, usize),
    pub tasks: Vec<TaskSpec>,
    pub train_count: usize,
    pub test_count: usize,
    /// Per-task pixel permutations (Permuted MNIST only).
    pub permutations: Option<Vec<Vec<usize>>>,
    pub seed: u64,
}

impl TaskSequence {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, t: usize) -> Result<&TaskSpec> {
        if t < 1 || t > self.tasks.len() {
            return Err(Error::TaskOutOfRange {
                t,
                max: self.tasks.len(),
            });
        }
        Ok(&self.tasks[t - 1])
    }

    /// All classes belonging to tasks `1..=t`, in task order.
    pub fn classes_through(&self, t: usize) -> Vec<usize> {
        self.tasks[..t]
            .iter()
            .flat_map(|ts| ts.class_labels.iter().copied())
            .collect()
    }
}

/// Split a preset's classes into `num_tasks` tasks in ascending label
/// order; Permuted MNIST additionally gets one seed-derived pixel
/// permutation per task.
pub fn build_task_sequence(dataset_name: &str, num_tasks: usize, seed: u64) -> Result<TaskSequence> {
    let p = preset(dataset_name)?;
    if num_tasks == 0 || p.num_classes % num_tasks != 0 {
        return Err(Error::BadTaskSplit {
            dataset: p.name.to_string(),
            num_classes: p.num_classes,
            num_tasks,
        });
    }
    let per = p.num_classes / num_tasks;
    let tasks = (0..num_tasks)
        .map(|i| TaskSpec {
            task_id: i + 1,
            class_labels: (i * per..(i + 1) * per).collect(),
        })
        .collect();
    let permutations = if p.permuted {
        let hw = p.input_shape.1 * p.input_shape.2;
        Some(
            (0..num_tasks)
                .map(|t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x7065_726D, t as u64]));
                    let mut perm: Vec<usize> = (0..hw).collect();
                    perm.shuffle(&mut rng);
                    perm
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(TaskSequence {
        dataset_name: p.name.to_string(),
        input_shape: p.input_shape,
        tasks,
        train_count: 0,
        test_count: 0,
        permutations,
        seed,
    })
}

/// Deterministic sub-seed derivation (splitmix-style) so every task, epoch,
/// and class gets an independent but reproducible stream.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut s = base;
    for &p in path {
        s ^= p.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        s = splitmix64(s);
    }
    s
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Permute each channel's pixels: `out[k] = in[perm[k]]`.
pub fn apply_permutation(image: &Array3<f32>, perm: &[usize]) -> Result<Array3<f32>> {
    let (c, h, w) = image.dim();
    if perm.len() != h * w {
        return Err(Error::ShapeMismatch {
            expected: format!("permutation of length {}", h * w),
            got: format!("{}", perm.len()),
        });
    }
    let mut out = Array3::zeros((c, h, w));
    for ci in 0..c {
        let ch = image.index_axis(ndarray::Axis(0), ci);
        let flat = ch.as_slice().unwrap();
        for (k, &src) in perm.iter().enumerate() {
            out[[ci, k / w, k % w]] = flat[src];
        }
    }
    Ok(out)
}

/// Make sure the canonical cache exists for `dataset`, ingesting (and if
/// necessary downloading) raw files. Writers hold a per-dataset lock.
pub fn ensure_cache(dataset: &str, root: &Path) -> Result<()> {
    let p = preset(dataset)?;
    let train = cache::cache_path(root, p.name, Split::Train);
    let test = cache::cache_path(root, p.name, Split::Test);
    if train.exists() && test.exists() {
        return Ok(());
    }
    let dir = root.join(p.name);
    let _lock = cache::DirLock::acquire(&dir)?;
    // Re-check: another writer may have finished while we waited.
    if train.exists() && test.exists() {
        return Ok(());
    }
    let raw = dir.join("raw");
    let missing_raw = p
        .raw_files()
        .iter()
        .any(|f| !raw.join(f).exists() && !raw.join(format!("{f}.gz")).exists());
    if missing_raw {
        download::fetch_raw(p, &raw)?;
    }
    ingest(p, &raw, &train, &test)
}

fn ingest(p: &Preset, raw: &Path, train: &Path, test: &Path) -> Result<()> {
    match p.raw_format {
        RawFormat::Idx => {
            let (ti, r, c, tl) = idx::load_idx_split(raw, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
            check_idx_shape(p, r, c)?;
            cache::write_cache(train, p.input_shape, &ti, &tl)?;
            let (si, r, c, sl) = idx::load_idx_split(raw, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
            check_idx_shape(p, r, c)?;
            cache::write_cache(test, p.input_shape, &si, &sl)?;
        }
        RawFormat::Cifar10 => {
            let (ti, tl) = cifar::load_cifar10(
                raw,
                &[
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
            )?;
            cache::write_cache(train, p.input_shape, &ti, &tl)?;
            let (si, sl) = cifar::load_cifar10(raw, &["test_batch.bin"])?;
            cache::write_cache(test, p.input_shape, &si, &sl)?;
        }
        RawFormat::Cifar100 => {
            let (ti, tl) = cifar::load_cifar100(raw, &["train.bin"])?;
            cache::write_cache(train, p.input_shape, &ti, &tl)?;
            let (si, sl) = cifar::load_cifar100(raw, &["test.bin"])?;
            cache::write_cache(test, p.input_shape, &si, &sl)?;
        }
        RawFormat::CacheOnly => {
            return Err(Error::DataFile(format!(
                "`{}` has no raw ingester; provide {} and {} in the canonical cache format",
                p.name,
                train.display(),
                test.display()
            )));
        }
    }
    Ok(())
}

fn check_idx_shape(p: &Preset, r: usize, c: usize) -> Result<()> {
    if (1, r, c) != p.input_shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", p.input_shape),
            got: format!("(1, {r}, {c})"),
        });
    }
    Ok(())
}

/// Load every `split` example whose class belongs to task `t`, scaled to
/// `[0,1]`, tagged with the task label, permuted when the sequence carries
/// permutations. Order follows the cache and is deterministic.
pub fn load_task_data(seq: &TaskSequence, t: usize, split: Split, root: &Path) -> Result<Vec<Sample>> {
    let spec = seq.task(t)?;
    ensure_cache(&seq.dataset_name, root)?;
    let data = cache::read_cache(&cache::cache_path(root, &seq.dataset_name, split))?;
    if data.shape != seq.input_shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", seq.input_shape),
            got: format!("{:?}", data.shape),
        });
    }
    let perm = seq
        .permutations
        .as_ref()
        .map(|ps| ps[t - 1].as_slice());
    let mut out = Vec::new();
    for i in 0..data.len() {
        let label = data.labels[i] as usize;
        if !spec.class_labels.contains(&label) {
            continue;
        }
        let img = Array3::from_shape_vec(seq.input_shape, data.image(i).to_vec()).unwrap();
        let img = match perm {
            Some(p) => apply_permutation(&img, p)?,
            None => img,
        };
        out.push(Sample {
            image: img,
            class_label: label,
            task_label: t,
            provenance: Provenance::Real,
        });
    }
    Ok(out)
}
