//! Synthetic fixture data in the canonical cache format.
//!
//! Used for smoke-testing the large presets (CIFAR100, miniImageNet) end
//! to end when the real archives are not staged: each class gets a fixed
//! random blob pattern plus per-sample noise, so the data is classifiable
//! in principle but carries no accuracy expectations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::error::Result;

use super::cache::{cache_path, write_cache, Split};
use super::presets::preset;

pub fn make_synthetic_cache(
    dataset: &str,
    root: &Path,
    per_class_train: usize,
    per_class_test: usize,
    seed: u64,
) -> Result<()> {
    let p = preset(dataset)?;
    let (c, h, w) = p.input_shape;
    let px = c * h * w;
    let patterns: Vec<Vec<f32>> = (0..p.num_classes)
        .map(|class| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (class as u64).wrapping_mul(0x9E37_79B9));
            (0..px).map(|_| rng.gen_range(0.2..0.8)).collect()
        })
        .collect();
    for (split, per_class) in [(Split::Train, per_class_train), (Split::Test, per_class_test)] {
        let mut images = Vec::with_capacity(p.num_classes * per_class * px);
        let mut labels = Vec::with_capacity(p.num_classes * per_class);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ if split == Split::Train { 1 } else { 2 });
        for (class, pattern) in patterns.iter().enumerate() {
            for _ in 0..per_class {
                images.extend(
                    pattern
                        .iter()
                        .map(|&m| (m + rng.gen_range(-0.1..0.1f32)).clamp(0.0, 1.0)),
                );
                labels.push(class as i32);
            }
        }
        write_cache(&cache_path(root, p.name, split), p.input_shape, &images, &labels)?;
    }
    Ok(())
}
