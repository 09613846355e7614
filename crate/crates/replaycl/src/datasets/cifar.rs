//! CIFAR binary-format ingestion.

use std::path::Path;

use crate::error::{Error, Result};

use super::idx::read_maybe_gz;

const IMG_BYTES: usize = 3 * 32 * 32;

/// Parse CIFAR-10 batch files (1 label byte + 3072 pixel bytes per row).
pub fn load_cifar10(dir: &Path, files: &[&str]) -> Result<(Vec<f32>, Vec<i32>)> {
    load_rows(dir, files, 1, 0)
}

/// Parse CIFAR-100 files (coarse byte + fine byte + 3072 pixel bytes);
/// the fine label is kept.
pub fn load_cifar100(dir: &Path, files: &[&str]) -> Result<(Vec<f32>, Vec<i32>)> {
    load_rows(dir, files, 2, 1)
}

fn load_rows(
    dir: &Path,
    files: &[&str],
    label_bytes: usize,
    label_at: usize,
) -> Result<(Vec<f32>, Vec<i32>)> {
    let row = label_bytes + IMG_BYTES;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let buf = read_maybe_gz(dir, name)?;
        if buf.len() % row != 0 {
            return Err(Error::DataFile(format!(
                "{name}: size {} not a multiple of record size {row}",
                buf.len()
            )));
        }
        for rec in buf.chunks_exact(row) {
            labels.push(rec[label_at] as i32);
            images.extend(rec[label_bytes..].iter().map(|&p| p as f32 / 255.0));
        }
    }
    Ok((images, labels))
}
