//! Canonical per-split binary cache.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic 0x52434C43 ("RCLC")
//! 4       2     version (currently 1)
//! 6       2     channels
//! 8       2     height
//! 10      2     width
//! 12      4     sample count
//! 16      ...   count * c*h*w  f32 pixels in [0,1]
//! ...     ...   count          i32 class labels
//! ```
//!
//! Alternate producers only need to emit this layout for a dataset to
//! interoperate (the SVHN and miniImageNet presets rely on that).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MAGIC: u32 = 0x5243_4C43;
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.rclc",
            Split::Test => "test.rclc",
        }
    }
}

pub fn cache_path(root: &Path, dataset: &str, split: Split) -> PathBuf {
    root.join(dataset).join("cache").join(split.file_name())
}

pub struct CacheSplit {
    pub shape: (usize, usize, usize),
    /// Row-major `count * c*h*w` pixels.
    pub images: Vec<f32>,
    pub labels: Vec<i32>,
}

impl CacheSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let sz = self.shape.0 * self.shape.1 * self.shape.2;
        &self.images[i * sz..(i + 1) * sz]
    }
}

pub fn write_cache(path: &Path, shape: (usize, usize, usize), images: &[f32], labels: &[i32]) -> Result<()> {
    let (c, h, w) = shape;
    let count = labels.len();
    if images.len() != count * c * h * w {
        return Err(Error::ShapeMismatch {
            expected: format!("{} pixels", count * c * h * w),
            got: format!("{}", images.len()),
        });
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(&MAGIC.to_le_bytes())?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(c as u16).to_le_bytes())?;
        f.write_all(&(h as u16).to_le_bytes())?;
        f.write_all(&(w as u16).to_le_bytes())?;
        f.write_all(&(count as u32).to_le_bytes())?;
        for v in images {
            f.write_all(&v.to_le_bytes())?;
        }
        for l in labels {
            f.write_all(&l.to_le_bytes())?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<CacheSplit> {
    let mut f = BufReader::new(
        File::open(path).map_err(|e| Error::DataFile(format!("{}: {e}", path.display())))?,
    );
    let mut header = [0u8; 16];
    f.read_exact(&mut header)?;
    let magic = u32::from_le_bytes(header[0..4].try_into().unwrap());
    let version = u16::from_le_bytes(header[4..6].try_into().unwrap());
    if magic != MAGIC || version != VERSION {
        return Err(Error::DataFile(format!(
            "bad cache header in {}",
            path.display()
        )));
    }
    let c = u16::from_le_bytes(header[6..8].try_into().unwrap()) as usize;
    let h = u16::from_le_bytes(header[8..10].try_into().unwrap()) as usize;
    let w = u16::from_le_bytes(header[10..12].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let px = count * c * h * w;
    let mut img_bytes = vec![0u8; px * 4];
    f.read_exact(&mut img_bytes)?;
    let images: Vec<f32> = img_bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let mut lbl_bytes = vec![0u8; count * 4];
    f.read_exact(&mut lbl_bytes)?;
    let labels: Vec<i32> = lbl_bytes
        .chunks_exact(4)
        .map(|b| i32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(CacheSplit {
        shape: (c, h, w),
        images,
        labels,
    })
}

/// Single-writer lock on a dataset directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        let mut waited = 0u64;
        loop {
            match std::fs::OpenOptions::new()
                .write(true)
                .create_new(true)
                .open(&path)
            {
                Ok(_) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    std::thread::sleep(std::time::Duration::from_millis(200));
                    waited += 200;
                    if waited > 600_000 {
                        return Err(Error::DataFile(format!(
                            "timed out waiting for lock {}",
                            path.display()
                        )));
                    }
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
