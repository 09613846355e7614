//! Checkpoint blob format shared by VAE and learner checkpoints.
//!
//! Layout (little-endian): magic `RCLK`, version u16, kind-length u16 +
//! kind bytes, metadata-length u32 + JSON bytes, parameter count u64,
//! then f32 parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: u32 = 0x5243_4C4B;
const VERSION: u16 = 1;

pub fn write_blob(path: &Path, kind: &str, meta: &serde_json::Value, params: &[f32]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(&MAGIC.to_le_bytes())?;
        f.write_all(&VERSION.to_le_bytes())?;
        let kind_bytes = kind.as_bytes();
        f.write_all(&(kind_bytes.len() as u16).to_le_bytes())?;
        f.write_all(kind_bytes)?;
        let meta_bytes = serde_json::to_vec(meta)?;
        f.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
        f.write_all(&meta_bytes)?;
        f.write_all(&(params.len() as u64).to_le_bytes())?;
        for p in params {
            f.write_all(&p.to_le_bytes())?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_blob(path: &Path) -> Result<(String, serde_json::Value, Vec<f32>)> {
    let mut f = BufReader::new(
        File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
    );
    let mut u32b = [0u8; 4];
    let mut u16b = [0u8; 2];
    let mut u64b = [0u8; 8];
    f.read_exact(&mut u32b)?;
    if u32::from_le_bytes(u32b) != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic in {}", path.display())));
    }
    f.read_exact(&mut u16b)?;
    if u16::from_le_bytes(u16b) != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version in {}",
            path.display()
        )));
    }
    f.read_exact(&mut u16b)?;
    let mut kind = vec![0u8; u16::from_le_bytes(u16b) as usize];
    f.read_exact(&mut kind)?;
    f.read_exact(&mut u32b)?;
    let mut meta = vec![0u8; u32::from_le_bytes(u32b) as usize];
    f.read_exact(&mut meta)?;
    f.read_exact(&mut u64b)?;
    let n = u64::from_le_bytes(u64b) as usize;
    let mut raw = vec![0u8; n * 4];
    f.read_exact(&mut raw)?;
    let params = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((
        String::from_utf8_lossy(&kind).into_owned(),
        serde_json::from_slice(&meta)?,
        params,
    ))
}
