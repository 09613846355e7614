//! IDX ubyte parsing (MNIST-family raw files), with transparent gzip.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// Read a raw file, decompressing when the `.gz` variant is present.
pub fn read_maybe_gz(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let plain = dir.join(name);
    let gz = dir.join(format!("{name}.gz"));
    let mut buf = Vec::new();
    if plain.exists() {
        File::open(&plain)?.read_to_end(&mut buf)?;
    } else if gz.exists() {
        let f = File::open(&gz)?;
        flate2::read::GzDecoder::new(f).read_to_end(&mut buf)?;
    } else {
        return Err(Error::DataFile(format!(
            "{} (or .gz) not found in {}",
            name,
            dir.display()
        )));
    }
    Ok(buf)
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parse an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_images(buf: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    if buf.len() < 16 || be_u32(buf, 0) != 2051 {
        return Err(Error::DataFile("bad IDX image magic".into()));
    }
    let n = be_u32(buf, 4) as usize;
    let r = be_u32(buf, 8) as usize;
    let c = be_u32(buf, 12) as usize;
    let body = &buf[16..];
    if body.len() != n * r * c {
        return Err(Error::DataFile(format!(
            "IDX image payload {} != {}x{}x{}",
            body.len(),
            n,
            r,
            c
        )));
    }
    Ok((n, r, c, body))
}

/// Parse an IDX label file into `(count, labels)`.
pub fn parse_labels(buf: &[u8]) -> Result<(usize, &[u8])> {
    if buf.len() < 8 || be_u32(buf, 0) != 2049 {
        return Err(Error::DataFile("bad IDX label magic".into()));
    }
    let n = be_u32(buf, 4) as usize;
    let body = &buf[8..];
    if body.len() != n {
        return Err(Error::DataFile(format!(
            "IDX label payload {} != {}",
            body.len(),
            n
        )));
    }
    Ok((n, body))
}

/// Load one IDX split as normalized f32 pixels plus labels.
pub fn load_idx_split(dir: &Path, images: &str, labels: &str) -> Result<(Vec<f32>, usize, usize, Vec<i32>)> {
    let img_buf = read_maybe_gz(dir, images)?;
    let lbl_buf = read_maybe_gz(dir, labels)?;
    let (n, r, c, pixels) = parse_images(&img_buf)?;
    let (nl, lbls) = parse_labels(&lbl_buf)?;
    if n != nl {
        return Err(Error::DataFile(format!(
            "image count {n} != label count {nl}"
        )));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let labels = lbls.iter().map(|&l| l as i32).collect();
    Ok((data, r, c, labels))
}
