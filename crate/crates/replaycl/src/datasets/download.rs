//! Raw-file acquisition from canonical mirrors.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

use super::presets::Preset;

/// Fetch every missing raw file for `preset` into `<dir>`. Presets without
/// download URLs (EMNIST zip, CIFAR tarballs, SVHN .mat, miniImageNet) must
/// be staged by hand; the error message says which files are expected.
pub fn fetch_raw(preset: &Preset, raw_dir: &Path) -> Result<()> {
    if preset.download_urls.is_empty() {
        return Err(Error::DataFile(format!(
            "no downloadable mirror for `{}`; place {:?} (raw) or a canonical cache under the data root",
            preset.name,
            preset.raw_files(),
        )));
    }
    std::fs::create_dir_all(raw_dir)?;
    for url in preset.download_urls {
        let fname = url.rsplit('/').next().unwrap();
        let target = raw_dir.join(fname);
        let bare = fname.strip_suffix(".gz").unwrap_or(fname);
        if target.exists() || raw_dir.join(bare).exists() {
            continue;
        }
        let body = http_get(url)?;
        let tmp = target.with_extension("part");
        std::fs::write(&tmp, &body)?;
        std::fs::rename(&tmp, &target)?;
    }
    Ok(())
}

fn http_get(url: &str) -> Result<Vec<u8>> {
    let resp = ureq::get(url)
        .timeout(std::time::Duration::from_secs(300))
        .call()
        .map_err(|e| Error::Download {
            url: url.to_string(),
            reason: e.to_string(),
        })?;
    let mut body = Vec::new();
    resp.into_reader()
        .read_to_end(&mut body)
        .map_err(|e| Error::Download {
            url: url.to_string(),
            reason: e.to_string(),
        })?;
    Ok(body)
}
