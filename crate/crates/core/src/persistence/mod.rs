//! Single-file checkpoints, run configuration files, and atomic writes.

mod checkpoint;
mod config;

use std::io::Write;
use std::path::Path;

pub use checkpoint::{
    checksum, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION, MAGIC,
};
pub use config::{default_epochs, AnalyzeSection, EncoderSection, EraseSection, RunConfigFile};

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, so readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(Error::file(path))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}
