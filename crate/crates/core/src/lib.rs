//! Contamination detection toolkit: model backends, datasets, detectors and reports.

pub mod backend;
pub mod config;
pub mod dataset;
pub mod detectors;
pub mod oracle;
pub mod prompts;
pub mod report;
pub mod result;
pub mod rng;
pub mod runner;
pub mod stats;
pub mod synthetic;
pub mod text_metrics;

use std::io::Write;
use std::path::Path;

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Writes through a temporary file in the same directory and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
