//! File formats: NIfTI volumes, JSON reports and the subject manifest.

mod manifest;
pub mod nifti;

pub use manifest::{read_manifest, write_manifest, ManifestEntry};
pub use nifti::{load_nifti, read_nifti, save_nifti, write_nifti, Datatype, Endian, NiftiHeader};

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

/// Serializes any value as pretty JSON at `path`.
///
/// Floats are written in shortest round-trip form, so re-parsing reproduces
/// them exactly.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_metrics_json(report: &MetricsReport, path: impl AsRef<Path>) -> Result<()> {
    write_json(report, path)
}
