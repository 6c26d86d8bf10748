//! Serialization: the STDT weight container, JSON model documents, CSV
//! curve/report files. All writes are atomic (temp file + rename).

pub mod container;
pub mod curves;
pub mod model_file;
pub mod report;

pub use container::{NamedTensor, WeightContainer};
pub use curves::{
    curves_from_csv, curves_to_csv, export_curves, import_curves, load_thresholds,
    save_thresholds, ThresholdEntry,
};
pub use model_file::{load_model, save_model};
pub use report::{cost_to_csv, cost_to_text, decisions_to_text, export_cost_csv};

use std::path::Path;

use crate::error::Result;

/// Writes via a sibling temp file and rename so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    if !parent.as_os_str().is_empty() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp-{}",
        path.extension()
            .map(|e| e.to_string_lossy().into_owned())
            .unwrap_or_default(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
