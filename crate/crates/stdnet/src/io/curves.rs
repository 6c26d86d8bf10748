//! CSV export/import of distortion curves and the thresholds document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::DistortionCurve;

use super::write_atomic;

/// CSV with header `layer,gamma,distortion`; rows grouped by layer in the
/// given order, rates descending, distortion at 9 significant digits.
pub fn curves_to_csv(curves: &[DistortionCurve]) -> String {
    let mut out = String::from("layer,gamma,distortion\n");
    for curve in curves {
        for &(gamma, distortion) in &curve.samples {
            out.push_str(&format!("{},{:.4},{:.8e}\n", curve.layer, gamma, distortion));
        }
    }
    out
}

pub fn export_curves(curves: &[DistortionCurve], path: &Path) -> Result<()> {
    write_atomic(path, curves_to_csv(curves).as_bytes())
}

pub fn curves_from_csv(text: &str) -> Result<Vec<DistortionCurve>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("layer,gamma,distortion") => {}
        other => {
            return Err(Error::InvalidArgument(format!(
                "unexpected curve CSV header: {other:?}"
            )))
        }
    }
    let mut curves: Vec<DistortionCurve> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (layer, gamma, distortion) = (
            parts.next().unwrap_or_default(),
            parts.next().unwrap_or_default(),
            parts.next().unwrap_or_default(),
        );
        let gamma: f64 = gamma.parse().map_err(|_| {
            Error::InvalidArgument(format!("bad gamma on CSV line {}", lineno + 2))
        })?;
        let distortion: f64 = distortion.parse().map_err(|_| {
            Error::InvalidArgument(format!("bad distortion on CSV line {}", lineno + 2))
        })?;
        match curves.last_mut() {
            Some(last) if last.layer == layer => last.samples.push((gamma, distortion)),
            _ => curves.push(DistortionCurve {
                layer: layer.to_string(),
                samples: vec![(gamma, distortion)],
            }),
        }
    }
    Ok(curves)
}

pub fn import_curves(path: &Path) -> Result<Vec<DistortionCurve>> {
    curves_from_csv(&std::fs::read_to_string(path)?)
}

/// One per-layer threshold entry in the thresholds document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub layer: String,
    pub value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ThresholdsFile {
    thresholds: Vec<ThresholdEntry>,
}

pub fn save_thresholds(entries: &[ThresholdEntry], path: &Path) -> Result<()> {
    let doc = ThresholdsFile {
        thresholds: entries.to_vec(),
    };
    let mut json = serde_json::to_vec_pretty(&doc)?;
    json.push(b'\n');
    write_atomic(path, &json)
}

pub fn load_thresholds(path: &Path) -> Result<Vec<ThresholdEntry>> {
    let text = std::fs::read_to_string(path)?;
    let doc: ThresholdsFile = serde_json::from_str(&text)?;
    Ok(doc.thresholds)
}
