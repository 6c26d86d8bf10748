//! Cost report rendering: exact-count CSV and an aligned text table with
//! the x10^4 / x10^8 scaling of the reference tables (two decimals,
//! truncated toward zero).

use std::path::Path;

use crate::cost::{scaled_truncated, CostReport};
use crate::error::Result;
use crate::search::{ChannelDecision, ShapeKind};

use super::write_atomic;

pub fn cost_to_csv(report: &CostReport) -> String {
    let mut out =
        String::from("name,params_original,params_decomposed,flops_original,flops_decomposed,out_h,out_w\n");
    for l in &report.layers {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            l.name,
            l.params_original,
            l.params_decomposed,
            l.flops_original,
            l.flops_decomposed,
            l.out_h,
            l.out_w
        ));
    }
    out.push_str(&format!(
        "total,{},{},{},{},,\n",
        report.total_params_original,
        report.total_params_decomposed,
        report.total_flops_original,
        report.total_flops_decomposed
    ));
    if let (Some(p), Some(f)) = (report.params_percent(), report.flops_percent()) {
        out.push_str(&format!("percent_of_baseline,,{p:.2},,{f:.2},,\n"));
    }
    out
}

pub fn export_cost_csv(report: &CostReport, path: &Path) -> Result<()> {
    write_atomic(path, cost_to_csv(report).as_bytes())
}

/// Aligned text table: one row per main-branch layer in declaration order,
/// a subtotal row for shortcut-branch convolutions, and overall totals.
pub fn cost_to_text(report: &CostReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>12} {:>12} {:>12} {:>12}\n",
        "layer", "params", "params'", "flops", "flops'"
    ));
    out.push_str(&format!(
        "{:<10} {:>12} {:>12} {:>12} {:>12}\n",
        "", "(x10^4)", "(x10^4)", "(x10^8)", "(x10^8)"
    ));
    let mut shortcut = (0u64, 0u64, 0u64, 0u64);
    for l in &report.layers {
        if l.shortcut_branch {
            shortcut.0 += l.params_original;
            shortcut.1 += l.params_decomposed;
            shortcut.2 += l.flops_original;
            shortcut.3 += l.flops_decomposed;
            continue;
        }
        out.push_str(&format!(
            "{:<10} {:>12} {:>12} {:>12} {:>12}\n",
            l.name,
            scaled_truncated(l.params_original, 4),
            scaled_truncated(l.params_decomposed, 4),
            scaled_truncated(l.flops_original, 8),
            scaled_truncated(l.flops_decomposed, 8)
        ));
    }
    if shortcut != (0, 0, 0, 0) {
        out.push_str(&format!(
            "{:<10} {:>12} {:>12} {:>12} {:>12}\n",
            "shortcuts",
            scaled_truncated(shortcut.0, 4),
            scaled_truncated(shortcut.1, 4),
            scaled_truncated(shortcut.2, 8),
            scaled_truncated(shortcut.3, 8)
        ));
    }
    out.push_str(&format!(
        "{:<10} {:>12} {:>12} {:>12} {:>12}\n",
        "overall",
        scaled_truncated(report.total_params_original, 4),
        scaled_truncated(report.total_params_decomposed, 4),
        scaled_truncated(report.total_flops_original, 8),
        scaled_truncated(report.total_flops_decomposed, 8)
    ));
    if let (Some(p), Some(f)) = (report.params_percent(), report.flops_percent()) {
        out.push_str(&format!(
            "{:<10} {:>12} {:>11.2}% {:>12} {:>11.2}%\n",
            "of base", "", trunc2(p), "", trunc2(f)
        ));
    }
    out
}

fn trunc2(v: f64) -> f64 {
    (v * 100.0).trunc() / 100.0
}

/// Per-layer decision table for the search report.
pub fn decisions_to_text(decisions: &[ChannelDecision]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>12} {:>11} {:>11} {:>10} {:>8}\n",
        "layer", "threshold", "cylinder", "ladder", "shape", "clamped"
    ));
    for d in decisions {
        let shape = match d.shape {
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::InheritedLadder => "inherited",
        };
        let flags = match (d.clamped, d.both_cycles_clamped) {
            (false, false) => "-",
            (true, false) => "walk",
            (false, true) => "cycles",
            (true, true) => "both",
        };
        out.push_str(&format!(
            "{:<10} {:>12.6e} {:>5}x{:<5} {:>5}x{:<5} {:>10} {:>8}\n",
            d.layer,
            d.threshold,
            d.cylinder.0,
            d.cylinder.1,
            d.ladder.0,
            d.ladder.1,
            shape,
            flags
        ));
    }
    out
}
