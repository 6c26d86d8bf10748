//! Closed-form parameter/FLOP accounting for plain and decomposed
//! convolutions, plus the shrinking-rate complexity analysis.
//!
//! Counts exclude biases and non-convolutional parameters. FLOPs are
//! `params * H_out * W_out` per layer.

use serde::{Deserialize, Serialize};

use crate::convnet::{ModelSpec, Node};
use crate::error::{Error, Result};

/// Parameters of a plain convolution: `J_in * J_out * D^2`.
pub fn layer_params(j_in: u64, j_out: u64, d: u64) -> u64 {
    j_in * j_out * d * d
}

/// Parameters of the decomposed three-layer group:
/// `J_in*I + I*O*D^2 + O*J_out`.
pub fn decomposed_params(j_in: u64, j_out: u64, d: u64, i: u64, o: u64) -> Result<u64> {
    decomposed_params_area(j_in, j_out, d * d, i, o)
}

fn decomposed_params_area(j_in: u64, j_out: u64, area: u64, i: u64, o: u64) -> Result<u64> {
    if i == 0 || i > j_in || o == 0 || o > j_out {
        return Err(Error::InvalidArgument(format!(
            "ranks ({i}, {o}) out of bounds for a {j_in}x{j_out} channel kernel"
        )));
    }
    Ok(j_in * i + i * o * area + o * j_out)
}

/// FLOPs of a layer given its parameter count and output spatial dims.
pub fn layer_flops(params: u64, h_out: u64, w_out: u64) -> u64 {
    params * h_out * w_out
}

/// Largest shrinking rate at which decomposition still reduces cost, for
/// kernel area `n` (positive root of `n*g^2 + 2*g - n = 0`).
pub fn shrink_threshold(n: u64) -> f64 {
    let n = n as f64;
    (-1.0 + (1.0 + n * n).sqrt()) / n
}

/// Relative complexity cut `1 - (n*g^2 + 2*g)/n` for equal channel counts
/// and equal ranks `I = O = g*J`.
pub fn reduction_fraction(n: u64, gamma: f64) -> f64 {
    let n = n as f64;
    1.0 - (n * gamma * gamma + 2.0 * gamma) / n
}

/// Share of the channel-restoring third stage in the complexity reduction:
/// `g / (n - n*g^2 - 2*g)`. Domain error once the reduction reaches zero.
pub fn step3_fraction(n: u64, gamma: f64) -> Result<f64> {
    let nf = n as f64;
    let denom = nf - nf * gamma * gamma - 2.0 * gamma;
    if denom <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gamma {gamma} is outside the reduction region for kernel area {n}"
        )));
    }
    Ok(gamma / denom)
}

/// Parameter cost of a ladder-shaped core tensor relative to the
/// cylinder-shaped one with the same rank sum (`I_c = O_c = (I+O)/2`).
pub fn ladder_vs_cylinder_ratio(j: u64, n: u64, i: u64, o: u64) -> Result<f64> {
    if (i + o) % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "rank sum {} must be even to define the matching cylinder",
            i + o
        )));
    }
    let mid = (i + o) / 2;
    let ladder = decomposed_params_area(j, j, n, i, o)?;
    let cylinder = decomposed_params_area(j, j, n, mid, mid)?;
    Ok(ladder as f64 / cylinder as f64)
}

/// Break-even shrinking rate for a depthwise-separable block with kernel
/// area `n` and channel count `x`: positive root of
/// `n*x*g^2 + (x+1)*g - n = 0`. Always at most `1/sqrt(x)`.
pub fn ds_shrink_threshold(n: u64, x: u64) -> f64 {
    let (n, x) = (n as f64, x as f64);
    let root = (-(x + 1.0) + ((x + 1.0) * (x + 1.0) + 4.0 * n * n * x).sqrt()) / (2.0 * n * x);
    debug_assert!(root <= 1.0 / x.sqrt() + 1e-12);
    root
}

/// Cost of one convolution-bearing layer in original and decomposed form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub params_original: u64,
    pub params_decomposed: u64,
    pub flops_original: u64,
    pub flops_decomposed: u64,
    pub out_h: u64,
    pub out_w: u64,
    /// True for convolutions on a transformed-shortcut branch; these count
    /// toward the totals but are not part of the main layer sequence.
    pub shortcut_branch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params_original: u64,
    pub total_params_decomposed: u64,
    pub total_flops_original: u64,
    pub total_flops_decomposed: u64,
    /// Totals of the comparison model, when one was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_params: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_flops: Option<u64>,
}

impl CostReport {
    /// Decomposed parameter total as a percentage of the baseline total.
    pub fn params_percent(&self) -> Option<f64> {
        self.baseline_params
            .map(|b| 100.0 * self.total_params_decomposed as f64 / b as f64)
    }

    pub fn flops_percent(&self) -> Option<f64> {
        self.baseline_flops
            .map(|b| 100.0 * self.total_flops_decomposed as f64 / b as f64)
    }
}

/// Per-layer and total parameter/FLOP counts of a model; a baseline model
/// provides the reference totals for percentage columns.
pub fn cost_report(model: &ModelSpec, baseline: Option<&ModelSpec>) -> Result<CostReport> {
    let mut layers = Vec::new();
    let mut totals = (0u64, 0u64, 0u64, 0u64);
    for node in &model.nodes {
        let (spec, decomposed, shortcut_branch) = match node {
            Node::Conv(c) => (&c.spec, None, c.shortcut_branch),
            Node::Group(g) => (
                &g.spec,
                Some((g.factors.rank_in() as u64, g.factors.rank_out() as u64)),
                g.shortcut_branch,
            ),
            _ => continue,
        };
        let (j_in, j_out, d) = (
            spec.in_channels as u64,
            spec.out_channels as u64,
            spec.kernel_size as u64,
        );
        let params_original = layer_params(j_in, j_out, d);
        let params_decomposed = match decomposed {
            Some((i, o)) => decomposed_params(j_in, j_out, d, i, o)?,
            None => params_original,
        };
        let (h, w) = (spec.out_h as u64, spec.out_w as u64);
        let cost = LayerCost {
            name: spec.name.clone(),
            params_original,
            params_decomposed,
            flops_original: layer_flops(params_original, h, w),
            flops_decomposed: layer_flops(params_decomposed, h, w),
            out_h: h,
            out_w: w,
            shortcut_branch,
        };
        totals.0 += cost.params_original;
        totals.1 += cost.params_decomposed;
        totals.2 += cost.flops_original;
        totals.3 += cost.flops_decomposed;
        layers.push(cost);
    }
    let baseline_totals = match baseline {
        Some(b) => {
            let r = cost_report(b, None)?;
            Some((r.total_params_decomposed, r.total_flops_decomposed))
        }
        None => None,
    };
    Ok(CostReport {
        layers,
        total_params_original: totals.0,
        total_params_decomposed: totals.1,
        total_flops_original: totals.2,
        total_flops_decomposed: totals.3,
        baseline_params: baseline_totals.map(|t| t.0),
        baseline_flops: baseline_totals.map(|t| t.1),
    })
}

/// Renders `value / 10^scale_pow` with two decimals, truncating toward
/// zero the way the reference cost tables do.
pub fn scaled_truncated(value: u64, scale_pow: u32) -> String {
    // value / 10^scale_pow with two decimals == value / 10^(scale_pow-2)
    // truncated to an integer count of hundredths.
    let divisor = 10u64.pow(scale_pow - 2);
    let hundredths = value / divisor;
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}
