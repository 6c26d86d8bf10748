//! Runtime invariant suite behind the `verify` subcommand: full-rank
//! equivalence, batch-norm output statistics, and cost-model cross-checks
//! on a concrete model and batch.

use crate::convnet::{forward_trace, FeatureBatch, ModelSpec, Node};
use crate::cost::{cost_report, decomposed_params, layer_params};
use crate::error::Result;
use crate::search::cal_norm_distortion;
use crate::tucker::tucker_decompose_default;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Runs the suite; every returned check carries a pass flag and detail.
pub fn run_invariant_suite(model: &ModelSpec, batch: &FeatureBatch) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    model.validate()?;

    // Full-rank equivalence: replacing a layer at full ranks must leave
    // its normalized output essentially unchanged.
    for layer in model.decomposable_layers() {
        let (j_in, j_out) = match model.node(&layer)? {
            Node::Conv(c) => (c.spec.in_channels, c.spec.out_channels),
            _ => continue,
        };
        let d = cal_norm_distortion(model, &layer, batch, j_in, j_out)?;
        checks.push(Check {
            name: format!("full-rank equivalence {layer}"),
            passed: d < 1e-5,
            detail: format!("normalized distortion {d:.3e} (limit 1e-5)"),
        });
    }

    // Batch-norm statistics: identity-parameter nodes must emit
    // per-channel mean ~0 and variance ~1 wherever the incoming channel is
    // not degenerate relative to eps.
    let trace = forward_trace(model, batch)?;
    for (idx, node) in model.nodes.iter().enumerate() {
        let bn = match node {
            Node::BatchNorm(b)
                if b.scale.iter().all(|&s| s == 1.0) && b.shift.iter().all(|&s| s == 0.0) =>
            {
                b
            }
            _ => continue,
        };
        let input = &trace.outputs[idx - 1];
        let output = &trace.outputs[idx];
        let (b_sz, c, h, w) = (
            output.batch_size(),
            output.channels(),
            output.height(),
            output.width(),
        );
        let n = (b_sz * h * w) as f64;
        let plane = h * w;
        let mut worst_mean = 0.0f64;
        let mut worst_var_dev = 0.0f64;
        let mut skipped = 0usize;
        for ch in 0..c {
            let mut in_sum = 0.0;
            let mut in_sq = 0.0;
            let mut out_sum = 0.0;
            let mut out_sq = 0.0;
            for bi in 0..b_sz {
                let base = (bi * c + ch) * plane;
                for p in 0..plane {
                    let x = input.tensor().data()[base + p];
                    let y = output.tensor().data()[base + p];
                    in_sum += x;
                    in_sq += x * x;
                    out_sum += y;
                    out_sq += y * y;
                }
            }
            let in_var = in_sq / n - (in_sum / n) * (in_sum / n);
            if in_var < 1e3 * bn.eps {
                skipped += 1;
                continue;
            }
            let mean = out_sum / n;
            let var = out_sq / n - mean * mean;
            worst_mean = worst_mean.max(mean.abs());
            worst_var_dev = worst_var_dev.max((var - 1.0).abs());
        }
        // The variance of the normalized output is var/(var+eps); with the
        // degeneracy screen above the deviation stays within ~1e-2.
        let passed = worst_mean <= 1e-8 && worst_var_dev <= 1e-2;
        checks.push(Check {
            name: format!("batch-norm statistics {}", bn.name),
            passed,
            detail: format!(
                "max |mean| {worst_mean:.3e}, max |var-1| {worst_var_dev:.3e}, \
                 {skipped} degenerate channels skipped"
            ),
        });
    }

    // Cost cross-checks: FLOPs/params ratio is definitional, and a single
    // replacement shifts the total by exactly the closed-form delta.
    let report = cost_report(model, None)?;
    let ratio_ok = report
        .layers
        .iter()
        .all(|l| {
            l.flops_original == l.params_original * l.out_h * l.out_w
                && l.flops_decomposed == l.params_decomposed * l.out_h * l.out_w
        });
    checks.push(Check {
        name: "cost: flops equal params x H x W".into(),
        passed: ratio_ok,
        detail: format!("{} layer rows checked", report.layers.len()),
    });

    if let Some(layer) = model.decomposable_layers().first() {
        let (j_in, j_out, d) = match model.node(layer)? {
            Node::Conv(c) => (
                c.spec.in_channels as u64,
                c.spec.out_channels as u64,
                c.spec.kernel_size as u64,
            ),
            _ => unreachable!("decomposable layers are conv nodes"),
        };
        let (ri, ro) = ((j_in as usize).div_ceil(2), (j_out as usize).div_ceil(2));
        let kernel = match model.node(layer)? {
            Node::Conv(c) => c.kernel.clone(),
            _ => unreachable!(),
        };
        let replaced =
            model.replace_layer(layer, tucker_decompose_default(&kernel, ri, ro)?)?;
        let after = cost_report(&replaced, None)?;
        let expected = report.total_params_decomposed - layer_params(j_in, j_out, d)
            + decomposed_params(j_in, j_out, d, ri as u64, ro as u64)?;
        checks.push(Check {
            name: format!("cost: replacement delta at {layer}"),
            passed: after.total_params_decomposed == expected,
            detail: format!(
                "total {} after replacement, expected {expected}",
                after.total_params_decomposed
            ),
        });
    }

    Ok(checks)
}
