//! Unsupervised architecture search: normalized-distortion evaluation,
//! the shrinking-rate traversal, threshold selection, cylinder/ladder
//! channel determination, and the whole-model driver.
//!
//! Everything here is driven by unannotated sample batches only; the
//! criterion is the relative change a decomposition causes in a layer's
//! batch-normalized output.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convnet::{
    batch_norm, batch_norm_index_of, decomposed_forward, forward_until, FeatureBatch, ModelSpec,
    Node,
};
use crate::cost::{cost_report, CostReport};
use crate::error::{Error, Result};
use crate::tucker::{tucker_decompose_default, TuckerFactors};

/// How the per-layer distortion threshold is chosen from a traversal curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ThresholdPolicy {
    /// Use the supplied per-layer values verbatim.
    Manual(BTreeMap<String, f64>),
    /// Pick the curve value at the point of maximal second-order forward
    /// difference (the sharpest bend); ties and flat curves resolve to the
    /// largest qualifying shrinking rate.
    Knee,
}

/// Distortion margin added to the threshold during the ladder cycles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Margin {
    /// Fraction of the layer threshold (default 0.05).
    Relative(f64),
    Absolute(f64),
}

impl Default for Margin {
    fn default() -> Self {
        Margin::Relative(0.05)
    }
}

impl Margin {
    fn resolve(&self, threshold: f64) -> f64 {
        match *self {
            Margin::Relative(r) => r * threshold,
            Margin::Absolute(a) => a,
        }
    }
}

/// Which configuration the downward walk records when the threshold is
/// crossed: the first one exceeding it (the literal reading) or the last
/// one still under it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopRule {
    FirstExceeding,
    LastNotExceeding,
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    /// Shrinking-rate step between traversal samples.
    pub epsilon: f64,
    /// Lower bound of the shrinking rate.
    pub tau: f64,
    /// Start shrinking rate per layer group name.
    pub start_gamma: BTreeMap<String, f64>,
    /// Start rate for layers without a group assignment.
    pub start_default: f64,
    pub margin: Margin,
    pub threshold_policy: ThresholdPolicy,
    pub stop_rule: StopRule,
    /// Number of equal sub-batches the distortion is averaged over
    /// during traversal (1 = use the whole batch once).
    pub repeats: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let mut start_gamma = BTreeMap::new();
        start_gamma.insert("bottom".to_string(), 0.50);
        start_gamma.insert("middle".to_string(), 0.30);
        Self {
            epsilon: 0.05,
            tau: 0.20,
            start_gamma,
            start_default: 0.50,
            margin: Margin::default(),
            threshold_policy: ThresholdPolicy::Knee,
            stop_rule: StopRule::FirstExceeding,
            repeats: 1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, batch: &FeatureBatch) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        for (group, &start) in
            std::iter::once((&"default".to_string(), &self.start_default)).chain(&self.start_gamma)
        {
            if !(start <= 1.0 && start >= self.tau) {
                return Err(Error::Config(format!(
                    "start shrinking rate for '{group}' must satisfy tau <= start <= 1, \
                     got start {} with tau {}",
                    start, self.tau
                )));
            }
        }
        let margin_value = match self.margin {
            Margin::Relative(r) => r,
            Margin::Absolute(a) => a,
        };
        if margin_value < 0.0 {
            return Err(Error::Config(format!(
                "distortion margin must be nonnegative, got {margin_value}"
            )));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if batch.batch_size() < 2 * self.repeats {
            return Err(Error::Config(format!(
                "batch of {} cannot provide {} sub-batches of size >= 2",
                batch.batch_size(),
                self.repeats
            )));
        }
        Ok(())
    }

    fn start_for(&self, model: &ModelSpec, layer: &str) -> f64 {
        model
            .meta
            .groups
            .get(layer)
            .and_then(|g| self.start_gamma.get(g))
            .copied()
            .unwrap_or(self.start_default)
    }
}

/// One layer's traversal output: (shrinking rate, normalized distortion)
/// samples with strictly decreasing rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionCurve {
    pub layer: String,
    pub samples: Vec<(f64, f64)>,
}

/// Result of the channel-number determination for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDecision {
    pub layer: String,
    pub threshold: f64,
    pub cylinder: (usize, usize),
    pub ladder: (usize, usize),
    pub shape: ShapeKind,
    /// The downward walk hit the rank floor without crossing the threshold.
    pub clamped: bool,
    /// Both ladder cycles ended on a rank clamp instead of the margin.
    pub both_cycles_clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    /// Equal-channel layer: cylinder plus a derived ladder pair.
    Cylinder,
    /// Unequal-channel layer: the proportional walk already produced a
    /// ladder; both variants reuse it.
    InheritedLadder,
}

/// Search output: per-layer decisions plus the two assembled variants.
pub struct ArchitectureResult {
    pub decisions: Vec<ChannelDecision>,
    pub curves: Vec<DistortionCurve>,
    pub cylinder_model: ModelSpec,
    pub ladder_model: ModelSpec,
    pub cylinder_cost: CostReport,
    pub ladder_cost: CostReport,
}

/// Cached per-layer context: the input reaching the layer and its
/// batch-normalized reference output on the pristine model.
struct LayerContext {
    input: FeatureBatch,
    reference: FeatureBatch,
    reference_norm: f64,
    bn_scale: Vec<f64>,
    bn_shift: Vec<f64>,
    bn_eps: f64,
    kernel: crate::tensor::DenseTensor,
    stride: usize,
    padding: usize,
    j_in: usize,
    j_out: usize,
}

fn layer_context(model: &ModelSpec, layer: &str, batch: &FeatureBatch) -> Result<LayerContext> {
    let idx = model.node_index(layer)?;
    let conv = match &model.nodes[idx] {
        Node::Conv(c) => c,
        Node::Group(_) => {
            return Err(Error::Policy(format!(
                "layer '{layer}' is already decomposed"
            )))
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "'{layer}' is not a conv layer"
            )))
        }
    };
    if !conv.spec.decomposable {
        return Err(Error::Policy(format!(
            "layer '{layer}' is marked non-decomposable"
        )));
    }
    let bn_idx = batch_norm_index_of(model, layer)?;
    let bn = match &model.nodes[bn_idx] {
        Node::BatchNorm(b) => b.clone(),
        _ => unreachable!("batch_norm_index_of returns a batch-norm node"),
    };

    let trace = forward_until(model, batch, bn_idx)?;
    let input = match conv.input.as_deref() {
        Some(src) => trace.outputs[model.node_index(src)?].clone(),
        None if idx == 0 => batch.clone(),
        None => trace.outputs[idx - 1].clone(),
    };
    let reference = trace.outputs[bn_idx].clone();
    let reference_norm = reference.frobenius_norm();
    Ok(LayerContext {
        input,
        reference,
        reference_norm,
        bn_scale: bn.scale,
        bn_shift: bn.shift,
        bn_eps: bn.eps,
        kernel: conv.kernel.clone(),
        stride: conv.spec.stride,
        padding: conv.spec.padding,
        j_in: conv.spec.in_channels,
        j_out: conv.spec.out_channels,
    })
}

impl LayerContext {
    /// Normalized distortion at the given core ranks. The layers upstream
    /// of the target are untouched by a replacement, so only the layer
    /// itself is recomputed against the cached input.
    fn distortion_at(&self, rank_in: usize, rank_out: usize) -> Result<f64> {
        if self.reference_norm == 0.0 {
            return Err(Error::DegenerateInput(
                "reference output has zero norm; the distortion ratio is undefined".into(),
            ));
        }
        let factors = tucker_decompose_default(&self.kernel, rank_in, rank_out)?;
        self.distortion_of(&factors)
    }

    fn distortion_of(&self, factors: &TuckerFactors) -> Result<f64> {
        let raw = decomposed_forward(&self.input, factors, self.stride, self.padding)?;
        let replaced = batch_norm(&raw, &self.bn_scale, &self.bn_shift, self.bn_eps)?;
        let mut diff = 0.0f64;
        for (a, b) in replaced
            .tensor()
            .data()
            .iter()
            .zip(self.reference.tensor().data())
        {
            diff += (a - b) * (a - b);
        }
        Ok(diff.sqrt() / self.reference_norm)
    }
}

/// Normalized distortion (relative change of the layer's batch-normalized
/// output) caused by replacing the layer with its rank-(I, O) decomposition.
pub fn cal_norm_distortion(
    model: &ModelSpec,
    layer: &str,
    batch: &FeatureBatch,
    rank_in: usize,
    rank_out: usize,
) -> Result<f64> {
    let ctx = layer_context(model, layer, batch)?;
    if ctx.reference_norm == 0.0 {
        return Err(Error::DegenerateInput(
            "reference output has zero norm; the distortion ratio is undefined".into(),
        ));
    }
    ctx.distortion_at(rank_in, rank_out)
}

fn split_batch(batch: &FeatureBatch, parts: usize) -> Result<Vec<FeatureBatch>> {
    if parts <= 1 {
        return Ok(vec![batch.clone()]);
    }
    let b = batch.batch_size();
    let per = b / parts;
    if per < 2 {
        return Err(Error::Config(format!(
            "cannot split a batch of {b} into {parts} parts of size >= 2"
        )));
    }
    let (c, h, w) = (batch.channels(), batch.height(), batch.width());
    let plane = c * h * w;
    let mut out = Vec::with_capacity(parts);
    for p in 0..parts {
        let lo = p * per * plane;
        let hi = if p + 1 == parts { b * plane } else { lo + per * plane };
        let rows = (hi - lo) / plane;
        out.push(FeatureBatch::new(crate::tensor::DenseTensor::new(
            vec![rows, c, h, w],
            batch.tensor().data()[lo..hi].to_vec(),
        )?)?);
    }
    Ok(out)
}

/// Shrinking rates `start, start - eps, ...` down to (and including) `tau`.
fn gamma_sequence(start: f64, epsilon: f64, tau: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0u32;
    loop {
        let gamma = start - f64::from(k) * epsilon;
        if gamma < tau - 1e-9 {
            break;
        }
        out.push(gamma);
        k += 1;
    }
    out
}

fn rank_at(channels: usize, gamma: f64) -> usize {
    (((channels as f64) * gamma + 1e-9).floor() as usize).max(1)
}

/// Sweeps the shrinking rate downward for one layer, recording the
/// normalized distortion of the floor-rank decomposition at each rate.
pub fn traverse_distortion(
    model: &ModelSpec,
    layer: &str,
    batch: &FeatureBatch,
    cfg: &SearchConfig,
) -> Result<DistortionCurve> {
    cfg.validate(batch)?;
    let start = cfg.start_for(model, layer);
    let contexts: Vec<LayerContext> = split_batch(batch, cfg.repeats)?
        .iter()
        .map(|b| layer_context(model, layer, b))
        .collect::<Result<_>>()?;

    let mut samples = Vec::new();
    for gamma in gamma_sequence(start, cfg.epsilon, cfg.tau) {
        let (j_in, j_out) = (contexts[0].j_in, contexts[0].j_out);
        let rank_in = rank_at(j_in, gamma);
        let rank_out = rank_at(j_out, gamma);
        let mut acc = 0.0;
        for ctx in &contexts {
            acc += ctx.distortion_at(rank_in, rank_out).map_err(|e| match e {
                Error::Numerical(m) => {
                    Error::Numerical(format!("layer {layer} at rate {gamma:.2}: {m}"))
                }
                other => other,
            })?;
        }
        samples.push((gamma, acc / contexts.len() as f64));
    }
    Ok(DistortionCurve {
        layer: layer.to_string(),
        samples,
    })
}

/// Threshold selection from a traversal curve.
pub fn select_threshold(curve: &DistortionCurve, policy: &ThresholdPolicy) -> Result<f64> {
    if curve.samples.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "empty traversal curve for layer {}",
            curve.layer
        )));
    }
    match policy {
        ThresholdPolicy::Manual(map) => map.get(&curve.layer).copied().ok_or_else(|| {
            Error::Config(format!(
                "no manual threshold entry for layer {}",
                curve.layer
            ))
        }),
        ThresholdPolicy::Knee => {
            let values: Vec<f64> = curve.samples.iter().map(|&(_, d)| d).collect();
            if values.len() < 3 {
                return Ok(values[0]);
            }
            // Centered second difference over interior points. Curvature
            // below float noise counts as zero so an exactly linear curve
            // falls through to the conservative default.
            let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let tol = 1e-12 * scale;
            let mut best_idx = None;
            let mut best = tol;
            for j in 1..values.len() - 1 {
                let d2 = values[j + 1] - 2.0 * values[j] + values[j - 1];
                if d2 > best {
                    best = d2;
                    best_idx = Some(j);
                }
            }
            // No positive curvature anywhere: fall back to the largest
            // shrinking rate, the most conservative compression.
            Ok(match best_idx {
                Some(j) => values[j],
                None => values[0],
            })
        }
    }
}

fn proportional_steps(j_in: usize, j_out: usize) -> (usize, usize) {
    if j_in < j_out {
        (1, (j_out / j_in).max(1))
    } else {
        ((j_in / j_out).max(1), 1)
    }
}

/// Channel-number determination for one layer at a fixed threshold.
///
/// The downward walk shrinks both ranks in proportional steps until the
/// distortion crosses the threshold. Unequal-channel layers stop there
/// with an inherited ladder; equal-channel layers record the cylinder and
/// then run the two rank-exchanging cycles against threshold + margin,
/// keeping the pair with the smaller rank product.
pub fn determine_channels(
    model: &ModelSpec,
    layer: &str,
    batch: &FeatureBatch,
    cfg: &SearchConfig,
    threshold: f64,
) -> Result<ChannelDecision> {
    let ctx = layer_context(model, layer, batch)?;
    if ctx.reference_norm == 0.0 {
        return Err(Error::DegenerateInput(
            "reference output has zero norm; the distortion ratio is undefined".into(),
        ));
    }
    let (j_in, j_out) = (ctx.j_in, ctx.j_out);
    let (step_in, step_out) = proportional_steps(j_in, j_out);

    // Downward walk from full ranks.
    let (mut i, mut o) = (j_in, j_out);
    let mut clamped = false;
    let mut last_under: Option<(usize, usize)> = None;
    loop {
        let next = (i.saturating_sub(step_in).max(1), o.saturating_sub(step_out).max(1));
        if next == (i, o) {
            clamped = true;
            break;
        }
        let (ni, no) = next;
        let d = ctx.distortion_at(ni, no)?;
        if d > threshold {
            i = ni;
            o = no;
            break;
        }
        last_under = Some((ni, no));
        i = ni;
        o = no;
    }
    let walk_result = match (cfg.stop_rule, clamped) {
        (StopRule::LastNotExceeding, false) => last_under.unwrap_or((i, o)),
        _ => (i, o),
    };
    let (ci, co) = walk_result;

    if j_in != j_out {
        return Ok(ChannelDecision {
            layer: layer.to_string(),
            threshold,
            cylinder: (ci, co),
            ladder: (ci, co),
            shape: ShapeKind::InheritedLadder,
            clamped,
            both_cycles_clamped: false,
        });
    }

    // Two rank-exchanging cycles at a fixed rank sum.
    let limit = threshold + cfg.margin.resolve(threshold);
    let cycle = |di: isize, d_o: isize| -> Result<((usize, usize), bool)> {
        let (mut i, mut o) = (ci as isize, co as isize);
        loop {
            let (ni, no) = (i + di, o + d_o);
            if ni < 1 || no < 1 || ni > j_in as isize || no > j_out as isize {
                // Hit a rank clamp without crossing the margin.
                return Ok(((i as usize, o as usize), true));
            }
            i = ni;
            o = no;
            let d = ctx.distortion_at(i as usize, o as usize)?;
            if d > limit {
                return Ok(((i as usize, o as usize), false));
            }
        }
    };
    let ((i2, o2), clamp2) = cycle(-1, 1)?;
    let ((i3, o3), clamp3) = cycle(1, -1)?;
    let ladder = if i2 * o2 < i3 * o3 { (i2, o2) } else { (i3, o3) };

    Ok(ChannelDecision {
        layer: layer.to_string(),
        threshold,
        cylinder: (ci, co),
        ladder,
        shape: ShapeKind::Cylinder,
        clamped,
        both_cycles_clamped: clamp2 && clamp3,
    })
}

/// Whole-model driver: traverses every decomposable layer bottom to top,
/// selects its threshold, determines its channel numbers, and assembles
/// the cylinder- and ladder-shaped variants with cost reports against the
/// original model.
pub fn search_architecture(
    model: &ModelSpec,
    batch: &FeatureBatch,
    cfg: &SearchConfig,
) -> Result<ArchitectureResult> {
    cfg.validate(batch)?;
    model.validate()?;
    let layers = model.decomposable_layers();

    // Per-layer work is independent: every decision is evaluated against
    // the same pristine base model.
    let per_layer: Vec<Result<(DistortionCurve, ChannelDecision)>> = layers
        .par_iter()
        .map(|layer| {
            let curve = traverse_distortion(model, layer, batch, cfg)?;
            let threshold = select_threshold(&curve, &cfg.threshold_policy)?;
            let decision = determine_channels(model, layer, batch, cfg, threshold)?;
            Ok((curve, decision))
        })
        .collect();

    let mut curves = Vec::with_capacity(layers.len());
    let mut decisions = Vec::with_capacity(layers.len());
    for (layer, item) in layers.iter().zip(per_layer) {
        let (curve, decision) =
            item.map_err(|e| match e {
                Error::DegenerateInput(m) => {
                    Error::DegenerateInput(format!("layer {layer}: {m}"))
                }
                Error::Numerical(m) => Error::Numerical(format!("layer {layer}: {m}")),
                other => other,
            })?;
        curves.push(curve);
        decisions.push(decision);
    }

    let assemble = |pick: &dyn Fn(&ChannelDecision) -> (usize, usize)| -> Result<ModelSpec> {
        let mut out = model.clone();
        for decision in &decisions {
            let (rank_in, rank_out) = pick(decision);
            let kernel = match out.node(&decision.layer)? {
                Node::Conv(c) => c.kernel.clone(),
                _ => unreachable!("decisions name conv layers"),
            };
            let factors = tucker_decompose_default(&kernel, rank_in, rank_out)?;
            out = out.replace_layer(&decision.layer, factors)?;
        }
        Ok(out)
    };

    let cylinder_model = assemble(&|d: &ChannelDecision| d.cylinder)?;
    let ladder_model = assemble(&|d: &ChannelDecision| d.ladder)?;
    let cylinder_cost = cost_report(&cylinder_model, Some(model))?;
    let ladder_cost = cost_report(&ladder_model, Some(model))?;

    Ok(ArchitectureResult {
        decisions,
        curves,
        cylinder_model,
        ladder_model,
        cylinder_cost,
        ladder_cost,
    })
}
