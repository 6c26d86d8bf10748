//! From-scratch forward evaluation: convolution, batch normalization,
//! decomposed three-layer groups, pooling, and whole-model graphs.
//!
//! Convolution follows the indexing `h_k = (h-1)*stride + k - padding` (1-based form),
//! with positions outside the zero-padded input contributing nothing.
//! Batch normalization always uses current-batch statistics.

mod srnet;

pub use srnet::{
    build_srnetc64, build_srnetc64_variant, srnetc64_cylinder_ranks, srnetc64_ladder_ranks,
    SrnetVariant,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Matrix};
use crate::tucker::TuckerFactors;

/// A batch of feature maps, stored `B x C x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    data: DenseTensor,
}

impl FeatureBatch {
    pub fn new(data: DenseTensor) -> Result<Self> {
        if data.ndim() != 4 {
            return Err(Error::InvalidArgument(format!(
                "feature batch must be B x C x H x W, got shape {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(DenseTensor::zeros(vec![b, c, h, w])?)
    }

    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn tensor(&self) -> &DenseTensor {
        &self.data
    }

    pub fn into_tensor(self) -> DenseTensor {
        self.data
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.frobenius_norm()
    }
}

/// Static description of one convolutional layer. `out_h`/`out_w` are the
/// nominal output spatial dims used by the cost model; runtime spatial dims
/// follow the actual input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub decomposable: bool,
}

impl ConvLayerSpec {
    fn check(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_size == 0
            || self.stride == 0
            || self.out_h == 0
            || self.out_w == 0
        {
            return Err(Error::InvalidArgument(format!(
                "conv layer {} has a zero dimension",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNode {
    pub spec: ConvLayerSpec,
    pub kernel: DenseTensor,
    /// Name of the node feeding this one; `None` chains from the previous
    /// node (or the model input for the first node).
    pub input: Option<String>,
    /// True for convolutions living on a transformed-shortcut branch.
    pub shortcut_branch: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupNode {
    /// Interface of the original convolution this group stands in for.
    pub spec: ConvLayerSpec,
    pub factors: TuckerFactors,
    pub input: Option<String>,
    pub shortcut_branch: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormNode {
    pub name: String,
    pub channels: usize,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub eps: f64,
    pub input: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AvgPoolNode {
    pub name: String,
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
    pub input: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShortcutAddNode {
    pub name: String,
    /// Second addend; the first is the chained input.
    pub source: String,
    pub input: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNode {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    /// `in_features x out_features`
    pub weight: Matrix,
    pub input: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Conv(ConvNode),
    Group(GroupNode),
    BatchNorm(BatchNormNode),
    Relu { name: String, input: Option<String> },
    AvgPool(AvgPoolNode),
    GlobalAvgPool { name: String, input: Option<String> },
    ShortcutAdd(ShortcutAddNode),
    Dense(DenseNode),
    Softmax { name: String, input: Option<String> },
}

impl Node {
    pub fn name(&self) -> &str {
        match self {
            Node::Conv(n) => &n.spec.name,
            Node::Group(n) => &n.spec.name,
            Node::BatchNorm(n) => &n.name,
            Node::Relu { name, .. } => name,
            Node::AvgPool(n) => &n.name,
            Node::GlobalAvgPool { name, .. } => name,
            Node::ShortcutAdd(n) => &n.name,
            Node::Dense(n) => &n.name,
            Node::Softmax { name, .. } => name,
        }
    }

    pub fn input(&self) -> Option<&str> {
        match self {
            Node::Conv(n) => n.input.as_deref(),
            Node::Group(n) => n.input.as_deref(),
            Node::BatchNorm(n) => n.input.as_deref(),
            Node::Relu { input, .. } => input.as_deref(),
            Node::AvgPool(n) => n.input.as_deref(),
            Node::GlobalAvgPool { input, .. } => input.as_deref(),
            Node::ShortcutAdd(n) => n.input.as_deref(),
            Node::Dense(n) => n.input.as_deref(),
            Node::Softmax { input, .. } => input.as_deref(),
        }
    }

    /// Output channel count given the input channel count.
    fn out_channels(&self, in_channels: usize) -> usize {
        match self {
            Node::Conv(n) => n.spec.out_channels,
            Node::Group(n) => n.spec.out_channels,
            Node::Dense(n) => n.out_features,
            _ => in_channels,
        }
    }
}

/// Per-model metadata carried through serialization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Start shrinking-rate group per layer name (e.g. "bottom"/"middle").
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, String>,
}

/// Ordered layer graph, evaluable in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub nodes: Vec<Node>,
    pub meta: ModelMeta,
}

impl ModelSpec {
    pub fn new(nodes: Vec<Node>, meta: ModelMeta) -> Result<Self> {
        let model = Self { nodes, meta };
        model.validate()?;
        Ok(model)
    }

    pub fn node_index(&self, name: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.name() == name)
            .ok_or_else(|| Error::NotFound(format!("node '{name}'")))
    }

    pub fn node(&self, name: &str) -> Result<&Node> {
        Ok(&self.nodes[self.node_index(name)?])
    }

    /// All convolution-bearing layers (conv and decomposed-group nodes) in
    /// declaration order.
    pub fn conv_layers(&self) -> Vec<&ConvLayerSpec> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Conv(c) => Some(&c.spec),
                Node::Group(g) => Some(&g.spec),
                _ => None,
            })
            .collect()
    }

    /// Main-branch convolution layers, excluding transformed-shortcut convs.
    pub fn main_conv_layers(&self) -> Vec<&ConvLayerSpec> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Conv(c) if !c.shortcut_branch => Some(&c.spec),
                Node::Group(g) if !g.shortcut_branch => Some(&g.spec),
                _ => None,
            })
            .collect()
    }

    /// Names of layers eligible for decomposition, in declaration order.
    pub fn decomposable_layers(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Conv(c) if c.spec.decomposable => Some(c.spec.name.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("model has no nodes".into()));
        }
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        // Channel count produced by each node, for static wiring checks.
        let mut channels: Vec<Option<usize>> = Vec::with_capacity(self.nodes.len());

        for (idx, node) in self.nodes.iter().enumerate() {
            let name = node.name();
            if name.is_empty() {
                return Err(Error::InvalidArgument(format!("node {idx} has empty name")));
            }
            if seen.insert(name, idx).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate node name '{name}'")));
            }

            let resolve = |referenced: &str| -> Result<usize> {
                match seen.get(referenced) {
                    Some(&i) if i < idx => Ok(i),
                    _ => Err(Error::InvalidArgument(format!(
                        "node '{name}' references '{referenced}' which is not an earlier node"
                    ))),
                }
            };

            let in_channels = match node.input() {
                Some(src) => channels[resolve(src)?],
                None if idx == 0 => None, // model input; checked at runtime
                None => channels[idx - 1],
            };

            match node {
                Node::Conv(c) => {
                    c.spec.check()?;
                    let ks = c.kernel.shape();
                    if ks
                        != [
                            c.spec.in_channels,
                            c.spec.out_channels,
                            c.spec.kernel_size,
                            c.spec.kernel_size,
                        ]
                    {
                        return Err(Error::InvalidArgument(format!(
                            "conv '{name}' kernel shape {ks:?} does not match its spec"
                        )));
                    }
                    if let Some(ic) = in_channels {
                        if ic != c.spec.in_channels {
                            return Err(Error::InvalidArgument(format!(
                                "conv '{name}' expects {} input channels, gets {}",
                                c.spec.in_channels, ic
                            )));
                        }
                    }
                }
                Node::Group(g) => {
                    g.spec.check()?;
                    if g.factors.in_channels() != g.spec.in_channels
                        || g.factors.out_channels() != g.spec.out_channels
                        || g.factors.kernel_size() != g.spec.kernel_size
                    {
                        return Err(Error::InvalidArgument(format!(
                            "group '{name}' factors do not match its interface spec"
                        )));
                    }
                }
                Node::BatchNorm(b) => {
                    if b.scale.len() != b.channels || b.shift.len() != b.channels {
                        return Err(Error::InvalidArgument(format!(
                            "batch-norm '{name}' parameter lengths do not match {} channels",
                            b.channels
                        )));
                    }
                    if let Some(ic) = in_channels {
                        if ic != b.channels {
                            return Err(Error::InvalidArgument(format!(
                                "batch-norm '{name}' has {} channels, input has {}",
                                b.channels, ic
                            )));
                        }
                    }
                }
                Node::ShortcutAdd(s) => {
                    let src_idx = resolve(&s.source)?;
                    if let (Some(a), Some(b)) = (in_channels, channels[src_idx]) {
                        if a != b {
                            return Err(Error::InvalidArgument(format!(
                                "shortcut-add '{name}' joins mismatched channel counts {a} and {b}"
                            )));
                        }
                    }
                }
                _ => {}
            }

            // Convolutions must be directly followed by a batch-norm node.
            if matches!(node, Node::Conv(_) | Node::Group(_)) {
                let followed = matches!(
                    self.nodes.get(idx + 1),
                    Some(Node::BatchNorm(b)) if b.input.is_none() && b.channels == node.out_channels(0)
                );
                if !followed {
                    return Err(Error::InvalidArgument(format!(
                        "conv '{name}' is not directly followed by a matching batch-norm node"
                    )));
                }
            }

            channels.push(in_channels.map(|ic| node.out_channels(ic)).or_else(|| {
                // First node with unknown model input channels.
                match node {
                    Node::Conv(c) => Some(c.spec.out_channels),
                    Node::Group(g) => Some(g.spec.out_channels),
                    _ => None,
                }
            }));
        }
        Ok(())
    }

    /// Replaces the named decomposable conv node by a decomposed group with
    /// the given factors. Topology, shortcut wiring, and all other weights
    /// are untouched; the block interface keeps its channel counts.
    pub fn replace_layer(&self, layer: &str, factors: TuckerFactors) -> Result<ModelSpec> {
        let idx = self.node_index(layer)?;
        let conv = match &self.nodes[idx] {
            Node::Conv(c) => c,
            Node::Group(_) => {
                return Err(Error::InvalidArgument(format!(
                    "layer '{layer}' is already a decomposed group"
                )))
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "layer '{layer}' is not a conv node"
                )))
            }
        };
        if !conv.spec.decomposable {
            return Err(Error::Policy(format!(
                "layer '{layer}' is marked non-decomposable"
            )));
        }
        if factors.in_channels() != conv.spec.in_channels
            || factors.out_channels() != conv.spec.out_channels
            || factors.kernel_size() != conv.spec.kernel_size
        {
            return Err(Error::InvalidArgument(format!(
                "factors ({}x{} channels, {}x{} kernel) do not fit layer '{layer}'",
                factors.in_channels(),
                factors.out_channels(),
                factors.kernel_size(),
                factors.kernel_size(),
            )));
        }
        let mut model = self.clone();
        model.nodes[idx] = Node::Group(GroupNode {
            spec: conv.spec.clone(),
            factors,
            input: conv.input.clone(),
            shortcut_branch: conv.shortcut_branch,
        });
        Ok(model)
    }
}

/// 2-D convolution of a feature batch by a `J_in x J_out x D x D` kernel.
pub fn conv2d_forward(
    input: &FeatureBatch,
    kernel: &DenseTensor,
    stride: usize,
    padding: usize,
) -> Result<FeatureBatch> {
    let ks = kernel.shape();
    if ks.len() != 4 || ks[2] != ks[3] {
        return Err(Error::InvalidArgument(format!(
            "kernel must have shape J_in x J_out x D x D, got {ks:?}"
        )));
    }
    let (j_in, j_out, d) = (ks[0], ks[1], ks[2]);
    if input.channels() != j_in {
        return Err(Error::InvalidArgument(format!(
            "kernel expects {} input channels, batch has {}",
            j_in,
            input.channels()
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let (b, h, w) = (input.batch_size(), input.height(), input.width());
    let h_out = out_extent(h, d, stride, padding)?;
    let w_out = out_extent(w, d, stride, padding)?;

    let mut out = DenseTensor::zeros(vec![b, j_out, h_out, w_out])?;
    let in_data = input.tensor().data();
    let out_data = out.data_mut();
    let kd = kernel.data();

    for bi in 0..b {
        for i in 0..j_out {
            let out_base = (bi * j_out + i) * h_out * w_out;
            for j in 0..j_in {
                let in_base = (bi * j_in + j) * h * w;
                for k in 0..d {
                    for s in 0..d {
                        let coeff = kd[((j * j_out + i) * d + k) * d + s];
                        if coeff == 0.0 {
                            continue;
                        }
                        // Valid output rows/cols for this kernel offset.
                        let (ho_min, ho_max) = valid_range(h, h_out, stride, padding, k);
                        let (wo_min, wo_max) = valid_range(w, w_out, stride, padding, s);
                        for ho in ho_min..=ho_max {
                            let hi = ho * stride + k - padding;
                            let in_row = in_base + hi * w;
                            let out_row = out_base + ho * w_out;
                            for wo in wo_min..=wo_max {
                                let wi = wo * stride + s - padding;
                                out_data[out_row + wo] += coeff * in_data[in_row + wi];
                            }
                        }
                    }
                }
            }
        }
    }
    FeatureBatch::new(out)
}

fn out_extent(extent: usize, d: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < d {
        return Err(Error::InvalidArgument(format!(
            "kernel size {d} exceeds padded input extent {padded}"
        )));
    }
    Ok((padded - d) / stride + 1)
}

/// Output positions `o` with `o*stride + offset - padding` inside `[0, extent)`.
/// Returns an empty range as `(1, 0)` when none are valid.
fn valid_range(
    extent: usize,
    out_extent: usize,
    stride: usize,
    padding: usize,
    offset: usize,
) -> (usize, usize) {
    let lo = padding.saturating_sub(offset).div_ceil(stride);
    let hi_num = extent as isize - 1 + padding as isize - offset as isize;
    if hi_num < 0 || lo >= out_extent {
        return (1, 0);
    }
    let hi = ((hi_num as usize) / stride).min(out_extent - 1);
    if lo > hi {
        (1, 0)
    } else {
        (lo, hi)
    }
}

/// Training-mode batch normalization: per-channel statistics over the batch
/// and spatial dims of the given batch.
pub fn batch_norm(
    input: &FeatureBatch,
    scale: &[f64],
    shift: &[f64],
    eps: f64,
) -> Result<FeatureBatch> {
    let (b, c, h, w) = (
        input.batch_size(),
        input.channels(),
        input.height(),
        input.width(),
    );
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch statistics need a batch size of at least 2, got {b}"
        )));
    }
    if scale.len() != c || shift.len() != c {
        return Err(Error::InvalidArgument(format!(
            "scale/shift lengths must equal {c} channels"
        )));
    }
    let n = (b * h * w) as f64;
    let data = input.tensor().data();
    let mut out = vec![0.0; data.len()];
    let plane = h * w;
    for ch in 0..c {
        let mut sum = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            for v in &data[base..base + plane] {
                sum += v;
            }
        }
        let mean = sum / n;
        let mut var_sum = 0.0;
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            for v in &data[base..base + plane] {
                let d = v - mean;
                var_sum += d * d;
            }
        }
        let var = var_sum / n;
        let inv = 1.0 / (var + eps).sqrt();
        let (g, beta) = (scale[ch], shift[ch]);
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            for (o, v) in out[base..base + plane].iter_mut().zip(&data[base..base + plane]) {
                *o = (v - mean) * inv * g + beta;
            }
        }
    }
    FeatureBatch::new(DenseTensor::new(vec![b, c, h, w], out)?)
}

pub fn relu(input: &FeatureBatch) -> FeatureBatch {
    let mut t = input.tensor().clone();
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    FeatureBatch { data: t }
}

/// Average pooling; padded positions are excluded from the divisor.
pub fn avg_pool(
    input: &FeatureBatch,
    size: usize,
    stride: usize,
    padding: usize,
) -> Result<FeatureBatch> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "pool size and stride must be positive".into(),
        ));
    }
    let (b, c, h, w) = (
        input.batch_size(),
        input.channels(),
        input.height(),
        input.width(),
    );
    let h_out = out_extent(h, size, stride, padding)?;
    let w_out = out_extent(w, size, stride, padding)?;
    let data = input.tensor().data();
    let mut out = DenseTensor::zeros(vec![b, c, h_out, w_out])?;
    let out_data = out.data_mut();
    for bi in 0..b {
        for ch in 0..c {
            let in_base = (bi * c + ch) * h * w;
            let out_base = (bi * c + ch) * h_out * w_out;
            for ho in 0..h_out {
                for wo in 0..w_out {
                    let mut acc = 0.0;
                    let mut count = 0usize;
                    for k in 0..size {
                        let hi = (ho * stride + k) as isize - padding as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        for s in 0..size {
                            let wi = (wo * stride + s) as isize - padding as isize;
                            if wi < 0 || wi >= w as isize {
                                continue;
                            }
                            acc += data[in_base + hi as usize * w + wi as usize];
                            count += 1;
                        }
                    }
                    out_data[out_base + ho * w_out + wo] = acc / count as f64;
                }
            }
        }
    }
    FeatureBatch::new(out)
}

pub fn global_avg_pool(input: &FeatureBatch) -> Result<FeatureBatch> {
    let (b, c, h, w) = (
        input.batch_size(),
        input.channels(),
        input.height(),
        input.width(),
    );
    let plane = (h * w) as f64;
    let data = input.tensor().data();
    let mut out = DenseTensor::zeros(vec![b, c, 1, 1])?;
    let out_data = out.data_mut();
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * h * w;
            out_data[bi * c + ch] = data[base..base + h * w].iter().sum::<f64>() / plane;
        }
    }
    FeatureBatch::new(out)
}

/// Forward pass through a decomposed three-layer group: 1x1 channel
/// reduction, the core `D x D` convolution carrying stride and padding,
/// then 1x1 channel restoration.
pub fn decomposed_forward(
    input: &FeatureBatch,
    f: &TuckerFactors,
    stride: usize,
    padding: usize,
) -> Result<FeatureBatch> {
    if input.channels() != f.in_channels() {
        return Err(Error::InvalidArgument(format!(
            "factors expect {} input channels, batch has {}",
            f.in_channels(),
            input.channels()
        )));
    }
    // factor_in is J_in x I row-major, which is exactly the layout of a
    // J_in x I x 1 x 1 kernel; same for factor_out as O x J_out x 1 x 1.
    let k1 = DenseTensor::new(
        vec![f.in_channels(), f.rank_in(), 1, 1],
        f.factor_in.data().to_vec(),
    )?;
    let k3 = DenseTensor::new(
        vec![f.rank_out(), f.out_channels(), 1, 1],
        f.factor_out.data().to_vec(),
    )?;
    let reduced = conv2d_forward(input, &k1, 1, 0)?;
    let mapped = conv2d_forward(&reduced, &f.core, stride, padding)?;
    conv2d_forward(&mapped, &k3, 1, 0)
}

fn softmax_channels(input: &FeatureBatch) -> FeatureBatch {
    let (b, c, h, w) = (
        input.batch_size(),
        input.channels(),
        input.height(),
        input.width(),
    );
    let data = input.tensor().data();
    let mut out = vec![0.0; data.len()];
    let plane = h * w;
    for bi in 0..b {
        for p in 0..plane {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(data[(bi * c + ch) * plane + p]);
            }
            let mut denom = 0.0;
            for ch in 0..c {
                denom += (data[(bi * c + ch) * plane + p] - max).exp();
            }
            for ch in 0..c {
                out[(bi * c + ch) * plane + p] =
                    (data[(bi * c + ch) * plane + p] - max).exp() / denom;
            }
        }
    }
    FeatureBatch {
        data: DenseTensor::new(vec![b, c, h, w], out).expect("same shape"),
    }
}

fn dense_forward(input: &FeatureBatch, node: &DenseNode) -> Result<FeatureBatch> {
    let (b, c, h, w) = (
        input.batch_size(),
        input.channels(),
        input.height(),
        input.width(),
    );
    if c != node.in_features || h != 1 || w != 1 {
        return Err(Error::InvalidArgument(format!(
            "dense '{}' expects B x {} x 1 x 1 input, got B x {c} x {h} x {w}",
            node.name, node.in_features
        )));
    }
    let data = input.tensor().data();
    let mut out = vec![0.0; b * node.out_features];
    for bi in 0..b {
        for o in 0..node.out_features {
            let mut acc = 0.0;
            for i in 0..node.in_features {
                acc += data[bi * c + i] * node.weight.get(i, o);
            }
            out[bi * node.out_features + o] = acc;
        }
    }
    FeatureBatch::new(DenseTensor::new(vec![b, node.out_features, 1, 1], out)?)
}

/// Outputs of every evaluated node, indexed like `model.nodes`.
pub struct ForwardTrace {
    pub outputs: Vec<FeatureBatch>,
}

impl ForwardTrace {
    pub fn output(&self, model: &ModelSpec, name: &str) -> Result<&FeatureBatch> {
        Ok(&self.outputs[model.node_index(name)?])
    }
}

/// Evaluates nodes `0..=stop` in declaration order.
pub fn forward_until(model: &ModelSpec, batch: &FeatureBatch, stop: usize) -> Result<ForwardTrace> {
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, n) in model.nodes.iter().enumerate() {
        index.insert(n.name(), i);
    }
    let mut outputs: Vec<FeatureBatch> = Vec::with_capacity(stop + 1);
    for (idx, node) in model.nodes.iter().take(stop + 1).enumerate() {
        let input: &FeatureBatch = match node.input() {
            Some(src) => {
                let i = *index
                    .get(src)
                    .ok_or_else(|| Error::NotFound(format!("node '{src}'")))?;
                if i >= idx {
                    return Err(Error::InvalidArgument(format!(
                        "node '{}' reads from later node '{src}'",
                        node.name()
                    )));
                }
                &outputs[i]
            }
            None if idx == 0 => batch,
            None => &outputs[idx - 1],
        };
        let out = match node {
            Node::Conv(c) => conv2d_forward(input, &c.kernel, c.spec.stride, c.spec.padding)?,
            Node::Group(g) => decomposed_forward(input, &g.factors, g.spec.stride, g.spec.padding)?,
            Node::BatchNorm(bn) => batch_norm(input, &bn.scale, &bn.shift, bn.eps)?,
            Node::Relu { .. } => relu(input),
            Node::AvgPool(p) => avg_pool(input, p.size, p.stride, p.padding)?,
            Node::GlobalAvgPool { .. } => global_avg_pool(input)?,
            Node::ShortcutAdd(s) => {
                let src = &outputs[index[s.source.as_str()]];
                if src.tensor().shape() != input.tensor().shape() {
                    return Err(Error::InvalidArgument(format!(
                        "shortcut-add '{}' joins shapes {:?} and {:?}",
                        s.name,
                        input.tensor().shape(),
                        src.tensor().shape()
                    )));
                }
                let mut t = input.tensor().clone();
                for (a, b) in t.data_mut().iter_mut().zip(src.tensor().data()) {
                    *a += b;
                }
                FeatureBatch::new(t)?
            }
            Node::Dense(d) => dense_forward(input, d)?,
            Node::Softmax { .. } => softmax_channels(input),
        };
        outputs.push(out);
    }
    Ok(ForwardTrace { outputs })
}

/// Full forward pass; returns every node output.
pub fn forward_trace(model: &ModelSpec, batch: &FeatureBatch) -> Result<ForwardTrace> {
    forward_until(model, batch, model.nodes.len() - 1)
}

/// Index of the batch-norm node directly following the named conv/group.
pub fn batch_norm_index_of(model: &ModelSpec, layer: &str) -> Result<usize> {
    let idx = model.node_index(layer)?;
    match &model.nodes[idx] {
        Node::Conv(_) | Node::Group(_) => {}
        _ => {
            return Err(Error::InvalidArgument(format!(
                "'{layer}' is not a convolutional layer"
            )))
        }
    }
    match model.nodes.get(idx + 1) {
        Some(Node::BatchNorm(_)) => Ok(idx + 1),
        _ => Err(Error::InvalidArgument(format!(
            "layer '{layer}' has no trailing batch-norm node"
        ))),
    }
}

/// Batch-normalized output of the named layer (the model is evaluated
/// bottom-to-top up to that layer's batch-norm node).
pub fn forward_to_layer(
    model: &ModelSpec,
    batch: &FeatureBatch,
    layer: &str,
) -> Result<FeatureBatch> {
    let bn_idx = batch_norm_index_of(model, layer)?;
    let trace = forward_until(model, batch, bn_idx)?;
    Ok(trace.outputs.into_iter().nth(bn_idx).expect("evaluated"))
}

#[cfg(test)]
mod tests;
