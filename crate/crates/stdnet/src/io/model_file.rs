//! Model serialization: a JSON topology document plus a sibling weight
//! container referenced by file name. `load(save(m))` reproduces the model
//! bit-exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::convnet::{
    AvgPoolNode, BatchNormNode, ConvLayerSpec, ConvNode, DenseNode, GroupNode, ModelMeta,
    ModelSpec, Node, ShortcutAddNode,
};
use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Matrix};
use crate::tucker::TuckerFactors;

use super::container::WeightContainer;
use super::write_atomic;

pub const MODEL_FORMAT: &str = "stdnet-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    /// Weight container file name, relative to this document.
    weights: String,
    #[serde(default)]
    metadata: ModelMeta,
    nodes: Vec<NodeFile>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeFile {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    input: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_h: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_w: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    decomposable: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shortcut_branch: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rank_in: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rank_out: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_features: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_features: Option<usize>,
}

fn need<T: Copy>(v: Option<T>, node: &str, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::InvalidArgument(format!("node '{node}' is missing field '{field}'")))
}

fn conv_spec_file(spec: &ConvLayerSpec) -> NodeFile {
    NodeFile {
        name: spec.name.clone(),
        in_channels: Some(spec.in_channels),
        out_channels: Some(spec.out_channels),
        kernel_size: Some(spec.kernel_size),
        stride: Some(spec.stride),
        padding: Some(spec.padding),
        out_h: Some(spec.out_h),
        out_w: Some(spec.out_w),
        decomposable: Some(spec.decomposable),
        ..NodeFile::default()
    }
}

fn conv_spec_from_file(f: &NodeFile) -> Result<ConvLayerSpec> {
    Ok(ConvLayerSpec {
        name: f.name.clone(),
        in_channels: need(f.in_channels, &f.name, "in_channels")?,
        out_channels: need(f.out_channels, &f.name, "out_channels")?,
        kernel_size: need(f.kernel_size, &f.name, "kernel_size")?,
        stride: need(f.stride, &f.name, "stride")?,
        padding: need(f.padding, &f.name, "padding")?,
        out_h: need(f.out_h, &f.name, "out_h")?,
        out_w: need(f.out_w, &f.name, "out_w")?,
        decomposable: need(f.decomposable, &f.name, "decomposable")?,
    })
}

fn node_to_file(node: &Node, weights: &mut WeightContainer) -> NodeFile {
    match node {
        Node::Conv(c) => {
            weights.push(format!("{}.kernel", c.spec.name), c.kernel.clone());
            NodeFile {
                kind: "conv".into(),
                input: c.input.clone(),
                shortcut_branch: Some(c.shortcut_branch),
                ..conv_spec_file(&c.spec)
            }
        }
        Node::Group(g) => {
            weights.push(format!("{}.core", g.spec.name), g.factors.core.clone());
            weights.push(
                format!("{}.factor_in", g.spec.name),
                matrix_tensor(&g.factors.factor_in),
            );
            weights.push(
                format!("{}.factor_out", g.spec.name),
                matrix_tensor(&g.factors.factor_out),
            );
            NodeFile {
                kind: "decomposed-group".into(),
                input: g.input.clone(),
                shortcut_branch: Some(g.shortcut_branch),
                rank_in: Some(g.factors.rank_in()),
                rank_out: Some(g.factors.rank_out()),
                ..conv_spec_file(&g.spec)
            }
        }
        Node::BatchNorm(b) => {
            weights.push(
                format!("{}.scale", b.name),
                DenseTensor::new(vec![b.channels], b.scale.clone()).expect("consistent"),
            );
            weights.push(
                format!("{}.shift", b.name),
                DenseTensor::new(vec![b.channels], b.shift.clone()).expect("consistent"),
            );
            NodeFile {
                name: b.name.clone(),
                kind: "batch-norm".into(),
                input: b.input.clone(),
                channels: Some(b.channels),
                eps: Some(b.eps),
                ..NodeFile::default()
            }
        }
        Node::Relu { name, input } => NodeFile {
            name: name.clone(),
            kind: "relu".into(),
            input: input.clone(),
            ..NodeFile::default()
        },
        Node::AvgPool(p) => NodeFile {
            name: p.name.clone(),
            kind: "average-pool".into(),
            input: p.input.clone(),
            size: Some(p.size),
            stride: Some(p.stride),
            padding: Some(p.padding),
            ..NodeFile::default()
        },
        Node::GlobalAvgPool { name, input } => NodeFile {
            name: name.clone(),
            kind: "global-average-pool".into(),
            input: input.clone(),
            ..NodeFile::default()
        },
        Node::ShortcutAdd(s) => NodeFile {
            name: s.name.clone(),
            kind: "shortcut-add".into(),
            input: s.input.clone(),
            source: Some(s.source.clone()),
            ..NodeFile::default()
        },
        Node::Dense(d) => {
            weights.push(format!("{}.weight", d.name), matrix_tensor(&d.weight));
            NodeFile {
                name: d.name.clone(),
                kind: "dense".into(),
                input: d.input.clone(),
                in_features: Some(d.in_features),
                out_features: Some(d.out_features),
                ..NodeFile::default()
            }
        }
        Node::Softmax { name, input } => NodeFile {
            name: name.clone(),
            kind: "softmax".into(),
            input: input.clone(),
            ..NodeFile::default()
        },
    }
}

fn node_from_file(f: &NodeFile, weights: &WeightContainer) -> Result<Node> {
    let node = match f.kind.as_str() {
        "conv" => {
            let spec = conv_spec_from_file(f)?;
            let kernel = weights.get(&format!("{}.kernel", f.name))?.clone();
            Node::Conv(ConvNode {
                spec,
                kernel,
                input: f.input.clone(),
                shortcut_branch: f.shortcut_branch.unwrap_or(false),
            })
        }
        "decomposed-group" => {
            let spec = conv_spec_from_file(f)?;
            let core = weights.get(&format!("{}.core", f.name))?.clone();
            let factor_in = tensor_matrix(weights.get(&format!("{}.factor_in", f.name))?)?;
            let factor_out = tensor_matrix(weights.get(&format!("{}.factor_out", f.name))?)?;
            Node::Group(GroupNode {
                spec,
                factors: TuckerFactors {
                    core,
                    factor_in,
                    factor_out,
                },
                input: f.input.clone(),
                shortcut_branch: f.shortcut_branch.unwrap_or(false),
            })
        }
        "batch-norm" => {
            let channels = need(f.channels, &f.name, "channels")?;
            let scale = weights.get(&format!("{}.scale", f.name))?.data().to_vec();
            let shift = weights.get(&format!("{}.shift", f.name))?.data().to_vec();
            Node::BatchNorm(BatchNormNode {
                name: f.name.clone(),
                channels,
                scale,
                shift,
                eps: need(f.eps, &f.name, "eps")?,
                input: f.input.clone(),
            })
        }
        "relu" => Node::Relu {
            name: f.name.clone(),
            input: f.input.clone(),
        },
        "average-pool" => Node::AvgPool(AvgPoolNode {
            name: f.name.clone(),
            size: need(f.size, &f.name, "size")?,
            stride: need(f.stride, &f.name, "stride")?,
            padding: need(f.padding, &f.name, "padding")?,
            input: f.input.clone(),
        }),
        "global-average-pool" => Node::GlobalAvgPool {
            name: f.name.clone(),
            input: f.input.clone(),
        },
        "shortcut-add" => Node::ShortcutAdd(ShortcutAddNode {
            name: f.name.clone(),
            source: f
                .source
                .clone()
                .ok_or_else(|| Error::InvalidArgument(format!("'{}' lacks a source", f.name)))?,
            input: f.input.clone(),
        }),
        "dense" => {
            let weight = tensor_matrix(weights.get(&format!("{}.weight", f.name))?)?;
            Node::Dense(DenseNode {
                name: f.name.clone(),
                in_features: need(f.in_features, &f.name, "in_features")?,
                out_features: need(f.out_features, &f.name, "out_features")?,
                weight,
                input: f.input.clone(),
            })
        }
        "softmax" => Node::Softmax {
            name: f.name.clone(),
            input: f.input.clone(),
        },
        other => {
            return Err(Error::InvalidArgument(format!(
                "node '{}' has unknown kind '{other}'",
                f.name
            )))
        }
    };
    Ok(node)
}

fn matrix_tensor(m: &Matrix) -> DenseTensor {
    DenseTensor::new(vec![m.rows(), m.cols()], m.data().to_vec()).expect("consistent")
}

fn tensor_matrix(t: &DenseTensor) -> Result<Matrix> {
    if t.ndim() != 2 {
        return Err(Error::DimMismatch(format!(
            "expected a 2-D tensor, got shape {:?}",
            t.shape()
        )));
    }
    Matrix::new(t.shape()[0], t.shape()[1], t.data().to_vec())
}

fn weights_path_for(json_path: &Path) -> PathBuf {
    json_path.with_extension("stdt")
}

/// Saves the topology JSON at `path` and the weights next to it in a
/// `.stdt` container referenced from the document.
pub fn save_model(model: &ModelSpec, path: &Path) -> Result<()> {
    model.validate()?;
    let weights_path = weights_path_for(path);
    let weights_name = weights_path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("bad model path {path:?}")))?
        .to_string_lossy()
        .into_owned();

    let mut weights = WeightContainer::default();
    let nodes: Vec<NodeFile> = model
        .nodes
        .iter()
        .map(|n| node_to_file(n, &mut weights))
        .collect();
    let doc = ModelFile {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        weights: weights_name,
        metadata: model.meta.clone(),
        nodes,
    };
    let mut json = serde_json::to_vec_pretty(&doc)?;
    json.push(b'\n');
    write_atomic(path, &json)?;
    weights.save(&weights_path)
}

pub fn load_model(path: &Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path)?;
    let doc: ModelFile = serde_json::from_str(&text)?;
    if doc.format != MODEL_FORMAT {
        return Err(Error::InvalidArgument(format!(
            "not a model document: format '{}'",
            doc.format
        )));
    }
    if doc.version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            found: doc.version as u16,
            expected: MODEL_VERSION as u16,
        });
    }
    let weights_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&doc.weights);
    let weights = WeightContainer::load(&weights_path)?;
    let nodes: Vec<Node> = doc
        .nodes
        .iter()
        .map(|f| node_from_file(f, &weights))
        .collect::<Result<_>>()?;
    ModelSpec::new(nodes, doc.metadata)
}
