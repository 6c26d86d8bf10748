//! SRNetC64 construction: a deep residual steganalysis backbone whose
//! feature-compaction stages are capped at 64 channels, plus the reference
//! cylinder/ladder rank assignments for its decomposed variants.
//!
//! Layout: L1 and L2 are plain conv+BN+ReLU stages; L3..L7 are unpooled
//! residual blocks with direct shortcuts; L8..L11 are blocks with
//! transformed shortcuts (1x1 stride-2 conv + BN on the skip path, 3x3
//! stride-2 average pooling on the main path); L12 is a plain block whose
//! output feeds a global average pool and an inert classifier tail.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{DenseTensor, Matrix};
use crate::tucker::tucker_decompose_default;

use super::{
    AvgPoolNode, BatchNormNode, ConvLayerSpec, ConvNode, DenseNode, ModelMeta, ModelSpec, Node,
    ShortcutAddNode,
};

const BN_EPS: f64 = 1e-5;

/// Reference cylinder-shaped rank assignment `(layer, rank_in, rank_out)`
/// for the decomposed SRNetC64 variants.
pub fn srnetc64_cylinder_ranks() -> Vec<(&'static str, usize, usize)> {
    vec![
        ("L2", 32, 8),
        ("L3-1", 7, 7),
        ("L3-2", 11, 11),
        ("L4-1", 7, 7),
        ("L4-2", 8, 8),
        ("L5-1", 8, 8),
        ("L5-2", 9, 9),
        ("L6-1", 8, 8),
        ("L6-2", 11, 11),
        ("L7-1", 9, 9),
        ("L7-2", 10, 10),
        ("L8-1", 9, 9),
        ("L8-2", 6, 6),
        ("L9-1", 3, 12),
        ("L9-2", 13, 13),
        ("L10-1", 13, 13),
        ("L10-2", 11, 11),
        ("L11-1", 10, 10),
        ("L11-2", 13, 13),
        ("L12-1", 15, 15),
        ("L12-2", 16, 16),
    ]
}

/// Reference ladder-shaped rank assignment for the decomposed variants.
pub fn srnetc64_ladder_ranks() -> Vec<(&'static str, usize, usize)> {
    vec![
        ("L2", 32, 8),
        ("L3-1", 7, 7),
        ("L3-2", 7, 15),
        ("L4-1", 6, 8),
        ("L4-2", 8, 8),
        ("L5-1", 11, 5),
        ("L5-2", 11, 7),
        ("L6-1", 4, 12),
        ("L6-2", 14, 8),
        ("L7-1", 5, 13),
        ("L7-2", 14, 6),
        ("L8-1", 7, 11),
        ("L8-2", 5, 7),
        ("L9-1", 3, 12),
        ("L9-2", 11, 15),
        ("L10-1", 9, 17),
        ("L10-2", 12, 10),
        ("L11-1", 7, 13),
        ("L11-2", 11, 15),
        ("L12-1", 10, 20),
        ("L12-2", 23, 9),
    ]
}

struct Builder {
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    meta: ModelMeta,
}

impl Builder {
    fn he_kernel(&mut self, j_in: usize, j_out: usize, d: usize) -> DenseTensor {
        let std = (2.0 / (j_in * d * d) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = j_in * j_out * d * d;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        DenseTensor::new(vec![j_in, j_out, d, d], data).expect("consistent shape")
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        j_in: usize,
        j_out: usize,
        d: usize,
        stride: usize,
        padding: usize,
        out_hw: usize,
        decomposable: bool,
        input: Option<&str>,
        shortcut_branch: bool,
    ) {
        let kernel = self.he_kernel(j_in, j_out, d);
        self.nodes.push(Node::Conv(ConvNode {
            spec: ConvLayerSpec {
                name: name.to_string(),
                in_channels: j_in,
                out_channels: j_out,
                kernel_size: d,
                stride,
                padding,
                out_h: out_hw,
                out_w: out_hw,
                decomposable,
            },
            kernel,
            input: input.map(str::to_string),
            shortcut_branch,
        }));
        self.nodes.push(Node::BatchNorm(BatchNormNode {
            name: format!("{name}.bn"),
            channels: j_out,
            scale: vec![1.0; j_out],
            shift: vec![0.0; j_out],
            eps: BN_EPS,
            input: None,
        }));
    }

    fn relu(&mut self, name: &str) {
        self.nodes.push(Node::Relu {
            name: name.to_string(),
            input: None,
        });
    }

    fn group_tag(&mut self, layer: &str, group: &str) {
        self.meta.groups.insert(layer.to_string(), group.to_string());
    }
}

/// Builds SRNetC64 with seeded He-initialized weights. Layer L1 is marked
/// non-decomposable; batch-norm parameters start at scale 1, shift 0.
pub fn build_srnetc64(seed: u64) -> ModelSpec {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        nodes: Vec::new(),
        meta: ModelMeta {
            seed: Some(seed),
            groups: Default::default(),
        },
    };

    // Bottom: two plain stages at full resolution.
    b.conv("L1", 1, 64, 3, 1, 1, 256, false, None, false);
    b.relu("L1.relu");
    b.conv("L2", 64, 16, 3, 1, 1, 256, true, None, false);
    b.relu("L2.relu");
    b.group_tag("L2", "bottom");

    // L3..L7: unpooled residual blocks with direct shortcuts.
    let mut block_input = "L2.relu".to_string();
    for l in 3..=7 {
        let first = format!("L{l}-1");
        let second = format!("L{l}-2");
        b.conv(&first, 16, 16, 3, 1, 1, 256, true, Some(&block_input), false);
        b.relu(&format!("{first}.relu"));
        b.conv(&second, 16, 16, 3, 1, 1, 256, true, None, false);
        let add = format!("L{l}.add");
        b.nodes.push(Node::ShortcutAdd(ShortcutAddNode {
            name: add.clone(),
            source: block_input.clone(),
            input: None,
        }));
        b.group_tag(&first, "bottom");
        b.group_tag(&second, "bottom");
        block_input = add;
    }

    // L8..L11: blocks with transformed shortcuts; pooling halves the maps.
    // Channel widths and nominal conv output sizes per stage.
    let stages = [
        (8usize, 16usize, 16usize, 256usize, "bottom"),
        (9, 16, 64, 128, "middle"),
        (10, 64, 64, 64, "middle"),
        (11, 64, 64, 32, "middle"),
    ];
    for &(l, c_in, c_out, hw, group) in &stages {
        let first = format!("L{l}-1");
        let second = format!("L{l}-2");
        b.conv(&first, c_in, c_out, 3, 1, 1, hw, true, Some(&block_input), false);
        b.relu(&format!("{first}.relu"));
        b.conv(&second, c_out, c_out, 3, 1, 1, hw, true, None, false);
        b.nodes.push(Node::AvgPool(AvgPoolNode {
            name: format!("L{l}.pool"),
            size: 3,
            stride: 2,
            padding: 1,
            input: None,
        }));
        b.conv(
            &format!("L{l}.sc"),
            c_in,
            c_out,
            1,
            2,
            0,
            hw / 2,
            false,
            Some(&block_input),
            true,
        );
        let add = format!("L{l}.add");
        b.nodes.push(Node::ShortcutAdd(ShortcutAddNode {
            name: add.clone(),
            source: format!("L{l}.pool"),
            input: None,
        }));
        b.group_tag(&first, group);
        b.group_tag(&second, group);
        block_input = add;
    }

    // L12: plain block, then global average pooling and the inert
    // classifier tail.
    b.conv("L12-1", 64, 64, 3, 1, 1, 16, true, Some(&block_input), false);
    b.relu("L12-1.relu");
    b.conv("L12-2", 64, 64, 3, 1, 1, 16, true, None, false);
    b.group_tag("L12-1", "middle");
    b.group_tag("L12-2", "middle");
    b.nodes.push(Node::GlobalAvgPool {
        name: "L12.gap".to_string(),
        input: None,
    });

    let fc_std = (2.0 / 64.0f64).sqrt();
    let dist = Normal::new(0.0, fc_std).expect("valid std");
    let weight: Vec<f64> = (0..64 * 2).map(|_| dist.sample(&mut b.rng)).collect();
    b.nodes.push(Node::Dense(DenseNode {
        name: "fc".to_string(),
        in_features: 64,
        out_features: 2,
        weight: Matrix::new(64, 2, weight).expect("consistent shape"),
        input: None,
    }));
    b.nodes.push(Node::Softmax {
        name: "softmax".to_string(),
        input: None,
    });

    ModelSpec::new(b.nodes, b.meta).expect("builder produces a valid model")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrnetVariant {
    Original,
    Cylinder,
    Ladder,
}

/// SRNetC64 with every decomposable layer replaced by its Tucker group at
/// the reference cylinder or ladder ranks.
pub fn build_srnetc64_variant(seed: u64, variant: SrnetVariant) -> Result<ModelSpec> {
    let base = build_srnetc64(seed);
    let ranks = match variant {
        SrnetVariant::Original => return Ok(base),
        SrnetVariant::Cylinder => srnetc64_cylinder_ranks(),
        SrnetVariant::Ladder => srnetc64_ladder_ranks(),
    };
    let mut model = base;
    for (layer, rank_in, rank_out) in ranks {
        let kernel = match model.node(layer)? {
            Node::Conv(c) => c.kernel.clone(),
            _ => unreachable!("reference ranks name conv layers"),
        };
        let factors = tucker_decompose_default(&kernel, rank_in, rank_out)?;
        model = model.replace_layer(layer, factors)?;
    }
    Ok(model)
}
