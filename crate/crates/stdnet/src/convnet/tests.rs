use super::*;
use crate::tucker::{tucker_decompose_default, TuckerFactors};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn random_batch(b: usize, c: usize, h: usize, w: usize, seed: u64) -> FeatureBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..b * c * h * w)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    FeatureBatch::new(DenseTensor::new(vec![b, c, h, w], data).unwrap()).unwrap()
}

fn random_kernel(j_in: usize, j_out: usize, d: usize, seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..j_in * j_out * d * d)
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    DenseTensor::new(vec![j_in, j_out, d, d], data).unwrap()
}

/// Literal transcription of the convolution sum with 1-based index
/// arithmetic `h_k = (h-1)*stride + k - padding`; the oracle the fast path is
/// checked against.
fn conv_oracle(
    input: &FeatureBatch,
    kernel: &DenseTensor,
    stride: usize,
    padding: usize,
) -> FeatureBatch {
    let (b, j_in, h, w) = (
        input.batch_size(),
        input.channels(),
        input.height(),
        input.width(),
    );
    let ks = kernel.shape();
    let (j_out, d) = (ks[1], ks[2]);
    let h_out = (h + 2 * padding - d) / stride + 1;
    let w_out = (w + 2 * padding - d) / stride + 1;
    let mut out = DenseTensor::zeros(vec![b, j_out, h_out, w_out]).unwrap();
    for bi in 0..b {
        for i in 1..=j_out {
            for ho in 1..=h_out {
                for wo in 1..=w_out {
                    let mut acc = 0.0;
                    for j in 1..=j_in {
                        for k in 1..=d {
                            for s in 1..=d {
                                let hk = (ho as isize - 1) * stride as isize + k as isize
                                    - padding as isize;
                                let ws = (wo as isize - 1) * stride as isize + s as isize
                                    - padding as isize;
                                if hk < 1 || hk > h as isize || ws < 1 || ws > w as isize {
                                    continue;
                                }
                                acc += kernel.get(&[j - 1, i - 1, k - 1, s - 1])
                                    * input.tensor().get(&[
                                        bi,
                                        j - 1,
                                        hk as usize - 1,
                                        ws as usize - 1,
                                    ]);
                            }
                        }
                    }
                    out.set(&[bi, i - 1, ho - 1, wo - 1], acc);
                }
            }
        }
    }
    FeatureBatch::new(out).unwrap()
}

fn max_abs_diff(a: &FeatureBatch, b: &FeatureBatch) -> f64 {
    a.tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn identity_1x1_conv_is_identity() {
    let x = random_batch(2, 3, 5, 5, 1);
    let mut kernel = DenseTensor::zeros(vec![3, 3, 1, 1]).unwrap();
    for c in 0..3 {
        kernel.set(&[c, c, 0, 0], 1.0);
    }
    let y = conv2d_forward(&x, &kernel, 1, 0).unwrap();
    assert_eq!(y, x);
}

#[test]
fn all_ones_3x3_sums_to_nine() {
    let x = FeatureBatch::new(DenseTensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap()).unwrap();
    let kernel = DenseTensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let y = conv2d_forward(&x, &kernel, 1, 0).unwrap();
    assert_eq!(y.tensor().shape(), &[1, 1, 1, 1]);
    assert!((y.tensor().data()[0] - 9.0).abs() < 1e-12);
}

#[test]
fn conv_matches_quadruple_loop_oracle() {
    let x = random_batch(2, 3, 8, 8, 2);
    let kernel = random_kernel(3, 4, 3, 3);
    let fast = conv2d_forward(&x, &kernel, 2, 1).unwrap();
    let slow = conv_oracle(&x, &kernel, 2, 1);
    assert_eq!(fast.tensor().shape(), slow.tensor().shape());
    assert!(max_abs_diff(&fast, &slow) < 1e-12);
}

#[test]
fn conv_oracle_agreement_across_geometries() {
    for (seed, (d, stride, padding)) in [(1usize, 1usize, 0usize), (3, 1, 1), (5, 2, 2), (3, 2, 0)]
        .into_iter()
        .enumerate()
    {
        let x = random_batch(2, 2, 9, 7, 40 + seed as u64);
        let kernel = random_kernel(2, 3, d, 50 + seed as u64);
        let fast = conv2d_forward(&x, &kernel, stride, padding).unwrap();
        let slow = conv_oracle(&x, &kernel, stride, padding);
        assert!(max_abs_diff(&fast, &slow) < 1e-12, "geometry {d}/{stride}/{padding}");
    }
}

#[test]
fn conv_channel_mismatch_errors() {
    let x = random_batch(1, 2, 4, 4, 4);
    let kernel = random_kernel(3, 2, 3, 5);
    assert!(conv2d_forward(&x, &kernel, 1, 1).is_err());
}

#[test]
fn conv_linear_in_input_and_kernel() {
    let x1 = random_batch(2, 2, 6, 6, 6);
    let x2 = random_batch(2, 2, 6, 6, 7);
    let k1 = random_kernel(2, 3, 3, 8);
    let k2 = random_kernel(2, 3, 3, 9);

    // Superposition in the input.
    let mut x_sum = x1.clone();
    for (a, b) in x_sum.data.data_mut().iter_mut().zip(x2.tensor().data()) {
        *a = 2.0 * *a + 3.0 * b;
    }
    let lhs = conv2d_forward(&x_sum, &k1, 1, 1).unwrap();
    let y1 = conv2d_forward(&x1, &k1, 1, 1).unwrap();
    let y2 = conv2d_forward(&x2, &k1, 1, 1).unwrap();
    for (i, v) in lhs.tensor().data().iter().enumerate() {
        let rhs = 2.0 * y1.tensor().data()[i] + 3.0 * y2.tensor().data()[i];
        assert!((v - rhs).abs() < 1e-12);
    }

    // Superposition in the kernel.
    let mut k_sum = k1.clone();
    for (a, b) in k_sum.data_mut().iter_mut().zip(k2.data()) {
        *a = 0.5 * *a - 1.5 * b;
    }
    let lhs = conv2d_forward(&x1, &k_sum, 1, 1).unwrap();
    let z1 = conv2d_forward(&x1, &k1, 1, 1).unwrap();
    let z2 = conv2d_forward(&x1, &k2, 1, 1).unwrap();
    for (i, v) in lhs.tensor().data().iter().enumerate() {
        let rhs = 0.5 * z1.tensor().data()[i] - 1.5 * z2.tensor().data()[i];
        assert!((v - rhs).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_constant_channel_is_zeroed() {
    let x = FeatureBatch::new(DenseTensor::new(vec![2, 1, 2, 2], vec![3.5; 8]).unwrap()).unwrap();
    let y = batch_norm(&x, &[1.0], &[0.0], 1e-5).unwrap();
    for v in y.tensor().data() {
        assert!(v.abs() < 1e-12);
    }
}

#[test]
fn batch_norm_two_point_statistics() {
    // Channel holding -1 and +1 equally often.
    let x = FeatureBatch::new(
        DenseTensor::new(vec![2, 1, 1, 2], vec![-1.0, 1.0, 1.0, -1.0]).unwrap(),
    )
    .unwrap();
    let y = batch_norm(&x, &[1.0], &[0.0], 1e-5).unwrap();
    let expected = 1.0 / (1.0 + 1e-5f64).sqrt();
    for v in y.tensor().data() {
        assert!((v.abs() - expected).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_affine_postcondition() {
    let x = random_batch(3, 2, 4, 4, 10);
    let base = batch_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-5).unwrap();
    let scaled = batch_norm(&x, &[2.0, 2.0], &[3.0, 3.0], 1e-5).unwrap();
    for (b, s) in base.tensor().data().iter().zip(scaled.tensor().data()) {
        assert!((2.0 * b + 3.0 - s).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_rejects_singleton_batch() {
    let x = random_batch(1, 2, 4, 4, 11);
    assert!(matches!(
        batch_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-5),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn batch_norm_output_statistics() {
    // With a tiny eps the normalized output has per-channel mean ~0 and
    // variance within 1e-6 of 1.
    let x = random_batch(4, 3, 8, 8, 12);
    let y = batch_norm(&x, &[1.0; 3], &[0.0; 3], 1e-9).unwrap();
    let n = (4 * 8 * 8) as f64;
    for c in 0..3 {
        let mut sum = 0.0;
        let mut sq = 0.0;
        for b in 0..4 {
            for p in 0..64 {
                let v = y.tensor().data()[(b * 3 + c) * 64 + p];
                sum += v;
                sq += v * v;
            }
        }
        let mean = sum / n;
        let var = sq / n - mean * mean;
        assert!(mean.abs() < 1e-10, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "channel {c} var {var}");
    }
}

#[test]
fn decomposed_forward_equals_reconstructed_conv() {
    let x = random_batch(2, 6, 8, 8, 13);
    let kernel = random_kernel(6, 5, 3, 14);
    for (ri, ro) in [(6, 5), (3, 2), (1, 1), (4, 5)] {
        let f = tucker_decompose_default(&kernel, ri, ro).unwrap();
        let recon = crate::tucker::reconstruct(&f).unwrap();
        let via_group = decomposed_forward(&x, &f, 1, 1).unwrap();
        let via_conv = conv2d_forward(&x, &recon, 1, 1).unwrap();
        let scale = via_conv.frobenius_norm().max(1e-30);
        let mut diff = 0.0f64;
        for (a, b) in via_group
            .tensor()
            .data()
            .iter()
            .zip(via_conv.tensor().data())
        {
            diff += (a - b) * (a - b);
        }
        assert!(diff.sqrt() / scale < 1e-8, "ranks ({ri},{ro})");
    }
}

#[test]
fn decomposed_forward_full_rank_matches_plain_conv() {
    let x = random_batch(2, 4, 6, 6, 15);
    let kernel = random_kernel(4, 4, 3, 16);
    let f = tucker_decompose_default(&kernel, 4, 4).unwrap();
    let a = decomposed_forward(&x, &f, 1, 1).unwrap();
    let b = conv2d_forward(&x, &kernel, 1, 1).unwrap();
    let scale = b.frobenius_norm();
    let mut diff = 0.0f64;
    for (p, q) in a.tensor().data().iter().zip(b.tensor().data()) {
        diff += (p - q) * (p - q);
    }
    assert!(diff.sqrt() / scale < 1e-8);
}

#[test]
fn decomposed_forward_zero_input_is_zero() {
    let x = FeatureBatch::zeros(2, 4, 5, 5).unwrap();
    let kernel = random_kernel(4, 4, 3, 17);
    let f = tucker_decompose_default(&kernel, 2, 2).unwrap();
    let y = decomposed_forward(&x, &f, 1, 1).unwrap();
    assert!(y.frobenius_norm() == 0.0);
}

#[test]
fn avg_pool_excludes_padding_from_divisor() {
    let x = FeatureBatch::new(
        DenseTensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
    )
    .unwrap();
    let y = avg_pool(&x, 3, 2, 1).unwrap();
    // Single output cell averaging the 2x2 valid region.
    assert_eq!(y.tensor().shape(), &[1, 1, 1, 1]);
    assert!((y.tensor().data()[0] - 2.5).abs() < 1e-12);
}

#[test]
fn srnetc64_structure_matches_reference() {
    let model = build_srnetc64(7);
    let mains = model.main_conv_layers();
    assert_eq!(mains.len(), 22);

    let l1 = model.node("L1").unwrap();
    if let Node::Conv(c) = l1 {
        assert_eq!(c.spec.in_channels, 1);
        assert_eq!(c.spec.out_channels, 64);
        assert!(!c.spec.decomposable);
    } else {
        panic!("L1 is not a conv node");
    }

    if let Node::Conv(c) = model.node("L9-1").unwrap() {
        assert_eq!(c.spec.in_channels, 16);
        assert_eq!(c.spec.out_channels, 64);
        assert!(c.spec.decomposable);
    } else {
        panic!("L9-1 is not a conv node");
    }

    // Channel plan across the main layers.
    for spec in &mains {
        let (j_in, j_out) = (spec.in_channels, spec.out_channels);
        match spec.name.as_str() {
            "L1" => assert_eq!((j_in, j_out), (1, 64)),
            "L2" => assert_eq!((j_in, j_out), (64, 16)),
            "L9-1" => assert_eq!((j_in, j_out), (16, 64)),
            n if n.starts_with("L9")
                || n.starts_with("L10")
                || n.starts_with("L11")
                || n.starts_with("L12") =>
            {
                assert_eq!((j_in, j_out), (64, 64));
            }
            _ => assert_eq!((j_in, j_out), (16, 16)),
        }
    }

    // Nominal conv output sizes per stage.
    for spec in &mains {
        let expected = match spec.name.as_str() {
            n if n.starts_with("L9") => 128,
            n if n.starts_with("L10") => 64,
            n if n.starts_with("L11") => 32,
            n if n.starts_with("L12") => 16,
            _ => 256,
        };
        assert_eq!(spec.out_h, expected, "layer {}", spec.name);
        assert_eq!(spec.out_w, expected, "layer {}", spec.name);
    }

    // 21 decomposable layers (everything but L1 on the main branch).
    assert_eq!(model.decomposable_layers().len(), 21);
}

#[test]
fn srnetc64_forward_shapes_and_determinism() {
    let model = build_srnetc64(3);
    let batch = random_batch(2, 1, 32, 32, 20);
    let t1 = forward_trace(&model, &batch).unwrap();
    let t2 = forward_trace(&model, &batch).unwrap();
    let last = t1.outputs.last().unwrap();
    assert_eq!(last.tensor().shape(), &[2, 2, 1, 1]);
    for (a, b) in t1.outputs.iter().zip(&t2.outputs) {
        assert_eq!(a.tensor().data(), b.tensor().data());
    }

    // Softmax rows sum to one.
    for b in 0..2 {
        let s: f64 = (0..2).map(|c| last.tensor().get(&[b, c, 0, 0])).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    // Same seed rebuilds bit-identical weights.
    let model2 = build_srnetc64(3);
    let t3 = forward_trace(&model2, &batch).unwrap();
    for (a, b) in t1.outputs.iter().zip(&t3.outputs) {
        assert_eq!(a.tensor().data(), b.tensor().data());
    }
}

#[test]
fn forward_to_layer_first_layer_matches_manual_composition() {
    let model = build_srnetc64(5);
    let batch = random_batch(2, 1, 16, 16, 21);
    let via_model = forward_to_layer(&model, &batch, "L1").unwrap();
    let kernel = match model.node("L1").unwrap() {
        Node::Conv(c) => c.kernel.clone(),
        _ => unreachable!(),
    };
    let manual = batch_norm(
        &conv2d_forward(&batch, &kernel, 1, 1).unwrap(),
        &[1.0; 64],
        &[0.0; 64],
        BN_EPS_TEST,
    )
    .unwrap();
    assert!(max_abs_diff(&via_model, &manual) < 1e-12);
}

const BN_EPS_TEST: f64 = 1e-5;

#[test]
fn direct_shortcut_block_adds_branch_to_input() {
    let model = build_srnetc64(6);
    let batch = random_batch(2, 1, 16, 16, 22);
    let trace = forward_trace(&model, &batch).unwrap();

    // Oracle: L3.add output == block input + branch output, composed by hand.
    let block_in = trace.output(&model, "L2.relu").unwrap();
    let branch = trace.output(&model, "L3-2.bn").unwrap();
    let added = trace.output(&model, "L3.add").unwrap();
    for i in 0..added.tensor().len() {
        let expect = block_in.tensor().data()[i] + branch.tensor().data()[i];
        assert!((added.tensor().data()[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn transformed_shortcut_halves_spatial_dims() {
    let model = build_srnetc64(6);
    let batch = random_batch(2, 1, 32, 32, 23);
    let trace = forward_trace(&model, &batch).unwrap();
    assert_eq!(
        trace.output(&model, "L8.add").unwrap().tensor().shape(),
        &[2, 16, 16, 16]
    );
    assert_eq!(
        trace.output(&model, "L9.add").unwrap().tensor().shape(),
        &[2, 64, 8, 8]
    );
    assert_eq!(
        trace.output(&model, "L12.gap").unwrap().tensor().shape(),
        &[2, 64, 1, 1]
    );
}

#[test]
fn replace_layer_full_rank_leaves_downstream_unchanged() {
    let model = build_srnetc64(8);
    let batch = random_batch(2, 1, 16, 16, 24);
    let kernel = match model.node("L5-1").unwrap() {
        Node::Conv(c) => c.kernel.clone(),
        _ => unreachable!(),
    };
    let factors = tucker_decompose_default(&kernel, 16, 16).unwrap();
    let replaced = model.replace_layer("L5-1", factors).unwrap();

    for layer in ["L5-1", "L5-2", "L8-1", "L12-2"] {
        let a = forward_to_layer(&model, &batch, layer).unwrap();
        let b = forward_to_layer(&replaced, &batch, layer).unwrap();
        let scale = a.frobenius_norm().max(1e-30);
        let mut diff = 0.0f64;
        for (x, y) in a.tensor().data().iter().zip(b.tensor().data()) {
            diff += (x - y) * (x - y);
        }
        assert!(diff.sqrt() / scale < 1e-8, "layer {layer}");
    }

    // Interface channel counts unchanged at the block boundary.
    if let Node::Group(g) = replaced.node("L5-1").unwrap() {
        assert_eq!(g.spec.in_channels, 16);
        assert_eq!(g.spec.out_channels, 16);
    } else {
        panic!("L5-1 was not replaced by a group");
    }
}

#[test]
fn replace_layer_policy_and_shape_errors() {
    let model = build_srnetc64(9);
    let k1 = match model.node("L1").unwrap() {
        Node::Conv(c) => c.kernel.clone(),
        _ => unreachable!(),
    };
    let f1 = tucker_decompose_default(&k1, 1, 64).unwrap();
    assert!(matches!(
        model.replace_layer("L1", f1),
        Err(Error::Policy(_))
    ));

    let k2 = match model.node("L2").unwrap() {
        Node::Conv(c) => c.kernel.clone(),
        _ => unreachable!(),
    };
    let f2 = tucker_decompose_default(&k2, 32, 8).unwrap();
    assert!(matches!(
        model.replace_layer("L3-1", f2),
        Err(Error::InvalidArgument(_))
    ));
    assert!(matches!(
        model.replace_layer("nope", tucker_decompose_default(&k2, 4, 4).unwrap()),
        Err(Error::NotFound(_))
    ));
}

#[test]
fn shortcut_replacement_preserves_every_node_shape() {
    let model = build_srnetc64(10);
    let batch = random_batch(2, 1, 16, 16, 25);
    let base = forward_trace(&model, &batch).unwrap();
    // L4-2 sits inside a direct-shortcut block.
    let kernel = match model.node("L4-2").unwrap() {
        Node::Conv(c) => c.kernel.clone(),
        _ => unreachable!(),
    };
    let replaced = model
        .replace_layer("L4-2", tucker_decompose_default(&kernel, 5, 5).unwrap())
        .unwrap();
    let after = forward_trace(&replaced, &batch).unwrap();
    for (a, b) in base.outputs.iter().zip(&after.outputs) {
        assert_eq!(a.tensor().shape(), b.tensor().shape());
    }
}

#[test]
fn identity_factor_group_behaves_like_conv() {
    // Identity factors with the kernel as core: group forward equals conv.
    let x = random_batch(2, 4, 6, 6, 26);
    let kernel = random_kernel(4, 4, 3, 27);
    let f = TuckerFactors {
        core: kernel.clone(),
        factor_in: Matrix::identity(4),
        factor_out: Matrix::identity(4),
    };
    let a = decomposed_forward(&x, &f, 1, 1).unwrap();
    let b = conv2d_forward(&x, &kernel, 1, 1).unwrap();
    assert!(max_abs_diff(&a, &b) < 1e-12);
}

#[test]
fn validate_rejects_broken_wiring() {
    let mut model = build_srnetc64(11);
    // Drop the batch-norm node after L1.
    model.nodes.remove(1);
    assert!(model.validate().is_err());
}
