//! Thin SVD wrapper with a fixed sign convention so decompositions are
//! reproducible bit-for-bit across runs.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Top-`k` left singular vectors of `m`, columns ordered by decreasing
/// singular value. Each vector is sign-fixed: its largest-magnitude entry
/// is made positive (first such entry on ties).
///
/// When `k` exceeds the number of singular vectors the SVD provides
/// (`min(rows, cols)`, or fewer for rank-deficient input), the basis is
/// completed with a deterministic orthonormal extension; requesting up to
/// `rows` columns is always valid.
pub fn top_left_singular_vectors(m: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 || k > m.rows() {
        return Err(Error::InvalidArgument(format!(
            "requested {} singular vectors from a {}x{} matrix",
            k,
            m.rows(),
            m.cols()
        )));
    }
    let u = left_svd(m)?;
    let rows = m.rows();
    let avail = u.cols().min(k);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for c in 0..avail {
        cols.push((0..rows).map(|r| u.get(r, c)).collect());
    }
    complete_basis(&mut cols, rows, k);

    let mut out = Matrix::zeros(rows, k)?;
    for (c, col) in cols.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            out.set(r, c, v);
        }
    }
    Ok(out)
}

fn left_svd(m: &Matrix) -> Result<Matrix> {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    let svd = dm.try_svd(true, false, f64::EPSILON, 0).ok_or_else(|| {
        Error::Numerical(format!("SVD failed on {}x{} matrix", m.rows(), m.cols()))
    })?;
    let u = svd
        .u
        .ok_or_else(|| Error::Numerical("SVD did not return left singular vectors".into()))?;

    // nalgebra does not promise sorted singular values; order them here.
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut out = Matrix::zeros(m.rows(), u.ncols())?;
    for (c_out, &c_in) in order.iter().enumerate() {
        // Sign fix: largest-magnitude entry positive.
        let mut best = 0usize;
        let mut best_abs = 0.0f64;
        for r in 0..m.rows() {
            let a = u[(r, c_in)].abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        let flip = if u[(best, c_in)] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..m.rows() {
            out.set(r, c_out, flip * u[(r, c_in)]);
        }
    }
    Ok(out)
}

/// Extends `cols` to `k` orthonormal vectors by Gram-Schmidt over the
/// canonical basis, in index order; deterministic by construction.
fn complete_basis(cols: &mut Vec<Vec<f64>>, rows: usize, k: usize) {
    let mut candidate = 0usize;
    while cols.len() < k && candidate < rows {
        let mut v = vec![0.0; rows];
        v[candidate] = 1.0;
        candidate += 1;
        // Two rounds of projection for numerical safety.
        for _ in 0..2 {
            for col in cols.iter() {
                let dot: f64 = v.iter().zip(col).map(|(a, b)| a * b).sum();
                for (vi, ci) in v.iter_mut().zip(col) {
                    *vi -= dot * ci;
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        // Same sign convention as the SVD columns.
        let mut best = 0usize;
        let mut best_abs = 0.0f64;
        for (r, x) in v.iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = r;
            }
        }
        let flip = if v[best] < 0.0 { -1.0 } else { 1.0 };
        for x in v.iter_mut() {
            *x *= flip / norm;
        }
        cols.push(v);
    }
    assert!(
        cols.len() >= k,
        "orthonormal completion failed: {} of {k} columns",
        cols.len()
    );
}
