//! Two-mode Tucker decomposition of 4-D convolution kernels.
//!
//! A kernel of shape `J_in x J_out x D x D` factors into a core tensor of
//! shape `I x O x D x D` together with a `J_in x I` input-channel factor
//! and an `O x J_out` output-channel factor. The spatial modes 3 and 4 are
//! left untouched. Initialization is truncated HOSVD (top left singular
//! vectors of the mode-1/mode-2 unfoldings); optional HOOI rounds then
//! alternate updates on the two channel modes.

use crate::error::{Error, Result};
use crate::linalg::top_left_singular_vectors;
use crate::tensor::{DenseTensor, Matrix};

/// Core tensor plus the two channel-mode factors.
///
/// `factor_in` has orthonormal columns and `factor_out` orthonormal rows
/// when produced by [`tucker_decompose`]; reconstruction does not require
/// orthonormality.
#[derive(Debug, Clone, PartialEq)]
pub struct TuckerFactors {
    /// `I x O x D x D`
    pub core: DenseTensor,
    /// `J_in x I`
    pub factor_in: Matrix,
    /// `O x J_out`
    pub factor_out: Matrix,
}

impl TuckerFactors {
    pub fn rank_in(&self) -> usize {
        self.core.shape()[0]
    }

    pub fn rank_out(&self) -> usize {
        self.core.shape()[1]
    }

    pub fn in_channels(&self) -> usize {
        self.factor_in.rows()
    }

    pub fn out_channels(&self) -> usize {
        self.factor_out.cols()
    }

    pub fn kernel_size(&self) -> usize {
        self.core.shape()[2]
    }

    fn check_consistent(&self) -> Result<()> {
        let cs = self.core.shape();
        if cs.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "core must be 4-D, got shape {cs:?}"
            )));
        }
        if self.factor_in.cols() != cs[0] {
            return Err(Error::InvalidArgument(format!(
                "factor_in is {}x{} but core rank_in is {}",
                self.factor_in.rows(),
                self.factor_in.cols(),
                cs[0]
            )));
        }
        if self.factor_out.rows() != cs[1] {
            return Err(Error::InvalidArgument(format!(
                "factor_out is {}x{} but core rank_out is {}",
                self.factor_out.rows(),
                self.factor_out.cols(),
                cs[1]
            )));
        }
        Ok(())
    }
}

pub const DEFAULT_REFINE_ITERS: usize = 3;
pub const DEFAULT_TOL: f64 = 1e-6;

fn check_kernel(kernel: &DenseTensor) -> Result<(usize, usize)> {
    let s = kernel.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::InvalidArgument(format!(
            "kernel must have shape J_in x J_out x D x D, got {s:?}"
        )));
    }
    Ok((s[0], s[1]))
}

/// HOSVD-initialized, optionally HOOI-refined two-mode Tucker decomposition.
///
/// `refine_iters` HOOI rounds alternate singular-vector updates on the two
/// channel modes, stopping early once the relative improvement of the
/// reconstruction error drops below `tol`.
pub fn tucker_decompose(
    kernel: &DenseTensor,
    rank_in: usize,
    rank_out: usize,
    refine_iters: usize,
    tol: f64,
) -> Result<TuckerFactors> {
    let (j_in, j_out) = check_kernel(kernel)?;
    if rank_in == 0 || rank_in > j_in || rank_out == 0 || rank_out > j_out {
        return Err(Error::InvalidArgument(format!(
            "ranks ({rank_in}, {rank_out}) out of bounds for a {j_in}x{j_out} channel kernel"
        )));
    }

    let factor_in = top_left_singular_vectors(&kernel.unfold(1)?, rank_in)?;
    let out_basis = top_left_singular_vectors(&kernel.unfold(2)?, rank_out)?;
    let mut factors = TuckerFactors {
        core: compute_core(kernel, &factor_in, &out_basis.transpose())?,
        factor_in,
        factor_out: out_basis.transpose(),
    };

    if refine_iters == 0 {
        return Ok(factors);
    }

    let kernel_norm = kernel.frobenius_norm();
    let mut prev_err = reconstruction_error(kernel, &factors)?;
    for _ in 0..refine_iters {
        // Mode 1 update against the current mode-2 subspace.
        let projected_out = kernel.mode_product(&factors.factor_out, 2)?;
        let factor_in = top_left_singular_vectors(&projected_out.unfold(1)?, rank_in)?;

        // Mode 2 update against the fresh mode-1 subspace.
        let projected_in = kernel.mode_product(&factor_in.transpose(), 1)?;
        let out_basis = top_left_singular_vectors(&projected_in.unfold(2)?, rank_out)?;
        let factor_out = out_basis.transpose();

        let core = compute_core(kernel, &factor_in, &factor_out)?;
        factors = TuckerFactors {
            core,
            factor_in,
            factor_out,
        };

        if kernel_norm == 0.0 {
            break;
        }
        let err = reconstruction_error(kernel, &factors)?;
        let improvement = (prev_err - err) / prev_err.max(f64::MIN_POSITIVE);
        prev_err = err;
        if improvement < tol {
            break;
        }
    }
    Ok(factors)
}

/// Decomposition at the crate defaults (3 HOOI rounds, tol 1e-6).
pub fn tucker_decompose_default(
    kernel: &DenseTensor,
    rank_in: usize,
    rank_out: usize,
) -> Result<TuckerFactors> {
    tucker_decompose(kernel, rank_in, rank_out, DEFAULT_REFINE_ITERS, DEFAULT_TOL)
}

fn compute_core(
    kernel: &DenseTensor,
    factor_in: &Matrix,
    factor_out: &Matrix,
) -> Result<DenseTensor> {
    kernel
        .mode_product(&factor_in.transpose(), 1)?
        .mode_product(factor_out, 2)
}

/// `core x1 factor_in x2 factor_out^T`, restoring the original kernel shape.
pub fn reconstruct(f: &TuckerFactors) -> Result<DenseTensor> {
    f.check_consistent()?;
    f.core
        .mode_product(&f.factor_in, 1)?
        .mode_product(&f.factor_out.transpose(), 2)
}

/// Relative reconstruction error `|K - K~| / |K|`.
///
/// A zero kernel with a zero reconstruction yields 0; a zero kernel with a
/// nonzero reconstruction is a division guard error.
pub fn reconstruction_error(kernel: &DenseTensor, f: &TuckerFactors) -> Result<f64> {
    let recon = reconstruct(f)?;
    if recon.shape() != kernel.shape() {
        return Err(Error::InvalidArgument(format!(
            "reconstruction shape {:?} does not match kernel shape {:?}",
            recon.shape(),
            kernel.shape()
        )));
    }
    let norm = kernel.frobenius_norm();
    let diff = kernel
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 {
        if diff == 0.0 {
            return Ok(0.0);
        }
        return Err(Error::Numerical(
            "zero kernel with nonzero reconstruction".into(),
        ));
    }
    Ok(diff / norm)
}
