//! Dense N-way tensors and row-major matrices, with the mode algebra
//! (unfolding, folding, n-mode products) used by the decomposition code.
//!
//! Unfoldings follow the Kolda-Bader convention: element `(i_1, ..., i_N)`
//! maps to row `i_n` and to the column obtained by ordering the remaining
//! indices with the *lowest* mode varying fastest. `fold` is the exact
//! inverse, so round-trips are bit-exact.

use crate::error::{Error, Result};

/// Dense real tensor. `data` is row-major over `shape` in declared order
/// (the last index varies fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.shape.len()];
        for k in (0..self.shape.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.shape[k + 1];
        }
        strides
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let flat = self.flat_index(idx);
        self.data[flat] = value;
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (k, (&i, &s)) in idx.iter().zip(self.shape.iter()).enumerate() {
            debug_assert!(i < s, "index {i} out of bounds for mode {k} (size {s})");
            flat = flat * s + i;
        }
        flat
    }

    /// Mode-`mode` unfolding (1-based mode, Kolda-Bader column ordering).
    pub fn unfold(&self, mode: usize) -> Result<Matrix> {
        let n = self.check_mode(mode)?;
        let rows = self.shape[n];
        let cols = self.data.len() / rows;
        let mut out = vec![0.0; rows * cols];

        // Column stride of each retained mode: lower modes vary fastest.
        let mut col_strides = vec![0usize; self.shape.len()];
        let mut acc = 1usize;
        for k in 0..self.shape.len() {
            if k == n {
                continue;
            }
            col_strides[k] = acc;
            acc *= self.shape[k];
        }

        let mut idx = vec![0usize; self.shape.len()];
        for &value in &self.data {
            let row = idx[n];
            let mut col = 0;
            for k in 0..self.shape.len() {
                if k != n {
                    col += idx[k] * col_strides[k];
                }
            }
            out[row * cols + col] = value;
            Self::advance(&mut idx, &self.shape);
        }
        Matrix::new(rows, cols, out)
    }

    /// Exact inverse of [`unfold`](Self::unfold).
    pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "fold target shape must have positive dims, got {shape:?}"
            )));
        }
        if mode == 0 || mode > shape.len() {
            return Err(Error::InvalidArgument(format!(
                "mode {mode} out of range for fold into shape {shape:?}"
            )));
        }
        let n = mode - 1;
        let total: usize = shape.iter().product();
        if m.rows() != shape[n] || m.rows() * m.cols() != total {
            return Err(Error::InvalidArgument(format!(
                "matrix {}x{} inconsistent with fold into {:?} along mode {}",
                m.rows(),
                m.cols(),
                shape,
                mode
            )));
        }

        let mut col_strides = vec![0usize; shape.len()];
        let mut acc = 1usize;
        for k in 0..shape.len() {
            if k == n {
                continue;
            }
            col_strides[k] = acc;
            acc *= shape[k];
        }

        let mut out = vec![0.0; total];
        let mut idx = vec![0usize; shape.len()];
        for slot in out.iter_mut() {
            let row = idx[n];
            let mut col = 0;
            for k in 0..shape.len() {
                if k != n {
                    col += idx[k] * col_strides[k];
                }
            }
            *slot = m.data()[row * m.cols() + col];
            Self::advance(&mut idx, shape);
        }
        Self::new(shape.to_vec(), out)
    }

    /// n-mode product: contracts mode `mode` (1-based) with the columns of
    /// `u`, replacing its extent by `u.rows()`.
    pub fn mode_product(&self, u: &Matrix, mode: usize) -> Result<Self> {
        let n = self.check_mode(mode)?;
        if u.cols() != self.shape[n] {
            return Err(Error::InvalidArgument(format!(
                "mode-{} product needs matrix with {} cols, got {}x{}",
                mode,
                self.shape[n],
                u.rows(),
                u.cols()
            )));
        }
        let old_dim = self.shape[n];
        let new_dim = u.rows();
        let mut new_shape = self.shape.clone();
        new_shape[n] = new_dim;

        // View the tensor as (outer, old_dim, inner) in row-major order.
        let inner: usize = self.shape[n + 1..].iter().product();
        let outer: usize = self.shape[..n].iter().product();
        let mut out = vec![0.0; outer * new_dim * inner];

        for a in 0..outer {
            let src_block = &self.data[a * old_dim * inner..(a + 1) * old_dim * inner];
            let dst_block = &mut out[a * new_dim * inner..(a + 1) * new_dim * inner];
            for j in 0..new_dim {
                let u_row = &u.data()[j * old_dim..(j + 1) * old_dim];
                let dst = &mut dst_block[j * inner..(j + 1) * inner];
                for (i, &w) in u_row.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let src = &src_block[i * inner..(i + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d += w * s;
                    }
                }
            }
        }
        Self::new(new_shape, out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn check_mode(&self, mode: usize) -> Result<usize> {
        if mode == 0 || mode > self.shape.len() {
            return Err(Error::InvalidArgument(format!(
                "mode {} out of range for rank-{} tensor",
                mode,
                self.shape.len()
            )));
        }
        Ok(mode - 1)
    }

    /// Row-major index increment (last mode fastest).
    fn advance(idx: &mut [usize], shape: &[usize]) {
        for k in (0..shape.len()).rev() {
            idx[k] += 1;
            if idx[k] < shape[k] {
                return;
            }
            idx[k] = 0;
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "matrix dims must be positive, got {rows}x{cols}"
            )));
        }
        if rows * cols != data.len() {
            return Err(Error::InvalidArgument(format!(
                "matrix {}x{} needs {} elements, data has {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            rows: n,
            cols: n,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::InvalidArgument(format!(
                "matmul dims mismatch: {}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = vec![0.0; self.rows * rhs.cols];
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let out_row = &mut out[r * rhs.cols..(r + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Matrix::new(self.rows, rhs.cols, out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Max-abs deviation of `self^T self` from the identity; small for
    /// column-orthonormal matrices.
    pub fn gram_deviation(&self) -> f64 {
        let gram = self.transpose().matmul(self).expect("square gram");
        let mut dev: f64 = 0.0;
        for r in 0..gram.rows {
            for c in 0..gram.cols {
                let target = if r == c { 1.0 } else { 0.0 };
                dev = dev.max((gram.get(r, c) - target).abs());
            }
        }
        dev
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tensor_2x2x2() -> DenseTensor {
        // t[i,j,k] = i + 2(j-1) + 4(k-1) with 1-based indices.
        let mut t = DenseTensor::zeros(vec![2, 2, 2]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    t.set(&[i, j, k], (i + 1 + 2 * j + 4 * k) as f64);
                }
            }
        }
        t
    }

    #[test]
    fn unfold_matrix_mode1_is_identity() {
        let t = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = t.unfold(1).unwrap();
        assert_eq!(m.rows(), 2);
        assert_eq!(m.cols(), 2);
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unfold_2x2x2_mode1_matches_hand_enumeration() {
        let t = tensor_2x2x2();
        let m = t.unfold(1).unwrap();
        assert_eq!(m.rows(), 2);
        assert_eq!(m.cols(), 4);
        assert_eq!(m.data(), &[1.0, 3.0, 5.0, 7.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn fold_inverts_unfold_2x2x2() {
        let t = tensor_2x2x2();
        let m = t.unfold(1).unwrap();
        let back = DenseTensor::fold(&m, 1, &[2, 2, 2]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn fold_singleton() {
        let m = Matrix::new(1, 1, vec![5.0]).unwrap();
        let t = DenseTensor::fold(&m, 1, &[1]).unwrap();
        assert_eq!(t.data(), &[5.0]);
    }

    #[test]
    fn mode_out_of_range_errors() {
        let t = tensor_2x2x2();
        assert!(matches!(t.unfold(0), Err(Error::InvalidArgument(_))));
        assert!(matches!(t.unfold(4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn fold_dim_mismatch_errors() {
        let m = Matrix::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(DenseTensor::fold(&m, 1, &[2, 2, 2]).is_err());
    }

    #[test]
    fn mode_product_row_sum() {
        let t = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let u = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        let p = t.mode_product(&u, 1).unwrap();
        assert_eq!(p.shape(), &[1, 2]);
        assert_eq!(p.data(), &[4.0, 6.0]);
    }

    #[test]
    fn mode_product_identity_is_noop() {
        let t = tensor_2x2x2();
        for mode in 1..=3 {
            let id = Matrix::identity(2);
            let p = t.mode_product(&id, mode).unwrap();
            assert_eq!(p, t);
        }
    }

    #[test]
    fn mode_product_dim_mismatch_errors() {
        let t = tensor_2x2x2();
        let u = Matrix::new(2, 3, vec![0.0; 6]).unwrap();
        assert!(t.mode_product(&u, 1).is_err());
    }

    #[test]
    fn frobenius_norm_cases() {
        let z = DenseTensor::zeros(vec![3, 4]).unwrap();
        assert_eq!(z.frobenius_norm(), 0.0);

        let twos = DenseTensor::new(vec![2, 2], vec![2.0; 4]).unwrap();
        assert_eq!(twos.frobenius_norm(), 4.0);

        let v = DenseTensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(v.frobenius_norm(), 5.0);
    }

    #[test]
    fn distinct_mode_products_commute() {
        let t = tensor_2x2x2();
        let u = Matrix::new(3, 2, vec![1.0, -2.0, 0.5, 4.0, -1.0, 2.0]).unwrap();
        let v = Matrix::new(2, 2, vec![2.0, 1.0, -3.0, 0.25]).unwrap();
        let a = t.mode_product(&u, 1).unwrap().mode_product(&v, 2).unwrap();
        let b = t.mode_product(&v, 2).unwrap().mode_product(&u, 1).unwrap();
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn arb_tensor() -> impl Strategy<Value = DenseTensor> {
        // Up to rank 5, small extents.
        prop::collection::vec(1usize..4, 1..=5).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop::collection::vec(-10.0f64..10.0, n)
                .prop_map(move |data| DenseTensor::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn unfold_fold_roundtrip_bit_exact(t in arb_tensor()) {
            for mode in 1..=t.ndim() {
                let m = t.unfold(mode).unwrap();
                let back = DenseTensor::fold(&m, mode, t.shape()).unwrap();
                prop_assert_eq!(&back, &t);
            }
        }

        #[test]
        fn unfolding_preserves_norm(t in arb_tensor()) {
            let norm = t.frobenius_norm();
            for mode in 1..=t.ndim() {
                let m = t.unfold(mode).unwrap();
                prop_assert!((m.frobenius_norm() - norm).abs() <= 1e-12 * norm.max(1.0));
            }
        }

        #[test]
        fn mode_product_linearity(t in arb_tensor(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mode = 1;
            let dim = t.shape()[0];
            let u = Matrix::new(2, dim, (0..2 * dim).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
            let v = Matrix::new(2, dim, (0..2 * dim).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();

            let mut combo = Matrix::zeros(2, dim).unwrap();
            for i in 0..2 * dim {
                combo.data_mut()[i] = a * u.data()[i] + b * v.data()[i];
            }

            let lhs = t.mode_product(&combo, mode).unwrap();
            let tu = t.mode_product(&u, mode).unwrap();
            let tv = t.mode_product(&v, mode).unwrap();
            let scale = lhs.frobenius_norm().max(1.0);
            for (i, l) in lhs.data().iter().enumerate() {
                let rhs = a * tu.data()[i] + b * tv.data()[i];
                prop_assert!((l - rhs).abs() <= 1e-12 * scale);
            }
        }
    }
}
