//! Dense row-major storage: token matrices, dense weights and per-expert
//! weight tensors.
//!
//! All dot products accumulate in `f64` and round once to `f32`, so tiled,
//! parallel and naive code paths agree to within a single rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{arg_err, dim_err, Result};
use crate::metrics;

/// Row-major `rows x cols` matrix of `f32`. The first dimension is always the
/// flattened batch-time (or slot) dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim_err!(
                "buffer of {} elements cannot hold a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(dim_err!("row {i} has {} columns, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Deterministic matrix with entries uniform in `[-scale, scale]`.
    pub fn random(rows: usize, cols: usize, seed: u64, scale: f32) -> Self {
        Self {
            rows,
            cols,
            data: seeded_uniform(rows * cols, seed, scale),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    /// Size of the buffer in bytes.
    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }

    pub fn fill(&mut self, v: f32) {
        self.data.fill(v);
    }

    pub fn scale(&mut self, alpha: f32) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Dense `d_in x d_out` weight, used for the shared key/value transforms and
/// the router.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    d_in: usize,
    d_out: usize,
    data: Vec<f32>,
}

impl WeightMatrix {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            data: vec![0.0; d_in * d_out],
        }
    }

    pub fn from_vec(d_in: usize, d_out: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != d_in * d_out {
            return Err(dim_err!(
                "buffer of {} elements cannot hold a {d_in}x{d_out} weight",
                data.len()
            ));
        }
        Ok(Self { d_in, d_out, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut w = Self::zeros(n, n);
        for i in 0..n {
            w.data[i * n + i] = 1.0;
        }
        w
    }

    pub fn random(d_in: usize, d_out: usize, seed: u64, scale: f32) -> Self {
        Self {
            d_in,
            d_out,
            data: seeded_uniform(d_in * d_out, seed, scale),
        }
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.d_out + j]
    }
}

impl From<Matrix> for WeightMatrix {
    fn from(m: Matrix) -> Self {
        Self {
            d_in: m.rows,
            d_out: m.cols,
            data: m.data,
        }
    }
}

/// `E x d_in x d_out` stack of per-expert transforms, expert-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertTensor {
    experts: usize,
    d_in: usize,
    d_out: usize,
    data: Vec<f32>,
}

impl ExpertTensor {
    pub fn zeros(experts: usize, d_in: usize, d_out: usize) -> Self {
        assert!(experts >= 1, "an expert tensor needs at least one expert");
        Self {
            experts,
            d_in,
            d_out,
            data: vec![0.0; experts * d_in * d_out],
        }
    }

    pub fn from_vec(experts: usize, d_in: usize, d_out: usize, data: Vec<f32>) -> Result<Self> {
        if experts == 0 {
            return Err(arg_err!("an expert tensor needs at least one expert"));
        }
        if data.len() != experts * d_in * d_out {
            return Err(dim_err!(
                "buffer of {} elements cannot hold a {experts}x{d_in}x{d_out} expert tensor",
                data.len()
            ));
        }
        Ok(Self {
            experts,
            d_in,
            d_out,
            data,
        })
    }

    /// Builds a tensor from one weight per expert; all must share a shape.
    pub fn from_experts(weights: &[WeightMatrix]) -> Result<Self> {
        let first = weights
            .first()
            .ok_or_else(|| arg_err!("an expert tensor needs at least one expert"))?;
        let (d_in, d_out) = (first.d_in, first.d_out);
        let mut data = Vec::with_capacity(weights.len() * d_in * d_out);
        for (e, w) in weights.iter().enumerate() {
            if (w.d_in, w.d_out) != (d_in, d_out) {
                return Err(dim_err!(
                    "expert {e} is {}x{}, expected {d_in}x{d_out}",
                    w.d_in,
                    w.d_out
                ));
            }
            data.extend_from_slice(&w.data);
        }
        Self::from_vec(weights.len(), d_in, d_out, data)
    }

    pub fn random(experts: usize, d_in: usize, d_out: usize, seed: u64, scale: f32) -> Self {
        assert!(experts >= 1, "an expert tensor needs at least one expert");
        Self {
            experts,
            d_in,
            d_out,
            data: seeded_uniform(experts * d_in * d_out, seed, scale),
        }
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Row-major `d_in x d_out` block of expert `e`.
    pub fn expert(&self, e: usize) -> &[f32] {
        let n = self.d_in * self.d_out;
        &self.data[e * n..(e + 1) * n]
    }

    pub fn expert_mut(&mut self, e: usize) -> &mut [f32] {
        let n = self.d_in * self.d_out;
        &mut self.data[e * n..(e + 1) * n]
    }

    pub fn expert_matrix(&self, e: usize) -> WeightMatrix {
        WeightMatrix {
            d_in: self.d_in,
            d_out: self.d_out,
            data: self.expert(e).to_vec(),
        }
    }

    pub fn get(&self, e: usize, i: usize, j: usize) -> f32 {
        self.data[(e * self.d_in + i) * self.d_out + j]
    }
}

fn seeded_uniform(len: usize, seed: u64, scale: f32) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| rng.random_range(-1.0f32..=1.0) * scale)
        .collect()
}

/// Deterministic `rows x cols` matrix drawn uniformly from `[-scale, scale]`.
pub fn seeded_random_matrix(rows: usize, cols: usize, seed: u64, scale: f32) -> Matrix {
    Matrix::random(rows, cols, seed, scale)
}

/// `a · b` for a token matrix and a dense weight.
pub fn matmul(a: &Matrix, b: &WeightMatrix) -> Result<Matrix> {
    if a.cols != b.d_in {
        return Err(dim_err!(
            "matmul: lhs is {}x{} but rhs is {}x{}",
            a.rows,
            a.cols,
            b.d_in,
            b.d_out
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.d_out);
    if b.d_out > 0 {
        out.data
            .par_chunks_mut(b.d_out)
            .zip(a.data.par_chunks(a.cols.max(1)))
            .for_each(|(out_row, a_row)| {
                let mut acc = vec![0.0f64; b.d_out];
                for (m, &x) in a_row.iter().enumerate() {
                    let x = x as f64;
                    let w_row = &b.data[m * b.d_out..(m + 1) * b.d_out];
                    for (s, &w) in acc.iter_mut().zip(w_row) {
                        *s += x * w as f64;
                    }
                }
                for (o, s) in out_row.iter_mut().zip(acc) {
                    *o = s as f32;
                }
            });
    }
    metrics::add_macs((a.rows * a.cols * b.d_out) as u64);
    Ok(out)
}

/// `a · bᵀ`, reading `b` with swapped index roles instead of materializing
/// the transpose. Result is `a.rows x b.d_in`.
pub fn matmul_transposed(a: &Matrix, b: &WeightMatrix) -> Result<Matrix> {
    if a.cols != b.d_out {
        return Err(dim_err!(
            "matmul_transposed: lhs is {}x{} but rhs transpose is {}x{}",
            a.rows,
            a.cols,
            b.d_out,
            b.d_in
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.d_in);
    if b.d_in > 0 {
        out.data
            .par_chunks_mut(b.d_in)
            .zip(a.data.par_chunks(a.cols.max(1)))
            .for_each(|(out_row, a_row)| {
                for (j, o) in out_row.iter_mut().enumerate() {
                    let w_row = &b.data[j * b.d_out..(j + 1) * b.d_out];
                    *o = dot_f64(a_row, w_row) as f32;
                }
            });
    }
    metrics::add_macs((a.rows * a.cols * b.d_in) as u64);
    Ok(out)
}

/// `aᵀ · b` for two matrices with the same row count; the weight-gradient
/// shape for a dense transform.
pub fn gram(a: &Matrix, b: &Matrix) -> Result<WeightMatrix> {
    if a.rows != b.rows {
        return Err(dim_err!(
            "gram: lhs has {} rows but rhs has {}",
            a.rows,
            b.rows
        ));
    }
    let mut out = WeightMatrix::zeros(a.cols, b.cols);
    if b.cols > 0 {
        out.data
            .par_chunks_mut(b.cols)
            .enumerate()
            .for_each(|(m, out_row)| {
                let mut acc = vec![0.0f64; b.cols];
                for r in 0..a.rows {
                    let x = a.data[r * a.cols + m] as f64;
                    for (s, &y) in acc.iter_mut().zip(b.row(r)) {
                        *s += x * y as f64;
                    }
                }
                for (o, s) in out_row.iter_mut().zip(acc) {
                    *o = s as f32;
                }
            });
    }
    metrics::add_macs((a.rows * a.cols * b.cols) as u64);
    Ok(out)
}

pub(crate) fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Elementwise `a += b`.
pub fn add_assign(a: &mut Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!(
            "add: {}x{} vs {}x{}",
            a.rows,
            a.cols,
            b.rows,
            b.cols
        ));
    }
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &Matrix, b: &WeightMatrix) -> Vec<f64> {
        let mut out = vec![0.0f64; a.rows() * b.d_out()];
        for i in 0..a.rows() {
            for j in 0..b.d_out() {
                for m in 0..a.cols() {
                    out[i * b.d_out() + j] += a.get(i, m) as f64 * b.get(m, j) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn scalar_product() {
        let a = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
        let b = WeightMatrix::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn identity_lhs_returns_rhs() {
        let b = WeightMatrix::random(2, 3, 11, 1.0);
        let out = matmul(&Matrix::identity(2), &b).unwrap();
        assert_eq!(out.as_slice(), b.as_slice());
    }

    #[test]
    fn identity_rhs_returns_lhs() {
        let a = Matrix::random(7, 5, 3, 1.0);
        let out = matmul(&a, &WeightMatrix::identity(5)).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn random_matches_triple_loop() {
        let a = Matrix::random(5, 4, 1, 1.0);
        let b = WeightMatrix::random(4, 3, 2, 1.0);
        let out = matmul(&a, &b).unwrap();
        for (x, y) in out.as_slice().iter().zip(triple_loop(&a, &b)) {
            assert!((*x as f64 - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn long_inner_dimension_matches_triple_loop() {
        let a = Matrix::random(3, 4096, 5, 1.0);
        let b = WeightMatrix::random(4096, 2, 6, 1.0);
        let out = matmul(&a, &b).unwrap();
        for (x, y) in out.as_slice().iter().zip(triple_loop(&a, &b)) {
            assert!((*x as f64 - y).abs() <= 1e-6 * y.abs().max(1.0));
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &WeightMatrix::zeros(4, 5)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x5"), "{msg}");
    }

    #[test]
    fn transposed_and_gram_agree_with_explicit_transpose() {
        let a = Matrix::random(6, 4, 8, 1.0);
        let w = WeightMatrix::random(5, 4, 9, 1.0);
        let mut wt = WeightMatrix::zeros(4, 5);
        for i in 0..5 {
            for j in 0..4 {
                wt.as_mut_slice()[j * 5 + i] = w.get(i, j);
            }
        }
        assert_eq!(matmul_transposed(&a, &w).unwrap(), matmul(&a, &wt).unwrap());

        let b = Matrix::random(6, 3, 10, 1.0);
        let g = gram(&a, &b).unwrap();
        for m in 0..4 {
            for c in 0..3 {
                let want: f64 = (0..6).map(|r| a.get(r, m) as f64 * b.get(r, c) as f64).sum();
                assert!((g.get(m, c) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn seeded_random_is_deterministic_and_bounded() {
        let a = seeded_random_matrix(2, 2, 7, 1.0);
        let b = seeded_random_matrix(2, 2, 7, 1.0);
        assert_eq!(a.as_slice(), b.as_slice());
        let c = seeded_random_matrix(3, 3, 7, 1.0);
        let d = seeded_random_matrix(3, 3, 8, 1.0);
        assert_ne!(c.as_slice(), d.as_slice());
        let e = seeded_random_matrix(1000, 1, 1, 1.0);
        assert!(e.as_slice().iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
        assert!(ExpertTensor::from_vec(0, 1, 1, vec![]).is_err());
    }
}
