//! Scaled dot-product attention where each query row belongs to a token
//! through an explicit slot-to-token map. Query head `j` of every row
//! attends over key/value head `j` of the tokens in the same sequence.

use rayon::prelude::*;

use crate::error::{arg_err, dim_err, Result};
use crate::metrics;
use crate::tensor::Matrix;

struct Shape {
    heads: usize,
    d_head: usize,
    seq_len: usize,
    causal: bool,
}

impl Shape {
    fn check(q: &Matrix, k: &Matrix, v: &Matrix, slot_token: &[usize], seq_len: usize, d_head: usize, causal: bool) -> Result<Self> {
        if d_head == 0 || !q.cols().is_multiple_of(d_head) {
            return Err(arg_err!("query width {} is not a multiple of d_head = {d_head}", q.cols()));
        }
        if k.shape() != v.shape() || k.cols() != q.cols() {
            return Err(dim_err!(
                "queries are {}x{}, keys {}x{}, values {}x{}",
                q.rows(),
                q.cols(),
                k.rows(),
                k.cols(),
                v.rows(),
                v.cols()
            ));
        }
        if slot_token.len() != q.rows() {
            return Err(dim_err!("{} query rows but {} map entries", q.rows(), slot_token.len()));
        }
        if seq_len == 0 || !k.rows().is_multiple_of(seq_len) {
            return Err(arg_err!("{} tokens do not split into sequences of {seq_len}", k.rows()));
        }
        if let Some(&t) = slot_token.iter().find(|&&t| t >= k.rows()) {
            return Err(arg_err!("query row maps to token {t} of {}", k.rows()));
        }
        Ok(Self {
            heads: q.cols() / d_head,
            d_head,
            seq_len,
            causal,
        })
    }

    /// Key tokens visible to a query of token `t`.
    fn keys(&self, t: usize) -> std::ops::Range<usize> {
        let start = t / self.seq_len * self.seq_len;
        let end = if self.causal { t + 1 } else { start + self.seq_len };
        start..end
    }

    fn probs(&self, q: &[f32], k: &Matrix, j: usize, keys: std::ops::Range<usize>) -> Vec<f64> {
        let cols = j * self.d_head..(j + 1) * self.d_head;
        let qh = &q[cols.clone()];
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut s: Vec<f64> = keys
            .map(|u| crate::tensor::dot_f64(qh, &k.row(u)[cols.clone()]) * scale)
            .collect();
        let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in &mut s {
            *x = (*x - max).exp();
            total += *x;
        }
        s.iter_mut().for_each(|x| *x /= total);
        s
    }
}

/// `Ô[i, head j] = softmax_u(Q[i, j] · K[u, j] / √d_head) · V[u, j]` over
/// the tokens `u` visible to `slot_token[i]`. `K` and `V` have one row per
/// token; tokens form consecutive sequences of `seq_len`.
pub fn attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    slot_token: &[usize],
    seq_len: usize,
    d_head: usize,
    causal: bool,
) -> Result<Matrix> {
    let sh = Shape::check(q, k, v, slot_token, seq_len, d_head, causal)?;
    let mut out = Matrix::zeros(q.rows(), q.cols());
    if q.cols() == 0 {
        return Ok(out);
    }
    let macs: u64 = out
        .as_mut_slice()
        .par_chunks_mut(q.cols())
        .enumerate()
        .map(|(i, dst)| {
            let keys = sh.keys(slot_token[i]);
            for j in 0..sh.heads {
                let p = sh.probs(q.row(i), k, j, keys.clone());
                let cols = j * d_head..(j + 1) * d_head;
                let mut acc = vec![0.0f64; d_head];
                for (w, u) in p.iter().zip(keys.clone()) {
                    for (a, &x) in acc.iter_mut().zip(&v.row(u)[cols.clone()]) {
                        *a += w * x as f64;
                    }
                }
                for (d, a) in dst[cols].iter_mut().zip(acc) {
                    *d = a as f32;
                }
            }
            (2 * keys.len() * q.cols()) as u64
        })
        .sum();
    metrics::add_macs(macs);
    Ok(out)
}

/// Gradients `(dQ, dK, dV)` of [`attention`] given `dÔ`. Probabilities are
/// recomputed rather than stored.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    slot_token: &[usize],
    seq_len: usize,
    d_head: usize,
    causal: bool,
    grad_out: &Matrix,
) -> Result<(Matrix, Matrix, Matrix)> {
    let sh = Shape::check(q, k, v, slot_token, seq_len, d_head, causal)?;
    if grad_out.shape() != q.shape() {
        return Err(dim_err!(
            "output gradient is {}x{}, expected {}x{}",
            grad_out.rows(),
            grad_out.cols(),
            q.rows(),
            q.cols()
        ));
    }
    let width = q.cols();
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut dq = Matrix::zeros(q.rows(), width);
    let mut dk = vec![0.0f64; k.rows() * width];
    let mut dv = vec![0.0f64; k.rows() * width];
    for (i, &token) in slot_token.iter().enumerate() {
        let keys = sh.keys(token);
        let g = grad_out.row(i);
        for j in 0..sh.heads {
            let cols = j * d_head..(j + 1) * d_head;
            let p = sh.probs(q.row(i), k, j, keys.clone());
            let gh = &g[cols.clone()];
            // dP[u] = dÔ·V[u]; dS = P ⊙ (dP − Σ P·dP)
            let dp: Vec<f64> = keys
                .clone()
                .map(|u| crate::tensor::dot_f64(gh, &v.row(u)[cols.clone()]))
                .collect();
            let mean: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            let mut dqh = vec![0.0f64; d_head];
            for ((&pu, &dpu), u) in p.iter().zip(&dp).zip(keys.clone()) {
                let ds = pu * (dpu - mean) * scale;
                let base = u * width + cols.start;
                for c in 0..d_head {
                    dv[base + c] += pu * gh[c] as f64;
                    dk[base + c] += ds * q.get(i, cols.start + c) as f64;
                    dqh[c] += ds * k.get(u, cols.start + c) as f64;
                }
            }
            for (d, a) in dq.row_mut(i)[cols].iter_mut().zip(dqh) {
                *d = a as f32;
            }
        }
    }
    let to_matrix = |d: Vec<f64>| {
        Matrix::from_vec(k.rows(), width, d.into_iter().map(|x| x as f32).collect()).expect("shape fixed above")
    };
    Ok((dq, to_matrix(dk), to_matrix(dv)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_returns_its_value() {
        let q = Matrix::random(2, 4, 1, 1.0);
        let k = Matrix::random(1, 4, 2, 1.0);
        let v = Matrix::random(1, 4, 3, 1.0);
        let o = attention(&q, &k, &v, &[0, 0], 1, 2, true).unwrap();
        for i in 0..2 {
            for (a, b) in o.row(i).iter().zip(v.row(0)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Matrix::random(3, 2, 4, 1.0);
        let k = Matrix::from_rows(&[&[0.3f32, -0.7][..]; 3]).unwrap();
        let v = Matrix::random(3, 2, 5, 1.0);
        let o = attention(&q, &k, &v, &[0, 1, 2], 3, 2, false).unwrap();
        for c in 0..2 {
            let mean = (0..3).map(|u| v.get(u, c)).sum::<f32>() / 3.0;
            for i in 0..3 {
                assert!((o.get(i, c) - mean).abs() < 1e-6);
            }
        }
        let o = attention(&q, &k, &v, &[0, 1, 2], 3, 2, true).unwrap();
        assert!((o.get(1, 0) - (v.get(0, 0) + v.get(1, 0)) / 2.0).abs() < 1e-6);
    }

    fn dense_masked(q: &Matrix, k: &Matrix, v: &Matrix, d_head: usize) -> Matrix {
        let t = q.rows();
        let mut out = Matrix::zeros(t, q.cols());
        for j in 0..q.cols() / d_head {
            let c0 = j * d_head;
            for i in 0..t {
                let mut s = vec![f64::NEG_INFINITY; t];
                for (u, su) in s.iter_mut().enumerate().take(i + 1) {
                    *su = (0..d_head).map(|c| q.get(i, c0 + c) as f64 * k.get(u, c0 + c) as f64).sum::<f64>()
                        / (d_head as f64).sqrt();
                }
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..d_head {
                    let y: f64 = (0..t).map(|u| e[u] / z * v.get(u, c0 + c) as f64).sum();
                    out.set(i, c0 + c, y as f32);
                }
            }
        }
        out
    }

    #[test]
    fn causal_matches_dense_masked_computation() {
        let (q, k, v) = (Matrix::random(6, 6, 6, 1.0), Matrix::random(6, 6, 7, 1.0), Matrix::random(6, 6, 8, 1.0));
        let map: Vec<usize> = (0..6).collect();
        let o = attention(&q, &k, &v, &map, 6, 3, true).unwrap();
        let want = dense_masked(&q, &k, &v, 3);
        for (a, b) in o.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (q, k, v) = (Matrix::random(8, 4, 9, 1.0), Matrix::random(4, 4, 10, 1.0), Matrix::random(4, 4, 11, 1.0));
        let map = [0, 0, 1, 1, 2, 2, 3, 3];
        let g = Matrix::random(8, 4, 12, 1.0);
        let (dq, dk, dv) = attention_backward(&q, &k, &v, &map, 2, 2, true, &g).unwrap();
        let loss = |q: &Matrix, k: &Matrix, v: &Matrix| -> f64 {
            let o = attention(q, k, v, &map, 2, 2, true).unwrap();
            crate::tensor::dot_f64(o.as_slice(), g.as_slice())
        };
        let eps = 1e-2f32;
        for (which, grad) in [(0, &dq), (1, &dk), (2, &dv)] {
            let base = [&q, &k, &v][which];
            for idx in 0..base.as_slice().len() {
                let bump = |d: f32| {
                    let mut m = [q.clone(), k.clone(), v.clone()];
                    m[which].as_mut_slice()[idx] += d;
                    loss(&m[0], &m[1], &m[2])
                };
                let fd = (bump(eps) - bump(-eps)) / (2.0 * eps as f64);
                let a = grad.as_slice()[idx] as f64;
                assert!((a - fd).abs() <= 2e-3 * a.abs().max(fd.abs()) + 1e-3, "{which} {idx}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn rejects_bad_map() {
        let m = Matrix::zeros(2, 2);
        assert!(matches!(attention(&m, &m, &m, &[0, 2], 2, 2, true), Err(crate::Error::InvalidArgument(_))));
        assert!(attention(&m, &m, &m, &[0, 1], 2, 3, true).is_err());
    }
}
