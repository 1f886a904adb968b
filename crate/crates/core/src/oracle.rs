//! Reference implementations.
//!
//! The `*_f64` functions evaluate layers token by token and slot by slot in
//! double precision, with no grouping at all; they are what the fused code
//! is checked against and what finite differences are taken of. The
//! baseline pipelines reproduce the group-copy-and-pad strategy so its
//! results and its ledger can be compared with the fused layers.

use crate::accounting::{AllocationLedger, Phase};
use crate::error::{arg_err, dim_err, Result};
use crate::layers::{smoe_mlp_backward, smoe_mlp_forward, smoe_mlp_inference, Activation, MomhaConfig, MomhaWeights, SmoeMlpConfig};
use crate::metrics;
use crate::parallel_linear::ExecOptions;
use crate::router::{GroupedOrder, RoutingResult};
use crate::tensor::{gram, matmul, matmul_transposed, ExpertTensor, Matrix, WeightMatrix};

/// Dense row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat64 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_slice(rows: usize, cols: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat64::from_slice: wrong length");
        Self {
            rows,
            cols,
            data: data.to_vec(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&v| v as f32).collect())
            .expect("shape is consistent")
    }
}

impl From<&Matrix> for Mat64 {
    fn from(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice().iter().map(|&v| v as f64).collect(),
        }
    }
}

impl From<&WeightMatrix> for Mat64 {
    fn from(w: &WeightMatrix) -> Self {
        Self {
            rows: w.d_in(),
            cols: w.d_out(),
            data: w.as_slice().iter().map(|&v| v as f64).collect(),
        }
    }
}

pub fn experts_f64(w: &ExpertTensor) -> Vec<Mat64> {
    (0..w.experts()).map(|e| Mat64::from(&w.expert_matrix(e))).collect()
}

/// `x · w` for one row.
fn vec_mat(x: &[f64], w: &Mat64) -> Vec<f64> {
    assert_eq!(x.len(), w.rows, "vec_mat: width mismatch");
    let mut out = vec![0.0; w.cols];
    for (m, &a) in x.iter().enumerate() {
        for (o, &b) in out.iter_mut().zip(w.row(m)) {
            *o += a * b;
        }
    }
    out
}

pub fn matmul_f64(a: &Mat64, b: &Mat64) -> Mat64 {
    let mut out = Mat64::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        out.row_mut(i).copy_from_slice(&vec_mat(a.row(i), b));
    }
    out
}

/// Central differences `(f(θ + εe_i) − f(θ − εe_i)) / 2ε` for every
/// coordinate.
pub fn finite_difference_gradient(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], eps: f64) -> Vec<f64> {
    let mut th = theta.to_vec();
    (0..th.len())
        .map(|i| {
            let orig = th[i];
            th[i] = orig + eps;
            let up = f(&th);
            th[i] = orig - eps;
            let down = f(&th);
            th[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Slot-by-slot expert transform: row `s` of the `T*k`-row result is
/// `x[s / fan_out] · W[expert_idx[s]]`. With routing weights `(p, j)`, every
/// `j` consecutive slots are summed with their weights.
pub fn naive_parallel_linear_f64(
    x: &Mat64,
    w: &[Mat64],
    expert_idx: &[usize],
    fan_out: usize,
    routing: Option<(&[f64], usize)>,
) -> Mat64 {
    let d_out = w[0].cols;
    let mut slots = Mat64::zeros(expert_idx.len(), d_out);
    for (s, &e) in expert_idx.iter().enumerate() {
        slots.row_mut(s).copy_from_slice(&vec_mat(x.row(s / fan_out), &w[e]));
    }
    let Some((p, j)) = routing else {
        return slots;
    };
    let mut out = Mat64::zeros(expert_idx.len() / j, d_out);
    for (s, &ps) in p.iter().enumerate() {
        for (o, &v) in out.row_mut(s / j).iter_mut().zip(slots.row(s)) {
            *o += ps * v;
        }
    }
    out
}

/// `Y_t = Σ_i p[t,i] · σ(X_t W1[e]) W2[e]` with `e = expert_idx[t*k + i]`.
pub fn naive_smoe_mlp_f64(
    x: &Mat64,
    w1: &[Mat64],
    w2: &[Mat64],
    expert_idx: &[usize],
    p: &[f64],
    k: usize,
    activation: Activation,
) -> Mat64 {
    let mut y = Mat64::zeros(x.rows, w2[0].cols);
    for t in 0..x.rows {
        for i in 0..k {
            let s = t * k + i;
            let e = expert_idx[s];
            let mut h = vec_mat(x.row(t), &w1[e]);
            h.iter_mut().for_each(|v| *v = activation.apply_f64(*v));
            let o = vec_mat(&h, &w2[e]);
            for (yv, ov) in y.row_mut(t).iter_mut().zip(o) {
                *yv += p[s] * ov;
            }
        }
    }
    y
}

fn check_mlp(x: &Matrix, w1: &ExpertTensor, w2: &ExpertTensor, routing: &RoutingResult) -> Result<()> {
    let ok = x.rows() == routing.tokens()
        && x.cols() == w1.d_in()
        && w1.experts() == routing.experts()
        && w2.experts() == routing.experts()
        && w1.d_out() == w2.d_in()
        && w2.d_out() == x.cols();
    if !ok {
        return Err(dim_err!(
            "naive MLP: input {}x{}, W1 {}x{}x{}, W2 {}x{}x{}, routing over {} tokens and {} experts",
            x.rows(),
            x.cols(),
            w1.experts(),
            w1.d_in(),
            w1.d_out(),
            w2.experts(),
            w2.d_in(),
            w2.d_out(),
            routing.tokens(),
            routing.experts()
        ));
    }
    Ok(())
}

/// Per-token SMoE MLP in double precision, rounded to `f32` at the end.
pub fn naive_smoe_mlp(
    x: &Matrix,
    w1: &ExpertTensor,
    w2: &ExpertTensor,
    routing: &RoutingResult,
    activation: Activation,
) -> Result<Matrix> {
    check_mlp(x, w1, w2, routing)?;
    let p: Vec<f64> = routing.weights().iter().map(|&v| v as f64).collect();
    Ok(naive_smoe_mlp_f64(
        &x.into(),
        &experts_f64(w1),
        &experts_f64(w2),
        routing.expert_idx(),
        &p,
        routing.k(),
        activation,
    )
    .to_matrix())
}

/// Plain two-layer MLP `σ(X W) W'`.
pub fn dense_mlp_reference(x: &Matrix, w: &WeightMatrix, w_out: &WeightMatrix, activation: Activation) -> Result<Matrix> {
    let mut h = matmul(x, w)?;
    activation.apply_in_place(h.as_mut_slice());
    matmul(&h, w_out)
}

/// Gradients `(dX, dW, dW')` of [`dense_mlp_reference`].
pub fn dense_mlp_reference_backward(
    x: &Matrix,
    w: &WeightMatrix,
    w_out: &WeightMatrix,
    activation: Activation,
    grad_output: &Matrix,
) -> Result<(Matrix, WeightMatrix, WeightMatrix)> {
    let z = matmul(x, w)?;
    let mut h = z.clone();
    activation.apply_in_place(h.as_mut_slice());
    let dw_out = gram(&h, grad_output)?;
    let mut dz = matmul_transposed(grad_output, w_out)?;
    for (g, &zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
        *g *= activation.derivative(zv);
    }
    Ok((matmul_transposed(&dz, w)?, gram(x, &dz)?, dw_out))
}

/// Masked softmax attention in double precision; same semantics as
/// [`crate::layers::attention`], written as an explicit dense loop.
pub fn dense_attention_f64(
    q: &Mat64,
    k: &Mat64,
    v: &Mat64,
    slot_token: &[usize],
    seq_len: usize,
    d_head: usize,
    causal: bool,
) -> Mat64 {
    let mut out = Mat64::zeros(q.rows, q.cols);
    let scale = 1.0 / (d_head as f64).sqrt();
    for (i, &t) in slot_token.iter().enumerate() {
        let b = t / seq_len;
        for j in 0..q.cols / d_head {
            let c = j * d_head;
            let mut scores = vec![f64::NEG_INFINITY; k.rows];
            for (u, sc) in scores.iter_mut().enumerate() {
                let masked = u / seq_len != b || (causal && u > t);
                if !masked {
                    *sc = (0..d_head).map(|d| q.get(i, c + d) * k.get(u, c + d)).sum::<f64>() * scale;
                }
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for d in 0..d_head {
                out.data[i * q.cols + c + d] = (0..k.rows).map(|u| e[u] / z * v.get(u, c + d)).sum();
            }
        }
    }
    out
}

/// Standard multi-head attention over `batch` sequences with dense
/// projections; heads are `W_Q.d_out / d_head`.
#[allow(clippy::too_many_arguments)]
pub fn reference_mha(
    x: &Matrix,
    batch: usize,
    w_q: &WeightMatrix,
    w_k: &WeightMatrix,
    w_v: &WeightMatrix,
    w_o: &WeightMatrix,
    d_head: usize,
    causal: bool,
) -> Result<Matrix> {
    if batch == 0 || !x.rows().is_multiple_of(batch) {
        return Err(arg_err!("{} tokens do not split into {batch} sequences", x.rows()));
    }
    let x64 = Mat64::from(x);
    let q = matmul_f64(&x64, &w_q.into());
    let k = matmul_f64(&x64, &w_k.into());
    let v = matmul_f64(&x64, &w_v.into());
    let map: Vec<usize> = (0..x.rows()).collect();
    let o = dense_attention_f64(&q, &k, &v, &map, x.rows() / batch, d_head, causal);
    Ok(matmul_f64(&o, &w_o.into()).to_matrix())
}

/// MoMHA weights in double precision.
#[derive(Clone, Debug)]
pub struct MomhaWeights64 {
    pub w_k: Mat64,
    pub w_v: Mat64,
    pub w_q: Vec<Mat64>,
    pub w_o: Vec<Mat64>,
}

impl From<&MomhaWeights> for MomhaWeights64 {
    fn from(w: &MomhaWeights) -> Self {
        Self {
            w_k: (&w.w_k).into(),
            w_v: (&w.w_v).into(),
            w_q: experts_f64(&w.w_q),
            w_o: experts_f64(&w.w_o),
        }
    }
}

/// Mixture of multi-head attention evaluated one (token, slot) at a time:
/// each selected expert's queries are materialized for that token alone and
/// run through dense masked attention over the shared keys and values.
#[allow(clippy::too_many_arguments)]
pub fn naive_momha_f64(
    x: &Mat64,
    batch: usize,
    w: &MomhaWeights64,
    expert_idx: &[usize],
    p: &[f64],
    k: usize,
    d_head: usize,
    causal: bool,
) -> Mat64 {
    let keys = matmul_f64(x, &w.w_k);
    let values = matmul_f64(x, &w.w_v);
    let seq_len = x.rows / batch;
    let mut y = Mat64::zeros(x.rows, x.cols);
    for t in 0..x.rows {
        for i in 0..k {
            let s = t * k + i;
            let e = expert_idx[s];
            let q = Mat64 {
                rows: 1,
                cols: w.w_q[e].cols,
                data: vec_mat(x.row(t), &w.w_q[e]),
            };
            let o = dense_attention_f64(&q, &keys, &values, &[t], seq_len, d_head, causal);
            for (yv, ov) in y.row_mut(t).iter_mut().zip(vec_mat(&o.data, &w.w_o[e])) {
                *yv += p[s] * ov;
            }
        }
    }
    y
}

pub fn naive_momha(
    x: &Matrix,
    batch: usize,
    weights: &MomhaWeights,
    routing: &RoutingResult,
    cfg: &MomhaConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    if batch == 0 || !x.rows().is_multiple_of(batch) || x.rows() != routing.tokens() || x.cols() != cfg.d_model {
        return Err(dim_err!("naive MoMHA: input {}x{} with batch {batch}", x.rows(), x.cols()));
    }
    let p: Vec<f64> = routing.weights().iter().map(|&v| v as f64).collect();
    Ok(naive_momha_f64(
        &x.into(),
        batch,
        &weights.into(),
        routing.expert_idx(),
        &p,
        routing.k(),
        cfg.d_head,
        cfg.causal,
    )
    .to_matrix())
}

/// Group-copy baseline options.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BaselineConfig {
    /// Every expert bin is padded up to a multiple of this many rows.
    pub block_size: usize,
    /// Materialize the grouped input and grouped output copies. Without
    /// them the padded hidden state is still allocated.
    pub make_grouped_copies: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            block_size: 128,
            make_grouped_copies: true,
        }
    }
}

impl BaselineConfig {
    pub fn with_block_size(block_size: usize) -> Self {
        Self {
            block_size,
            ..Self::default()
        }
    }
}

/// `ceil(count / block) * block`.
pub fn padded_rows(count: usize, block_size: usize) -> usize {
    count.div_ceil(block_size) * block_size
}

/// Bytes of one padded grouped buffer: `Σ_e ceil(count_e/block)·block·width·4`.
pub fn padded_bytes(bin_counts: &[usize], block_size: usize, width: usize) -> usize {
    bin_counts.iter().map(|&c| padded_rows(c, block_size)).sum::<usize>() * width * 4
}

struct PaddedBins {
    starts: Vec<usize>,
    padded: Vec<usize>,
    total: usize,
}

impl PaddedBins {
    fn new(order: &GroupedOrder, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(arg_err!("block_size must be >= 1"));
        }
        let padded: Vec<usize> = order.bin_counts().iter().map(|&c| padded_rows(c, block_size)).collect();
        let mut starts = Vec::with_capacity(padded.len());
        let mut total = 0;
        for &p in &padded {
            starts.push(total);
            total += p;
        }
        Ok(Self { starts, padded, total })
    }
}

/// Copies rows into padded grouped blocks; padding rows stay zero.
fn group_padded(x: &Matrix, order: &GroupedOrder, fan_out: usize, bins: &PaddedBins) -> Matrix {
    let mut out = Matrix::zeros(bins.total, x.cols());
    for e in 0..order.experts() {
        for (r, i) in order.bin(e).enumerate() {
            out.row_mut(bins.starts[e] + r)
                .copy_from_slice(x.row(order.order()[i] / fan_out));
        }
    }
    out
}

/// Dense per-expert transform over whole padded blocks, padding included.
/// Input rows come from a padded grouped copy, or are gathered from a
/// scattered `x` when `gather_fan_out` is given. Output rows go to a padded
/// grouped buffer, or to scattered slot order when `scatter_out` is set.
fn padded_transform(
    x: &Matrix,
    gather_fan_out: Option<usize>,
    w: &ExpertTensor,
    order: &GroupedOrder,
    bins: &PaddedBins,
    scatter_out: bool,
) -> Matrix {
    let rows = if scatter_out { order.len() } else { bins.total };
    let mut out = Matrix::zeros(rows, w.d_out());
    let zero = vec![0.0f32; x.cols()];
    let mut acc = vec![0.0f64; w.d_out()];
    for e in 0..order.experts() {
        let bin = order.bin(e);
        let we = w.expert(e);
        for r in 0..bins.padded[e] {
            let real = (r < bin.len()).then(|| order.order()[bin.start + r]);
            let src: &[f32] = match (gather_fan_out, real) {
                (None, _) => x.row(bins.starts[e] + r),
                (Some(f), Some(slot)) => x.row(slot / f),
                (Some(_), None) => &zero,
            };
            acc.fill(0.0);
            for (m, &a) in src.iter().enumerate() {
                let a = a as f64;
                for (s, &b) in acc.iter_mut().zip(&we[m * w.d_out()..(m + 1) * w.d_out()]) {
                    *s += a * b as f64;
                }
            }
            let dst = match (scatter_out, real) {
                (false, _) => Some(bins.starts[e] + r),
                (true, Some(slot)) => Some(slot),
                (true, None) => None,
            };
            if let Some(d) = dst {
                for (o, &s) in out.row_mut(d).iter_mut().zip(&acc) {
                    *o = s as f32;
                }
            }
        }
    }
    metrics::add_macs((bins.total * w.d_in() * w.d_out()) as u64);
    out
}

/// Padded grouped rows back to scattered slot order.
fn scatter_padded(yg: &Matrix, order: &GroupedOrder, bins: &PaddedBins) -> Matrix {
    let mut out = Matrix::zeros(order.len(), yg.cols());
    for e in 0..order.experts() {
        for (r, i) in order.bin(e).enumerate() {
            out.row_mut(order.order()[i]).copy_from_slice(yg.row(bins.starts[e] + r));
        }
    }
    out
}

/// `Y[t] = Σ_i p[t*k+i] · slots[t*k+i]`.
fn combine_slots(slots: &Matrix, p: &[f32], k: usize) -> Matrix {
    let mut y = Matrix::zeros(slots.rows() / k, slots.cols());
    let mut acc = vec![0.0f64; slots.cols()];
    for t in 0..y.rows() {
        acc.fill(0.0);
        for i in 0..k {
            let w = p[t * k + i] as f64;
            for (a, &v) in acc.iter_mut().zip(slots.row(t * k + i)) {
                *a += w * v as f64;
            }
        }
        for (o, a) in y.row_mut(t).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    y
}

/// Expert transform done the group-copy way: copy (and pad) rows into
/// grouped blocks, run one dense product per block, copy the results back
/// to scattered slot order. Every buffer is recorded in `ledger` as
/// `{label}.{buffer}` and kept live.
fn baseline_transform(
    x: &Matrix,
    fan_out: usize,
    w: &ExpertTensor,
    order: &GroupedOrder,
    bins: &PaddedBins,
    label: &str,
    ledger: &AllocationLedger,
) -> Matrix {
    let xg = group_padded(x, order, fan_out, bins);
    ledger.record(format!("{label}.grouped_input"), xg.rows(), xg.cols(), Phase::Forward);
    let yg = padded_transform(&xg, None, w, order, bins, false);
    ledger.record(format!("{label}.grouped_output"), yg.rows(), yg.cols(), Phase::Forward);
    let ys = scatter_padded(&yg, order, bins);
    ledger.record(format!("{label}.scattered_output"), ys.rows(), ys.cols(), Phase::Forward);
    ys
}

/// SMoE MLP forward the group-copy-and-pad way. All of its buffers stay
/// live, as they would when saved for a backward pass, and are recorded in
/// `ledger` under `baseline.*`.
#[allow(clippy::too_many_arguments)]
pub fn baseline_grouped_pipeline(
    x: &Matrix,
    w1: &ExpertTensor,
    w2: &ExpertTensor,
    routing: &RoutingResult,
    order: &GroupedOrder,
    activation: Activation,
    cfg: BaselineConfig,
    ledger: &AllocationLedger,
) -> Result<Matrix> {
    check_mlp(x, w1, w2, routing)?;
    let bins = PaddedBins::new(order, cfg.block_size)?;
    let k = routing.k();
    let mut hidden = if cfg.make_grouped_copies {
        let xg = group_padded(x, order, k, &bins);
        ledger.record("baseline.grouped_input", xg.rows(), xg.cols(), Phase::Forward);
        padded_transform(&xg, None, w1, order, &bins, false)
    } else {
        padded_transform(x, Some(k), w1, order, &bins, false)
    };
    ledger.record("baseline.hidden", hidden.rows(), hidden.cols(), Phase::Forward);
    activation.apply_in_place(hidden.as_mut_slice());
    let scattered = if cfg.make_grouped_copies {
        let yg = padded_transform(&hidden, None, w2, order, &bins, false);
        ledger.record("baseline.grouped_output", yg.rows(), yg.cols(), Phase::Forward);
        scatter_padded(&yg, order, &bins)
    } else {
        padded_transform(&hidden, None, w2, order, &bins, true)
    };
    ledger.record("baseline.scattered_output", scattered.rows(), scattered.cols(), Phase::Forward);
    let y = combine_slots(&scattered, routing.weights(), k);
    ledger.record("baseline.output", y.rows(), y.cols(), Phase::Forward);
    Ok(y)
}

/// MoMHA forward with grouped, padded copies around both expert
/// projections; keys, values and attention are as in the fused layer.
#[allow(clippy::too_many_arguments)]
pub fn baseline_momha(
    x: &Matrix,
    batch: usize,
    weights: &MomhaWeights,
    routing: &RoutingResult,
    order: &GroupedOrder,
    cfg: &MomhaConfig,
    block_size: usize,
    ledger: &AllocationLedger,
) -> Result<Matrix> {
    cfg.validate()?;
    if batch == 0 || !x.rows().is_multiple_of(batch) || x.rows() != routing.tokens() {
        return Err(arg_err!("{} tokens do not split into {batch} sequences", x.rows()));
    }
    let bins = PaddedBins::new(order, block_size)?;
    let keys = matmul(x, &weights.w_k)?;
    let values = matmul(x, &weights.w_v)?;
    ledger.record("baseline.keys", keys.rows(), keys.cols(), Phase::Forward);
    ledger.record("baseline.values", values.rows(), values.cols(), Phase::Forward);
    let q = baseline_transform(x, cfg.k, &weights.w_q, order, &bins, "baseline.q", ledger);
    let map: Vec<usize> = (0..order.len()).map(|s| s / cfg.k).collect();
    let attended = crate::layers::attention(&q, &keys, &values, &map, x.rows() / batch, cfg.d_head, cfg.causal)?;
    ledger.record("baseline.attention", attended.rows(), attended.cols(), Phase::Forward);
    let o = baseline_transform(&attended, 1, &weights.w_o, order, &bins, "baseline.o", ledger);
    let y = combine_slots(&o, routing.weights(), cfg.k);
    ledger.record("baseline.output", y.rows(), y.cols(), Phase::Forward);
    Ok(y)
}

/// Ledger of the fused SMoE MLP on the given problem. Without `training`
/// this is the inference forward, in which the routing-weighted sum is
/// fused and only the grouped hidden state and the output are allocated.
/// With `training` it is the saving forward followed by a backward with a
/// unit output gradient.
#[allow(clippy::too_many_arguments)]
pub fn fused_pipeline_ledger(
    x: &Matrix,
    w1: &ExpertTensor,
    w2: &ExpertTensor,
    routing: &RoutingResult,
    order: &GroupedOrder,
    cfg: &SmoeMlpConfig,
    tile: crate::TileConfig,
    training: bool,
) -> Result<AllocationLedger> {
    let ledger = AllocationLedger::new();
    let exec = ExecOptions::default().with_tile(tile).with_ledger(ledger.clone());
    if training {
        let (y, mut ctx) = smoe_mlp_forward(x.clone(), w1, w2, routing, order, cfg, &exec)?;
        let mut dy = y;
        dy.fill(1.0);
        smoe_mlp_backward(&mut ctx, &dy, w1, w2)?;
    } else {
        smoe_mlp_inference(x, w1, w2, routing, order, cfg, &exec)?;
    }
    Ok(ledger)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::compute_grouped_order;

    #[test]
    fn finite_differences_of_polynomials() {
        let q = |t: &[f64]| 3.0 * t[0] * t[0] + t[0] * t[1] - 2.0 * t[1];
        let g = finite_difference_gradient(q, &[1.5, -2.0], 1e-3);
        assert!((g[0] - 7.0).abs() < 1e-9 && (g[1] + 0.5).abs() < 1e-9);
        let lin = |t: &[f64]| 4.0 * t[0] - t[1];
        for eps in [1e-1, 1e-3] {
            let g = finite_difference_gradient(lin, &[0.3, 0.1], eps);
            assert!((g[0] - 4.0).abs() < 1e-9 && (g[1] + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn naive_mlp_single_expert_is_plain_mlp() {
        let x = Matrix::random(3, 4, 1, 1.0);
        let w1 = ExpertTensor::random(1, 4, 5, 2, 0.5);
        let w2 = ExpertTensor::random(1, 5, 4, 3, 0.5);
        let r = RoutingResult::from_assignments(3, 1, 1, vec![0; 3], vec![1.0; 3]).unwrap();
        let y = naive_smoe_mlp(&x, &w1, &w2, &r, Activation::Gelu).unwrap();
        let want = dense_mlp_reference(&x, &w1.expert_matrix(0), &w2.expert_matrix(0), Activation::Gelu).unwrap();
        for (a, b) in y.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
        let r0 = r.with_weights(vec![0.0; 3]).unwrap();
        let y = naive_smoe_mlp(&x, &w1, &w2, &r0, Activation::Gelu).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let x = Matrix::random(3, 2, 4, 1.0);
        let w = WeightMatrix::random(2, 3, 5, 1.0);
        let w2 = WeightMatrix::random(3, 2, 6, 1.0);
        let c = Matrix::random(3, 2, 7, 1.0);
        let (dx, dw, dw2) = dense_mlp_reference_backward(&x, &w, &w2, Activation::Gelu, &c).unwrap();
        let loss = |th: &[f64]| {
            let x = Mat64::from_slice(3, 2, &th[..6]);
            let w = Mat64::from_slice(2, 3, &th[6..12]);
            let w2 = Mat64::from_slice(3, 2, &th[12..]);
            let mut h = matmul_f64(&x, &w);
            h.data.iter_mut().for_each(|v| *v = Activation::Gelu.apply_f64(*v));
            let y = matmul_f64(&h, &w2);
            y.data.iter().zip(c.as_slice()).map(|(a, &b)| a * b as f64).sum::<f64>()
        };
        let theta: Vec<f64> = [x.as_slice(), w.as_slice(), w2.as_slice()]
            .concat()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let fd = finite_difference_gradient(loss, &theta, 1e-3);
        let analytic: Vec<f32> = [dx.as_slice(), dw.as_slice(), dw2.as_slice()].concat();
        for (a, n) in analytic.iter().zip(&fd) {
            let a = *a as f64;
            assert!((a - n).abs() <= 1e-3 * a.abs().max(n.abs()) + 1e-5, "{a} vs {n}");
        }
    }

    #[test]
    fn balanced_unit_blocks_copy_exactly_the_slots() {
        let (t, k, e, dm) = (8, 2, 4, 3);
        let ids: Vec<usize> = (0..t).flat_map(|i| [i % e, (i + 1) % e]).collect();
        let r = RoutingResult::from_assignments(t, k, e, ids, vec![0.5; t * k]).unwrap();
        let o = compute_grouped_order(&r, e).unwrap();
        let w1 = ExpertTensor::random(e, dm, 5, 1, 0.5);
        let w2 = ExpertTensor::random(e, 5, dm, 2, 0.5);
        let ledger = AllocationLedger::new();
        let x = Matrix::random(t, dm, 3, 1.0);
        baseline_grouped_pipeline(&x, &w1, &w2, &r, &o, Activation::Gelu, BaselineConfig::with_block_size(1), &ledger)
            .unwrap();
        let copy = ledger.entries().into_iter().find(|e| e.buffer == "baseline.grouped_input").unwrap();
        assert_eq!(copy.bytes, t * k * dm * 4);
    }

    #[test]
    fn lone_token_bin_is_padded_to_a_full_block() {
        let r = RoutingResult::from_assignments(1, 1, 2, vec![1], vec![1.0]).unwrap();
        let o = compute_grouped_order(&r, 2).unwrap();
        let bins = PaddedBins::new(&o, 128).unwrap();
        assert_eq!((bins.padded[0], bins.padded[1]), (0, 128));
        assert_eq!(padded_bytes(o.bin_counts(), 128, 128), 128 * 128 * 4);
    }
}
