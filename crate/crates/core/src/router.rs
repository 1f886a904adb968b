//! Token routing: softmax gate, top-k expert selection and the padding-free
//! grouped order that every kernel iterates.
//!
//! A token `t` routed to `k` experts owns the `k` *scattered slots*
//! `t*k .. t*k + k`. The grouped order lists those slots sorted stably by
//! expert id, so slot `s` maps back to token `s / k` and selection `s % k`.

use std::sync::Arc;

use crate::error::{arg_err, dim_err, Result};
use crate::tensor::{matmul, Matrix, WeightMatrix};

/// Per-token top-k expert choice.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingResult {
    tokens: usize,
    k: usize,
    experts: usize,
    expert_idx: Vec<usize>,
    weights: Vec<f32>,
    gate_full: Option<Matrix>,
    renormalized: bool,
}

impl RoutingResult {
    /// Builds a routing from explicit assignments; `expert_idx` and `weights`
    /// are `tokens x k` row-major. Useful for adversarial or hand-made
    /// routings that do not come from a gate.
    pub fn from_assignments(
        tokens: usize,
        k: usize,
        experts: usize,
        expert_idx: Vec<usize>,
        weights: Vec<f32>,
    ) -> Result<Self> {
        if k == 0 || k > experts {
            return Err(arg_err!("k = {k} must lie in 1..={experts}"));
        }
        if expert_idx.len() != tokens * k || weights.len() != tokens * k {
            return Err(dim_err!(
                "routing for {tokens} tokens with k = {k} needs {} entries, got {} ids and {} weights",
                tokens * k,
                expert_idx.len(),
                weights.len()
            ));
        }
        for (t, row) in expert_idx.chunks(k).enumerate() {
            for (i, &e) in row.iter().enumerate() {
                if e >= experts {
                    return Err(arg_err!("token {t} routed to expert {e} of {experts}"));
                }
                if row[..i].contains(&e) {
                    return Err(arg_err!("token {t} selects expert {e} twice"));
                }
            }
        }
        Ok(Self {
            tokens,
            k,
            experts,
            expert_idx,
            weights,
            gate_full: None,
            renormalized: false,
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn experts(&self) -> usize {
        self.experts
    }

    /// `tokens x k` expert ids.
    pub fn expert_idx(&self) -> &[usize] {
        &self.expert_idx
    }

    /// `tokens x k` gate weights `p`.
    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    /// The gate weights as a `tokens x k` matrix.
    pub fn weight_matrix(&self) -> Matrix {
        Matrix::from_vec(self.tokens, self.k, self.weights.clone())
            .expect("routing weights always hold tokens * k entries")
    }

    /// Full post-softmax gate, present when the routing came from
    /// [`topk_select`].
    pub fn gate_full(&self) -> Option<&Matrix> {
        self.gate_full.as_ref()
    }

    pub fn renormalized(&self) -> bool {
        self.renormalized
    }

    pub fn expert_of_slot(&self, slot: usize) -> usize {
        self.expert_idx[slot]
    }

    /// Replaces the gate weights, keeping the expert choice.
    pub fn with_weights(mut self, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != self.tokens * self.k {
            return Err(dim_err!(
                "expected {} routing weights, got {}",
                self.tokens * self.k,
                weights.len()
            ));
        }
        self.weights = weights;
        Ok(self)
    }
}

/// Grouped layout of the `T*k` scattered slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupedOrder {
    order: Arc<[usize]>,
    bin_counts: Arc<[usize]>,
    bin_offsets: Arc<[usize]>,
    k: usize,
}

impl GroupedOrder {
    /// `o`: grouped position -> scattered slot.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn bin_counts(&self) -> &[usize] {
        &self.bin_counts
    }

    /// `E + 1` prefix sums of the bin counts.
    pub fn bin_offsets(&self) -> &[usize] {
        &self.bin_offsets
    }

    pub fn bin(&self, expert: usize) -> std::ops::Range<usize> {
        self.bin_offsets[expert]..self.bin_offsets[expert + 1]
    }

    /// Slots per token.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn experts(&self) -> usize {
        self.bin_counts.len()
    }

    /// Total slot count `T*k`.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn tokens(&self) -> usize {
        self.order.len() / self.k
    }

    /// Scattered slot -> grouped position.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (i, &s) in self.order.iter().enumerate() {
            inv[s] = i;
        }
        inv
    }
}

/// Row-wise softmax of `x · w_gate`.
pub fn gate_forward(x: &Matrix, w_gate: &WeightMatrix) -> Result<Matrix> {
    let mut logits = matmul(x, w_gate)?;
    for t in 0..logits.rows() {
        softmax_in_place(logits.row_mut(t));
    }
    Ok(logits)
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = row.iter().map(|&z| ((z - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for (v, e) in row.iter_mut().zip(exps) {
        *v = (e / sum) as f32;
    }
}

/// Picks the `k` largest gate entries per row, ties going to the lower
/// expert id. With `renormalize` the selected weights are divided by their
/// sum.
pub fn topk_select(gate: &Matrix, k: usize, renormalize: bool) -> Result<RoutingResult> {
    let experts = gate.cols();
    if k == 0 || k > experts {
        return Err(arg_err!("k = {k} must lie in 1..={experts}"));
    }
    let tokens = gate.rows();
    let mut expert_idx = Vec::with_capacity(tokens * k);
    let mut weights = Vec::with_capacity(tokens * k);
    let mut ranked: Vec<usize> = Vec::with_capacity(experts);
    for t in 0..tokens {
        let row = gate.row(t);
        ranked.clear();
        ranked.extend(0..experts);
        // stable sort keeps lower ids first among equal gate values
        ranked.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        let chosen = &ranked[..k];
        let sum: f64 = chosen.iter().map(|&e| row[e] as f64).sum();
        for &e in chosen {
            expert_idx.push(e);
            let g = row[e] as f64;
            weights.push(if renormalize && sum > 0.0 { g / sum } else { g } as f32);
        }
    }
    Ok(RoutingResult {
        tokens,
        k,
        experts,
        expert_idx,
        weights,
        gate_full: Some(gate.clone()),
        renormalized: renormalize,
    })
}

/// Stable counting sort of the scattered slots by expert id.
pub fn compute_grouped_order(routing: &RoutingResult, experts: usize) -> Result<GroupedOrder> {
    if experts == 0 {
        return Err(arg_err!("at least one expert is required"));
    }
    let mut counts = vec![0usize; experts];
    for (s, &e) in routing.expert_idx.iter().enumerate() {
        if e >= experts {
            return Err(arg_err!("slot {s} routed to expert {e} of {experts}"));
        }
        counts[e] += 1;
    }
    let mut offsets = Vec::with_capacity(experts + 1);
    offsets.push(0);
    for &c in &counts {
        offsets.push(offsets.last().unwrap() + c);
    }
    let mut cursor = offsets[..experts].to_vec();
    let mut order = vec![0usize; routing.expert_idx.len()];
    for (s, &e) in routing.expert_idx.iter().enumerate() {
        order[cursor[e]] = s;
        cursor[e] += 1;
    }
    Ok(GroupedOrder {
        order: order.into(),
        bin_counts: counts.into(),
        bin_offsets: offsets.into(),
        k: routing.k,
    })
}

/// Gradient of a loss with respect to the gate logits, given its gradient
/// with respect to the selected weights `p` (`tokens x k`).
///
/// Unselected experts receive zero before the softmax Jacobian; when the
/// routing was renormalized the Jacobian of `p_i = g_i / Σ g` is applied
/// first.
pub fn gate_backward(gate_full: &Matrix, routing: &RoutingResult, grad_p: &Matrix) -> Result<Matrix> {
    let (tokens, k, experts) = (routing.tokens, routing.k, routing.experts);
    if gate_full.shape() != (tokens, experts) {
        return Err(dim_err!(
            "gate is {}x{} but routing covers {tokens} tokens and {experts} experts",
            gate_full.rows(),
            gate_full.cols()
        ));
    }
    if grad_p.shape() != (tokens, k) {
        return Err(dim_err!(
            "grad_p is {}x{}, expected {tokens}x{k}",
            grad_p.rows(),
            grad_p.cols()
        ));
    }
    let mut out = Matrix::zeros(tokens, experts);
    let mut grad_gate = vec![0.0f64; experts];
    for t in 0..tokens {
        let g = gate_full.row(t);
        let ids = &routing.expert_idx[t * k..(t + 1) * k];
        let dp = grad_p.row(t);
        grad_gate.fill(0.0);
        if routing.renormalized {
            let sum: f64 = ids.iter().map(|&e| g[e] as f64).sum();
            if sum > 0.0 {
                // p_i = g_i / sum  =>  dg_i = (dp_i - Σ_j dp_j p_j) / sum
                let weighted: f64 = ids
                    .iter()
                    .zip(dp)
                    .map(|(&e, &d)| d as f64 * g[e] as f64 / sum)
                    .sum();
                for (&e, &d) in ids.iter().zip(dp) {
                    grad_gate[e] = (d as f64 - weighted) / sum;
                }
            }
        } else {
            for (&e, &d) in ids.iter().zip(dp) {
                grad_gate[e] = d as f64;
            }
        }
        let inner: f64 = g.iter().zip(&grad_gate).map(|(&gi, &d)| gi as f64 * d).sum();
        for (o, (&gi, &d)) in out.row_mut(t).iter_mut().zip(g.iter().zip(&grad_gate)) {
            *o = (gi as f64 * (d - inner)) as f32;
        }
    }
    Ok(out)
}
