//! Mixture of multi-head attention: keys and values come from dense
//! transforms shared by all experts, while queries and the output
//! projection are expert transforms in scattered-to-scattered layout, so
//! query rows stay in chronological token order.
//!
//! Positional embeddings, if wanted, would be applied to the scattered `Q`
//! and to `K` between the projections and [`attention`].

use std::sync::Arc;

use super::attention::{attention, attention_backward};
use crate::accounting::Phase;
use crate::error::{arg_err, dim_err, Result};
use crate::kernels::LayoutFlag;
use crate::parallel_linear::{self, ExecOptions, LinearContext, LinearSpec};
use crate::router::{GroupedOrder, RoutingResult};
use crate::tensor::{add_assign, gram, matmul, matmul_transposed, ExpertTensor, Matrix, WeightMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MomhaConfig {
    pub d_model: usize,
    pub d_head: usize,
    /// Active query heads per token, `k * h_expert`.
    pub h: usize,
    pub h_expert: usize,
    pub experts: usize,
    pub k: usize,
    pub causal: bool,
}

impl MomhaConfig {
    pub fn new(d_model: usize, d_head: usize, h_expert: usize, experts: usize, k: usize, causal: bool) -> Result<Self> {
        let cfg = Self {
            d_model,
            d_head,
            h: k * h_expert,
            h_expert,
            experts,
            k,
            causal,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Configuration with `h` active heads split over `k` experts per token:
    /// `h_expert = h / k`, `E = expert_factor * k`.
    pub fn from_active_heads(d_model: usize, d_head: usize, h: usize, k: usize, expert_factor: usize, causal: bool) -> Result<Self> {
        if k == 0 || !h.is_multiple_of(k) {
            return Err(arg_err!("h = {h} is not divisible by k = {k}"));
        }
        Self::new(d_model, d_head, h / k, expert_factor * k, k, causal)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.d_model, self.d_head, self.h_expert, self.experts, self.k].contains(&0) {
            return Err(arg_err!("all attention dimensions must be >= 1: {self:?}"));
        }
        if self.k > self.experts {
            return Err(arg_err!("k = {} exceeds E = {}", self.k, self.experts));
        }
        if self.h != self.k * self.h_expert {
            return Err(arg_err!("h = {} but k * h_expert = {}", self.h, self.k * self.h_expert));
        }
        Ok(())
    }

    /// Width of one expert's queries, and of the shared keys and values.
    pub fn d_out(&self) -> usize {
        self.h_expert * self.d_head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomhaWeights {
    pub w_k: WeightMatrix,
    pub w_v: WeightMatrix,
    /// `E x d_model x d_out`.
    pub w_q: ExpertTensor,
    /// `E x d_out x d_model`.
    pub w_o: ExpertTensor,
}

impl MomhaWeights {
    pub fn random(cfg: &MomhaConfig, seed: u64) -> Self {
        let (dm, d_out, e) = (cfg.d_model, cfg.d_out(), cfg.experts);
        let s_in = (1.0 / dm as f32).sqrt();
        let s_out = (1.0 / d_out as f32).sqrt();
        Self {
            w_k: WeightMatrix::random(dm, d_out, seed, s_in),
            w_v: WeightMatrix::random(dm, d_out, seed.wrapping_add(1), s_in),
            w_q: ExpertTensor::random(e, dm, d_out, seed.wrapping_add(2), s_in),
            w_o: ExpertTensor::random(e, d_out, dm, seed.wrapping_add(3), s_out),
        }
    }

    fn check(&self, cfg: &MomhaConfig) -> Result<()> {
        let (dm, d_out, e) = (cfg.d_model, cfg.d_out(), cfg.experts);
        for (name, shape) in [("W_K", (self.w_k.d_in(), self.w_k.d_out())), ("W_V", (self.w_v.d_in(), self.w_v.d_out()))] {
            if shape != (dm, d_out) {
                return Err(dim_err!("{name} is {}x{}, expected {dm}x{d_out}", shape.0, shape.1));
            }
        }
        let q = (self.w_q.experts(), self.w_q.d_in(), self.w_q.d_out());
        if q != (e, dm, d_out) {
            return Err(dim_err!("W_Q is {}x{}x{}, expected {e}x{dm}x{d_out}", q.0, q.1, q.2));
        }
        let o = (self.w_o.experts(), self.w_o.d_in(), self.w_o.d_out());
        if o != (e, d_out, dm) {
            return Err(dim_err!("W_O is {}x{}x{}, expected {e}x{d_out}x{dm}", o.0, o.1, o.2));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct MomhaContext {
    queries: Matrix,
    keys: Matrix,
    values: Matrix,
    q_ctx: LinearContext,
    o_ctx: LinearContext,
    slot_token: Vec<usize>,
    seq_len: usize,
    cfg: MomhaConfig,
}

#[derive(Clone, Debug)]
pub struct MomhaGradients {
    pub grad_input: Matrix,
    pub grad_w_k: WeightMatrix,
    pub grad_w_v: WeightMatrix,
    pub grad_w_q: ExpertTensor,
    pub grad_w_o: ExpertTensor,
    /// `T x k`, aligned with the routing weights.
    pub grad_routing: Matrix,
}

fn prepare(x: &Matrix, batch: usize, weights: &MomhaWeights, routing: &RoutingResult, cfg: &MomhaConfig) -> Result<usize> {
    cfg.validate()?;
    weights.check(cfg)?;
    if x.cols() != cfg.d_model || x.rows() != routing.tokens() {
        return Err(dim_err!(
            "input is {}x{}, expected {}x{}",
            x.rows(),
            x.cols(),
            routing.tokens(),
            cfg.d_model
        ));
    }
    if routing.k() != cfg.k || routing.experts() != cfg.experts {
        return Err(dim_err!(
            "routing has k = {} over {} experts, config has k = {} over {}",
            routing.k(),
            routing.experts(),
            cfg.k,
            cfg.experts
        ));
    }
    if batch == 0 || !x.rows().is_multiple_of(batch) {
        return Err(arg_err!("{} tokens do not split into {batch} sequences", x.rows()));
    }
    Ok(x.rows() / batch)
}

fn slot_tokens(tokens: usize, k: usize) -> Vec<usize> {
    (0..tokens * k).map(|s| s / k).collect()
}

fn q_spec(k: usize) -> LinearSpec {
    LinearSpec::new(k, LayoutFlag::SCATTER_TO_SCATTER).labeled("momha.q")
}

fn o_spec() -> LinearSpec {
    LinearSpec::new(1, LayoutFlag::SCATTER_TO_SCATTER).labeled("momha.o")
}

/// Training forward pass over `batch` equal-length sequences laid out
/// batch-major in `x` (`B*T x d_model`).
pub fn momha_forward(
    x: impl Into<Arc<Matrix>>,
    batch: usize,
    weights: &MomhaWeights,
    routing: &RoutingResult,
    order: &GroupedOrder,
    cfg: &MomhaConfig,
    exec: &ExecOptions,
) -> Result<(Matrix, MomhaContext)> {
    let x = x.into();
    let seq_len = prepare(&x, batch, weights, routing, cfg)?;
    let keys = matmul(&x, &weights.w_k)?;
    let values = matmul(&x, &weights.w_v)?;
    exec.log("momha", "keys", keys.rows(), keys.cols(), Phase::Forward);
    exec.log("momha", "values", values.rows(), values.cols(), Phase::Forward);
    let (queries, q_ctx) = parallel_linear::forward(x.clone(), &weights.w_q, order, None, q_spec(cfg.k), exec)?;
    let slot_token = slot_tokens(x.rows(), cfg.k);
    let attended = attention(&queries, &keys, &values, &slot_token, seq_len, cfg.d_head, cfg.causal)?;
    exec.log("momha", "attention", attended.rows(), attended.cols(), Phase::Forward);
    let p = routing.weight_matrix();
    let (y, o_ctx) = parallel_linear::forward(attended, &weights.w_o, order, Some(&p), o_spec(), exec)?;
    Ok((
        y,
        MomhaContext {
            queries,
            keys,
            values,
            q_ctx,
            o_ctx,
            slot_token,
            seq_len,
            cfg: *cfg,
        },
    ))
}

/// Forward pass without saved state; the routing-weighted sum is fused
/// into the output projection.
pub fn momha_inference(
    x: &Matrix,
    batch: usize,
    weights: &MomhaWeights,
    routing: &RoutingResult,
    order: &GroupedOrder,
    cfg: &MomhaConfig,
    exec: &ExecOptions,
) -> Result<Matrix> {
    let seq_len = prepare(x, batch, weights, routing, cfg)?;
    let keys = matmul(x, &weights.w_k)?;
    let values = matmul(x, &weights.w_v)?;
    let queries = parallel_linear::forward_inference(x, &weights.w_q, order, None, q_spec(cfg.k), exec)?;
    let attended = attention(
        &queries,
        &keys,
        &values,
        &slot_tokens(x.rows(), cfg.k),
        seq_len,
        cfg.d_head,
        cfg.causal,
    )?;
    let p = routing.weight_matrix();
    parallel_linear::forward_inference(&attended, &weights.w_o, order, Some(&p), o_spec(), exec)
}

/// Backward pass. The input gradient sums the query, key and value paths.
pub fn momha_backward(ctx: &mut MomhaContext, grad_output: &Matrix, weights: &MomhaWeights) -> Result<MomhaGradients> {
    weights.check(&ctx.cfg)?;
    let o = parallel_linear::backward(&mut ctx.o_ctx, grad_output, &weights.w_o)?;
    let (dq, dk, dv) = attention_backward(
        &ctx.queries,
        &ctx.keys,
        &ctx.values,
        &ctx.slot_token,
        ctx.seq_len,
        ctx.cfg.d_head,
        ctx.cfg.causal,
        &o.grad_input,
    )?;
    let q = parallel_linear::backward(&mut ctx.q_ctx, &dq, &weights.w_q)?;
    let x = ctx.q_ctx.input().clone();
    let mut grad_input = q.grad_input;
    add_assign(&mut grad_input, &matmul_transposed(&dk, &weights.w_k)?)?;
    add_assign(&mut grad_input, &matmul_transposed(&dv, &weights.w_v)?)?;
    Ok(MomhaGradients {
        grad_input,
        grad_w_k: gram(&x, &dk)?,
        grad_w_v: gram(&x, &dv)?,
        grad_w_q: q.grad_weight,
        grad_w_o: o.grad_weight,
        grad_routing: o
            .grad_routing
            .expect("the output projection always carries routing weights"),
    })
}
