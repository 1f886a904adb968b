//! SMoE MLP: a scattered-to-grouped transform, the non-linearity on the
//! grouped hidden state, then a grouped-to-scattered transform that applies
//! the routing weights. The hidden state only ever exists in grouped layout.

use std::sync::Arc;

use super::Activation;
use crate::accounting::Phase;
use crate::error::{arg_err, dim_err, Result};
use crate::kernels::LayoutFlag;
use crate::parallel_linear::{self, ExecOptions, LinearContext, LinearSpec};
use crate::router::{GroupedOrder, RoutingResult};
use crate::tensor::{ExpertTensor, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SmoeMlpConfig {
    pub d_model: usize,
    pub d_expert: usize,
    pub experts: usize,
    pub k: usize,
    pub activation: Activation,
}

impl SmoeMlpConfig {
    /// Fixed-active-parameter family used for granularity sweeps:
    /// `d_expert = d_ff / k` and `E = expert_factor * k`.
    pub fn from_active(d_model: usize, d_ff: usize, k: usize, expert_factor: usize) -> Result<Self> {
        if k == 0 || !d_ff.is_multiple_of(k) {
            return Err(arg_err!("d_ff = {d_ff} is not divisible by k = {k}"));
        }
        let cfg = Self {
            d_model,
            d_expert: d_ff / k,
            experts: expert_factor * k,
            k,
            activation: Activation::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_expert == 0 || self.experts == 0 || self.k == 0 {
            return Err(arg_err!("all MLP dimensions must be >= 1: {self:?}"));
        }
        if self.k > self.experts {
            return Err(arg_err!("k = {} exceeds E = {}", self.k, self.experts));
        }
        Ok(())
    }

    /// Active hidden width `k * d_expert`.
    pub fn d_ff(&self) -> usize {
        self.k * self.d_expert
    }

    /// Random `(W1, W2)` scaled so activations stay O(1).
    pub fn random_weights(&self, seed: u64) -> (ExpertTensor, ExpertTensor) {
        let w1 = ExpertTensor::random(
            self.experts,
            self.d_model,
            self.d_expert,
            seed,
            (1.0 / self.d_model as f32).sqrt(),
        );
        let w2 = ExpertTensor::random(
            self.experts,
            self.d_expert,
            self.d_model,
            seed.wrapping_add(1),
            (1.0 / self.d_expert as f32).sqrt(),
        );
        (w1, w2)
    }

    pub(crate) fn check(&self, x: &Matrix, w1: &ExpertTensor, w2: &ExpertTensor, routing: &RoutingResult) -> Result<()> {
        self.validate()?;
        let (e, dm, de) = (self.experts, self.d_model, self.d_expert);
        if (w1.experts(), w1.d_in(), w1.d_out()) != (e, dm, de) {
            return Err(dim_err!(
                "W1 is {}x{}x{}, expected {e}x{dm}x{de}",
                w1.experts(),
                w1.d_in(),
                w1.d_out()
            ));
        }
        if (w2.experts(), w2.d_in(), w2.d_out()) != (e, de, dm) {
            return Err(dim_err!(
                "W2 is {}x{}x{}, expected {e}x{de}x{dm}",
                w2.experts(),
                w2.d_in(),
                w2.d_out()
            ));
        }
        if x.cols() != dm || x.rows() != routing.tokens() {
            return Err(dim_err!(
                "input is {}x{}, expected {}x{dm}",
                x.rows(),
                x.cols(),
                routing.tokens()
            ));
        }
        if routing.k() != self.k || routing.experts() != e {
            return Err(dim_err!(
                "routing has k = {} over {} experts, config has k = {} over {e}",
                routing.k(),
                routing.experts(),
                self.k
            ));
        }
        Ok(())
    }
}

/// Saved state of one SMoE MLP forward pass.
#[derive(Debug)]
pub struct SmoeMlpContext {
    first: LinearContext,
    second: LinearContext,
    /// Grouped hidden state before the non-linearity.
    preactivation: Matrix,
    activation: Activation,
}

#[derive(Clone, Debug)]
pub struct SmoeMlpGradients {
    pub grad_input: Matrix,
    pub grad_w1: ExpertTensor,
    pub grad_w2: ExpertTensor,
    /// `T x k`, aligned with the routing weights.
    pub grad_routing: Matrix,
}

fn first_spec(k: usize) -> LinearSpec {
    LinearSpec::new(k, LayoutFlag::SCATTER_TO_GROUP).labeled("mlp.w1")
}

fn second_spec() -> LinearSpec {
    LinearSpec::new(1, LayoutFlag::GROUP_TO_SCATTER).labeled("mlp.w2")
}

/// Training forward pass; returns `Y` (`T x d_model`) and the context for
/// [`smoe_mlp_backward`].
pub fn smoe_mlp_forward(
    x: impl Into<Arc<Matrix>>,
    w1: &ExpertTensor,
    w2: &ExpertTensor,
    routing: &RoutingResult,
    order: &GroupedOrder,
    config: &SmoeMlpConfig,
    exec: &ExecOptions,
) -> Result<(Matrix, SmoeMlpContext)> {
    let x = x.into();
    config.check(&x, w1, w2, routing)?;
    let p = routing.weight_matrix();
    let (preactivation, first) = parallel_linear::forward(x, w1, order, None, first_spec(config.k), exec)?;
    let mut hidden = preactivation.clone();
    exec.log("mlp", "hidden", hidden.rows(), hidden.cols(), Phase::Forward);
    config.activation.apply_in_place(hidden.as_mut_slice());
    let (y, second) = parallel_linear::forward(hidden, w2, order, Some(&p), second_spec(), exec)?;
    Ok((
        y,
        SmoeMlpContext {
            first,
            second,
            preactivation,
            activation: config.activation,
        },
    ))
}

/// Forward pass without saved state. The non-linearity runs in place on the
/// single grouped hidden buffer and the routing-weighted sum is fused into
/// the second transform.
pub fn smoe_mlp_inference(
    x: &Matrix,
    w1: &ExpertTensor,
    w2: &ExpertTensor,
    routing: &RoutingResult,
    order: &GroupedOrder,
    config: &SmoeMlpConfig,
    exec: &ExecOptions,
) -> Result<Matrix> {
    config.check(x, w1, w2, routing)?;
    let p = routing.weight_matrix();
    let mut hidden = parallel_linear::forward_inference(x, w1, order, None, first_spec(config.k), exec)?;
    config.activation.apply_in_place(hidden.as_mut_slice());
    parallel_linear::forward_inference(&hidden, w2, order, Some(&p), second_spec(), exec)
}

/// Backward pass through both transforms. The second transform's leftover
/// `T*k x d_model` buffer is handed to the first transform as its grouped
/// input scratch.
pub fn smoe_mlp_backward(
    ctx: &mut SmoeMlpContext,
    grad_output: &Matrix,
    w1: &ExpertTensor,
    w2: &ExpertTensor,
) -> Result<SmoeMlpGradients> {
    let second = parallel_linear::backward(&mut ctx.second, grad_output, w2)?;
    let mut grad_hidden = second.grad_input;
    for (g, &z) in grad_hidden
        .as_mut_slice()
        .iter_mut()
        .zip(ctx.preactivation.as_slice())
    {
        *g *= ctx.activation.derivative(z);
    }
    let slots = ctx.first.order().len();
    let d_model = ctx.first.input().cols();
    let recycled = ctx
        .second
        .take_spare_buffers()
        .into_iter()
        .find(|m| m.shape() == (slots, d_model));
    if !ctx.first.is_consumed() {
        ctx.first.seed_scratch(None, recycled)?;
    }
    let first = parallel_linear::backward(&mut ctx.first, &grad_hidden, w1)?;
    Ok(SmoeMlpGradients {
        grad_input: first.grad_input,
        grad_w1: first.grad_weight,
        grad_w2: second.grad_weight,
        grad_routing: second
            .grad_routing
            .expect("the second transform always carries routing weights"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::compute_grouped_order;
    use crate::tensor::{matmul, WeightMatrix};

    fn single_expert(tokens: usize) -> (RoutingResult, GroupedOrder) {
        let r = RoutingResult::from_assignments(tokens, 1, 1, vec![0; tokens], vec![1.0; tokens]).unwrap();
        let o = compute_grouped_order(&r, 1).unwrap();
        (r, o)
    }

    #[test]
    fn single_expert_is_a_plain_mlp() {
        let cfg = SmoeMlpConfig {
            d_model: 4,
            d_expert: 6,
            experts: 1,
            k: 1,
            activation: Activation::Relu,
        };
        let x = Matrix::random(5, 4, 1, 1.0);
        let mut x_pos = x.clone();
        x_pos.as_mut_slice().iter_mut().for_each(|v| *v = v.abs());
        // identity padded to 4x6
        let mut w1 = ExpertTensor::zeros(1, 4, 6);
        for i in 0..4 {
            w1.expert_mut(0)[i * 6 + i] = 1.0;
        }
        let w2 = ExpertTensor::random(1, 6, 4, 2, 0.5);
        let (r, o) = single_expert(5);
        let (y, _) = smoe_mlp_forward(x_pos.clone(), &w1, &w2, &r, &o, &cfg, &ExecOptions::default()).unwrap();
        let h = matmul(&x_pos, &w1.expert_matrix(0)).unwrap();
        let want = matmul(&h, &w2.expert_matrix(0)).unwrap();
        for (a, b) in y.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_routing_weights_give_zero_output() {
        let cfg = SmoeMlpConfig {
            d_model: 3,
            d_expert: 5,
            experts: 3,
            k: 2,
            activation: Activation::Gelu,
        };
        let (w1, w2) = cfg.random_weights(3);
        let ids: Vec<usize> = (0..6).flat_map(|t| [t % 3, (t + 1) % 3]).collect();
        let r = RoutingResult::from_assignments(6, 2, 3, ids, vec![0.0; 12]).unwrap();
        let o = compute_grouped_order(&r, 3).unwrap();
        let x = Matrix::random(6, 3, 4, 1.0);
        let exec = ExecOptions::default();
        let (y, _) = smoe_mlp_forward(x.clone(), &w1, &w2, &r, &o, &cfg, &exec).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
        let y = smoe_mlp_inference(&x, &w1, &w2, &r, &o, &cfg, &exec).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let cfg = SmoeMlpConfig {
            d_model: 4,
            d_expert: 3,
            experts: 4,
            k: 2,
            activation: Activation::Silu,
        };
        let (w1, w2) = cfg.random_weights(5);
        let gate = crate::router::gate_forward(&Matrix::random(7, 4, 6, 1.0), &WeightMatrix::random(4, 4, 7, 1.0)).unwrap();
        let r = crate::router::topk_select(&gate, 2, true).unwrap();
        let o = compute_grouped_order(&r, 4).unwrap();
        let (_, mut ctx) =
            smoe_mlp_forward(Matrix::random(7, 4, 8, 1.0), &w1, &w2, &r, &o, &cfg, &ExecOptions::default()).unwrap();
        let g = smoe_mlp_backward(&mut ctx, &Matrix::zeros(7, 4), &w1, &w2).unwrap();
        for m in [g.grad_input.as_slice(), g.grad_w1.as_slice(), g.grad_w2.as_slice(), g.grad_routing.as_slice()] {
            assert!(m.iter().all(|&v| v == 0.0));
        }
        assert!(matches!(
            smoe_mlp_backward(&mut ctx, &Matrix::zeros(7, 4), &w1, &w2),
            Err(crate::Error::Usage(_))
        ));
    }

    #[test]
    fn linear_single_expert_reduces_to_two_linear_backwards() {
        let cfg = SmoeMlpConfig {
            d_model: 3,
            d_expert: 3,
            experts: 1,
            k: 1,
            activation: Activation::Identity,
        };
        let ident = ExpertTensor::from_experts(&[WeightMatrix::identity(3)]).unwrap();
        let x = Matrix::random(4, 3, 9, 1.0);
        let dy = Matrix::random(4, 3, 10, 1.0);
        let (r, o) = single_expert(4);
        let (y, mut ctx) = smoe_mlp_forward(x.clone(), &ident, &ident, &r, &o, &cfg, &ExecOptions::default()).unwrap();
        assert_eq!(y, x);
        let g = smoe_mlp_backward(&mut ctx, &dy, &ident, &ident).unwrap();
        // with identity weights: dX = dY, dW2 = Hᵀ dY = Xᵀ dY, dW1 = Xᵀ (dY W2ᵀ) = Xᵀ dY
        let xty = crate::tensor::gram(&x, &dy).unwrap();
        assert_eq!(g.grad_input, dy);
        assert_eq!(g.grad_w1.as_slice(), xty.as_slice());
        assert_eq!(g.grad_w2.as_slice(), xty.as_slice());
    }

    #[test]
    fn mismatched_weights_are_rejected() {
        let cfg = SmoeMlpConfig {
            d_model: 4,
            d_expert: 3,
            experts: 2,
            k: 1,
            activation: Activation::Gelu,
        };
        let (w1, _) = cfg.random_weights(1);
        let (r, o) = single_expert(3);
        let bad = ExpertTensor::zeros(2, 4, 4);
        assert!(matches!(
            smoe_mlp_forward(Matrix::zeros(3, 4), &w1, &bad, &r, &o, &cfg, &ExecOptions::default()),
            Err(crate::Error::Dimension(_))
        ));
    }

    #[test]
    fn from_active_follows_fixed_active_parameter_rules() {
        let cfg = SmoeMlpConfig::from_active(4096, 8192, 4, 8).unwrap();
        assert_eq!((cfg.experts, cfg.d_expert), (32, 2048));
        assert!(SmoeMlpConfig::from_active(16, 30, 4, 8).is_err());
    }
}
