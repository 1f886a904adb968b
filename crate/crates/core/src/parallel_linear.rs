//! The differentiable grouped/scattered expert linear transform.
//!
//! The forward pass is a single fused kernel call plus an optional
//! routing-weighted sum. The backward pass computes the routing gradient
//! first, then reuses the forward's expanded output buffer for the weighted
//! grouped output gradient, groups the input only when it was scattered,
//! and writes the grouped input gradient back into that grouped input
//! buffer.

use std::borrow::Cow;
use std::sync::Arc;

use crate::accounting::{AllocationLedger, Phase};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::kernels::{self, LayoutFlag, TileConfig, WeightRole};
use crate::router::GroupedOrder;
use crate::tensor::{ExpertTensor, Matrix};

/// Kernel blocking plus an optional ledger that records every buffer the
/// layers allocate.
#[derive(Clone, Debug, Default)]
pub struct ExecOptions {
    pub tile: TileConfig,
    pub ledger: Option<AllocationLedger>,
}

impl ExecOptions {
    pub fn with_tile(mut self, tile: TileConfig) -> Self {
        self.tile = tile;
        self
    }

    pub fn with_ledger(mut self, ledger: AllocationLedger) -> Self {
        self.ledger = Some(ledger);
        self
    }

    pub(crate) fn log(&self, label: &str, buffer: &str, rows: usize, cols: usize, phase: Phase) {
        if let Some(l) = &self.ledger {
            l.record(format!("{label}.{buffer}"), rows, cols, phase);
        }
    }
}

/// Static configuration of one ParallelLinear call site.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearSpec {
    /// `k` when the input holds one row per token and is scattered, else 1.
    pub fan_out: usize,
    pub layout: LayoutFlag,
    /// Prefix for ledger entries.
    pub label: &'static str,
}

impl LinearSpec {
    pub fn new(fan_out: usize, layout: LayoutFlag) -> Self {
        Self {
            fan_out,
            layout,
            label: "linear",
        }
    }

    pub fn labeled(mut self, label: &'static str) -> Self {
        self.label = label;
        self
    }
}

/// Everything the backward pass needs from the forward pass.
#[derive(Debug)]
pub struct LinearContext {
    input: Arc<Matrix>,
    input_grouped: bool,
    /// Pre-weighting outputs `Ŷ`, `T*k` scattered rows; kept only when
    /// routing weights were applied.
    expanded_output: Option<Matrix>,
    order: GroupedOrder,
    routing_weights: Option<Matrix>,
    spec: LinearSpec,
    exec: ExecOptions,
    scratch_grouped_grad: Option<Matrix>,
    scratch_grouped_input: Option<Matrix>,
    spare: Vec<Matrix>,
    reuse: bool,
    consumed: bool,
    output_cols: usize,
}

impl LinearContext {
    pub fn input(&self) -> &Arc<Matrix> {
        &self.input
    }

    pub fn input_grouped(&self) -> bool {
        self.input_grouped
    }

    pub fn expanded_output(&self) -> Option<&Matrix> {
        self.expanded_output.as_ref()
    }

    pub fn order(&self) -> &GroupedOrder {
        &self.order
    }

    pub fn routing_weights(&self) -> Option<&Matrix> {
        self.routing_weights.as_ref()
    }

    pub fn spec(&self) -> LinearSpec {
        self.spec
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Pre-seeds the two backward scratch slots: the weighted grouped
    /// output gradient (`T*k x d_out`) and the grouped input, which is
    /// reused for the grouped input gradient (`T*k x d_in`).
    pub fn seed_scratch(&mut self, grouped_grad: Option<Matrix>, grouped_input: Option<Matrix>) -> Result<()> {
        let slots = self.order.len();
        let d_in = self.input.cols();
        if let Some(m) = &grouped_grad {
            let d_out = self.output_width();
            if m.shape() != (slots, d_out) {
                return Err(dim_err!(
                    "grad scratch is {}x{}, expected {slots}x{d_out}",
                    m.rows(),
                    m.cols()
                ));
            }
        }
        if let Some(m) = &grouped_input {
            if m.shape() != (slots, d_in) {
                return Err(dim_err!(
                    "input scratch is {}x{}, expected {slots}x{d_in}",
                    m.rows(),
                    m.cols()
                ));
            }
        }
        self.scratch_grouped_grad = grouped_grad;
        self.scratch_grouped_input = grouped_input;
        Ok(())
    }

    /// With reuse off, backward ignores the scratch slots and the forward
    /// output buffer and allocates every intermediate fresh.
    pub fn set_buffer_reuse(&mut self, reuse: bool) {
        self.reuse = reuse;
    }

    /// Buffers left over after backward that a caller may recycle.
    pub fn take_spare_buffers(&mut self) -> Vec<Matrix> {
        std::mem::take(&mut self.spare)
    }

    fn output_width(&self) -> usize {
        self.output_cols
    }
}

/// Gradients of one ParallelLinear call.
#[derive(Clone, Debug)]
pub struct LinearGradients {
    /// Same shape and layout as the forward input.
    pub grad_input: Matrix,
    pub grad_weight: ExpertTensor,
    /// Same shape as the routing weights, when they were given.
    pub grad_routing: Option<Matrix>,
}

fn check_routing_weights(p: &Matrix, order: &GroupedOrder, layout: LayoutFlag) -> Result<()> {
    if p.rows() * p.cols() != order.len() {
        return Err(arg_err!(
            "routing weights are {}x{} but there are {} slots",
            p.rows(),
            p.cols(),
            order.len()
        ));
    }
    if layout.grouped_out {
        return Err(arg_err!("a routing-weighted sum needs scattered output"));
    }
    Ok(())
}

/// Forward pass. Returns `Y` (`S x d_out` with routing weights `S x j`,
/// otherwise `T*k x d_out` in the requested output layout) and the saved
/// context.
pub fn forward(
    input: impl Into<Arc<Matrix>>,
    weights: &ExpertTensor,
    order: &GroupedOrder,
    routing_weights: Option<&Matrix>,
    spec: LinearSpec,
    exec: &ExecOptions,
) -> Result<(Matrix, LinearContext)> {
    let input = input.into();
    if let Some(p) = routing_weights {
        check_routing_weights(p, order, spec.layout)?;
    }
    let slots = order.len();
    let mut expanded = Matrix::zeros(slots, weights.d_out());
    kernels::scatter2scatter_into(
        &input,
        weights,
        WeightRole::Forward,
        order,
        spec.fan_out,
        spec.layout,
        &exec.tile,
        &mut expanded,
    )?;
    let (y, expanded) = match routing_weights {
        Some(p) => {
            exec.log(spec.label, "expanded_output", slots, weights.d_out(), Phase::Forward);
            let y = weighted_sum(&expanded, p);
            exec.log(spec.label, "output", y.rows(), y.cols(), Phase::Forward);
            (y, Some(expanded))
        }
        None => {
            exec.log(spec.label, "output", slots, weights.d_out(), Phase::Forward);
            (expanded, None)
        }
    };
    let ctx = LinearContext {
        input,
        input_grouped: spec.layout.grouped_in,
        expanded_output: expanded,
        order: order.clone(),
        routing_weights: routing_weights.cloned(),
        spec,
        exec: exec.clone(),
        scratch_grouped_grad: None,
        scratch_grouped_input: None,
        spare: Vec::new(),
        reuse: true,
        consumed: false,
        output_cols: weights.d_out(),
    };
    Ok((y, ctx))
}

/// Forward pass without saving anything for backward. With routing
/// weights, the weighted sum is fused into the kernel so the `T*k`-row
/// expanded output is never materialized.
pub fn forward_inference(
    input: &Matrix,
    weights: &ExpertTensor,
    order: &GroupedOrder,
    routing_weights: Option<&Matrix>,
    spec: LinearSpec,
    exec: &ExecOptions,
) -> Result<Matrix> {
    let y = match routing_weights {
        Some(p) => {
            check_routing_weights(p, order, spec.layout)?;
            // f64 sums, recorded as twice the f32 width
            exec.log(spec.label, "accumulator", p.rows(), 2 * weights.d_out(), Phase::Forward);
            kernels::scatter2scatter_combine(
                input,
                weights,
                order,
                spec.fan_out,
                spec.layout.grouped_in,
                p.as_slice(),
                p.cols(),
                &exec.tile,
            )?
        }
        None => kernels::scatter2scatter(input, weights, order, spec.fan_out, spec.layout, &exec.tile)?,
    };
    exec.log(spec.label, "output", y.rows(), y.cols(), Phase::Forward);
    Ok(y)
}

/// `Y[s] = Σ_i p[s][i] · Ŷ[s*j + i]`.
fn weighted_sum(expanded: &Matrix, p: &Matrix) -> Matrix {
    let j = p.cols();
    let mut y = Matrix::zeros(p.rows(), expanded.cols());
    let mut acc = vec![0.0f64; expanded.cols()];
    for s in 0..p.rows() {
        acc.fill(0.0);
        for i in 0..j {
            let w = p.get(s, i) as f64;
            for (a, &v) in acc.iter_mut().zip(expanded.row(s * j + i)) {
                *a += w * v as f64;
            }
        }
        for (o, a) in y.row_mut(s).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    y
}

/// Backward pass. A context can be consumed once.
pub fn backward(ctx: &mut LinearContext, grad_output: &Matrix, weights: &ExpertTensor) -> Result<LinearGradients> {
    if ctx.consumed {
        return Err(Error::Usage(
            "backward already ran on this context; its buffers have been reused".into(),
        ));
    }
    let slots = ctx.order.len();
    let (d_in, d_out) = (ctx.input.cols(), ctx.output_cols);
    if (weights.experts(), weights.d_in(), weights.d_out()) != (ctx.order.experts(), d_in, d_out) {
        return Err(dim_err!(
            "weights are {}x{}x{}, forward used {}x{d_in}x{d_out}",
            weights.experts(),
            weights.d_in(),
            weights.d_out(),
            ctx.order.experts()
        ));
    }
    let expected = match &ctx.routing_weights {
        Some(p) => (p.rows(), d_out),
        None => (slots, d_out),
    };
    if grad_output.shape() != expected {
        return Err(dim_err!(
            "output gradient is {}x{}, expected {}x{}",
            grad_output.rows(),
            grad_output.cols(),
            expected.0,
            expected.1
        ));
    }
    ctx.consumed = true;
    let label = ctx.spec.label;
    let exec = ctx.exec.clone();
    let reuse = ctx.reuse;
    let mut scratch_grad = if reuse { ctx.scratch_grouped_grad.take() } else { None };
    let scratch_input = if reuse { ctx.scratch_grouped_input.take() } else { None };
    let fresh = |buffer: &str, cols: usize| {
        exec.log(label, buffer, slots, cols, Phase::Backward);
        Matrix::zeros(slots, cols)
    };

    // ∇p must be taken before Ŷ's storage is recycled below.
    let grad_routing = match (&ctx.routing_weights, &ctx.expanded_output) {
        (Some(p), Some(expanded)) => {
            let j = p.cols();
            let mut dp = Matrix::zeros(p.rows(), j);
            for s in 0..p.rows() {
                for i in 0..j {
                    let v = crate::tensor::dot_f64(grad_output.row(s), expanded.row(s * j + i));
                    dp.set(s, i, v as f32);
                }
            }
            exec.log(label, "grad_routing", p.rows(), j, Phase::Backward);
            Some(dp)
        }
        _ => None,
    };
    let recycled_output = ctx.expanded_output.take().filter(|_| reuse);

    let grouped_grad: Cow<'_, Matrix> = match &ctx.routing_weights {
        Some(p) => {
            let buf = scratch_grad
                .take()
                .or(recycled_output)
                .unwrap_or_else(|| fresh("grouped_grad_output", d_out));
            Cow::Owned(kernels::group(grad_output, &ctx.order, Some(p.as_slice()), p.cols(), Some(buf))?)
        }
        None if ctx.spec.layout.grouped_out => Cow::Borrowed(grad_output),
        None => {
            let buf = scratch_grad
                .take()
                .unwrap_or_else(|| fresh("grouped_grad_output", d_out));
            Cow::Owned(kernels::group(grad_output, &ctx.order, None, 1, Some(buf))?)
        }
    };

    let mut input_buf = scratch_input;
    let grouped_input: Cow<'_, Matrix> = if ctx.input_grouped {
        Cow::Borrowed(ctx.input.as_ref())
    } else {
        let buf = input_buf.take().unwrap_or_else(|| fresh("grouped_input", d_in));
        Cow::Owned(kernels::group(&ctx.input, &ctx.order, None, ctx.spec.fan_out, Some(buf))?)
    };

    let grad_weight = kernels::group_xty(&grouped_input, &grouped_grad, &ctx.order, &exec.tile)?;
    exec.log(label, "grad_weight", weights.experts() * d_in, d_out, Phase::Backward);

    // the grouped input is dead now; its buffer takes the input gradient
    let mut expanded_grad = match grouped_input {
        Cow::Owned(m) => m,
        Cow::Borrowed(_) => input_buf.take().unwrap_or_else(|| fresh("grad_input_expanded", d_in)),
    };
    let layout = LayoutFlag::new(true, ctx.input_grouped);
    kernels::scatter2scatter_into(
        &grouped_grad,
        weights,
        WeightRole::Transposed,
        &ctx.order,
        1,
        layout,
        &exec.tile,
        &mut expanded_grad,
    )?;
    if let Cow::Owned(m) = grouped_grad {
        ctx.spare.push(m);
    }

    let grad_input = if !ctx.input_grouped && ctx.spec.fan_out > 1 {
        let k = ctx.spec.fan_out;
        let tokens = ctx.input.rows();
        let mut dx = Matrix::zeros(tokens, d_in);
        let mut acc = vec![0.0f64; d_in];
        for t in 0..tokens {
            acc.fill(0.0);
            for i in 0..k {
                for (a, &v) in acc.iter_mut().zip(expanded_grad.row(t * k + i)) {
                    *a += v as f64;
                }
            }
            for (o, a) in dx.row_mut(t).iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
        exec.log(label, "grad_input", tokens, d_in, Phase::Backward);
        ctx.spare.push(expanded_grad);
        dx
    } else {
        expanded_grad
    };

    Ok(LinearGradients {
        grad_input,
        grad_weight,
        grad_routing,
    })
}
