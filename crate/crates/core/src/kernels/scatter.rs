use rayon::prelude::*;

use super::{bin_tiles, with_workers, LayoutFlag, SharedRows, TileConfig};
use crate::error::{arg_err, dim_err, Result};
use crate::metrics;
use crate::router::GroupedOrder;
use crate::tensor::{ExpertTensor, Matrix};

/// How the kernel reads each expert block of the weight tensor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightRole {
    /// `row · W[e]`, mapping `d_in -> d_out`.
    #[default]
    Forward,
    /// `row · W[e]ᵀ`, mapping `d_out -> d_in`. The transpose is never
    /// materialized; the kernel swaps index roles while reading.
    Transposed,
}

impl WeightRole {
    fn dims(self, w: &ExpertTensor) -> (usize, usize) {
        match self {
            Self::Forward => (w.d_in(), w.d_out()),
            Self::Transposed => (w.d_out(), w.d_in()),
        }
    }
}

struct Plan<'a> {
    x: &'a Matrix,
    w: &'a ExpertTensor,
    role: WeightRole,
    order: &'a GroupedOrder,
    fan_out: usize,
    grouped_in: bool,
    tile: TileConfig,
    d_in: usize,
    d_out: usize,
}

impl<'a> Plan<'a> {
    fn new(
        x: &'a Matrix,
        w: &'a ExpertTensor,
        role: WeightRole,
        order: &'a GroupedOrder,
        fan_out: usize,
        grouped_in: bool,
        tile: &TileConfig,
    ) -> Result<Self> {
        tile.validate()?;
        let (d_in, d_out) = role.dims(w);
        let slots = order.len();
        if order.experts() != w.experts() {
            return Err(dim_err!(
                "order has {} expert bins but the weight tensor has {} experts",
                order.experts(),
                w.experts()
            ));
        }
        if x.cols() != d_in {
            return Err(dim_err!(
                "input is {}x{} but the expert transform expects width {d_in}",
                x.rows(),
                x.cols()
            ));
        }
        if fan_out == 0 {
            return Err(arg_err!("fan_out must be >= 1"));
        }
        if grouped_in {
            if fan_out != 1 {
                return Err(arg_err!("grouped input is already expanded; fan_out must be 1, got {fan_out}"));
            }
            if x.rows() != slots {
                return Err(dim_err!("grouped input has {} rows, expected {slots}", x.rows()));
            }
        } else if x.rows() * fan_out != slots {
            return Err(arg_err!(
                "scattered input of {} rows with fan_out {fan_out} does not cover {slots} slots",
                x.rows()
            ));
        }
        Ok(Self {
            x,
            w,
            role,
            order,
            fan_out,
            grouped_in,
            tile: *tile,
            d_in,
            d_out,
        })
    }

    fn read_row(&self, grouped_pos: usize) -> &'a [f32] {
        if self.grouped_in {
            self.x.row(grouped_pos)
        } else {
            self.x.row(self.order.order()[grouped_pos] / self.fan_out)
        }
    }

    /// Computes `rows` consecutive grouped positions starting at `start`
    /// (all in bin `e`) for output columns `cols`, accumulating into `acc`
    /// (`rows x cols.len()`, zeroed by the caller). Returns MACs performed.
    fn tile(&self, e: usize, start: usize, rows: usize, cols: std::ops::Range<usize>, acc: &mut [f64]) -> u64 {
        let width = cols.len();
        let block = self.w.expert(e);
        let mut macs = 0u64;
        let mut inner = 0;
        while inner < self.d_in {
            let inner_end = (inner + self.tile.tile_inner).min(self.d_in);
            for r in 0..rows {
                let x_row = &self.read_row(start + r)[inner..inner_end];
                let acc_row = &mut acc[r * width..(r + 1) * width];
                match self.role {
                    WeightRole::Forward => {
                        for (m, &a) in x_row.iter().enumerate() {
                            let a = a as f64;
                            let w_row = &block[(inner + m) * self.d_out..][cols.clone()];
                            for (s, &w) in acc_row.iter_mut().zip(w_row) {
                                *s += a * w as f64;
                            }
                        }
                    }
                    WeightRole::Transposed => {
                        // W[e] is stored d_out x d_in from this kernel's point of view
                        for (s, c) in acc_row.iter_mut().zip(cols.clone()) {
                            let w_row = &block[c * self.d_in + inner..c * self.d_in + inner_end];
                            *s += x_row
                                .iter()
                                .zip(w_row)
                                .map(|(&a, &w)| a as f64 * w as f64)
                                .sum::<f64>();
                        }
                    }
                }
            }
            macs += (rows * width * (inner_end - inner)) as u64;
            inner = inner_end;
        }
        macs
    }

    fn col_blocks(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.d_out)
            .step_by(self.tile.tile_cols)
            .map(|c| c..(c + self.tile.tile_cols).min(self.d_out))
    }
}

/// Applies each slot's expert transform, reading rows from `x` and writing
/// rows of a `T*k x d_out` output, each side in grouped or scattered order.
///
/// For grouped position `i` in bin `e`, the input row is `i` when
/// `layout.grouped_in`, otherwise `o[i] / fan_out`; the output row is `i`
/// when `layout.grouped_out`, otherwise `o[i]`. `fan_out` is `k` when `x`
/// holds one row per token and 1 when it already holds one row per slot.
pub fn scatter2scatter(
    x: &Matrix,
    w: &ExpertTensor,
    order: &GroupedOrder,
    fan_out: usize,
    layout: LayoutFlag,
    tile: &TileConfig,
) -> Result<Matrix> {
    let mut out = Matrix::zeros(order.len(), w.d_out());
    scatter2scatter_into(x, w, WeightRole::Forward, order, fan_out, layout, tile, &mut out)?;
    Ok(out)
}

/// [`scatter2scatter`] writing into a caller-provided buffer, optionally
/// reading the weights transposed. Every row of `out` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn scatter2scatter_into(
    x: &Matrix,
    w: &ExpertTensor,
    role: WeightRole,
    order: &GroupedOrder,
    fan_out: usize,
    layout: LayoutFlag,
    tile: &TileConfig,
    out: &mut Matrix,
) -> Result<()> {
    let plan = Plan::new(x, w, role, order, fan_out, layout.grouped_in, tile)?;
    if out.shape() != (order.len(), plan.d_out) {
        return Err(dim_err!(
            "output buffer is {}x{}, expected {}x{}",
            out.rows(),
            out.cols(),
            order.len(),
            plan.d_out
        ));
    }
    if plan.d_out == 0 {
        return Ok(());
    }
    let tiles = bin_tiles(order, plan.tile.tile_rows);
    let shared = SharedRows::new(out);
    let macs: u64 = with_workers(plan.tile.worker_count, || {
        tiles
            .par_iter()
            .map(|&(e, start, rows)| {
                let mut macs = 0;
                let mut acc = Vec::new();
                for cols in plan.col_blocks() {
                    acc.clear();
                    acc.resize(rows * cols.len(), 0.0f64);
                    macs += plan.tile(e, start, rows, cols.clone(), &mut acc);
                    for r in 0..rows {
                        let i = start + r;
                        let dst = if layout.grouped_out { i } else { order.order()[i] };
                        // SAFETY: `order` is a permutation and each grouped
                        // position belongs to exactly one tile.
                        let row = unsafe { shared.row(dst) };
                        for (o, &s) in row[cols.clone()].iter_mut().zip(&acc[r * cols.len()..]) {
                            *o = s as f32;
                        }
                    }
                }
                macs
            })
            .sum()
    });
    metrics::add_macs(macs);
    Ok(())
}

/// Transform fused with the routing-weighted sum: output row `s / combine`
/// receives `weights[s] · (x_row · W[e])` for every slot `s`, so no
/// `T*k`-row intermediate exists.
///
/// `combine` is `k` (one output row per token) or 1 (one per slot). Bins are
/// processed in expert order; within a bin every slot belongs to a different
/// token, so tiles of a bin write disjoint rows. Sums are kept in an `f64`
/// accumulator the size of the output and rounded once at the end.
#[allow(clippy::too_many_arguments)]
pub fn scatter2scatter_combine(
    x: &Matrix,
    w: &ExpertTensor,
    order: &GroupedOrder,
    fan_out: usize,
    grouped_in: bool,
    weights: &[f32],
    combine: usize,
    tile: &TileConfig,
) -> Result<Matrix> {
    let plan = Plan::new(x, w, WeightRole::Forward, order, fan_out, grouped_in, tile)?;
    if weights.len() != order.len() {
        return Err(dim_err!("expected {} routing weights, got {}", order.len(), weights.len()));
    }
    if combine != 1 && combine != order.k() {
        return Err(arg_err!(
            "combine factor must be 1 or k = {}, got {combine}",
            order.k()
        ));
    }
    let mut out = Matrix::zeros(order.len() / combine, plan.d_out);
    if plan.d_out == 0 {
        return Ok(out);
    }
    let tiles = bin_tiles(order, plan.tile.tile_rows);
    let mut sums = vec![0.0f64; out.rows() * plan.d_out];
    let shared = SharedRows::from_slice(&mut sums, out.rows(), plan.d_out);
    let mut macs = 0u64;
    for e in 0..order.experts() {
        let bin_tiles: Vec<_> = tiles.iter().filter(|t| t.0 == e).collect();
        macs += with_workers(plan.tile.worker_count, || {
            bin_tiles
                .par_iter()
                .map(|&&(e, start, rows)| {
                    let mut macs = 0;
                    let mut acc = Vec::new();
                    for cols in plan.col_blocks() {
                        acc.clear();
                        acc.resize(rows * cols.len(), 0.0f64);
                        macs += plan.tile(e, start, rows, cols.clone(), &mut acc);
                        for r in 0..rows {
                            let slot = order.order()[start + r];
                            let p = weights[slot] as f64;
                            // SAFETY: slots of one bin map to distinct output
                            // rows and bins are processed one at a time.
                            let row = unsafe { shared.row(slot / combine) };
                            for (o, &s) in row[cols.clone()].iter_mut().zip(&acc[r * cols.len()..]) {
                                *o += p * s;
                            }
                        }
                    }
                    macs
                })
                .sum::<u64>()
        });
    }
    metrics::add_macs(macs);
    for (o, s) in out.as_mut_slice().iter_mut().zip(sums) {
        *o = s as f32;
    }
    Ok(out)
}
