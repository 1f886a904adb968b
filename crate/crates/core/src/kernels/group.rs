use rayon::prelude::*;

use super::{with_workers, TileConfig};
use crate::error::{dim_err, Result};
use crate::metrics;
use crate::router::GroupedOrder;
use crate::tensor::{ExpertTensor, Matrix};

/// Gathers rows into grouped order, optionally scaling each by its slot's
/// routing weight: output row `i` is `x[o[i] / fan_out] * weights[o[i]]`.
///
/// When `out` is given it must be `T*k x d`; it is overwritten and returned
/// without allocating.
pub fn group(
    x: &Matrix,
    order: &GroupedOrder,
    weights: Option<&[f32]>,
    fan_out: usize,
    out: Option<Matrix>,
) -> Result<Matrix> {
    let slots = order.len();
    if fan_out == 0 || x.rows() * fan_out != slots {
        return Err(dim_err!(
            "group: {} rows with fan_out {fan_out} do not cover {slots} slots",
            x.rows()
        ));
    }
    if let Some(w) = weights {
        if w.len() != slots {
            return Err(dim_err!("group: expected {slots} weights, got {}", w.len()));
        }
    }
    let mut out = match out {
        Some(m) if m.shape() == (slots, x.cols()) => m,
        Some(m) => {
            return Err(dim_err!(
                "group: reusable buffer is {}x{}, expected {slots}x{}",
                m.rows(),
                m.cols(),
                x.cols()
            ))
        }
        None => Matrix::zeros(slots, x.cols()),
    };
    let cols = x.cols();
    if cols == 0 {
        return Ok(out);
    }
    out.as_mut_slice()
        .par_chunks_mut(cols)
        .zip(order.order().par_iter())
        .for_each(|(dst, &slot)| {
            let src = x.row(slot / fan_out);
            match weights {
                Some(w) => {
                    let p = w[slot];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s * p);
                }
                None => dst.copy_from_slice(src),
            }
        });
    Ok(out)
}

/// Inverse of an unweighted [`group`] with `fan_out = 1`: grouped row `i`
/// moves to scattered row `o[i]`.
pub fn scatter_rows(xg: &Matrix, order: &GroupedOrder) -> Result<Matrix> {
    if xg.rows() != order.len() {
        return Err(dim_err!(
            "scatter: {} grouped rows for {} slots",
            xg.rows(),
            order.len()
        ));
    }
    let mut out = Matrix::zeros(xg.rows(), xg.cols());
    for (i, &slot) in order.order().iter().enumerate() {
        out.row_mut(slot).copy_from_slice(xg.row(i));
    }
    Ok(out)
}

/// Per-expert `Xgᵀ · Yg` over each bin's rows; empty bins give zero blocks.
/// Both inputs must be grouped with `T*k` rows.
pub fn group_xty(xg: &Matrix, yg: &Matrix, order: &GroupedOrder, tile: &TileConfig) -> Result<ExpertTensor> {
    tile.validate()?;
    if xg.rows() != yg.rows() || xg.rows() != order.len() {
        return Err(dim_err!(
            "group_xty: lhs has {} rows, rhs has {} rows, order covers {} slots",
            xg.rows(),
            yg.rows(),
            order.len()
        ));
    }
    let (d_in, d_out) = (xg.cols(), yg.cols());
    let experts = order.experts();
    let mut out = ExpertTensor::zeros(experts, d_in, d_out);
    if d_in == 0 || d_out == 0 {
        return Ok(out);
    }
    // one work item per (expert, input feature) row of the result
    let macs: u64 = with_workers(tile.worker_count, || {
        out.as_mut_slice()
            .par_chunks_mut(d_out)
            .enumerate()
            .map(|(r, dst)| {
                let (e, m) = (r / d_in, r % d_in);
                let bin = order.bin(e);
                let mut acc = vec![0.0f64; d_out];
                for i in bin.clone() {
                    let a = xg.get(i, m) as f64;
                    for (s, &y) in acc.iter_mut().zip(yg.row(i)) {
                        *s += a * y as f64;
                    }
                }
                for (d, s) in dst.iter_mut().zip(acc) {
                    *d = s as f32;
                }
                (bin.len() * d_out) as u64
            })
            .sum()
    });
    metrics::add_macs(macs);
    Ok(out)
}
