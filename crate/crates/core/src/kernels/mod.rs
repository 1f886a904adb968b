//! Fused, padding-free expert kernels.
//!
//! Every kernel walks the expert bins of a [`GroupedOrder`] and tiles each
//! bin over its real row count; a bin smaller than a tile yields one short
//! tile. No row is ever padded, so the MAC counter in [`crate::metrics`]
//! reads exactly `Σ_e count_e · d_in · d_out` for a transform.

mod group;
mod scatter;

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::{ThreadPool, ThreadPoolBuilder};

pub use crate::metrics::{mac_count, reset_mac_count};
pub use group::{group, group_xty, scatter_rows};
pub use scatter::{scatter2scatter, scatter2scatter_combine, scatter2scatter_into, WeightRole};

use crate::router::GroupedOrder;

/// Whether the kernel input and output rows are in grouped (bin-contiguous)
/// or scattered (chronological) order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LayoutFlag {
    pub grouped_in: bool,
    pub grouped_out: bool,
}

impl LayoutFlag {
    pub const SCATTER_TO_SCATTER: Self = Self::new(false, false);
    pub const SCATTER_TO_GROUP: Self = Self::new(false, true);
    pub const GROUP_TO_SCATTER: Self = Self::new(true, false);
    pub const GROUP_TO_GROUP: Self = Self::new(true, true);

    pub const ALL: [Self; 4] = [
        Self::GROUP_TO_GROUP,
        Self::SCATTER_TO_GROUP,
        Self::SCATTER_TO_SCATTER,
        Self::GROUP_TO_SCATTER,
    ];

    pub const fn new(grouped_in: bool, grouped_out: bool) -> Self {
        Self {
            grouped_in,
            grouped_out,
        }
    }
}

/// Blocking parameters. Results do not depend on them: inner products are
/// accumulated in `f64` in index order whatever the blocking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileConfig {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub tile_inner: usize,
    pub worker_count: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            tile_rows: 64,
            tile_cols: 64,
            tile_inner: 64,
            worker_count: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

impl TileConfig {
    pub fn with_workers(mut self, workers: usize) -> Self {
        self.worker_count = workers;
        self
    }

    pub(crate) fn validate(&self) -> crate::Result<()> {
        if self.tile_rows == 0 || self.tile_cols == 0 || self.tile_inner == 0 || self.worker_count == 0 {
            return Err(crate::error::arg_err!("tile sizes and worker count must be >= 1, got {self:?}"));
        }
        Ok(())
    }
}

/// Runs `f` inside a rayon pool with `workers` threads. Pools are built once
/// per distinct worker count and reused.
pub(crate) fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    let pool = {
        let mut pools = POOLS.get_or_init(Default::default).lock().unwrap();
        pools
            .entry(workers.max(1))
            .or_insert_with(|| {
                Arc::new(
                    ThreadPoolBuilder::new()
                        .num_threads(workers.max(1))
                        .thread_name(|i| format!("scattermoe-{i}"))
                        .build()
                        .expect("failed to start kernel worker pool"),
                )
            })
            .clone()
    };
    pool.install(f)
}

/// Mutable row access to a matrix from several workers at once.
///
/// Callers must only hand out each row index to a single worker; the kernels
/// guarantee this because a [`GroupedOrder`] is always a permutation.
pub(crate) struct SharedRows<T = f32> {
    ptr: *mut T,
    rows: usize,
    cols: usize,
}

unsafe impl<T: Send> Send for SharedRows<T> {}
unsafe impl<T: Send> Sync for SharedRows<T> {}

impl SharedRows<f32> {
    pub(crate) fn new(m: &mut crate::Matrix) -> Self {
        let (rows, cols) = m.shape();
        Self::from_slice(m.as_mut_slice(), rows, cols)
    }
}

impl<T> SharedRows<T> {
    pub(crate) fn from_slice(data: &mut [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self {
            ptr: data.as_mut_ptr(),
            rows,
            cols,
        }
    }

    /// # Safety
    /// No two live references may alias the same row.
    #[allow(clippy::mut_from_ref)]
    pub(crate) unsafe fn row(&self, r: usize) -> &mut [T] {
        assert!(r < self.rows);
        std::slice::from_raw_parts_mut(self.ptr.add(r * self.cols), self.cols)
    }
}

/// Row tiles of every bin, never crossing a bin boundary.
pub(crate) fn bin_tiles(order: &GroupedOrder, tile_rows: usize) -> Vec<(usize, usize, usize)> {
    let mut tiles = Vec::new();
    for e in 0..order.experts() {
        let bin = order.bin(e);
        let mut start = bin.start;
        while start < bin.end {
            let len = tile_rows.min(bin.end - start);
            tiles.push((e, start, len));
            start += len;
        }
    }
    tiles
}
