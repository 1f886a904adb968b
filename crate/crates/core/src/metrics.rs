//! Per-thread multiply-accumulate counter.
//!
//! Every compute routine in this crate reports the number of MACs it actually
//! executed (summed across its worker threads) to the counter of the thread
//! that called it. Tests and the benchmark harness reset the counter, run an
//! operation and read the total back. Because the counter is thread-local,
//! concurrently running tests do not see each other's work.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Total MACs recorded on this thread since the last reset.
pub fn mac_count() -> u64 {
    MACS.with(Cell::get)
}

pub fn reset_mac_count() {
    MACS.with(|c| c.set(0));
}

/// Runs `f` and returns its result together with the MACs it performed.
/// The thread's running total is left unchanged.
pub fn count_macs<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = mac_count();
    reset_mac_count();
    let out = f();
    let used = mac_count();
    MACS.with(|c| c.set(before + used));
    (out, used)
}

pub(crate) fn add_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}
