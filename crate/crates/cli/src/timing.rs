use std::time::Instant;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Timing {
    pub median_ns: u64,
    pub p5_ns: u64,
    pub p95_ns: u64,
}

/// Nearest-rank percentile of sorted samples, `q` in `[0, 1]`.
pub fn percentile(sorted: &[u64], q: f64) -> u64 {
    assert!(!sorted.is_empty(), "percentile of no samples");
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

/// Runs `f` `warmup` times untimed, then `repeats` timed times.
pub fn measure(warmup: usize, repeats: usize, mut f: impl FnMut()) -> Timing {
    for _ in 0..warmup {
        f();
    }
    let mut samples: Vec<u64> = (0..repeats.max(1))
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_nanos() as u64
        })
        .collect();
    samples.sort_unstable();
    Timing {
        median_ns: percentile(&samples, 0.5),
        p5_ns: percentile(&samples, 0.05),
        p95_ns: percentile(&samples, 0.95),
    }
}
