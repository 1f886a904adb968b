#![allow(dead_code)]

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scattermoe_core::router::{compute_grouped_order, gate_forward, topk_select};
use scattermoe_core::{GroupedOrder, Matrix, RoutingResult, WeightMatrix};

#[derive(Clone, Copy, Debug)]
pub enum Pattern {
    Gate,
    /// Every token picks experts `0..k`, so expert 0 holds all tokens.
    AllToFirst,
    /// Uniformly random distinct experts, never the last one.
    LastEmpty,
}

pub fn routing(tokens: usize, k: usize, experts: usize, seed: u64, pattern: Pattern) -> (RoutingResult, GroupedOrder) {
    let r = match pattern {
        Pattern::Gate => {
            let logits = Matrix::random(tokens, 4, seed, 1.0);
            let gate = gate_forward(&logits, &WeightMatrix::random(4, experts, seed ^ 0x9e37, 2.0)).unwrap();
            topk_select(&gate, k, true).unwrap()
        }
        Pattern::AllToFirst | Pattern::LastEmpty => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ids = Vec::with_capacity(tokens * k);
            let mut w = Vec::with_capacity(tokens * k);
            for _ in 0..tokens {
                match pattern {
                    Pattern::AllToFirst => ids.extend(0..k),
                    _ => ids.extend(sample(&mut rng, experts - 1, k)),
                }
                let raw: Vec<f32> = (0..k).map(|_| rng.random_range(0.05f32..1.0)).collect();
                let total: f32 = raw.iter().sum();
                w.extend(raw.iter().map(|v| v / total));
            }
            RoutingResult::from_assignments(tokens, k, experts, ids, w).unwrap()
        }
    };
    let o = compute_grouped_order(&r, experts).unwrap();
    (r, o)
}

pub fn assert_close(got: &[f32], want: &[f32], rel: f32, abs: f32) {
    assert_eq!(got.len(), want.len(), "length mismatch");
    for (i, (a, b)) in got.iter().zip(want).enumerate() {
        assert!((a - b).abs() <= rel * b.abs() + abs, "element {i}: {a} vs {b}");
    }
}

pub fn assert_fd(analytic: &[f32], numeric: &[f64], what: &str) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length mismatch");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let a = a as f64;
        assert!(
            (a - n).abs() <= 1e-3 * a.abs().max(n.abs()) + 1e-5,
            "{what}[{i}]: analytic {a} vs numeric {n}"
        );
    }
}

pub fn f64s(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| v as f64).collect()
}

/// Splits a flat parameter vector into consecutive pieces of the given sizes.
pub fn split<'a>(theta: &'a [f64], sizes: &[usize]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &s in sizes {
        out.push(&theta[at..at + s]);
        at += s;
    }
    assert_eq!(at, theta.len());
    out
}
