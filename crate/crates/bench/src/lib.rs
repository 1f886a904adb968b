//! Shared fixtures for the criterion benchmarks.

use scattermoe_core::router::{compute_grouped_order, gate_forward, topk_select};
use scattermoe_core::{GroupedOrder, Matrix, RoutingResult, SmoeMlpConfig, WeightMatrix};

/// Tokens routed through a random softmax gate.
pub fn gated_routing(x: &Matrix, k: usize, experts: usize, seed: u64) -> (RoutingResult, GroupedOrder) {
    let w_gate = WeightMatrix::random(x.cols(), experts, seed, 2.0 / (x.cols() as f32).sqrt());
    let gate = gate_forward(x, &w_gate).expect("gate shapes agree");
    let routing = topk_select(&gate, k, true).expect("k <= E");
    let order = compute_grouped_order(&routing, experts).expect("routing is consistent");
    (routing, order)
}

/// Granularity-style MLP configuration: `E = 8k`, `d_expert = d_ff / k`.
pub fn mlp_config(d_model: usize, d_ff: usize, k: usize) -> SmoeMlpConfig {
    SmoeMlpConfig::from_active(d_model, d_ff, k, 8).expect("k divides d_ff")
}
