//! Random problem instances shared by the sweeps and the verification suites.

use anyhow::Result;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scattermoe_core::layers::MomhaWeights;
use scattermoe_core::router::{compute_grouped_order, gate_forward, topk_select};
use scattermoe_core::{ExpertTensor, GroupedOrder, Matrix, MomhaConfig, RoutingResult, SmoeMlpConfig, WeightMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingPattern {
    /// Softmax gate over random logits, top-k, renormalized.
    Gate,
    /// Every token picks experts `0..k`; expert 0 receives all tokens.
    AllToFirst,
    /// Random distinct experts, never the last one, which stays empty.
    LastEmpty,
}

impl RoutingPattern {
    pub const ALL: [Self; 3] = [Self::Gate, Self::AllToFirst, Self::LastEmpty];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gate => "gate",
            Self::AllToFirst => "all-to-first",
            Self::LastEmpty => "last-empty",
        }
    }
}

pub fn make_routing(
    x: &Matrix,
    k: usize,
    experts: usize,
    seed: u64,
    pattern: RoutingPattern,
) -> Result<(RoutingResult, GroupedOrder)> {
    let tokens = x.rows();
    let routing = match pattern {
        RoutingPattern::Gate => {
            let w_gate = WeightMatrix::random(x.cols(), experts, seed, 2.0 / (x.cols() as f32).sqrt());
            topk_select(&gate_forward(x, &w_gate)?, k, true)?
        }
        RoutingPattern::AllToFirst | RoutingPattern::LastEmpty => {
            anyhow::ensure!(
                pattern == RoutingPattern::AllToFirst || k < experts,
                "leaving an expert empty needs k < E"
            );
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ids = Vec::with_capacity(tokens * k);
            let mut weights = Vec::with_capacity(tokens * k);
            for _ in 0..tokens {
                if pattern == RoutingPattern::AllToFirst {
                    ids.extend(0..k);
                } else {
                    ids.extend(sample(&mut rng, experts - 1, k));
                }
                let raw: Vec<f32> = (0..k).map(|_| rng.random_range(0.05f32..1.0)).collect();
                let total: f32 = raw.iter().sum();
                weights.extend(raw.iter().map(|w| w / total));
            }
            RoutingResult::from_assignments(tokens, k, experts, ids, weights)?
        }
    };
    let order = compute_grouped_order(&routing, experts)?;
    Ok((routing, order))
}

/// One SMoE MLP instance with weights scaled as in
/// [`SmoeMlpConfig::random_weights`].
#[derive(Clone, Debug)]
pub struct MlpProblem {
    pub cfg: SmoeMlpConfig,
    pub x: Matrix,
    pub w1: ExpertTensor,
    pub w2: ExpertTensor,
    pub routing: RoutingResult,
    pub order: GroupedOrder,
}

impl MlpProblem {
    pub fn new(cfg: SmoeMlpConfig, tokens: usize, seed: u64, pattern: RoutingPattern) -> Result<Self> {
        cfg.validate()?;
        let x = Matrix::random(tokens, cfg.d_model, seed, 1.0);
        let (w1, w2) = cfg.random_weights(seed.wrapping_add(1));
        let (routing, order) = make_routing(&x, cfg.k, cfg.experts, seed.wrapping_add(3), pattern)?;
        Ok(Self {
            cfg,
            x,
            w1,
            w2,
            routing,
            order,
        })
    }

    pub fn tokens(&self) -> usize {
        self.x.rows()
    }
}

#[derive(Clone, Debug)]
pub struct MomhaProblem {
    pub cfg: MomhaConfig,
    pub batch: usize,
    pub x: Matrix,
    pub weights: MomhaWeights,
    pub routing: RoutingResult,
    pub order: GroupedOrder,
}

impl MomhaProblem {
    pub fn new(cfg: MomhaConfig, batch: usize, seq_len: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let x = Matrix::random(batch * seq_len, cfg.d_model, seed, 1.0);
        let weights = MomhaWeights::random(&cfg, seed.wrapping_add(1));
        let (routing, order) = make_routing(&x, cfg.k, cfg.experts, seed.wrapping_add(3), RoutingPattern::Gate)?;
        Ok(Self {
            cfg,
            batch,
            x,
            weights,
            routing,
            order,
        })
    }
}
