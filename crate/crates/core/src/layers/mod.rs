//! Layers composed from [`crate::parallel_linear`]: the SMoE MLP and the
//! mixture of multi-head attention, plus the attention primitive they share
//! with the reference implementations.

mod activation;
pub mod attention;
pub mod mlp;
pub mod momha;

pub use activation::Activation;
pub use attention::{attention, attention_backward};
pub use mlp::{
    smoe_mlp_backward, smoe_mlp_forward, smoe_mlp_inference, SmoeMlpConfig, SmoeMlpContext, SmoeMlpGradients,
};
pub use momha::{
    momha_backward, momha_forward, momha_inference, MomhaConfig, MomhaContext, MomhaGradients, MomhaWeights,
};

use crate::error::{arg_err, Result};

/// Granularity `G = d_ff / d_expert` of an SMoE MLP with the same active
/// parameters as a dense MLP of width `d_ff`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DerivedGranularity {
    pub d_ff: usize,
    pub d_expert: usize,
    pub granularity: f64,
}

impl DerivedGranularity {
    pub fn new(d_ff: usize, d_expert: usize) -> Result<Self> {
        if d_expert == 0 {
            return Err(arg_err!("d_expert must be >= 1"));
        }
        Ok(Self {
            d_ff,
            d_expert,
            granularity: d_ff as f64 / d_expert as f64,
        })
    }
}
