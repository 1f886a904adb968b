//! Padding-free Sparse Mixture-of-Experts linear transforms for the CPU.
//!
//! Tokens are routed to `k` of `E` experts ([`router`]). Instead of copying
//! tokens into per-expert (and padded) blocks, the fused kernels in
//! [`kernels`] read and write rows in either grouped or scattered order
//! directly. [`parallel_linear`] wraps them into a differentiable transform
//! and [`layers`] composes that into an SMoE MLP and a mixture of
//! multi-head attention. [`oracle`] holds naive reference implementations
//! and the group-copy baseline used to check results and compare memory
//! footprints recorded in an [`accounting::AllocationLedger`].

pub mod accounting;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod oracle;
pub mod parallel_linear;
pub mod router;
pub mod tensor;

pub use accounting::{AllocationLedger, LedgerEntry, Phase};
pub use error::{Error, Result};
pub use kernels::{LayoutFlag, TileConfig};
pub use layers::{Activation, MomhaConfig, SmoeMlpConfig};
pub use parallel_linear::{ExecOptions, LinearContext, LinearGradients, LinearSpec};
pub use router::{GroupedOrder, RoutingResult};
pub use tensor::{ExpertTensor, Matrix, WeightMatrix};
