//! Verification and benchmark harness for `scattermoe-core`.
//!
//! [`suites`] holds the randomized checks behind `scattermoe verify`,
//! [`sweeps`] the granularity, sparsity and attention throughput sweeps, and
//! [`problem`] the seeded problem instances both of them use.

pub mod problem;
pub mod suites;
pub mod sweeps;
pub mod timing;

use anyhow::Result;
use scattermoe_core::oracle::{baseline_grouped_pipeline, fused_pipeline_ledger, BaselineConfig};
use scattermoe_core::{AllocationLedger, Phase, TileConfig};

use problem::MlpProblem;

/// Ledgers of one MLP problem: fused inference, fused training and the
/// padded baseline forward.
pub struct LedgerReport {
    pub inference: AllocationLedger,
    pub training: AllocationLedger,
    pub baseline: AllocationLedger,
}

impl LedgerReport {
    pub fn new(p: &MlpProblem, tile: TileConfig, baseline: BaselineConfig) -> Result<Self> {
        let inference = fused_pipeline_ledger(&p.x, &p.w1, &p.w2, &p.routing, &p.order, &p.cfg, tile, false)?;
        let training = fused_pipeline_ledger(&p.x, &p.w1, &p.w2, &p.routing, &p.order, &p.cfg, tile, true)?;
        let ledger = AllocationLedger::new();
        baseline_grouped_pipeline(&p.x, &p.w1, &p.w2, &p.routing, &p.order, p.cfg.activation, baseline, &ledger)?;
        Ok(Self {
            inference,
            training,
            baseline: ledger,
        })
    }

    /// `pipeline,buffer,phase,rows,cols,bytes` rows for all three ledgers.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pipeline,buffer,phase,rows,cols,bytes\n");
        for (name, l) in self.ledgers() {
            for e in l.entries() {
                out.push_str(&format!("{name},{},{},{},{},{}\n", e.buffer, e.phase, e.rows, e.cols, e.bytes));
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("{:<16} {:>14} {:>14}\n", "pipeline", "forward_peak", "backward_peak");
        for (name, l) in self.ledgers() {
            out.push_str(&format!(
                "{name:<16} {:>14} {:>14}\n",
                l.phase_peak(Phase::Forward),
                l.phase_peak(Phase::Backward)
            ));
        }
        let ratio = self.inference.phase_peak(Phase::Forward) as f64 / self.baseline.phase_peak(Phase::Forward) as f64;
        out.push_str(&format!("fused / baseline forward peak: {ratio:.3}\n"));
        out
    }

    fn ledgers(&self) -> [(&'static str, &AllocationLedger); 3] {
        [
            ("fused-inference", &self.inference),
            ("fused-training", &self.training),
            ("baseline", &self.baseline),
        ]
    }
}
