//! Throughput sweeps: granularity at fixed active parameters, decreasing
//! sparsity against a dense MLP, and mixture of attention.

use std::io::Write;

use anyhow::{ensure, Result};
use clap::ValueEnum;
use serde::Serialize;
use scattermoe_core::layers::{
    momha_backward, momha_forward, momha_inference, smoe_mlp_backward, smoe_mlp_forward, smoe_mlp_inference,
    DerivedGranularity,
};
use scattermoe_core::metrics::count_macs;
use scattermoe_core::oracle::{
    baseline_grouped_pipeline, baseline_momha, dense_mlp_reference, dense_mlp_reference_backward, BaselineConfig,
};
use scattermoe_core::{
    Activation, AllocationLedger, ExecOptions, Matrix, MomhaConfig, Phase, SmoeMlpConfig, TileConfig, WeightMatrix,
};

use crate::problem::{MlpProblem, MomhaProblem, RoutingPattern};
use crate::timing::{measure, Timing};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Published model sizes; far too large to time on a CPU, useful with
    /// `--dry-run`.
    Paper,
    /// Shrunken sizes with the same structural ratios.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchPhase {
    Forward,
    /// Forward plus backward.
    Train,
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub warmup: usize,
    pub repeats: usize,
    pub workers: usize,
    pub block_size: usize,
    pub seed: u64,
    pub phase: BenchPhase,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            warmup: 10,
            repeats: 20,
            workers: TileConfig::default().worker_count,
            block_size: 128,
            seed: 0,
            phase: BenchPhase::Forward,
        }
    }
}

impl RunOptions {
    fn exec(&self) -> ExecOptions {
        ExecOptions::default().with_tile(TileConfig::default().with_workers(self.workers))
    }
}

/// Timing plus the MAC count and ledger peak of one untimed run.
#[derive(Clone, Copy, Debug)]
pub struct Measured {
    pub timing: Timing,
    pub macs: u64,
    pub peak_bytes: usize,
}

impl Measured {
    pub fn tokens_per_s(&self, tokens: usize) -> f64 {
        tokens as f64 / (self.timing.median_ns.max(1) as f64 * 1e-9)
    }
}

fn run_measured(opts: &RunOptions, mut once: impl FnMut(Option<&AllocationLedger>) -> Result<()>) -> Result<Measured> {
    let ledger = AllocationLedger::new();
    let (res, macs) = count_macs(|| once(Some(&ledger)));
    res?;
    let timing = measure(opts.warmup, opts.repeats, || once(None).expect("benchmark run failed after a clean run"));
    Ok(Measured {
        timing,
        macs,
        peak_bytes: ledger.peak_bytes(),
    })
}

fn with_ledger(exec: &ExecOptions, ledger: Option<&AllocationLedger>) -> ExecOptions {
    match ledger {
        Some(l) => exec.clone().with_ledger(l.clone()),
        None => exec.clone(),
    }
}

pub fn bench_fused_mlp(p: &MlpProblem, opts: &RunOptions) -> Result<Measured> {
    let exec = opts.exec();
    run_measured(opts, |ledger| {
        let exec = with_ledger(&exec, ledger);
        match opts.phase {
            BenchPhase::Forward => {
                smoe_mlp_inference(&p.x, &p.w1, &p.w2, &p.routing, &p.order, &p.cfg, &exec)?;
            }
            BenchPhase::Train => {
                let (mut y, mut ctx) = smoe_mlp_forward(p.x.clone(), &p.w1, &p.w2, &p.routing, &p.order, &p.cfg, &exec)?;
                y.fill(1.0);
                smoe_mlp_backward(&mut ctx, &y, &p.w1, &p.w2)?;
            }
        }
        Ok(())
    })
}

/// Group-copy-and-pad forward. There is no baseline backward, so only the
/// forward phase is supported.
pub fn bench_baseline_mlp(p: &MlpProblem, opts: &RunOptions) -> Result<Measured> {
    ensure!(opts.phase == BenchPhase::Forward, "the padded baseline is forward-only");
    let cfg = BaselineConfig::with_block_size(opts.block_size);
    run_measured(opts, |ledger| {
        let scratch = AllocationLedger::new();
        let l = ledger.unwrap_or(&scratch);
        baseline_grouped_pipeline(&p.x, &p.w1, &p.w2, &p.routing, &p.order, p.cfg.activation, cfg, l)?;
        Ok(())
    })
}

/// Dense MLP `σ(X W) W'` with hidden width `d_ff`.
pub fn bench_dense_mlp(x: &Matrix, d_ff: usize, activation: Activation, seed: u64, opts: &RunOptions) -> Result<Measured> {
    let dm = x.cols();
    let w = WeightMatrix::random(dm, d_ff, seed, (1.0 / dm as f32).sqrt());
    let w_out = WeightMatrix::random(d_ff, dm, seed.wrapping_add(1), (1.0 / d_ff as f32).sqrt());
    let t = x.rows();
    run_measured(opts, |ledger| {
        if let Some(l) = ledger {
            l.record("dense.hidden", t, d_ff, Phase::Forward);
            l.record("dense.output", t, dm, Phase::Forward);
        }
        match opts.phase {
            BenchPhase::Forward => {
                dense_mlp_reference(x, &w, &w_out, activation)?;
            }
            BenchPhase::Train => {
                let mut dy = dense_mlp_reference(x, &w, &w_out, activation)?;
                dy.fill(1.0);
                if let Some(l) = ledger {
                    l.record("dense.grad_hidden", t, d_ff, Phase::Backward);
                    l.record("dense.grad_input", t, dm, Phase::Backward);
                    l.record("dense.grad_w", dm, d_ff, Phase::Backward);
                    l.record("dense.grad_w_out", d_ff, dm, Phase::Backward);
                }
                dense_mlp_reference_backward(x, &w, &w_out, activation, &dy)?;
            }
        }
        Ok(())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GranularityRow {
    pub mode: &'static str,
    pub k: usize,
    #[serde(rename = "E")]
    pub experts: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_expert: usize,
    #[serde(rename = "G")]
    pub granularity: f64,
    #[serde(rename = "T")]
    pub tokens: usize,
    pub median_ns: u64,
    pub p5_ns: u64,
    pub p95_ns: u64,
    pub macs: u64,
    pub peak_bytes: usize,
    pub tokens_per_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparsityRow {
    pub mode: &'static str,
    pub k: usize,
    #[serde(rename = "E")]
    pub experts: usize,
    pub d_model: usize,
    pub d_expert: usize,
    #[serde(rename = "T")]
    pub tokens: usize,
    pub median_ns: u64,
    pub p5_ns: u64,
    pub p95_ns: u64,
    pub macs: u64,
    pub peak_bytes: usize,
    pub tokens_per_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionRow {
    pub mode: &'static str,
    pub k: usize,
    #[serde(rename = "E")]
    pub experts: usize,
    pub h: usize,
    pub h_expert: usize,
    pub d_head: usize,
    pub d_model: usize,
    #[serde(rename = "T")]
    pub tokens: usize,
    pub median_ns: u64,
    pub p5_ns: u64,
    pub p95_ns: u64,
    pub macs: u64,
    pub peak_bytes: usize,
    pub tokens_per_s: f64,
}

/// Granularity sweep parameters. Every `k` yields `E = 8k` experts of
/// width `d_ff / k`, so active and total parameters stay fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct GranularityParams {
    pub d_model: usize,
    pub d_ff: usize,
    pub ks: Vec<usize>,
    pub tokens: usize,
}

impl GranularityParams {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self {
                d_model: 4096,
                d_ff: 8192,
                ks: vec![1, 2, 4, 8, 16],
                tokens: 30 * 2048,
            },
            Preset::Desk => Self {
                d_model: 256,
                d_ff: 512,
                ks: vec![1, 2, 4, 8, 16],
                tokens: 256,
            },
        }
    }

    pub fn configs(&self) -> Result<Vec<(SmoeMlpConfig, DerivedGranularity)>> {
        self.ks
            .iter()
            .map(|&k| {
                let cfg = SmoeMlpConfig::from_active(self.d_model, self.d_ff, k, 8)?;
                let g = DerivedGranularity::new(self.d_ff, cfg.d_expert)?;
                Ok((cfg, g))
            })
            .collect()
    }
}

fn granularity_row(mode: &'static str, cfg: &SmoeMlpConfig, g: &DerivedGranularity, t: usize, m: Option<&Measured>) -> GranularityRow {
    GranularityRow {
        mode,
        k: cfg.k,
        experts: cfg.experts,
        d_model: cfg.d_model,
        d_ff: g.d_ff,
        d_expert: cfg.d_expert,
        granularity: g.granularity,
        tokens: t,
        median_ns: m.map_or(0, |m| m.timing.median_ns),
        p5_ns: m.map_or(0, |m| m.timing.p5_ns),
        p95_ns: m.map_or(0, |m| m.timing.p95_ns),
        macs: m.map_or(0, |m| m.macs),
        peak_bytes: m.map_or(0, |m| m.peak_bytes),
        tokens_per_s: m.map_or(0.0, |m| m.tokens_per_s(t)),
    }
}

/// Rows for the dense reference, then fused and baseline per `k`. With
/// `dry_run` nothing is executed and measurement columns are zero. The
/// baseline is skipped in the train phase.
pub fn sweep_granularity(params: &GranularityParams, opts: &RunOptions, dry_run: bool) -> Result<Vec<GranularityRow>> {
    let configs = params.configs()?;
    let t = params.tokens;
    let mut rows = Vec::new();
    let dense_cfg = SmoeMlpConfig::from_active(params.d_model, params.d_ff, 1, 1)?;
    let dense_g = DerivedGranularity::new(params.d_ff, params.d_ff)?;
    let x = Matrix::random(t, params.d_model, opts.seed, 1.0);
    let dense = (!dry_run)
        .then(|| bench_dense_mlp(&x, params.d_ff, dense_cfg.activation, opts.seed.wrapping_add(7), opts))
        .transpose()?;
    rows.push(granularity_row("dense", &dense_cfg, &dense_g, t, dense.as_ref()));
    for (cfg, g) in configs {
        let problem = (!dry_run)
            .then(|| MlpProblem::new(cfg, t, opts.seed, RoutingPattern::Gate))
            .transpose()?;
        let fused = problem.as_ref().map(|p| bench_fused_mlp(p, opts)).transpose()?;
        rows.push(granularity_row("fused", &cfg, &g, t, fused.as_ref()));
        if opts.phase == BenchPhase::Forward {
            let baseline = problem.as_ref().map(|p| bench_baseline_mlp(p, opts)).transpose()?;
            rows.push(granularity_row("baseline", &cfg, &g, t, baseline.as_ref()));
        }
    }
    Ok(rows)
}

/// Sparsity sweep parameters: `E` fixed, `k` varied, compared against a
/// dense MLP of width `E * d_expert`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityParams {
    pub d_model: usize,
    pub d_expert: usize,
    pub experts: usize,
    pub ks: Vec<usize>,
    pub tokens: usize,
}

impl SparsityParams {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self {
                d_model: 4096,
                d_expert: 1024,
                experts: 64,
                ks: vec![1, 2, 4, 8, 16, 24, 30],
                tokens: 30 * 2048,
            },
            Preset::Desk => Self {
                d_model: 128,
                d_expert: 32,
                experts: 64,
                ks: vec![1, 2, 4, 8, 16, 30, 64],
                tokens: 128,
            },
        }
    }

    pub fn dense_d_ff(&self) -> usize {
        self.experts * self.d_expert
    }
}

fn sparsity_row(mode: &'static str, k: usize, p: &SparsityParams, d_expert: usize, m: Option<&Measured>) -> SparsityRow {
    SparsityRow {
        mode,
        k,
        experts: p.experts,
        d_model: p.d_model,
        d_expert,
        tokens: p.tokens,
        median_ns: m.map_or(0, |m| m.timing.median_ns),
        p5_ns: m.map_or(0, |m| m.timing.p5_ns),
        p95_ns: m.map_or(0, |m| m.timing.p95_ns),
        macs: m.map_or(0, |m| m.macs),
        peak_bytes: m.map_or(0, |m| m.peak_bytes),
        tokens_per_s: m.map_or(0.0, |m| m.tokens_per_s(p.tokens)),
    }
}

/// One dense row (`k = E`, `d_expert = E * d_expert`) followed by a fused
/// row per `k`.
pub fn sweep_sparsity(params: &SparsityParams, opts: &RunOptions, dry_run: bool) -> Result<Vec<SparsityRow>> {
    let mut rows = Vec::new();
    let x = Matrix::random(params.tokens, params.d_model, opts.seed, 1.0);
    let dense = (!dry_run)
        .then(|| bench_dense_mlp(&x, params.dense_d_ff(), Activation::default(), opts.seed.wrapping_add(7), opts))
        .transpose()?;
    rows.push(sparsity_row("dense", params.experts, params, params.dense_d_ff(), dense.as_ref()));
    for &k in &params.ks {
        let cfg = SmoeMlpConfig {
            d_model: params.d_model,
            d_expert: params.d_expert,
            experts: params.experts,
            k,
            activation: Activation::default(),
        };
        cfg.validate()?;
        let fused = (!dry_run)
            .then(|| -> Result<Measured> {
                let p = MlpProblem::new(cfg, params.tokens, opts.seed, RoutingPattern::Gate)?;
                bench_fused_mlp(&p, opts)
            })
            .transpose()?;
        rows.push(sparsity_row("fused", k, params, params.d_expert, fused.as_ref()));
    }
    Ok(rows)
}

/// Attention sweep parameters: `h` active heads split as `h_expert = h / k`
/// over `E = 8k` experts.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub d_model: usize,
    pub d_head: usize,
    pub h: usize,
    pub ks: Vec<usize>,
    pub batch: usize,
    pub seq_len: usize,
}

impl AttentionParams {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Paper => Self {
                d_model: 4096,
                d_head: 128,
                h: 32,
                ks: vec![1, 2, 4, 8],
                batch: 16,
                seq_len: 2048,
            },
            Preset::Desk => Self {
                d_model: 256,
                d_head: 32,
                h: 8,
                ks: vec![1, 2, 4, 8],
                batch: 2,
                seq_len: 128,
            },
        }
    }

    pub fn configs(&self) -> Result<Vec<MomhaConfig>> {
        self.ks
            .iter()
            .map(|&k| Ok(MomhaConfig::from_active_heads(self.d_model, self.d_head, self.h, k, 8, true)?))
            .collect()
    }

    pub fn tokens(&self) -> usize {
        self.batch * self.seq_len
    }
}

pub fn bench_fused_momha(p: &MomhaProblem, opts: &RunOptions) -> Result<Measured> {
    let exec = opts.exec();
    run_measured(opts, |ledger| {
        let exec = with_ledger(&exec, ledger);
        match opts.phase {
            BenchPhase::Forward => {
                momha_inference(&p.x, p.batch, &p.weights, &p.routing, &p.order, &p.cfg, &exec)?;
            }
            BenchPhase::Train => {
                let (mut y, mut ctx) =
                    momha_forward(p.x.clone(), p.batch, &p.weights, &p.routing, &p.order, &p.cfg, &exec)?;
                y.fill(1.0);
                momha_backward(&mut ctx, &y, &p.weights)?;
            }
        }
        Ok(())
    })
}

pub fn bench_baseline_momha(p: &MomhaProblem, opts: &RunOptions) -> Result<Measured> {
    ensure!(opts.phase == BenchPhase::Forward, "the padded baseline is forward-only");
    run_measured(opts, |ledger| {
        let scratch = AllocationLedger::new();
        let l = ledger.unwrap_or(&scratch);
        baseline_momha(&p.x, p.batch, &p.weights, &p.routing, &p.order, &p.cfg, opts.block_size, l)?;
        Ok(())
    })
}

fn attention_row(mode: &'static str, cfg: &MomhaConfig, t: usize, m: Option<&Measured>) -> AttentionRow {
    AttentionRow {
        mode,
        k: cfg.k,
        experts: cfg.experts,
        h: cfg.h,
        h_expert: cfg.h_expert,
        d_head: cfg.d_head,
        d_model: cfg.d_model,
        tokens: t,
        median_ns: m.map_or(0, |m| m.timing.median_ns),
        p5_ns: m.map_or(0, |m| m.timing.p5_ns),
        p95_ns: m.map_or(0, |m| m.timing.p95_ns),
        macs: m.map_or(0, |m| m.macs),
        peak_bytes: m.map_or(0, |m| m.peak_bytes),
        tokens_per_s: m.map_or(0.0, |m| m.tokens_per_s(t)),
    }
}

/// A dense multi-head attention row (one expert holding all `h` heads),
/// then fused and baseline rows per `k`.
pub fn bench_attention(params: &AttentionParams, opts: &RunOptions, dry_run: bool) -> Result<Vec<AttentionRow>> {
    let t = params.tokens();
    let mut rows = Vec::new();
    let dense_cfg = MomhaConfig::new(params.d_model, params.d_head, params.h, 1, 1, true)?;
    let dense = (!dry_run)
        .then(|| -> Result<Measured> {
            let p = MomhaProblem::new(dense_cfg, params.batch, params.seq_len, opts.seed)?;
            bench_fused_momha(&p, opts)
        })
        .transpose()?;
    rows.push(attention_row("dense", &dense_cfg, t, dense.as_ref()));
    for cfg in params.configs()? {
        let problem = (!dry_run)
            .then(|| MomhaProblem::new(cfg, params.batch, params.seq_len, opts.seed))
            .transpose()?;
        let fused = problem.as_ref().map(|p| bench_fused_momha(p, opts)).transpose()?;
        rows.push(attention_row("fused", &cfg, t, fused.as_ref()));
        if opts.phase == BenchPhase::Forward {
            let baseline = problem.as_ref().map(|p| bench_baseline_momha(p, opts)).transpose()?;
            rows.push(attention_row("baseline", &cfg, t, baseline.as_ref()));
        }
    }
    Ok(rows)
}

pub fn write_csv<R: Serialize>(rows: &[R], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Human-readable table. `relative` is each row's throughput divided by the
/// dense row's.
pub fn write_table(
    out: &mut impl Write,
    headers: &[&str],
    cells: &[Vec<String>],
) -> std::io::Result<()> {
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| cells.iter().map(|r| r[c].len()).chain([headers[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cols: Vec<&str>| {
        cols.iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    writeln!(out, "{}", line(headers.to_vec()))?;
    for r in cells {
        writeln!(out, "{}", line(r.iter().map(String::as_str).collect()))?;
    }
    Ok(())
}

fn relative(tps: f64, dense: f64) -> String {
    if dense > 0.0 {
        format!("{:.3}", tps / dense)
    } else {
        "-".into()
    }
}

fn ms(ns: u64) -> String {
    format!("{:.3}", ns as f64 / 1e6)
}

pub fn granularity_table(rows: &[GranularityRow]) -> Vec<Vec<String>> {
    let dense = rows.iter().find(|r| r.mode == "dense").map_or(0.0, |r| r.tokens_per_s);
    rows.iter()
        .map(|r| {
            vec![
                r.mode.to_string(),
                r.k.to_string(),
                r.experts.to_string(),
                r.d_expert.to_string(),
                format!("{}", r.granularity),
                ms(r.median_ns),
                r.macs.to_string(),
                r.peak_bytes.to_string(),
                format!("{:.0}", r.tokens_per_s),
                relative(r.tokens_per_s, dense),
            ]
        })
        .collect()
}

pub const GRANULARITY_TABLE: [&str; 10] =
    ["mode", "k", "E", "d_expert", "G", "median_ms", "macs", "peak_bytes", "tokens/s", "vs_dense"];

pub fn sparsity_table(rows: &[SparsityRow]) -> Vec<Vec<String>> {
    let dense = rows.iter().find(|r| r.mode == "dense").map_or(0.0, |r| r.tokens_per_s);
    rows.iter()
        .map(|r| {
            vec![
                r.mode.to_string(),
                r.k.to_string(),
                r.experts.to_string(),
                r.d_expert.to_string(),
                ms(r.median_ns),
                r.macs.to_string(),
                r.peak_bytes.to_string(),
                format!("{:.0}", r.tokens_per_s),
                relative(r.tokens_per_s, dense),
            ]
        })
        .collect()
}

pub const SPARSITY_TABLE: [&str; 9] = ["mode", "k", "E", "d_expert", "median_ms", "macs", "peak_bytes", "tokens/s", "vs_dense"];

pub fn attention_table(rows: &[AttentionRow]) -> Vec<Vec<String>> {
    let dense = rows.iter().find(|r| r.mode == "dense").map_or(0.0, |r| r.tokens_per_s);
    rows.iter()
        .map(|r| {
            vec![
                r.mode.to_string(),
                r.k.to_string(),
                r.experts.to_string(),
                r.h_expert.to_string(),
                (r.h_expert * r.d_head).to_string(),
                ms(r.median_ns),
                r.macs.to_string(),
                r.peak_bytes.to_string(),
                format!("{:.0}", r.tokens_per_s),
                relative(r.tokens_per_s, dense),
            ]
        })
        .collect()
}

pub const ATTENTION_TABLE: [&str; 10] =
    ["mode", "k", "E", "h_expert", "q_width", "median_ms", "macs", "peak_bytes", "tokens/s", "vs_dense"];
