use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use scattermoe_cli::problem::{MlpProblem, RoutingPattern};
use scattermoe_cli::suites::{run_all, Fault};
use scattermoe_cli::sweeps::{
    attention_table, bench_attention, granularity_table, sparsity_table, sweep_granularity, sweep_sparsity,
    write_csv, write_table, AttentionParams, BenchPhase, GranularityParams, Preset, RunOptions, SparsityParams,
    ATTENTION_TABLE, GRANULARITY_TABLE, SPARSITY_TABLE,
};
use scattermoe_cli::LedgerReport;
use scattermoe_core::oracle::BaselineConfig;
use scattermoe_core::{SmoeMlpConfig, TileConfig};

/// Padding-free SMoE kernels: verification and CPU benchmarks.
#[derive(Parser)]
#[command(name = "scattermoe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized oracle, gradient and memory suites.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random configurations for the oracle and memory suites.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Vary granularity at fixed active parameters (E = 8k, d_expert = d_ff / k).
    SweepGranularity(SweepArgs),
    /// Vary k at fixed E against a dense MLP of width E * d_expert.
    SweepSparsity(SweepArgs),
    /// Mixture of multi-head attention against dense attention and the padded baseline.
    BenchAttention(SweepArgs),
    /// Print the allocation ledgers of one SMoE MLP configuration.
    Ledger(SweepArgs),
}

#[derive(Args, Clone)]
struct SweepArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    /// Expert width; only used by the sparsity sweep and `ledger`.
    #[arg(long)]
    d_expert: Option<usize>,
    /// Comma-separated list of k values.
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, env = "SCATTERMLP_WORKERS")]
    workers: Option<usize>,
    /// Padding block of the grouped-copy baseline.
    #[arg(long, default_value_t = 128)]
    block_size: usize,
    #[arg(long, value_enum, default_value_t = BenchPhase::Forward)]
    phase: BenchPhase,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Print the derived configurations without running anything.
    #[arg(long)]
    dry_run: bool,
}

impl SweepArgs {
    fn run_options(&self) -> RunOptions {
        RunOptions {
            warmup: self.warmup,
            repeats: self.repeats,
            workers: self.workers.unwrap_or(TileConfig::default().worker_count),
            block_size: self.block_size,
            seed: self.seed,
            phase: self.phase,
        }
    }

    fn granularity(&self) -> GranularityParams {
        let mut p = GranularityParams::preset(self.preset);
        p.d_model = self.d_model.unwrap_or(p.d_model);
        p.d_ff = self.d_ff.unwrap_or(p.d_ff);
        p.tokens = self.tokens.unwrap_or(p.tokens);
        if let Some(k) = &self.k {
            p.ks = k.clone();
        }
        p
    }

    fn sparsity(&self) -> SparsityParams {
        let mut p = SparsityParams::preset(self.preset);
        p.d_model = self.d_model.unwrap_or(p.d_model);
        p.d_expert = self.d_expert.unwrap_or(p.d_expert);
        p.experts = self.experts.unwrap_or(p.experts);
        p.tokens = self.tokens.unwrap_or(p.tokens);
        if let Some(k) = &self.k {
            p.ks = k.clone();
        }
        p
    }

    fn attention(&self) -> AttentionParams {
        let mut p = AttentionParams::preset(self.preset);
        p.d_model = self.d_model.unwrap_or(p.d_model);
        if let Some(t) = self.tokens {
            p.seq_len = t.div_ceil(p.batch);
        }
        if let Some(k) = &self.k {
            p.ks = k.clone();
        }
        p
    }
}

fn emit<R: Serialize>(args: &SweepArgs, rows: &[R], headers: &[&str], table: Vec<Vec<String>>) -> Result<()> {
    write_table(&mut io::stdout().lock(), headers, &table)?;
    if let Some(path) = &args.csv {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_csv(rows, file)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn verify(seed: u64, trials: usize, inject_fault: bool) -> bool {
    let start = Instant::now();
    let fault = if inject_fault { Fault::PerturbOutput } else { Fault::None };
    let reports = run_all(seed, trials, fault);
    let mut out = io::stdout().lock();
    for r in &reports {
        let _ = writeln!(out, "{r}");
    }
    let ok = reports.iter().all(|r| r.ok());
    let _ = writeln!(
        out,
        "{} in {:.1}s",
        if ok { "all suites passed" } else { "verification FAILED" },
        start.elapsed().as_secs_f64()
    );
    ok
}

fn ledger(args: &SweepArgs) -> Result<()> {
    let k = args.k.as_ref().and_then(|k| k.first().copied()).unwrap_or(2);
    let d_model = args.d_model.unwrap_or(64);
    let cfg = SmoeMlpConfig {
        d_model,
        d_expert: args.d_expert.or(args.d_ff.map(|f| f / k)).unwrap_or(2 * d_model),
        experts: args.experts.unwrap_or(8 * k),
        k,
        activation: Default::default(),
    };
    cfg.validate()?;
    let tokens = args.tokens.unwrap_or(256);
    println!(
        "T={tokens} d_model={} d_expert={} E={} k={} block_size={}",
        cfg.d_model, cfg.d_expert, cfg.experts, cfg.k, args.block_size
    );
    if args.dry_run {
        return Ok(());
    }
    let problem = MlpProblem::new(cfg, tokens, args.seed, RoutingPattern::Gate)?;
    let tile = TileConfig::default().with_workers(args.run_options().workers);
    let report = LedgerReport::new(&problem, tile, BaselineConfig::with_block_size(args.block_size))?;
    print!("{}", report.summary());
    match &args.csv {
        Some(path) => std::fs::write(path, report.to_csv()).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Verify {
            seed,
            trials,
            inject_fault,
        } => return Ok(verify(seed, trials, inject_fault)),
        Command::SweepGranularity(args) => {
            let rows = sweep_granularity(&args.granularity(), &args.run_options(), args.dry_run)?;
            let table = granularity_table(&rows);
            emit(&args, &rows, &GRANULARITY_TABLE, table)?;
        }
        Command::SweepSparsity(args) => {
            let rows = sweep_sparsity(&args.sparsity(), &args.run_options(), args.dry_run)?;
            let table = sparsity_table(&rows);
            emit(&args, &rows, &SPARSITY_TABLE, table)?;
        }
        Command::BenchAttention(args) => {
            let rows = bench_attention(&args.attention(), &args.run_options(), args.dry_run)?;
            let table = attention_table(&rows);
            emit(&args, &rows, &ATTENTION_TABLE, table)?;
        }
        Command::Ledger(args) => ledger(&args)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
