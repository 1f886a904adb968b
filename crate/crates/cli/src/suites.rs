//! Randomized verification suites run by `scattermoe verify` and by the
//! acceptance tests. Each suite compares the fused library against an
//! independent reference and reports per-case pass counts.

use std::fmt;
use std::time::{Duration, Instant};

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scattermoe_core::kernels::{scatter2scatter, scatter_rows};
use scattermoe_core::layers::{
    momha_backward, momha_forward, momha_inference, smoe_mlp_backward, smoe_mlp_forward, smoe_mlp_inference,
    MomhaWeights,
};
use scattermoe_core::metrics::count_macs;
use scattermoe_core::oracle::{
    baseline_grouped_pipeline, dense_mlp_reference, finite_difference_gradient, fused_pipeline_ledger,
    naive_momha_f64, naive_smoe_mlp, naive_smoe_mlp_f64, padded_bytes, reference_mha, BaselineConfig, Mat64,
    MomhaWeights64,
};
use scattermoe_core::parallel_linear::{backward, forward};
use scattermoe_core::router::compute_grouped_order;
use scattermoe_core::tensor::matmul;
use scattermoe_core::{
    Activation, AllocationLedger, ExecOptions, ExpertTensor, LayoutFlag, LinearSpec, Matrix, MomhaConfig, Phase,
    RoutingResult, SmoeMlpConfig, TileConfig,
};

use crate::problem::{make_routing, MlpProblem, MomhaProblem, RoutingPattern};
use crate::sweeps::{
    bench_attention, sweep_granularity, sweep_sparsity, AttentionParams, GranularityParams, Preset, RunOptions,
    SparsityParams,
};

/// Deliberate corruption used to check that the harness notices failures.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Adds 1e-3 to the first element of every fused MLP output before it is
    /// compared with the oracle.
    PerturbOutput,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    pub failures: Vec<String>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.total > 0 && self.passed == self.total
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<20} {:>4}/{:<4} {} ({:.2}s)",
            self.name,
            self.passed,
            self.total,
            if self.ok() { "ok" } else { "FAILED" },
            self.elapsed.as_secs_f64()
        )?;
        for msg in self.failures.iter().take(5) {
            write!(f, "\n    {msg}")?;
        }
        if self.failures.len() > 5 {
            write!(f, "\n    ... {} more", self.failures.len() - 5)?;
        }
        Ok(())
    }
}

struct Tally {
    name: &'static str,
    passed: usize,
    total: usize,
    failures: Vec<String>,
    start: Instant,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            passed: 0,
            total: 0,
            failures: Vec::new(),
            start: Instant::now(),
        }
    }

    fn check(&mut self, case: impl fmt::Display, outcome: Result<(), String>) {
        self.total += 1;
        match outcome {
            Ok(()) => self.passed += 1,
            Err(e) => self.failures.push(format!("{case}: {e}")),
        }
    }

    fn run(&mut self, case: impl fmt::Display, f: impl FnOnce() -> Result<Result<(), String>>) {
        let outcome = f().unwrap_or_else(|e| Err(format!("error: {e:#}")));
        self.check(case, outcome);
    }

    fn finish(self) -> SuiteReport {
        SuiteReport {
            name: self.name,
            passed: self.passed,
            total: self.total,
            failures: self.failures,
            elapsed: self.start.elapsed(),
        }
    }
}

/// `|got - want| <= rel * |want| + abs` element-wise.
pub fn within(got: &[f32], want: &[f32], rel: f64, abs: f64) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("{} values vs {}", got.len(), want.len()));
    }
    for (i, (&a, &b)) in got.iter().zip(want).enumerate() {
        let (a, b) = (a as f64, b as f64);
        if (a - b).abs() > rel * b.abs() + abs || (a - b).is_nan() {
            return Err(format!("element {i}: {a} vs {b}"));
        }
    }
    Ok(())
}

/// Finite-difference comparison: `|a - n| <= 1e-3 * max(|a|, |n|) + 1e-5`.
pub fn fd_within(analytic: &[f32], numeric: &[f64]) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!("{} values vs {}", analytic.len(), numeric.len()));
    }
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let a = a as f64;
        if (a - n).abs() > 1e-3 * a.abs().max(n.abs()) + 1e-5 || (a - n).is_nan() {
            return Err(format!("element {i}: analytic {a} vs numeric {n}"));
        }
    }
    Ok(())
}

fn identical(got: &Matrix, want: &Matrix) -> Result<(), String> {
    if got.shape() != want.shape() {
        return Err(format!("shape {:?} vs {:?}", got.shape(), want.shape()));
    }
    match got.as_slice().iter().zip(want.as_slice()).position(|(a, b)| a.to_bits() != b.to_bits()) {
        None => Ok(()),
        Some(i) => Err(format!("element {i}: {} vs {}", got.as_slice()[i], want.as_slice()[i])),
    }
}

fn equal<T: PartialEq + fmt::Debug>(got: T, want: T) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{got:?} != {want:?}"))
    }
}

/// A random SMoE MLP configuration drawn from the oracle-equivalence space:
/// `k ∈ {1, 2, 4}`, `E = 8k`, `T ∈ [1, 256]`, `d_model ∈ {8, 64}`,
/// `d_expert ∈ {16, 128}`. Routing patterns cycle so that every third case
/// sends all tokens to one expert and every third leaves one expert empty.
#[derive(Clone, Copy, Debug)]
pub struct MlpCase {
    pub cfg: SmoeMlpConfig,
    pub tokens: usize,
    pub pattern: RoutingPattern,
    pub seed: u64,
}

impl fmt::Display for MlpCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "T={} dm={} de={} E={} k={} {} seed={}",
            self.tokens,
            self.cfg.d_model,
            self.cfg.d_expert,
            self.cfg.experts,
            self.cfg.k,
            self.pattern.name(),
            self.seed
        )
    }
}

pub fn random_mlp_cases(seed: u64, trials: usize) -> Vec<MlpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials)
        .map(|i| {
            let k = [1, 2, 4][rng.random_range(0..3)];
            let cfg = SmoeMlpConfig {
                d_model: [8, 64][rng.random_range(0..2)],
                d_expert: [16, 128][rng.random_range(0..2)],
                experts: 8 * k,
                k,
                activation: Activation::default(),
            };
            MlpCase {
                cfg,
                tokens: rng.random_range(1..=256),
                pattern: RoutingPattern::ALL[i % 3],
                seed: rng.random(),
            }
        })
        .collect()
}

/// Fused training and inference outputs against the per-token oracle at
/// 1e-5 relative / 1e-7 absolute.
pub fn oracle_equivalence(seed: u64, trials: usize, fault: Fault) -> SuiteReport {
    let mut tally = Tally::new("oracle-equivalence");
    let exec = ExecOptions::default();
    for case in random_mlp_cases(seed, trials) {
        tally.run(case, || {
            let p = MlpProblem::new(case.cfg, case.tokens, case.seed, case.pattern)?;
            let want = naive_smoe_mlp(&p.x, &p.w1, &p.w2, &p.routing, p.cfg.activation)?;
            let (mut train, _) = smoe_mlp_forward(p.x.clone(), &p.w1, &p.w2, &p.routing, &p.order, &p.cfg, &exec)?;
            let mut infer = smoe_mlp_inference(&p.x, &p.w1, &p.w2, &p.routing, &p.order, &p.cfg, &exec)?;
            if fault == Fault::PerturbOutput {
                train.as_mut_slice()[0] += 1e-3;
                infer.as_mut_slice()[0] += 1e-3;
            }
            Ok(within(train.as_slice(), want.as_slice(), 1e-5, 1e-7)
                .map_err(|e| format!("training forward {e}"))
                .and(within(infer.as_slice(), want.as_slice(), 1e-5, 1e-7).map_err(|e| format!("inference {e}"))))
        });
    }
    tally.finish()
}

fn f64s(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| v as f64).collect()
}

fn split<'a>(theta: &'a [f64], sizes: &[usize]) -> Vec<&'a [f64]> {
    let mut at = 0;
    sizes
        .iter()
        .map(|&s| {
            at += s;
            &theta[at - s..at]
        })
        .collect()
}

fn dot(y: &Mat64, c: &Matrix) -> f64 {
    y.data.iter().zip(c.as_slice()).map(|(a, &b)| a * b as f64).sum()
}

/// Every gradient of the SMoE MLP (T=12, d_model=8, d_expert=16, E=4, k=2)
/// and of MoMHA (B=2, T=8, d_head=4, h_expert=2, E=3, k=2) against central
/// finite differences of the f64 oracles, for the loss `Σ Y ⊙ C`.
pub fn gradients(seed: u64) -> SuiteReport {
    let mut tally = Tally::new("gradients");
    if let Err(e) = mlp_gradients(seed, &mut tally) {
        tally.check("mlp", Err(format!("{e:#}")));
    }
    if let Err(e) = momha_gradients(seed, &mut tally) {
        tally.check("momha", Err(format!("{e:#}")));
    }
    tally.finish()
}

fn mlp_gradients(seed: u64, tally: &mut Tally) -> Result<()> {
    let cfg = SmoeMlpConfig {
        d_model: 8,
        d_expert: 16,
        experts: 4,
        k: 2,
        activation: Activation::default(),
    };
    let (t, dm, de, e, k) = (12, 8, 16, 4, 2);
    let p = MlpProblem::new(cfg, t, seed, RoutingPattern::Gate)?;
    let c = Matrix::random(t, dm, seed.wrapping_add(11), 1.0);
    let (_, mut ctx) = smoe_mlp_forward(p.x.clone(), &p.w1, &p.w2, &p.routing, &p.order, &cfg, &ExecOptions::default())?;
    let g = smoe_mlp_backward(&mut ctx, &c, &p.w1, &p.w2)?;

    let sizes = [t * dm, e * dm * de, e * de * dm, t * k];
    let theta = [f64s(p.x.as_slice()), f64s(p.w1.as_slice()), f64s(p.w2.as_slice()), f64s(p.routing.weights())].concat();
    let loss = |th: &[f64]| {
        let q = split(th, &sizes);
        let y = naive_smoe_mlp_f64(
            &Mat64::from_slice(t, dm, q[0]),
            &q[1].chunks(dm * de).map(|w| Mat64::from_slice(dm, de, w)).collect::<Vec<_>>(),
            &q[2].chunks(de * dm).map(|w| Mat64::from_slice(de, dm, w)).collect::<Vec<_>>(),
            p.routing.expert_idx(),
            q[3],
            k,
            cfg.activation,
        );
        dot(&y, &c)
    };
    let fd = finite_difference_gradient(loss, &theta, 1e-3);
    let fd = split(&fd, &sizes);
    tally.check("mlp dX", fd_within(g.grad_input.as_slice(), fd[0]));
    tally.check("mlp dW1", fd_within(g.grad_w1.as_slice(), fd[1]));
    tally.check("mlp dW2", fd_within(g.grad_w2.as_slice(), fd[2]));
    tally.check("mlp dp", fd_within(g.grad_routing.as_slice(), fd[3]));
    Ok(())
}

fn momha_gradients(seed: u64, tally: &mut Tally) -> Result<()> {
    let (batch, seq) = (2, 8);
    let cfg = MomhaConfig::new(16, 4, 2, 3, 2, true)?;
    let p = MomhaProblem::new(cfg, batch, seq, seed)?;
    let (t, dm, dout, e, k) = (batch * seq, cfg.d_model, cfg.d_out(), cfg.experts, cfg.k);
    let c = Matrix::random(t, dm, seed.wrapping_add(11), 1.0);
    let (_, mut ctx) =
        momha_forward(p.x.clone(), batch, &p.weights, &p.routing, &p.order, &cfg, &ExecOptions::default())?;
    let g = momha_backward(&mut ctx, &c, &p.weights)?;

    let w = &p.weights;
    let sizes = [t * dm, dm * dout, dm * dout, e * dm * dout, e * dout * dm, t * k];
    let theta = [
        f64s(p.x.as_slice()),
        f64s(w.w_k.as_slice()),
        f64s(w.w_v.as_slice()),
        f64s(w.w_q.as_slice()),
        f64s(w.w_o.as_slice()),
        f64s(p.routing.weights()),
    ]
    .concat();
    let loss = |th: &[f64]| {
        let q = split(th, &sizes);
        let w64 = MomhaWeights64 {
            w_k: Mat64::from_slice(dm, dout, q[1]),
            w_v: Mat64::from_slice(dm, dout, q[2]),
            w_q: q[3].chunks(dm * dout).map(|m| Mat64::from_slice(dm, dout, m)).collect(),
            w_o: q[4].chunks(dout * dm).map(|m| Mat64::from_slice(dout, dm, m)).collect(),
        };
        let y = naive_momha_f64(
            &Mat64::from_slice(t, dm, q[0]),
            batch,
            &w64,
            p.routing.expert_idx(),
            q[5],
            k,
            cfg.d_head,
            cfg.causal,
        );
        dot(&y, &c)
    };
    let fd = finite_difference_gradient(loss, &theta, 1e-3);
    let fd = split(&fd, &sizes);
    tally.check("momha dX", fd_within(g.grad_input.as_slice(), fd[0]));
    tally.check("momha dW_K", fd_within(g.grad_w_k.as_slice(), fd[1]));
    tally.check("momha dW_V", fd_within(g.grad_w_v.as_slice(), fd[2]));
    tally.check("momha dW_Q", fd_within(g.grad_w_q.as_slice(), fd[3]));
    tally.check("momha dW_O", fd_within(g.grad_w_o.as_slice(), fd[4]));
    tally.check("momha dp", fd_within(g.grad_routing.as_slice(), fd[5]));
    Ok(())
}

/// Token `t` picks experts `t, t+1, ..., t+k-1` modulo `E`, which spreads
/// slots as evenly as possible.
fn uniform_routing(tokens: usize, k: usize, experts: usize) -> Result<RoutingResult> {
    let ids = (0..tokens).flat_map(|t| (0..k).map(move |j| (t * k + j) % experts)).collect();
    Ok(RoutingResult::from_assignments(tokens, k, experts, ids, vec![1.0 / k as f32; tokens * k])?)
}

/// MAC counts of every kernel layout and of the whole MLP equal
/// `Σ_e count_e · d_in · d_out` exactly, for balanced and fully skewed
/// assignments with the same number of slots.
pub fn padding_free(seed: u64) -> SuiteReport {
    let mut tally = Tally::new("padding-free");
    let tile = TileConfig::default();
    for (tokens, k, experts, d_in, d_out) in [(24, 2, 6, 8, 12), (37, 1, 8, 5, 3), (50, 4, 32, 16, 9)] {
        let x = Matrix::random(tokens, d_in, seed, 1.0);
        let w = ExpertTensor::random(experts, d_in, d_out, seed.wrapping_add(1), 1.0);
        let skewed = make_routing(&x, k, experts, seed, RoutingPattern::AllToFirst);
        let uniform = uniform_routing(tokens, k, experts).and_then(|r| {
            let o = compute_grouped_order(&r, experts)?;
            Ok((r, o))
        });
        for (name, routing) in [("uniform", uniform), ("skewed", skewed)] {
            tally.run(format!("{name} T={tokens} k={k} E={experts}"), || {
                let (r, o) = routing?;
                let want: u64 = o.bin_counts().iter().map(|&n| (n * d_in * d_out) as u64).sum();
                if want != (tokens * k * d_in * d_out) as u64 {
                    return Ok(Err(format!("closed form {want} is not T·k·d_in·d_out")));
                }
                let xg = scattermoe_core::kernels::group(&x, &o, None, k, None)?;
                for layout in LayoutFlag::ALL {
                    let (input, fan_out) = if layout.grouped_in { (&xg, 1) } else { (&x, k) };
                    let (y, macs) = count_macs(|| scatter2scatter(input, &w, &o, fan_out, layout, &tile));
                    y?;
                    if macs != want {
                        return Ok(Err(format!("{layout:?}: {macs} MACs, expected {want}")));
                    }
                }
                let cfg = SmoeMlpConfig {
                    d_model: d_in,
                    d_expert: d_out,
                    experts,
                    k,
                    activation: Activation::default(),
                };
                let (w1, w2) = cfg.random_weights(seed);
                let exec = ExecOptions::default();
                let (y, macs) = count_macs(|| smoe_mlp_inference(&x, &w1, &w2, &r, &o, &cfg, &exec));
                y?;
                Ok(equal(macs, 2 * want).map_err(|e| format!("mlp MACs {e}")))
            });
        }
    }
    tally.finish()
}

/// For every oracle-equivalence configuration: the fused inference ledger
/// holds no `T·k × d_model` buffer apart from the `T × d_model` output
/// (the two shapes coincide when `k = 1`), its forward peak is below the
/// padded baseline's for block sizes 1, 64 and 128, and the baseline's
/// grouped buffers have exactly the padded closed-form size.
pub fn memory_footprint(seed: u64, trials: usize) -> SuiteReport {
    let mut tally = Tally::new("memory-footprint");
    for case in random_mlp_cases(seed, trials) {
        tally.run(case, || {
            let p = MlpProblem::new(case.cfg, case.tokens, case.seed, case.pattern)?;
            let (t, k, dm, de) = (p.tokens(), p.cfg.k, p.cfg.d_model, p.cfg.d_expert);
            let fused = fused_pipeline_ledger(&p.x, &p.w1, &p.w2, &p.routing, &p.order, &p.cfg, TileConfig::default(), false)?;
            let slot_buffers = fused
                .entries()
                .iter()
                .filter(|e| (e.rows, e.cols) == (t * k, dm) && e.buffer != "mlp.w2.output")
                .count();
            if slot_buffers > 0 {
                return Ok(Err(format!("{slot_buffers} T·k x d_model buffers in the fused forward")));
            }
            let fused_peak = fused.phase_peak(Phase::Forward);
            for block in [1, 64, 128] {
                let l = AllocationLedger::new();
                let cfg = BaselineConfig::with_block_size(block);
                baseline_grouped_pipeline(&p.x, &p.w1, &p.w2, &p.routing, &p.order, p.cfg.activation, cfg, &l)?;
                let base_peak = l.phase_peak(Phase::Forward);
                if fused_peak >= base_peak {
                    return Ok(Err(format!("block {block}: fused peak {fused_peak} >= baseline {base_peak}")));
                }
                let by_hand = |width: usize| -> usize {
                    p.order.bin_counts().iter().map(|&n| n.div_ceil(block) * block * width * 4).sum()
                };
                for (name, width) in [("baseline.grouped_input", dm), ("baseline.hidden", de), ("baseline.grouped_output", dm)] {
                    let bytes = l.entries().into_iter().find(|e| e.buffer == name).map(|e| e.bytes);
                    if bytes != Some(by_hand(width)) || by_hand(width) != padded_bytes(p.order.bin_counts(), block, width) {
                        return Ok(Err(format!("block {block}: {name} is {bytes:?} bytes, expected {}", by_hand(width))));
                    }
                }
            }
            Ok(Ok(()))
        });
    }
    tally.finish()
}

/// ParallelLinear backward with seeded scratch records no new `T·k`-row
/// matrix and matches the non-reusing path bit for bit, in every layout,
/// fan-out and weighting combination.
pub fn buffer_reuse(seed: u64) -> SuiteReport {
    let mut tally = Tally::new("buffer-reuse");
    let (t, k, e, d_in, d_out) = (10, 2, 4, 6, 7);
    let x0 = Matrix::random(t, d_in, seed, 1.0);
    let routing = make_routing(&x0, k, e, seed, RoutingPattern::Gate);
    let w = ExpertTensor::random(e, d_in, d_out, seed.wrapping_add(1), 1.0);
    for layout in LayoutFlag::ALL {
        let fan_outs: &[usize] = if layout.grouped_in { &[1] } else { &[k, 1] };
        for &fan_out in fan_outs {
            for with_p in [false, true] {
                if with_p && layout.grouped_out {
                    continue;
                }
                tally.run(format!("{layout:?} fan_out={fan_out} weighted={with_p}"), || {
                    let (r, o) = routing.as_ref().map_err(|e| anyhow::anyhow!("{e:#}"))?;
                    let p = r.weight_matrix();
                    let rows = if fan_out == k { t } else { t * k };
                    let x = Matrix::random(rows, d_in, seed.wrapping_add(2), 1.0);
                    let spec = LinearSpec::new(fan_out, layout);
                    let p_opt = with_p.then_some(&p);
                    let dy = Matrix::random(if with_p { t } else { t * k }, d_out, seed.wrapping_add(3), 1.0);

                    let ledger = AllocationLedger::new();
                    let exec = ExecOptions::default().with_ledger(ledger.clone());
                    let (_, mut ctx) = forward(x.clone(), &w, o, p_opt, spec, &exec)?;
                    ctx.seed_scratch(Some(Matrix::zeros(t * k, d_out)), Some(Matrix::zeros(t * k, d_in)))?;
                    let reused = backward(&mut ctx, &dy, &w)?;
                    let fresh_rows: Vec<String> = ledger
                        .entries_in(Phase::Backward)
                        .into_iter()
                        .filter(|en| en.rows == t * k)
                        .map(|en| en.buffer)
                        .collect();
                    if !fresh_rows.is_empty() {
                        return Ok(Err(format!("allocated {fresh_rows:?}")));
                    }

                    let (_, mut ctx) = forward(x, &w, o, p_opt, spec, &ExecOptions::default())?;
                    ctx.set_buffer_reuse(false);
                    let fresh = backward(&mut ctx, &dy, &w)?;
                    Ok(identical(&reused.grad_input, &fresh.grad_input)
                        .and(equal(&reused.grad_weight, &fresh.grad_weight))
                        .and(equal(&reused.grad_routing, &fresh.grad_routing)))
                });
            }
        }
    }
    tally.finish()
}

/// Grouped-output scatter2scatter followed by the inverse permutation
/// equals the scattered-output kernel bit for bit.
pub fn layout_consistency(seed: u64, trials: usize) -> SuiteReport {
    let mut tally = Tally::new("layout-consistency");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c61796f7574);
    for _ in 0..trials {
        let k = [1, 2, 4][rng.random_range(0..3)];
        let experts = k + rng.random_range(0..12);
        let tokens = rng.random_range(1..=64);
        let (d_in, d_out) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let pattern = RoutingPattern::ALL[rng.random_range(0..if experts > k { 3 } else { 2 })];
        let s: u64 = rng.random();
        let tile = TileConfig {
            tile_rows: rng.random_range(1..=32),
            tile_cols: rng.random_range(1..=32),
            tile_inner: rng.random_range(1..=32),
            worker_count: rng.random_range(1..=3),
        };
        tally.run(format!("T={tokens} d_in={d_in} d_out={d_out} E={experts} k={k} {} seed={s}", pattern.name()), || {
            let x = Matrix::random(tokens, d_in, s, 1.0);
            let (_, o) = make_routing(&x, k, experts, s, pattern)?;
            let w = ExpertTensor::random(experts, d_in, d_out, s.wrapping_add(1), 1.0);
            let grouped = scatter_rows(&scatter2scatter(&x, &w, &o, k, LayoutFlag::SCATTER_TO_GROUP, &tile)?, &o)?;
            let scattered = scatter2scatter(&x, &w, &o, k, LayoutFlag::SCATTER_TO_SCATTER, &tile)?;
            if let Err(e) = identical(&grouped, &scattered) {
                return Ok(Err(format!("scattered input: {e}")));
            }
            let xg = Matrix::random(tokens * k, d_in, s.wrapping_add(2), 1.0);
            let grouped = scatter_rows(&scatter2scatter(&xg, &w, &o, 1, LayoutFlag::GROUP_TO_GROUP, &tile)?, &o)?;
            let scattered = scatter2scatter(&xg, &w, &o, 1, LayoutFlag::GROUP_TO_SCATTER, &tile)?;
            Ok(identical(&grouped, &scattered).map_err(|e| format!("grouped input: {e}")))
        });
    }
    tally.finish()
}

/// Degenerate configurations reduce to their dense counterparts within
/// 1e-6 absolute.
pub fn reductions(seed: u64) -> SuiteReport {
    let mut tally = Tally::new("reductions");
    let exec = ExecOptions::default();
    for tokens in [1, 7, 33] {
        tally.run(format!("mlp E=1 k=1 T={tokens}"), || {
            let cfg = SmoeMlpConfig {
                d_model: 12,
                d_expert: 20,
                experts: 1,
                k: 1,
                activation: Activation::default(),
            };
            let p = MlpProblem::new(cfg, tokens, seed, RoutingPattern::Gate)?;
            let want = dense_mlp_reference(&p.x, &p.w1.expert_matrix(0), &p.w2.expert_matrix(0), cfg.activation)?;
            let (y, _) = smoe_mlp_forward(p.x.clone(), &p.w1, &p.w2, &p.routing, &p.order, &cfg, &exec)?;
            let yi = smoe_mlp_inference(&p.x, &p.w1, &p.w2, &p.routing, &p.order, &cfg, &exec)?;
            Ok(within(y.as_slice(), want.as_slice(), 0.0, 1e-6).and(within(yi.as_slice(), want.as_slice(), 0.0, 1e-6)))
        });
        tally.run(format!("scatter2scatter identity order E=1 T={tokens}"), || {
            let x = Matrix::random(tokens, 9, seed, 1.0);
            let r = RoutingResult::from_assignments(tokens, 1, 1, vec![0; tokens], vec![1.0; tokens])?;
            let o = compute_grouped_order(&r, 1)?;
            if o.order().iter().enumerate().any(|(i, &s)| i != s) {
                return Ok(Err("order is not the identity".into()));
            }
            let w = ExpertTensor::random(1, 9, 5, seed.wrapping_add(1), 1.0);
            let want = matmul(&x, &w.expert_matrix(0))?;
            for layout in LayoutFlag::ALL {
                let y = scatter2scatter(&x, &w, &o, 1, layout, &TileConfig::default())?;
                if let Err(e) = within(y.as_slice(), want.as_slice(), 0.0, 1e-6) {
                    return Ok(Err(format!("{layout:?}: {e}")));
                }
            }
            Ok(Ok(()))
        });
    }
    for causal in [true, false] {
        tally.run(format!("momha E=1 k=1 causal={causal}"), || {
            let cfg = MomhaConfig::new(16, 4, 4, 1, 1, causal)?;
            let (batch, seq) = (2, 6);
            let weights = MomhaWeights::random(&cfg, seed);
            let x = Matrix::random(batch * seq, 16, seed.wrapping_add(1), 1.0);
            let (routing, order) = make_routing(&x, 1, 1, seed, RoutingPattern::Gate)?;
            let want = reference_mha(
                &x,
                batch,
                &weights.w_q.expert_matrix(0),
                &weights.w_k,
                &weights.w_v,
                &weights.w_o.expert_matrix(0),
                cfg.d_head,
                causal,
            )?;
            let (y, _) = momha_forward(x.clone(), batch, &weights, &routing, &order, &cfg, &exec)?;
            let yi = momha_inference(&x, batch, &weights, &routing, &order, &cfg, &exec)?;
            Ok(within(y.as_slice(), want.as_slice(), 0.0, 1e-6).and(within(yi.as_slice(), want.as_slice(), 0.0, 1e-6)))
        });
    }
    tally.finish()
}

/// Structural derivations of the sweep presets and the MAC identities the
/// sweeps rely on.
pub fn presets(seed: u64) -> SuiteReport {
    let mut tally = Tally::new("presets");
    let quick = RunOptions {
        warmup: 0,
        repeats: 1,
        workers: 1,
        seed,
        ..RunOptions::default()
    };
    tally.run("granularity k=4 derivation", || {
        let params = GranularityParams::preset(Preset::Paper);
        let cfgs = params.configs()?;
        let (cfg, g) = cfgs.iter().find(|(c, _)| c.k == 4).ok_or_else(|| anyhow::anyhow!("no k=4 row"))?;
        Ok(equal((cfg.experts, cfg.d_expert, g.granularity), (32, params.d_ff / 4, 4.0)))
    });
    for preset in [Preset::Paper, Preset::Desk] {
        tally.run(format!("{preset:?} granularity ratios"), || {
            let params = GranularityParams::preset(preset);
            for (cfg, g) in params.configs()? {
                if cfg.experts != 8 * cfg.k || cfg.d_expert * cfg.k != params.d_ff || g.granularity != cfg.k as f64 {
                    return Ok(Err(format!("{cfg:?} {g:?}")));
                }
            }
            Ok(Ok(()))
        });
        tally.run(format!("{preset:?} attention ratios"), || {
            let params = AttentionParams::preset(preset);
            for cfg in params.configs()? {
                if cfg.experts != 8 * cfg.k || cfg.h_expert * cfg.k != params.h {
                    return Ok(Err(format!("{cfg:?}")));
                }
            }
            Ok(Ok(()))
        });
    }
    tally.run("attention k=8 derivation", || {
        let cfgs = AttentionParams::preset(Preset::Paper).configs()?;
        let cfg = cfgs.iter().find(|c| c.k == 8).ok_or_else(|| anyhow::anyhow!("no k=8 row"))?;
        Ok(equal((cfg.h_expert, cfg.experts), (4, 64)))
    });
    tally.run("sparsity k=E and k=1 MAC counts", || {
        let params = SparsityParams {
            d_model: 8,
            d_expert: 4,
            experts: 64,
            ks: vec![1, 64],
            tokens: 6,
        };
        let rows = sweep_sparsity(&params, &quick, false)?;
        let dense = rows[0].macs;
        Ok(equal(rows[2].macs, dense).and(equal(rows[1].macs * 64, dense)))
    });
    tally.run("granularity MACs fixed across k", || {
        let params = GranularityParams {
            d_model: 16,
            d_ff: 64,
            ks: vec![1, 2, 4, 8, 16],
            tokens: 20,
        };
        let want = (2 * params.tokens * params.d_ff * params.d_model) as u64;
        let rows = sweep_granularity(&params, &quick, false)?;
        let macs: Vec<u64> = rows.iter().filter(|r| r.mode != "baseline").map(|r| r.macs).collect();
        Ok(equal(macs.iter().all(|&m| m == want), true).map_err(|_| format!("{macs:?}, expected {want}")))
    });
    tally.run("attention query width shrinks with k", || {
        let params = AttentionParams {
            d_model: 16,
            d_head: 2,
            h: 8,
            ks: vec![1, 2, 4, 8],
            batch: 1,
            seq_len: 4,
        };
        let rows = bench_attention(&params, &quick, true)?;
        let widths: Vec<usize> = rows.iter().filter(|r| r.mode == "fused").map(|r| r.h_expert * r.d_head).collect();
        Ok(equal(widths, vec![16, 8, 4, 2]))
    });
    tally.finish()
}

/// All suites in order.
pub fn run_all(seed: u64, trials: usize, fault: Fault) -> Vec<SuiteReport> {
    vec![
        oracle_equivalence(seed, trials, fault),
        gradients(seed),
        padding_free(seed),
        memory_footprint(seed, trials),
        buffer_reuse(seed),
        layout_consistency(seed, 50),
        reductions(seed),
        presets(seed),
    ]
}
