use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use scattermoe_bench::{gated_routing, mlp_config};
use scattermoe_core::layers::{momha_inference, smoe_mlp_backward, smoe_mlp_forward, smoe_mlp_inference, MomhaWeights};
use scattermoe_core::oracle::{baseline_grouped_pipeline, BaselineConfig};
use scattermoe_core::{AllocationLedger, ExecOptions, Matrix, MomhaConfig};

fn mlp_granularity(c: &mut Criterion) {
    let (t, dm, d_ff) = (256, 128, 256);
    let x = Matrix::random(t, dm, 1, 1.0);
    let exec = ExecOptions::default();
    let mut g = c.benchmark_group("smoe_mlp");
    g.sample_size(20);
    for k in [1, 4, 16] {
        let cfg = mlp_config(dm, d_ff, k);
        let (w1, w2) = cfg.random_weights(2);
        let (routing, order) = gated_routing(&x, k, cfg.experts, 3);
        g.bench_with_input(BenchmarkId::new("inference", k), &k, |b, _| {
            b.iter(|| smoe_mlp_inference(&x, &w1, &w2, &routing, &order, &cfg, &exec).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("train", k), &k, |b, _| {
            b.iter(|| {
                let (mut y, mut ctx) = smoe_mlp_forward(x.clone(), &w1, &w2, &routing, &order, &cfg, &exec).unwrap();
                y.fill(1.0);
                smoe_mlp_backward(&mut ctx, &y, &w1, &w2).unwrap()
            })
        });
        g.bench_with_input(BenchmarkId::new("padded_baseline", k), &k, |b, _| {
            b.iter(|| {
                let ledger = AllocationLedger::new();
                baseline_grouped_pipeline(&x, &w1, &w2, &routing, &order, cfg.activation, BaselineConfig::default(), &ledger)
                    .unwrap()
            })
        });
    }
    g.finish();
}

fn momha(c: &mut Criterion) {
    let (batch, seq, dm, d_head, h) = (2, 64, 128, 16, 8);
    let x = Matrix::random(batch * seq, dm, 1, 1.0);
    let exec = ExecOptions::default();
    let mut g = c.benchmark_group("momha");
    g.sample_size(20);
    for k in [1, 2, 8] {
        let cfg = MomhaConfig::from_active_heads(dm, d_head, h, k, 8, true).unwrap();
        let weights = MomhaWeights::random(&cfg, 2);
        let (routing, order) = gated_routing(&x, k, cfg.experts, 3);
        g.bench_with_input(BenchmarkId::new("inference", k), &k, |b, _| {
            b.iter(|| momha_inference(&x, batch, &weights, &routing, &order, &cfg, &exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, mlp_granularity, momha);
criterion_main!(benches);
