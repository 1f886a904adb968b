mod common;

use common::{assert_close, assert_fd, f64s, routing, split, Pattern};
use proptest::prelude::*;
use scattermoe_core::layers::{
    momha_backward, momha_forward, momha_inference, smoe_mlp_backward, smoe_mlp_forward, smoe_mlp_inference,
    MomhaWeights,
};
use scattermoe_core::oracle::{
    dense_mlp_reference, finite_difference_gradient, naive_momha, naive_momha_f64, naive_smoe_mlp, naive_smoe_mlp_f64,
    reference_mha, Mat64, MomhaWeights64,
};
use scattermoe_core::router::compute_grouped_order;
use scattermoe_core::{
    Activation, ExecOptions, ExpertTensor, Matrix, MomhaConfig, RoutingResult, SmoeMlpConfig, TileConfig,
};

fn mlp_config(d_model: usize, d_expert: usize, experts: usize, k: usize) -> SmoeMlpConfig {
    SmoeMlpConfig {
        d_model,
        d_expert,
        experts,
        k,
        activation: Activation::Gelu,
    }
}

#[test]
fn mlp_matches_per_token_oracle() {
    let cfg = mlp_config(8, 16, 4, 2);
    let (r, o) = routing(16, 2, 4, 1, Pattern::Gate);
    let (w1, w2) = cfg.random_weights(2);
    let x = Matrix::random(16, 8, 3, 1.0);
    let want = naive_smoe_mlp(&x, &w1, &w2, &r, cfg.activation).unwrap();
    let exec = ExecOptions::default();
    let (y, _) = smoe_mlp_forward(x.clone(), &w1, &w2, &r, &o, &cfg, &exec).unwrap();
    assert_close(y.as_slice(), want.as_slice(), 1e-5, 1e-7);
    let y = smoe_mlp_inference(&x, &w1, &w2, &r, &o, &cfg, &exec).unwrap();
    assert_close(y.as_slice(), want.as_slice(), 1e-5, 1e-7);
}

#[test]
fn single_expert_mlp_is_a_dense_mlp() {
    let cfg = mlp_config(6, 10, 1, 1);
    let (r, o) = routing(9, 1, 1, 4, Pattern::Gate);
    let (w1, w2) = cfg.random_weights(5);
    let x = Matrix::random(9, 6, 6, 1.0);
    let (y, _) = smoe_mlp_forward(x.clone(), &w1, &w2, &r, &o, &cfg, &ExecOptions::default()).unwrap();
    let want = dense_mlp_reference(&x, &w1.expert_matrix(0), &w2.expert_matrix(0), cfg.activation).unwrap();
    assert_close(y.as_slice(), want.as_slice(), 1e-6, 1e-6);
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let (t, dm, de, e, k) = (12, 8, 16, 4, 2);
    let cfg = mlp_config(dm, de, e, k);
    let (r, o) = routing(t, k, e, 7, Pattern::Gate);
    let (w1, w2) = cfg.random_weights(8);
    let x = Matrix::random(t, dm, 9, 1.0);
    let c = Matrix::random(t, dm, 10, 1.0);
    let (_, mut ctx) = smoe_mlp_forward(x.clone(), &w1, &w2, &r, &o, &cfg, &ExecOptions::default()).unwrap();
    let g = smoe_mlp_backward(&mut ctx, &c, &w1, &w2).unwrap();

    let sizes = [t * dm, e * dm * de, e * de * dm, t * k];
    let theta = [f64s(x.as_slice()), f64s(w1.as_slice()), f64s(w2.as_slice()), f64s(r.weights())].concat();
    let loss = |th: &[f64]| {
        let p = split(th, &sizes);
        let y = naive_smoe_mlp_f64(
            &Mat64::from_slice(t, dm, p[0]),
            &p[1].chunks(dm * de).map(|w| Mat64::from_slice(dm, de, w)).collect::<Vec<_>>(),
            &p[2].chunks(de * dm).map(|w| Mat64::from_slice(de, dm, w)).collect::<Vec<_>>(),
            r.expert_idx(),
            p[3],
            k,
            cfg.activation,
        );
        y.data.iter().zip(c.as_slice()).map(|(a, &b)| a * b as f64).sum::<f64>()
    };
    let fd = finite_difference_gradient(loss, &theta, 1e-3);
    let fd = split(&fd, &sizes);
    assert_fd(g.grad_input.as_slice(), fd[0], "dX");
    assert_fd(g.grad_w1.as_slice(), fd[1], "dW1");
    assert_fd(g.grad_w2.as_slice(), fd[2], "dW2");
    assert_fd(g.grad_routing.as_slice(), fd[3], "dp");
}

#[test]
fn mlp_backward_is_independent_of_tiling() {
    let cfg = mlp_config(8, 12, 6, 3);
    let (r, o) = routing(20, 3, 6, 11, Pattern::Gate);
    let (w1, w2) = cfg.random_weights(12);
    let x = Matrix::random(20, 8, 13, 1.0);
    let dy = Matrix::random(20, 8, 14, 1.0);
    let run = |tile: TileConfig| {
        let exec = ExecOptions::default().with_tile(tile);
        let (y, mut ctx) = smoe_mlp_forward(x.clone(), &w1, &w2, &r, &o, &cfg, &exec).unwrap();
        (y, smoe_mlp_backward(&mut ctx, &dy, &w1, &w2).unwrap())
    };
    let (y0, g0) = run(TileConfig::default());
    let odd = TileConfig {
        tile_rows: 3,
        tile_cols: 5,
        tile_inner: 2,
        worker_count: 2,
    };
    let (y1, g1) = run(odd);
    assert_eq!(y0, y1);
    assert_eq!(g0.grad_input, g1.grad_input);
    assert_eq!(g0.grad_w1, g1.grad_w1);
    assert_eq!(g0.grad_w2, g1.grad_w2);
}

fn momha_case() -> (MomhaConfig, MomhaWeights, RoutingResult, scattermoe_core::GroupedOrder, Matrix) {
    let cfg = MomhaConfig::new(16, 4, 2, 3, 2, true).unwrap();
    let w = MomhaWeights::random(&cfg, 20);
    let (r, o) = routing(16, 2, 3, 21, Pattern::Gate);
    let x = Matrix::random(16, 16, 22, 1.0);
    (cfg, w, r, o, x)
}

#[test]
fn momha_matches_slot_by_slot_oracle() {
    let (cfg, w, r, o, x) = momha_case();
    let want = naive_momha(&x, 2, &w, &r, &cfg).unwrap();
    let exec = ExecOptions::default();
    let (y, _) = momha_forward(x.clone(), 2, &w, &r, &o, &cfg, &exec).unwrap();
    assert_close(y.as_slice(), want.as_slice(), 1e-5, 1e-7);
    let y = momha_inference(&x, 2, &w, &r, &o, &cfg, &exec).unwrap();
    assert_close(y.as_slice(), want.as_slice(), 1e-5, 1e-7);
}

#[test]
fn momha_gradients_match_finite_differences() {
    let (cfg, w, r, o, x) = momha_case();
    let (t, dm, dout, e, k) = (16, cfg.d_model, cfg.d_out(), cfg.experts, cfg.k);
    let c = Matrix::random(t, dm, 23, 1.0);
    let (_, mut ctx) = momha_forward(x.clone(), 2, &w, &r, &o, &cfg, &ExecOptions::default()).unwrap();
    let g = momha_backward(&mut ctx, &c, &w).unwrap();

    let sizes = [t * dm, dm * dout, dm * dout, e * dm * dout, e * dout * dm, t * k];
    let theta = [
        f64s(x.as_slice()),
        f64s(w.w_k.as_slice()),
        f64s(w.w_v.as_slice()),
        f64s(w.w_q.as_slice()),
        f64s(w.w_o.as_slice()),
        f64s(r.weights()),
    ]
    .concat();
    let loss = |th: &[f64]| {
        let p = split(th, &sizes);
        let w64 = MomhaWeights64 {
            w_k: Mat64::from_slice(dm, dout, p[1]),
            w_v: Mat64::from_slice(dm, dout, p[2]),
            w_q: p[3].chunks(dm * dout).map(|m| Mat64::from_slice(dm, dout, m)).collect(),
            w_o: p[4].chunks(dout * dm).map(|m| Mat64::from_slice(dout, dm, m)).collect(),
        };
        let y = naive_momha_f64(
            &Mat64::from_slice(t, dm, p[0]),
            2,
            &w64,
            r.expert_idx(),
            p[5],
            k,
            cfg.d_head,
            cfg.causal,
        );
        y.data.iter().zip(c.as_slice()).map(|(a, &b)| a * b as f64).sum::<f64>()
    };
    let fd = finite_difference_gradient(loss, &theta, 1e-3);
    let fd = split(&fd, &sizes);
    assert_fd(g.grad_input.as_slice(), fd[0], "dX");
    assert_fd(g.grad_w_k.as_slice(), fd[1], "dW_K");
    assert_fd(g.grad_w_v.as_slice(), fd[2], "dW_V");
    assert_fd(g.grad_w_q.as_slice(), fd[3], "dW_Q");
    assert_fd(g.grad_w_o.as_slice(), fd[4], "dW_O");
    assert_fd(g.grad_routing.as_slice(), fd[5], "dp");
}

#[test]
fn single_expert_momha_is_dense_multi_head_attention() {
    for causal in [true, false] {
        let cfg = MomhaConfig::new(12, 3, 4, 1, 1, causal).unwrap();
        let w = MomhaWeights::random(&cfg, 24);
        let (r, o) = routing(10, 1, 1, 25, Pattern::Gate);
        let x = Matrix::random(10, 12, 26, 1.0);
        let (y, _) = momha_forward(x.clone(), 2, &w, &r, &o, &cfg, &ExecOptions::default()).unwrap();
        let want =
            reference_mha(&x, 2, &w.w_q.expert_matrix(0), &w.w_k, &w.w_v, &w.w_o.expert_matrix(0), 3, causal).unwrap();
        assert_close(y.as_slice(), want.as_slice(), 1e-6, 1e-6);
    }
}

#[test]
fn routing_everything_to_one_expert_uses_its_projections() {
    let cfg = MomhaConfig::new(8, 2, 2, 4, 1, true).unwrap();
    let w = MomhaWeights::random(&cfg, 27);
    let r = RoutingResult::from_assignments(6, 1, 4, vec![2; 6], vec![1.0; 6]).unwrap();
    let o = compute_grouped_order(&r, 4).unwrap();
    let x = Matrix::random(6, 8, 28, 1.0);
    let (y, _) = momha_forward(x.clone(), 1, &w, &r, &o, &cfg, &ExecOptions::default()).unwrap();
    let want = reference_mha(&x, 1, &w.w_q.expert_matrix(2), &w.w_k, &w.w_v, &w.w_o.expert_matrix(2), 2, true).unwrap();
    assert_close(y.as_slice(), want.as_slice(), 1e-6, 1e-6);
}

#[test]
fn single_expert_momha_backward_matches_dense_gradients() {
    // with E = 1 and k = 1 the expert path is a dense MHA, so its
    // gradients are those of the dense f64 reference
    let cfg = MomhaConfig::new(6, 2, 2, 1, 1, true).unwrap();
    let w = MomhaWeights::random(&cfg, 29);
    let (r, o) = routing(6, 1, 1, 30, Pattern::Gate);
    let x = Matrix::random(6, 6, 31, 1.0);
    let c = Matrix::random(6, 6, 32, 1.0);
    let (_, mut ctx) = momha_forward(x.clone(), 2, &w, &r, &o, &cfg, &ExecOptions::default()).unwrap();
    let g = momha_backward(&mut ctx, &c, &w).unwrap();
    let dout = cfg.d_out();
    let sizes = [36, 6 * dout, 6 * dout, 6 * dout, dout * 6];
    let theta = [
        f64s(x.as_slice()),
        f64s(w.w_q.as_slice()),
        f64s(w.w_k.as_slice()),
        f64s(w.w_v.as_slice()),
        f64s(w.w_o.as_slice()),
    ]
    .concat();
    let loss = |th: &[f64]| {
        let p = split(th, &sizes);
        let to32 = |s: &[f64]| s.iter().map(|&v| v as f32).collect::<Vec<_>>();
        let wm = |s: &[f64], a, b| scattermoe_core::WeightMatrix::from_vec(a, b, to32(s)).unwrap();
        let xm = Matrix::from_vec(6, 6, to32(p[0])).unwrap();
        let y = reference_mha(&xm, 2, &wm(p[1], 6, dout), &wm(p[2], 6, dout), &wm(p[3], 6, dout), &wm(p[4], dout, 6), 2, true)
            .unwrap();
        y.as_slice().iter().zip(c.as_slice()).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>()
    };
    // the reference rounds to f32, so use a wider step
    let fd = finite_difference_gradient(loss, &theta, 1e-2);
    let fd = split(&fd, &sizes);
    let loose = |a: &[f32], n: &[f64], what: &str| {
        for (i, (&a, &n)) in a.iter().zip(n).enumerate() {
            let a = a as f64;
            assert!((a - n).abs() <= 1e-2 * a.abs().max(n.abs()) + 1e-3, "{what}[{i}]: {a} vs {n}");
        }
    };
    loose(g.grad_input.as_slice(), fd[0], "dX");
    loose(g.grad_w_q.as_slice(), fd[1], "dW_Q");
    loose(g.grad_w_k.as_slice(), fd[2], "dW_K");
    loose(g.grad_w_v.as_slice(), fd[3], "dW_V");
    loose(g.grad_w_o.as_slice(), fd[4], "dW_O");
}

/// Renames experts by `perm` in the routing and in every expert tensor.
fn relabel(r: &RoutingResult, perm: &[usize], tensors: &[&ExpertTensor]) -> (RoutingResult, Vec<ExpertTensor>) {
    let ids = r.expert_idx().iter().map(|&e| perm[e]).collect();
    let r2 = RoutingResult::from_assignments(r.tokens(), r.k(), r.experts(), ids, r.weights().to_vec()).unwrap();
    let moved = tensors
        .iter()
        .map(|w| {
            let mut out = ExpertTensor::zeros(w.experts(), w.d_in(), w.d_out());
            for (e, &to) in perm.iter().enumerate() {
                out.expert_mut(to).copy_from_slice(w.expert(e));
            }
            out
        })
        .collect();
    (r2, moved)
}

#[test]
fn momha_is_invariant_to_expert_relabeling() {
    let (cfg, w, r, o, x) = momha_case();
    let exec = ExecOptions::default();
    let (y, _) = momha_forward(x.clone(), 2, &w, &r, &o, &cfg, &exec).unwrap();
    let (r2, moved) = relabel(&r, &[2, 0, 1], &[&w.w_q, &w.w_o]);
    let w2 = MomhaWeights {
        w_q: moved[0].clone(),
        w_o: moved[1].clone(),
        ..w.clone()
    };
    let o2 = compute_grouped_order(&r2, cfg.experts).unwrap();
    assert_ne!(o.order(), o2.order());
    let (y2, _) = momha_forward(x, 2, &w2, &r2, &o2, &cfg, &exec).unwrap();
    assert_eq!(y, y2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mlp_matches_oracle_under_any_routing(
        seed in any::<u64>(),
        k_pow in 0u32..3,
        tokens in 1usize..64,
        pattern in 0usize..3,
        d_model in prop::sample::select(vec![4usize, 8, 12]),
        d_expert in prop::sample::select(vec![3usize, 16]),
    ) {
        let k = 1usize << k_pow;
        let experts = 8 * k;
        let pattern = [Pattern::Gate, Pattern::AllToFirst, Pattern::LastEmpty][pattern];
        let cfg = mlp_config(d_model, d_expert, experts, k);
        let (r, o) = routing(tokens, k, experts, seed, pattern);
        let (w1, w2) = cfg.random_weights(seed.wrapping_add(1));
        let x = Matrix::random(tokens, d_model, seed.wrapping_add(2), 1.0);
        let want = naive_smoe_mlp(&x, &w1, &w2, &r, cfg.activation).unwrap();
        let y = smoe_mlp_inference(&x, &w1, &w2, &r, &o, &cfg, &ExecOptions::default()).unwrap();
        for (a, b) in y.as_slice().iter().zip(want.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-5 * b.abs() + 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn mlp_is_invariant_to_expert_relabeling(seed in any::<u64>(), tokens in 1usize..24) {
        let cfg = mlp_config(4, 6, 4, 2);
        let (r, o) = routing(tokens, 2, 4, seed, Pattern::Gate);
        let (w1, w2) = cfg.random_weights(seed ^ 1);
        let x = Matrix::random(tokens, 4, seed ^ 2, 1.0);
        let exec = ExecOptions::default();
        let y = smoe_mlp_inference(&x, &w1, &w2, &r, &o, &cfg, &exec).unwrap();
        let (r2, moved) = relabel(&r, &[3, 1, 0, 2], &[&w1, &w2]);
        let o2 = compute_grouped_order(&r2, 4).unwrap();
        let y2 = smoe_mlp_inference(&x, &moved[0], &moved[1], &r2, &o2, &cfg, &exec).unwrap();
        // the fused sum visits a token's experts in bin order, so only the
        // final rounding may differ
        for (a, b) in y.as_slice().iter().zip(y2.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-6 * b.abs() + 1e-9, "{a} vs {b}");
        }
        let (t1, _) = smoe_mlp_forward(x.clone(), &w1, &w2, &r, &o, &cfg, &exec).unwrap();
        let (t2, _) = smoe_mlp_forward(x, &moved[0], &moved[1], &r2, &o2, &cfg, &exec).unwrap();
        prop_assert_eq!(t1, t2);
    }
}
