use fian_core::config::ModelConfig;
use fian_core::encoders::{QueryRep, VideoRep};
use fian_core::fusion::{Fusion, FusionMode, QueryProjection};
use fian_core::nn::Init;
use fian_numerics::{Graph, ParamStore, Session, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [FusionMode; 6] =
    [FusionMode::Full, FusionMode::QvOnly, FusionMode::VqOnly, FusionMode::VqNoQuery, FusionMode::Concat, FusionMode::Matrix];

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![r, c], |_| rng.gen_range(-1.0..1.0))
}

fn build(cfg: &ModelConfig, seed: u64) -> (Fusion, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let f = Fusion::new(&mut Init::new(&mut store, seed), cfg).unwrap();
    (f, store)
}

/// Query with `valid` real rows (the rest zero) and a video, both random.
fn inputs(cfg: &ModelConfig, valid: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = random(&mut rng, cfg.max_n_q, cfg.d_h);
    q.data_mut()[valid * cfg.d_h..].iter_mut().for_each(|x| *x = 0.0);
    (q, random(&mut rng, cfg.n_v, cfg.d_h))
}

fn reps<'g>(s: &Session<'g, '_, f64>, q: &Tensor<f64>, v: &Tensor<f64>, valid: usize) -> (QueryRep<'g, f64>, VideoRep<'g, f64>) {
    (QueryRep { h: s.input(q.clone()), valid }, VideoRep { h: s.input(v.clone()), duration: 1.0 })
}

#[test]
fn branch_shapes_and_determinism() {
    let cfg = ModelConfig::tiny();
    let (f, store) = build(&cfg, 1);
    let (q, v) = inputs(&cfg, 3, 2);
    let run = || {
        let g = Graph::new();
        let s = Session::frozen(&g, &store);
        let (qr, vr) = reps(&s, &q, &v, 3);
        let b = f.branches(&s, &qr, &vr).unwrap();
        let shapes = [b.q1, b.v1, b.v2, b.q2].map(|x| x.unwrap().shape());
        assert_eq!(shapes, [vec![4, 8], vec![8, 8], vec![8, 8], vec![4, 8]]);
        [b.q1, b.v1, b.v2, b.q2].map(|x| x.unwrap().to_tensor())
    };
    assert_eq!(run(), run());
}

#[test]
fn v1_depends_on_query_path() {
    let cfg = ModelConfig::tiny();
    let (f, store) = build(&cfg, 3);
    let (q, v) = inputs(&cfg, 4, 4);
    let mut q2 = q.clone();
    q2.data_mut()[5] += 0.5;
    let v1 = |q: &Tensor<f64>| {
        let g = Graph::new();
        let s = Session::frozen(&g, &store);
        let (qr, vr) = reps(&s, q, &v, 4);
        f.qv_branch(&s, &qr, &vr).unwrap().1.to_tensor()
    };
    assert!(v1(&q).max_abs_diff(&v1(&q2)) > 1e-6);
}

#[test]
fn padded_query_rows_do_not_leak() {
    let cfg = ModelConfig::tiny();
    let (f, store) = build(&cfg, 5);
    let (q, v) = inputs(&cfg, 2, 6);
    let mut noisy = q.clone();
    noisy.data_mut()[2 * cfg.d_h..].iter_mut().for_each(|x| *x = 3.0);
    let fused = |q: &Tensor<f64>| {
        let g = Graph::new();
        let s = Session::frozen(&g, &store);
        let (qr, vr) = reps(&s, q, &v, 2);
        let b = f.branches(&s, &qr, &vr).unwrap();
        (b.v1.unwrap().to_tensor(), b.v2.unwrap().to_tensor())
    };
    let (a, b) = (fused(&q), fused(&noisy));
    assert!(a.0.max_abs_diff(&b.0) < 1e-12);
    assert!(a.1.max_abs_diff(&b.1) < 1e-12);
}

#[test]
fn branches_coincide_for_shared_parameters_on_square_inputs() {
    let cfg = ModelConfig { max_n_q: 8, ..ModelConfig::tiny() };
    let (f, mut store) = build(&cfg, 7);
    // copy the first encoder's values into the other three
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).filter(|n| n.starts_with("fusion.qv.query.")).collect();
    for name in names {
        let value = store.value(store.id(&name).unwrap()).clone();
        for other in ["fusion.qv.video.", "fusion.vq.video.", "fusion.vq.query."] {
            let id = store.id(&name.replace("fusion.qv.query.", other)).unwrap();
            *store.value_mut(id) = value.clone();
        }
    }
    let x = random(&mut ChaCha8Rng::seed_from_u64(8), 8, 8);
    let g = Graph::new();
    let s = Session::frozen(&g, &store);
    let (qr, vr) = reps(&s, &x, &x, 8);
    let b = f.branches(&s, &qr, &vr).unwrap();
    assert!(b.q1.unwrap().to_tensor().max_abs_diff(&b.v2.unwrap().to_tensor()) < 1e-12);
    assert!(b.v1.unwrap().to_tensor().max_abs_diff(&b.q2.unwrap().to_tensor()) < 1e-12);
}

fn projection(n_v: usize, n_q: usize) -> (QueryProjection, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let p = QueryProjection::new(&mut Init::new(&mut store, 9), "p", n_v, n_q).unwrap();
    (p, store)
}

#[test]
fn averaging_projection_repeats_mean_query() {
    let (p, mut store) = projection(6, 4);
    store.value_mut(p.weight).data_mut().iter_mut().for_each(|x| *x = 0.25);
    let q = random(&mut ChaCha8Rng::seed_from_u64(10), 4, 5);
    let g = Graph::new();
    let s = Session::frozen(&g, &store);
    let out = p.forward(&s, s.input(q.clone())).unwrap().to_tensor();
    for r in 0..6 {
        for c in 0..5 {
            let mean = (0..4).map(|i| q.at(i, c)).sum::<f64>() / 4.0;
            assert!((out.at(r, c) - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn identity_projection_and_loop_oracle() {
    let (p, mut store) = projection(5, 5);
    *store.value_mut(p.weight) = Tensor::eye(5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = random(&mut rng, 5, 3);
    {
        let g = Graph::new();
        let s = Session::frozen(&g, &store);
        assert_eq!(p.forward(&s, s.input(q.clone())).unwrap().to_tensor(), q);
    }
    let (p, mut store) = projection(6, 4);
    let bias: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    store.value_mut(p.bias).data_mut().copy_from_slice(&bias);
    let q = random(&mut rng, 4, 3);
    let w = store.value(p.weight).clone();
    let g = Graph::new();
    let s = Session::frozen(&g, &store);
    let out = p.forward(&s, s.input(q.clone())).unwrap().to_tensor();
    for r in 0..6 {
        for c in 0..3 {
            let expected: f64 = (0..4).map(|k| w.at(r, k) * q.at(k, c)).sum::<f64>() + bias[r];
            assert!((out.at(r, c) - expected).abs() < 1e-14);
        }
    }
}

/// Fused output together with the gate input pieces of a gated mode.
fn gated_pieces<'g>(f: &Fusion, s: &Session<'g, '_, f64>, q: &Tensor<f64>, v: &Tensor<f64>) -> (Var<'g, f64>, Var<'g, f64>, Var<'g, f64>) {
    let (qr, vr) = reps(s, q, v, 3);
    let b = f.branches(s, &qr, &vr).unwrap();
    let g = s.graph();
    let p1 = f.project1.as_ref().unwrap().forward(s, b.q1.unwrap()).unwrap();
    let p2 = f.project2.as_ref().unwrap().forward(s, b.q2.unwrap()).unwrap();
    let v_hat = g.concat_cols(&[b.v1.unwrap(), b.v2.unwrap()]).unwrap();
    let q_hat = g.concat_cols(&[p1, p2]).unwrap();
    (f.integrate(s, &b).unwrap(), v_hat, q_hat)
}

#[test]
fn saturated_gate_limits() {
    let cfg = ModelConfig::tiny();
    for (bias, open) in [(-50.0, false), (50.0, true)] {
        let (f, mut store) = build(&cfg, 12);
        let filter_bias = f.filter.as_ref().unwrap().bias.unwrap();
        store.value_mut(filter_bias).data_mut().iter_mut().for_each(|x| *x = bias);
        let (q, v) = inputs(&cfg, 3, 13);
        let g = Graph::new();
        let s = Session::frozen(&g, &store);
        let (m, v_hat, q_hat) = gated_pieces(&f, &s, &q, &v);
        let inner = if open { v_hat.add(&q_hat).unwrap() } else { v_hat };
        let expected = f.norm.as_ref().unwrap().forward(&s, inner).unwrap();
        assert!(m.to_tensor().max_abs_diff(&expected.to_tensor()) < 1e-9, "bias {bias}");
    }
}

#[test]
fn gate_entries_lie_strictly_inside_unit_interval() {
    let cfg = ModelConfig::tiny();
    let (f, store) = build(&cfg, 14);
    let (q, v) = inputs(&cfg, 2, 15);
    let g = Graph::new();
    let s = Session::frozen(&g, &store);
    let (_, _, q_hat) = gated_pieces(&f, &s, &q, &v);
    let r = f.filter.as_ref().unwrap().forward(&s, q_hat).unwrap().sigmoid().unwrap();
    assert!(r.value().data().iter().all(|&x| x > 0.0 && x < 1.0));
}

#[test]
fn closed_full_fusion_is_normalized_concat() {
    let cfg = ModelConfig::tiny();
    let (full, mut full_store) = build(&cfg, 16);
    let filter_bias = full.filter.as_ref().unwrap().bias.unwrap();
    full_store.value_mut(filter_bias).data_mut().iter_mut().for_each(|x| *x = -50.0);
    let ccfg = ModelConfig { fusion: FusionMode::Concat, ..cfg.clone() };
    let (concat, mut concat_store) = build(&ccfg, 99);
    let names: Vec<String> = concat_store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        let value = full_store.value(full_store.id(&name).unwrap()).clone();
        let id = concat_store.id(&name).unwrap();
        *concat_store.value_mut(id) = value;
    }
    let (q, v) = inputs(&cfg, 3, 17);
    let g = Graph::new();
    let a = {
        let s = Session::frozen(&g, &full_store);
        let (qr, vr) = reps(&s, &q, &v, 3);
        full.forward(&s, &qr, &vr).unwrap().to_tensor()
    };
    let s = Session::frozen(&g, &concat_store);
    let (qr, vr) = reps(&s, &q, &v, 3);
    let c = concat.forward(&s, &qr, &vr).unwrap();
    let norm = full.norm.as_ref().unwrap();
    let normalized = c.layer_norm(&s.input(full_store.value(norm.gain).clone()), &s.input(full_store.value(norm.bias).clone()), norm.eps).unwrap();
    assert!(a.max_abs_diff(&normalized.to_tensor()) < 1e-9);
}

#[test]
fn every_mode_yields_n_v_by_twice_d_h() {
    for cfg in [ModelConfig::tiny(), ModelConfig { n_v: 12, max_n_q: 5, d_h: 12, heads: 3, ..ModelConfig::tiny() }] {
        for mode in MODES {
            let mcfg = ModelConfig { fusion: mode, ..cfg.clone() };
            let (f, store) = build(&mcfg, 18);
            let (q, v) = inputs(&mcfg, 2, 19);
            let g = Graph::new();
            let s = Session::frozen(&g, &store);
            let (qr, vr) = reps(&s, &q, &v, 2);
            assert_eq!(f.forward(&s, &qr, &vr).unwrap().shape(), vec![mcfg.n_v, 2 * mcfg.d_h], "{mode}");
        }
    }
}

#[test]
fn modes_register_only_what_they_use() {
    let count = |mode| {
        let cfg = ModelConfig { fusion: mode, ..ModelConfig::tiny() };
        let (_, store) = build(&cfg, 0);
        let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
        names
    };
    let has = |names: &[String], prefix: &str| names.iter().any(|n| n.starts_with(prefix));
    let full = count(FusionMode::Full);
    assert!(["fusion.qv.", "fusion.vq.query", "fusion.project1", "fusion.project2", "fusion.filter"].iter().all(|p| has(&full, p)));
    let concat = count(FusionMode::Concat);
    assert!(!has(&concat, "fusion.filter") && !has(&concat, "fusion.project") && !has(&concat, "fusion.vq.query"));
    let vq = count(FusionMode::VqOnly);
    assert!(!has(&vq, "fusion.qv.") && !has(&vq, "fusion.project1"));
    let bare = count(FusionMode::VqNoQuery);
    assert!(has(&bare, "fusion.widen") && !has(&bare, "fusion.vq.query"));
}
