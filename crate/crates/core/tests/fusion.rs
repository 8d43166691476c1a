use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trust_ssl::fusion::*;
use trust_ssl::tensor::{Graph, Tensor};

fn random_state(rng: &mut ChaCha8Rng, m: usize, beta: f64) -> BeliefState {
    let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
    let e: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..1.0) * scale).collect();
    BeliefState::from_evidence(&e, beta).unwrap()
}

#[test]
fn conflict_examples() {
    let p = [0.9, 0.0];
    assert!(conflict(&p, &p).unwrap().abs() < 1e-15);
    assert!((conflict(&[0.9, 0.0], &[0.0, 0.9]).unwrap() - 0.81).abs() < 1e-15);
    let u = vec![0.5 / 64.0; 64];
    assert!((conflict(&u, &u).unwrap() - 0.24609375).abs() < 1e-15);
    assert!((conflict_brute_force(&u, &u).unwrap() - 0.24609375).abs() < 1e-15);
}

#[test]
fn conflict_closed_form_matches_double_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let m = rng.gen_range(1..80);
        let a = random_state(&mut rng, m, 0.05);
        let b = random_state(&mut rng, m, 0.05);
        let k = conflict(&a.b, &b.b).unwrap();
        assert!((k - conflict_brute_force(&a.b, &b.b).unwrap()).abs() < 1e-12);
        assert!((0.0..1.0).contains(&k));
        assert!((a.total_belief() + a.u - 1.0).abs() < 1e-10);
        assert!(a.u > 0.0 && a.u <= 1.0);
    }
}

#[test]
fn ignorance_examples() {
    assert_eq!(fused_ignorance(1.0, 1.0, 0.0, 0.1).unwrap(), 1.0);
    assert!((fused_ignorance(1.0, 0.0, 0.0, 0.1).unwrap() - 0.1).abs() < 1e-15);
    assert!((fused_ignorance(0.5, 0.5, 0.5, 0.1).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn gate_examples() {
    for lm in [0.05, 0.3, 0.9] {
        assert_eq!(trust_gate(0.0, 0.0, lm, 2.0, 3.0).unwrap(), 1.0);
    }
    // Reference baseline pair from the clean/clean evaluation.
    let w = trust_gate(0.106, 0.249, 0.05, 2.0, 3.0).unwrap();
    assert!((w - (0.05 + 0.95 * (-0.959f64).exp())).abs() < 1e-15);
    assert!((w - 0.4141121718527935).abs() < 1e-12, "{w}");
    let w = trust_gate(0.99, 1.0, 0.05, 2.0, 3.0).unwrap();
    assert!((w - 0.05653035942962144).abs() < 1e-12, "{w}");
}

#[test]
fn cosine_gate_examples() {
    let z = [0.6, 0.8];
    assert!((cosine_gate(&z, &z, 1.0).unwrap() - 0.7310585786300049).abs() < 1e-12);
    assert!((cosine_gate(&z, &[-0.8, 0.6], 1.0).unwrap() - 0.5).abs() < 1e-15);
    assert!((cosine_gate(&z, &[-0.6, -0.8], 1.0).unwrap() - 0.2689414213699951).abs() < 1e-12);
}

fn check_bounds_and_monotonicity(k: f64, i: f64, lm: f64) {
    let w = trust_gate(k, i, lm, 2.0, 3.0).unwrap();
    assert!((lm..=1.0).contains(&w));
    assert_eq!(w == 1.0, k == 0.0 && i == 0.0, "K={k} I={i} w={w}");
    let dk = 1e-3;
    if k + dk < 1.0 {
        assert!(trust_gate(k + dk, i, lm, 2.0, 3.0).unwrap() < w);
    }
    if i + dk <= 1.0 {
        assert!(trust_gate(k, i + dk, lm, 2.0, 3.0).unwrap() < w);
    }
}

#[test]
fn gate_bounds_on_grid_and_random_pairs() {
    for a in 0..100 {
        for b in 0..100 {
            check_bounds_and_monotonicity(a as f64 / 100.0, b as f64 / 99.0, 0.05);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..10_000 {
        check_bounds_and_monotonicity(rng.gen_range(0.0..0.999), rng.gen_range(0.0..=1.0), rng.gen_range(0.01..0.99));
    }
}

proptest! {
    #[test]
    fn fused_ignorance_is_symmetric_and_bounded(u1 in 0.0f64..=1.0, u2 in 0.0f64..=1.0, k in 0.0f64..0.999) {
        let a = fused_ignorance(u1, u2, k, 0.1).unwrap();
        prop_assert_eq!(a, fused_ignorance(u2, u1, k, 0.1).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

#[test]
fn in_graph_fusion_matches_scalar_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, m) = (5, 7);
    let e1: Vec<f64> = (0..n * m).map(|_| rng.gen_range(0.0..3.0)).collect();
    let e2: Vec<f64> = (0..n * m).map(|_| rng.gen_range(0.0..3.0)).collect();
    let mut g = Graph::new();
    let v1 = g.constant(Tensor::new(vec![n, m], e1.clone()).unwrap());
    let v2 = g.constant(Tensor::new(vec![n, m], e2.clone()).unwrap());
    let s1 = BeliefVars::from_evidence(&mut g, v1, 0.05).unwrap();
    let s2 = BeliefVars::from_evidence(&mut g, v2, 0.05).unwrap();
    let (k, i) = fuse_in_graph(&mut g, &s1, &s2, 0.1).unwrap();
    let w = trust_gate_in_graph(&mut g, k, i, 0.3, &GateConfig::default()).unwrap();
    for r in 0..n {
        let a = BeliefState::from_evidence(&e1[r * m..(r + 1) * m], 0.05).unwrap();
        let b = BeliefState::from_evidence(&e2[r * m..(r + 1) * m], 0.05).unwrap();
        let (kk, ii) = fuse(&a, &b, 0.1).unwrap();
        assert!((g.value(k).data()[r] - kk).abs() < 1e-14);
        assert!((g.value(i).data()[r] - ii).abs() < 1e-14);
        assert!((g.value(w).data()[r] - trust_gate(kk, ii, 0.3, 2.0, 3.0).unwrap()).abs() < 1e-14);
        assert!((g.value(s1.u).data()[r] - a.u).abs() < 1e-15);
    }
}
