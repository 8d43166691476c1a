mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trust_ssl::data::ImageTensor;
use trust_ssl::fusion::{BeliefState, BeliefVars};
use trust_ssl::model::{Checkpoint, HeadSet, Model, ModelConfig, CHECKPOINT_MAGIC};
use trust_ssl::objective::Variant;
use trust_ssl::tensor::gradcheck::relative_error;
use trust_ssl::tensor::{Graph, Tensor};
use trust_ssl::Error;

fn all_heads() -> HeadSet {
    Variant::TrustSslAdditive.heads()
}

#[test]
fn evidence_examples() {
    let s = BeliefState::from_evidence(&[0.0; 64], 0.05).unwrap();
    assert!((s.strength - 3.2).abs() < 1e-12 && (s.u - 1.0).abs() < 1e-12);
    assert!(s.b.iter().all(|&b| b == 0.0));

    let s = BeliefState::from_evidence(&[0.05; 64], 0.05).unwrap();
    assert!((s.strength - 6.4).abs() < 1e-12 && (s.u - 0.5).abs() < 1e-12);
    assert!(s.b.iter().all(|&b| (b - 0.0078125).abs() < 1e-12));

    let mut e = vec![0.0; 64];
    e[0] = 10.0;
    let s = BeliefState::from_evidence(&e, 0.05).unwrap();
    assert!((s.strength - 13.2).abs() < 1e-12);
    assert!((s.b[0] - 10.0 / 13.2).abs() < 1e-12 && (s.u - 3.2 / 13.2).abs() < 1e-12);
}

#[test]
fn in_graph_beliefs_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let e = g.constant(rand_tensor(&mut rng, &[50, 16], 0.0, 30.0));
    let s = BeliefVars::from_evidence(&mut g, e, 0.05).unwrap();
    let (b, u) = (g.value(s.b).clone(), g.value(s.u).clone());
    for r in 0..50 {
        let total: f64 = b.row(r).iter().sum::<f64>() + u.data()[r];
        assert!((total - 1.0).abs() < 1e-10);
        assert!(u.data()[r] > 0.0 && u.data()[r] <= 1.0);
    }
}

#[test]
fn model_beliefs_sum_to_one_and_factors_are_unit_norm() {
    let model = tiny_model(all_heads(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = random_images(&mut rng, 6, 16);
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let x = model.input_batch(&mut g, &images).unwrap();
    let h = model.encode(&mut g, &p, x).unwrap();
    let z = model.factorize(&mut g, &p, h).unwrap();
    assert_eq!(z.len(), 3);
    for (t, &zt) in z.iter().enumerate() {
        let v = g.value(zt).clone();
        assert_eq!(v.shape(), &[6, 4]);
        for r in 0..6 {
            let n: f64 = v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        let ev = model.evidence(&mut g, &p, t, zt).unwrap();
        let b = g.value(ev.belief.b).clone();
        let u = g.value(ev.belief.u).clone();
        for r in 0..6 {
            assert!((b.row(r).iter().sum::<f64>() + u.data()[r] - 1.0).abs() < 1e-10);
        }
    }
    assert_eq!(g.degenerate_normalizations(), 0);
}

#[test]
fn zero_images_depend_only_on_biases() {
    let model = tiny_model(all_heads(), 5);
    let zeros = vec![ImageTensor::filled(16, 16, 0.0); 3];
    let h = model.features(&zeros, 8).unwrap();
    assert!(h.is_finite());
    // all biases start at zero, so the output is exactly zero
    assert_eq!(h.max_abs(), 0.0);
    assert_eq!(model.features(&zeros, 8).unwrap(), h);
}

#[test]
fn identical_images_give_identical_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = tiny_model(all_heads(), 6);
    let img = random_images(&mut rng, 1, 16).remove(0);
    let h = model.features(&vec![img; 4], 3).unwrap();
    for r in 1..4 {
        assert_eq!(h.row(r), h.row(0));
    }
}

#[test]
fn features_are_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = tiny_model(all_heads(), 7);
    let images = random_images(&mut rng, 5, 16);
    let h = model.features(&images, 5).unwrap();
    let order = [4, 2, 0, 3, 1];
    let permuted: Vec<_> = order.iter().map(|&i| images[i].clone()).collect();
    let hp = model.features(&permuted, 2).unwrap();
    for (r, &i) in order.iter().enumerate() {
        for (a, b) in hp.row(r).iter().zip(h.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut model = tiny_model(all_heads(), 8);
    let images = random_images(&mut rng, 3, 16);
    let sum_h = |m: &Model| m.features(&images, 3).unwrap().data().iter().sum::<f64>();

    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let x = model.input_batch(&mut g, &images).unwrap();
    let h = model.encode(&mut g, &p, x).unwrap();
    let s = g.sum(h);
    let grads = g.backward(s).unwrap();

    let step = 1e-6;
    for name in ["encoder.conv0.weight", "encoder.conv1.weight", "encoder.conv2.weight", "encoder.fc.weight"] {
        let pos = model.params.position(name).unwrap();
        let analytic = grads.get(p.vars()[pos]).unwrap().clone();
        for _ in 0..20 {
            let j = rng.gen_range(0..analytic.len());
            let orig = model.params.get(name).unwrap().data()[j];
            let set = |m: &mut Model, v: f64| m.params.tensors_mut().nth(pos).unwrap().data_mut()[j] = v;
            set(&mut model, orig + step);
            let up = sum_h(&model);
            set(&mut model, orig - step);
            let down = sum_h(&model);
            set(&mut model, orig);
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(analytic.data()[j], numeric);
            assert!(err < 1e-4, "{name}[{j}]: {} vs {numeric}", analytic.data()[j]);
        }
    }
}

#[test]
fn aux_head_with_zero_weights_is_uniform() {
    let mut model = tiny_model(all_heads(), 9);
    let pos = model.params.position("aux.weight").unwrap();
    model.params.tensors_mut().nth(pos).unwrap().data_mut().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let images = random_images(&mut rng, 2, 16);
    let mut g = Graph::new();
    let p = model.bind(&mut g, false);
    let x = model.input_batch(&mut g, &images).unwrap();
    let h = model.encode(&mut g, &p, x).unwrap();
    let logits = model.aux_logits(&mut g, &p, h).unwrap();
    let ce = trust_ssl::objective::cross_entropy(&mut g, logits, &[3, 8]).unwrap();
    assert!((g.value(ce).item() - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn initialization_is_deterministic_and_shared_across_variants() {
    let a = tiny_model(all_heads(), 11);
    let b = tiny_model(all_heads(), 11);
    assert_eq!(a.params.entries(), b.params.entries());
    let c = tiny_model(all_heads(), 12);
    assert_ne!(a.params.get("encoder.fc.weight"), c.params.get("encoder.fc.weight"));

    let plain = tiny_model(Variant::SimclrOnly.heads(), 11);
    for (name, t) in plain.params.iter() {
        assert_eq!(a.params.get(name), Some(t), "{name}");
    }
    assert!(plain.params.get("evidential.0.weight").is_none());
}

#[test]
fn factor_projection_has_orthonormal_columns() {
    let m = Model::init(ModelConfig::default(), all_heads(), 1).unwrap();
    let w = m.params.get("factor.proj").unwrap();
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!((rows, cols), (128, 96));
    for a in 0..cols {
        for b in a..cols {
            let dot: f64 = (0..rows).map(|r| w.data()[r * cols + a] * w.data()[r * cols + b]).sum();
            let want = if a == b { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-10);
        }
    }
}

#[test]
fn missing_evidential_heads_is_an_error() {
    let model = tiny_model(Variant::CosineGate.heads(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images = random_images(&mut rng, 2, 16);
    let err = model.factor_evidence(&images, 2).unwrap_err();
    assert!(matches!(err, Error::NoEvidentialHeads(_)));
    assert!(err.to_string().contains("no evidential heads"));
}

#[test]
fn wrong_image_size_is_rejected() {
    let model = tiny_model(all_heads(), 1);
    let images = vec![ImageTensor::filled(32, 32, 0.5)];
    assert!(model.features(&images, 1).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let model = tiny_model(all_heads(), 13);
    let ckpt = model.to_checkpoint("{\"k\":1}".into());
    let bytes = ckpt.to_bytes();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    let rebuilt = Model::from_records(tiny_model_config(), all_heads(), &back.records).unwrap();
    assert_eq!(rebuilt.params.entries(), model.params.entries());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tsslckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
}

#[test]
fn checkpoint_errors() {
    let model = tiny_model(all_heads(), 14);
    let bytes = model.to_checkpoint("{}".into()).to_bytes();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));

    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long).is_err());

    let mut ckpt = model.to_checkpoint("{}".into());
    ckpt.records.retain(|(n, _)| n != "aux.bias");
    assert!(Model::from_records(tiny_model_config(), all_heads(), &ckpt.records).is_err());

    let mut ckpt = model.to_checkpoint("{}".into());
    ckpt.records[0].1 = Tensor::zeros(&[1]);
    let err = Model::from_records(tiny_model_config(), all_heads(), &ckpt.records).unwrap_err();
    assert!(err.to_string().contains("shape"));

    assert!(Checkpoint::load("/nonexistent/x.tsslckpt").is_err());
}

#[test]
fn config_validation() {
    let mut c = ModelConfig::default();
    assert!(c.validate().is_ok());
    c.num_factors = 0;
    assert!(c.validate().is_err());
    assert!(Model::init(c, all_heads(), 1).is_err());
}
