//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trust_ssl::data::{AugmentationFamily, ImageTensor};
use trust_ssl::fusion::{fuse_in_graph, trust_gate_in_graph, BeliefVars, GateConfig};
use trust_ssl::model::{HeadSet, Model, ModelConfig};
use trust_ssl::objective::{
    anchor_loss, cross_entropy, diversity_loss, kl_uniform_dirichlet, selective_additive, selective_multiplicative,
    simclr_ntxent, total_loss, LossTerms, LossWeights, Variant,
};
use trust_ssl::tensor::gradcheck::{grad_check, GradCheckReport};
use trust_ssl::tensor::{Graph, Tensor, Var};

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

pub fn unit_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn rows_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::matrix(rows.len(), rows[0].len(), rows.concat()).unwrap()
}

/// NT-Xent by explicit softmax over every row of the stacked `2N` batch.
pub fn ntxent_oracle(p1: &[Vec<f64>], p2: &[Vec<f64>], tau: f64) -> f64 {
    let n = p1.len();
    let all: Vec<&Vec<f64>> = p1.iter().chain(p2).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for r in 0..2 * n {
        let pos = (r + n) % (2 * n);
        let mut denom = 0.0;
        for j in 0..2 * n {
            if j != r {
                denom += (dot(all[r], all[j]) / tau).exp();
            }
        }
        total -= ((dot(all[r], all[pos]) / tau).exp() / denom).ln();
    }
    total / (2 * n) as f64
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        conv_channels: vec![4, 4, 4],
        backbone_dim: 8,
        projector_dim: 4,
        num_factors: 3,
        factor_dim: 4,
        num_prototypes: 5,
        prior_strength: 0.05,
    }
}

pub fn tiny_model(heads: HeadSet, seed: u64) -> Model {
    Model::init(tiny_model_config(), heads, seed).unwrap()
}

pub fn random_images(rng: &mut impl Rng, n: usize, size: usize) -> Vec<ImageTensor> {
    (0..n)
        .map(|_| ImageTensor::new(size, size, (0..3 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
        .collect()
}

/// Per-factor view embeddings of a tiny model on `2n` images.
fn factor_views(g: &mut Graph, model: &Model, images: &[ImageTensor], n: usize) -> (trust_ssl::model::BoundParams, Vec<Var>, Vec<Var>) {
    let p = model.bind(g, true);
    let x = model.input_batch(g, images).unwrap();
    let h = model.encode(g, &p, x).unwrap();
    let z = model.factorize(g, &p, h).unwrap();
    let z1 = z.iter().map(|&t| g.slice_rows(t, 0, n).unwrap()).collect();
    let z2 = z.iter().map(|&t| g.slice_rows(t, n, 2 * n).unwrap()).collect();
    (p, z1, z2)
}

fn evidential_gates(g: &mut Graph, model: &Model, p: &trust_ssl::model::BoundParams, z1: &[Var], z2: &[Var]) -> Vec<Var> {
    let cfg = GateConfig::default();
    (0..z1.len())
        .map(|t| {
            let a = model.evidence(g, p, t, z1[t]).unwrap();
            let b = model.evidence(g, p, t, z2[t]).unwrap();
            let (k, i) = fuse_in_graph(g, &a.belief, &b.belief, cfg.epsilon).unwrap();
            trust_gate_in_graph(g, k, i, 0.3, &cfg).unwrap()
        })
        .collect()
}

/// Largest absolute adjoint over evidential-head parameters of the selective
/// term, detached and in-graph, for each of `batches` random batches.
pub fn stop_gradient_contract(batches: usize, seed: u64) -> Vec<(f64, f64)> {
    let model = tiny_model(Variant::TrustSslAdditive.heads(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4;
    (0..batches)
        .map(|_| {
            let images = random_images(&mut rng, 2 * n, 16);
            let mut worst = [0.0f64; 2];
            for (slot, detached) in [(0, true), (1, false)] {
                let mut g = Graph::new();
                let (p, z1, z2) = factor_views(&mut g, &model, &images, n);
                let w = evidential_gates(&mut g, &model, &p, &z1, &z2);
                let loss = if detached {
                    selective_additive(&mut g, &z1, &z2, &w).unwrap()
                } else {
                    selective_multiplicative(&mut g, &z1, &z2, &w).unwrap()
                };
                let grads = g.backward(loss).unwrap();
                for (name, var) in p.iter() {
                    if name.starts_with("evidential.") {
                        let m = grads.get(var).map_or(0.0, |t| t.max_abs());
                        worst[slot] = worst[slot].max(m);
                    }
                }
            }
            (worst[0], worst[1])
        })
        .collect()
}

/// Max relative error between the backbone adjoint of the in-graph selective
/// term with `w ≡ 0.5` and half the adjoint of the unweighted term.
pub fn starvation_rel_error(seed: u64) -> f64 {
    let model = tiny_model(Variant::TrustSslMultiplicative.heads(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
    let n = 5;
    let images = random_images(&mut rng, 2 * n, 16);
    let backbone_grads = |c: f64| -> Vec<Tensor> {
        let mut g = Graph::new();
        let (p, z1, z2) = factor_views(&mut g, &model, &images, n);
        let w: Vec<Var> = z1.iter().map(|_| g.constant(Tensor::full(&[n], c))).collect();
        let loss = selective_multiplicative(&mut g, &z1, &z2, &w).unwrap();
        let grads = g.backward(loss).unwrap();
        p.iter()
            .filter(|(name, _)| name.starts_with("encoder.") || name.starts_with("factor."))
            .map(|(_, v)| grads.get(v).unwrap().clone())
            .collect()
    };
    let half = backbone_grads(0.5);
    let full = backbone_grads(1.0);
    let mut worst = 0.0f64;
    for (a, b) in half.iter().zip(&full) {
        let scale = b.max_abs().max(f64::MIN_POSITIVE);
        for (x, y) in a.data().iter().zip(b.data()) {
            worst = worst.max((x - 0.5 * y).abs() / scale);
        }
    }
    worst
}

pub const COMPOSED_TERMS: [&str; 8] = [
    "simclr_ntxent",
    "selective_additive",
    "selective_multiplicative",
    "anchor_loss",
    "diversity_loss",
    "kl_uniform_dirichlet",
    "cross_entropy",
    "total_loss",
];

fn normalized(g: &mut Graph, v: &[Var]) -> Vec<Var> {
    v.iter().map(|&x| g.l2_normalize_last(x)).collect()
}

fn gates_from_raw(g: &mut Graph, e1: &[Var], e2: &[Var]) -> trust_ssl::Result<Vec<Var>> {
    let cfg = GateConfig::default();
    let mut w = Vec::new();
    for (&a, &b) in e1.iter().zip(e2) {
        let ea = g.softplus(a);
        let eb = g.softplus(b);
        let sa = BeliefVars::from_evidence(g, ea, 0.05)?;
        let sb = BeliefVars::from_evidence(g, eb, 0.05)?;
        let (k, i) = fuse_in_graph(g, &sa, &sb, cfg.epsilon)?;
        w.push(trust_gate_in_graph(g, k, i, 0.3, &cfg)?);
    }
    Ok(w)
}

/// Finite-difference checks of every composed loss term on `cases` random
/// instances each.
pub fn composed_term_sweep(cases: usize, seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for term in COMPOSED_TERMS {
        for _ in 0..cases {
            let n = rng.gen_range(2..5);
            let t_count = rng.gen_range(2..4);
            let (d, m) = (3, 4);
            let tags1: Vec<AugmentationFamily> =
                (0..n).map(|_| AugmentationFamily::from_id(rng.gen_range(0..10)).unwrap()).collect();
            let tags2: Vec<AugmentationFamily> =
                (0..n).map(|_| AugmentationFamily::from_id(rng.gen_range(0..10)).unwrap()).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..5)).collect();
            // layout: z1[T], z2[T], e1[T], e2[T], alpha, logits
            let mut params = Vec::new();
            for _ in 0..2 * t_count {
                params.push(rand_tensor(&mut rng, &[n, d], -1.0, 1.0));
            }
            for _ in 0..2 * t_count {
                params.push(rand_tensor(&mut rng, &[n, m], -2.0, 2.0));
            }
            params.push(rand_tensor(&mut rng, &[n, m], -2.0, 2.0));
            params.push(rand_tensor(&mut rng, &[n, 5], -2.0, 2.0));
            let build = |g: &mut Graph, p: &[Var]| -> trust_ssl::Result<Var> {
                let z1 = normalized(g, &p[..t_count]);
                let z2 = normalized(g, &p[t_count..2 * t_count]);
                let e1 = &p[2 * t_count..3 * t_count];
                let e2 = &p[3 * t_count..4 * t_count];
                let alpha_raw = p[4 * t_count];
                let logits = p[4 * t_count + 1];
                let sp = g.softplus(alpha_raw);
                let alpha = g.add_scalar(sp, 0.2);
                match term {
                    "simclr_ntxent" => simclr_ntxent(g, z1[0], z2[0], 0.2),
                    "selective_additive" => {
                        let w = gates_from_raw(g, e1, e2)?;
                        selective_additive(g, &z1, &z2, &w)
                    }
                    "selective_multiplicative" => {
                        let w = gates_from_raw(g, e1, e2)?;
                        selective_multiplicative(g, &z1, &z2, &w)
                    }
                    "anchor_loss" => anchor_loss(g, &z1, &z2, &tags1, &tags2, 0.5),
                    "diversity_loss" => diversity_loss(g, &z1),
                    "kl_uniform_dirichlet" => kl_uniform_dirichlet(g, alpha, 1.0),
                    "cross_entropy" => cross_entropy(g, logits, &labels),
                    _ => {
                        let w = gates_from_raw(g, e1, e2)?;
                        let terms = LossTerms {
                            base: simclr_ntxent(g, z1[0], z2[0], 0.2)?,
                            selective: selective_additive(g, &z1, &z2, &w)?,
                            anchor: anchor_loss(g, &z1, &z2, &tags1, &tags2, 0.5)?,
                            diversity: diversity_loss(g, &z1)?,
                            aux: cross_entropy(g, logits, &labels)?,
                            kl: kl_uniform_dirichlet(g, alpha, 1.0)?,
                        };
                        Ok(total_loss(g, &terms, &LossWeights::default(), 0.7, 0.2, 0.3)?.0)
                    }
                }
            };
            out.push((term, grad_check(build, &params, 1e-5, 1e-4).unwrap()));
        }
    }
    out
}
