use rayon::prelude::*;

use super::TrainConfig;
use crate::data::{augment_view, AugmentConfig, AugmentationFamily, ImageTensor, RngStream};
use crate::error::{Error, Result};
use crate::fusion::{cosine_gate_in_graph, fuse_in_graph, trust_gate_in_graph};
use crate::model::{BoundParams, Model};
use crate::objective::{
    anchor_loss, cross_entropy, diversity_loss, kl_uniform_dirichlet, selective_additive, selective_multiplicative,
    simclr_ntxent, total_loss, GateKind, LossBreakdown, LossTerms, Schedule, Variant,
};
use crate::tensor::{Graph, Tensor, Var};

/// Two augmented views per sample with their family tags.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub view1: Vec<ImageTensor>,
    pub view2: Vec<ImageTensor>,
    pub tags1: Vec<AugmentationFamily>,
    pub tags2: Vec<AugmentationFamily>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.view1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.view1.is_empty()
    }
}

/// Views of `images[i]` for each `i` in `indices`, each drawn from its own
/// `(seed, epoch, i, view)` stream so the result does not depend on
/// scheduling.
pub fn make_views(images: &[ImageTensor], indices: &[usize], seed: u64, epoch: usize, cfg: &AugmentConfig) -> ViewBatch {
    let pairs: Vec<_> = indices
        .par_iter()
        .map(|&i| {
            let v = |view: u64| augment_view(&images[i], &mut RngStream::for_view(seed, epoch as u64, i as u64, view), cfg);
            (v(0), v(1))
        })
        .collect();
    let mut batch = ViewBatch {
        view1: Vec::with_capacity(pairs.len()),
        view2: Vec::with_capacity(pairs.len()),
        tags1: Vec::with_capacity(pairs.len()),
        tags2: Vec::with_capacity(pairs.len()),
    };
    for ((a, ta), (b, tb)) in pairs {
        batch.view1.push(a);
        batch.tags1.push(ta);
        batch.view2.push(b);
        batch.tags2.push(tb);
    }
    batch
}

/// Gradients (in parameter order) and diagnostics of one step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub grads: Vec<Tensor>,
    pub breakdown: LossBreakdown,
    pub mean_conflict: Option<f64>,
    pub mean_ignorance: Option<f64>,
}

struct Objective {
    total: Var,
    breakdown: LossBreakdown,
    mean_conflict: Option<f64>,
    mean_ignorance: Option<f64>,
}

fn mean_of(g: &Graph, vars: &[Var]) -> f64 {
    let (s, n) = vars.iter().fold((0.0, 0usize), |(s, n), &v| {
        let t = g.value(v);
        (s + t.data().iter().sum::<f64>(), n + t.len())
    });
    s / n.max(1) as f64
}

fn average(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

fn build_objective(
    g: &mut Graph,
    model: &Model,
    p: &BoundParams,
    cfg: &TrainConfig,
    schedule: &Schedule,
    views: &ViewBatch,
    epoch: usize,
) -> Result<Objective> {
    let n = views.len();
    let e = epoch as f64;
    let lambda_min = schedule.lambda_min(e);
    let images: Vec<ImageTensor> = views.view1.iter().chain(&views.view2).cloned().collect();
    let x = model.input_batch(g, &images)?;
    let h = model.encode(g, p, x)?;
    let proj = model.project(g, p, h)?;
    let p1 = g.slice_rows(proj, 0, n)?;
    let p2 = g.slice_rows(proj, n, 2 * n)?;
    let base = simclr_ntxent(g, p1, p2, cfg.loss.temperature)?;

    let variant = cfg.variant;
    let gate = variant.gate();
    let zero = g.scalar(0.0);
    let mut terms = LossTerms {
        base,
        selective: zero,
        anchor: zero,
        diversity: zero,
        aux: zero,
        kl: zero,
    };
    let (mut mean_conflict, mut mean_ignorance) = (None, None);
    if gate != GateKind::None {
        let z = model.factorize(g, p, h)?;
        let mut z1 = Vec::with_capacity(z.len());
        let mut z2 = Vec::with_capacity(z.len());
        for &zt in &z {
            z1.push(g.slice_rows(zt, 0, n)?);
            z2.push(g.slice_rows(zt, n, 2 * n)?);
        }
        let mut weights = Vec::with_capacity(z.len());
        match gate {
            GateKind::Evidential => {
                let (mut ks, mut is, mut kls) = (Vec::new(), Vec::new(), Vec::new());
                for t in 0..z.len() {
                    let ev1 = model.evidence(g, p, t, z1[t])?;
                    let ev2 = model.evidence(g, p, t, z2[t])?;
                    let (k, i) = fuse_in_graph(g, &ev1.belief, &ev2.belief, cfg.gate.epsilon)?;
                    weights.push(trust_gate_in_graph(g, k, i, lambda_min, &cfg.gate)?);
                    ks.push(k);
                    is.push(i);
                    kls.push(kl_uniform_dirichlet(g, ev1.belief.alpha, cfg.loss.kl_target)?);
                    kls.push(kl_uniform_dirichlet(g, ev2.belief.alpha, cfg.loss.kl_target)?);
                }
                mean_conflict = Some(mean_of(g, &ks));
                mean_ignorance = Some(mean_of(g, &is));
                terms.kl = average(g, &kls)?;
            }
            GateKind::Cosine => {
                for t in 0..z.len() {
                    let tau = model.gate_tau_raw(g, p, t)?;
                    weights.push(cosine_gate_in_graph(g, z1[t], z2[t], tau)?);
                }
            }
            GateKind::None => unreachable!(),
        }
        terms.selective = if variant.detached_gate() {
            selective_additive(g, &z1, &z2, &weights)?
        } else {
            selective_multiplicative(g, &z1, &z2, &weights)?
        };
        terms.anchor = anchor_loss(g, &z1, &z2, &views.tags1, &views.tags2, cfg.loss.anchor_temperature)?;
        terms.diversity = diversity_loss(g, &z)?;
        let logits = model.aux_logits(g, p, h)?;
        let labels: Vec<usize> = views.tags1.iter().chain(&views.tags2).map(|f| f.id()).collect();
        terms.aux = cross_entropy(g, logits, &labels)?;
    }

    let (base_weight, lambda_sel) = match variant {
        Variant::TrustSslMultiplicative => (1.0 - schedule.ramp(e), cfg.loss.multiplicative_weight),
        Variant::SimclrOnly => (1.0, 0.0),
        _ => (1.0, schedule.lambda_sel(e)),
    };
    let mut weights = cfg.loss.clone();
    if gate == GateKind::None {
        weights.anchor = 0.0;
        weights.diversity = 0.0;
        weights.aux = 0.0;
        weights.kl = 0.0;
    }
    let (total, breakdown) = total_loss(g, &terms, &weights, base_weight, lambda_sel, lambda_min)?;
    Ok(Objective {
        total,
        breakdown,
        mean_conflict,
        mean_ignorance,
    })
}

/// Forward and backward of the full objective on one batch of views.
pub fn train_step(
    model: &Model,
    cfg: &TrainConfig,
    schedule: &Schedule,
    views: &ViewBatch,
    epoch: usize,
    step: usize,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let obj = build_objective(&mut g, model, &p, cfg, schedule, views, epoch)?;
    if !obj.breakdown.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            breakdown: serde_json::to_string(&obj.breakdown)?,
        });
    }
    let mut grads = g.backward(obj.total)?;
    let grads = p
        .vars()
        .iter()
        .map(|&v| grads.remove(v).expect("every parameter has an adjoint"))
        .collect();
    Ok(StepOutput {
        grads,
        breakdown: obj.breakdown,
        mean_conflict: obj.mean_conflict,
        mean_ignorance: obj.mean_ignorance,
    })
}
