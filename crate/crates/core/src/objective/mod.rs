//! Loss terms of the pretraining objective and their weighting.

mod schedule;

use serde::{Deserialize, Serialize};

pub use schedule::{Schedule, ScheduleConfig};

use crate::data::AugmentationFamily;
use crate::error::{Error, Result};
use crate::model::HeadSet;
use crate::tensor::{Graph, Tensor, Var};

/// Additive mask keeping self-similarities out of the NT-Xent softmax.
const SELF_MASK: f64 = -1e30;

/// The five objective forms that can be pretrained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TrustSslAdditive,
    TrustSslMultiplicative,
    ScalarUncertainty,
    CosineGate,
    SimclrOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    Evidential,
    Cosine,
    None,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::TrustSslAdditive,
        Variant::TrustSslMultiplicative,
        Variant::ScalarUncertainty,
        Variant::CosineGate,
        Variant::SimclrOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::TrustSslAdditive => "trust_ssl_additive",
            Variant::TrustSslMultiplicative => "trust_ssl_multiplicative",
            Variant::ScalarUncertainty => "scalar_uncertainty",
            Variant::CosineGate => "cosine_gate",
            Variant::SimclrOnly => "simclr_only",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown variant {name:?}")))
    }

    pub fn gate(self) -> GateKind {
        match self {
            Variant::TrustSslAdditive | Variant::TrustSslMultiplicative | Variant::ScalarUncertainty => GateKind::Evidential,
            Variant::CosineGate => GateKind::Cosine,
            Variant::SimclrOnly => GateKind::None,
        }
    }

    /// Whether the gate enters the selective term through a stop-gradient.
    pub fn detached_gate(self) -> bool {
        self != Variant::TrustSslMultiplicative
    }

    /// The scalar-uncertainty ablation pins `T = 1`.
    pub fn forced_num_factors(self) -> Option<usize> {
        (self == Variant::ScalarUncertainty).then_some(1)
    }

    pub fn heads(self) -> HeadSet {
        let gate = self.gate();
        HeadSet {
            factors: gate != GateKind::None,
            evidential: gate == GateKind::Evidential,
            cosine_gate: gate == GateKind::Cosine,
            aux: gate != GateKind::None,
        }
    }
}

/// Fixed weights of the auxiliary terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub anchor: f64,
    pub diversity: f64,
    pub aux: f64,
    pub kl: f64,
    /// NT-Xent temperature of the base term.
    pub temperature: f64,
    /// NT-Xent temperature of the anchor term.
    pub anchor_temperature: f64,
    /// Concentration `c` of the `Dir(c·1)` KL target.
    pub kl_target: f64,
    /// Weight of the multiplicative selective term, which is on from the
    /// first epoch.
    pub multiplicative_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            anchor: 0.05,
            diversity: 0.1,
            aux: 0.5,
            kl: 0.001,
            temperature: 0.2,
            anchor_temperature: 0.5,
            kl_target: 1.0,
            multiplicative_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.anchor, self.diversity, self.aux, self.kl, self.multiplicative_weight];
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.temperature > 0.0 && self.anchor_temperature > 0.0 && self.kl_target > 0.0) {
            return Err(Error::Config("temperatures and kl_target must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar values of every term for one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub base: f64,
    pub selective: f64,
    pub anchor: f64,
    pub diversity: f64,
    pub aux: f64,
    pub kl: f64,
    pub base_weight: f64,
    pub lambda_sel: f64,
    pub lambda_min: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the weighted sum from the stored parts.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.base_weight * self.base
            + self.lambda_sel * self.selective
            + w.anchor * self.anchor
            + w.diversity * self.diversity
            + w.aux * self.aux
            + w.kl * self.kl
    }
}

/// Graph handles of the six scalar terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub base: Var,
    pub selective: Var,
    pub anchor: Var,
    pub diversity: Var,
    pub aux: Var,
    pub kl: Var,
}

/// Weighted sum of the terms and its breakdown.
pub fn total_loss(
    g: &mut Graph,
    terms: &LossTerms,
    weights: &LossWeights,
    base_weight: f64,
    lambda_sel: f64,
    lambda_min: f64,
) -> Result<(Var, LossBreakdown)> {
    let parts = [
        (terms.base, base_weight),
        (terms.selective, lambda_sel),
        (terms.anchor, weights.anchor),
        (terms.diversity, weights.diversity),
        (terms.aux, weights.aux),
        (terms.kl, weights.kl),
    ];
    let mut total = g.scale(parts[0].0, parts[0].1);
    for &(v, w) in &parts[1..] {
        let scaled = g.scale(v, w);
        total = g.add(total, scaled)?;
    }
    let item = |v: Var| g.value(v).item();
    let breakdown = LossBreakdown {
        base: item(terms.base),
        selective: item(terms.selective),
        anchor: item(terms.anchor),
        diversity: item(terms.diversity),
        aux: item(terms.aux),
        kl: item(terms.kl),
        base_weight,
        lambda_sel,
        lambda_min,
        total: item(total),
    };
    Ok((total, breakdown))
}

/// Symmetric NT-Xent over `2N` rows; `p1`, `p2` are `[N, P]` and unit-norm.
pub fn simclr_ntxent(g: &mut Graph, p1: Var, p2: Var, tau: f64) -> Result<Var> {
    if g.shape(p1) != g.shape(p2) || g.shape(p1).len() != 2 {
        return Err(Error::shape("simclr_ntxent", g.shape(p1), g.shape(p2)));
    }
    let n = g.shape(p1)[0];
    let all = g.concat_rows(&[p1, p2])?;
    let swap: Vec<usize> = (n..2 * n).chain(0..n).collect();
    let partners = g.gather_rows(all, &swap)?;
    let all_t = g.transpose(all)?;
    let sim = g.matmul(all, all_t)?;
    let logits = g.scale(sim, 1.0 / tau);
    let mut mask = Tensor::zeros(&[2 * n, 2 * n]);
    for i in 0..2 * n {
        mask.data_mut()[i * 2 * n + i] = SELF_MASK;
    }
    let mask = g.constant(mask);
    let masked = g.add(logits, mask)?;
    let lse = g.logsumexp_last(masked);
    let pos = g.row_dot(all, partners)?;
    let pos = g.scale(pos, 1.0 / tau);
    let per_row = g.sub(lse, pos)?;
    Ok(g.mean(per_row))
}

/// Per-factor `1 − z₁ᵗ·z₂ᵗ`, `[N]` each.
pub fn misalignment(g: &mut Graph, z1: &[Var], z2: &[Var]) -> Result<Vec<Var>> {
    if z1.len() != z2.len() || z1.is_empty() {
        return Err(Error::InvalidArgument(format!("{} and {} factor views", z1.len(), z2.len())));
    }
    z1.iter()
        .zip(z2)
        .map(|(&a, &b)| {
            let cos = g.row_dot(a, b)?;
            let neg = g.scale(cos, -1.0);
            Ok(g.add_scalar(neg, 1.0))
        })
        .collect()
}

fn selective(g: &mut Graph, z1: &[Var], z2: &[Var], w: &[Var], detach: bool) -> Result<Var> {
    if w.len() != z1.len() {
        return Err(Error::InvalidArgument(format!("{} gates for {} factors", w.len(), z1.len())));
    }
    let mis = misalignment(g, z1, z2)?;
    let mut acc: Option<Var> = None;
    for (&m, &wt) in mis.iter().zip(w) {
        let wt = if detach { g.stop_gradient(wt) } else { wt };
        let weighted = g.mul(m, wt)?;
        let term = g.mean(weighted);
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    Ok(g.scale(acc.expect("at least one factor"), 1.0 / z1.len() as f64))
}

/// `(1/T) Σₜ mean[sg(wᵗ)·(1 − z₁ᵗ·z₂ᵗ)]`.
pub fn selective_additive(g: &mut Graph, z1: &[Var], z2: &[Var], w: &[Var]) -> Result<Var> {
    selective(g, z1, z2, w, true)
}

/// Same value as [`selective_additive`] with the gate left in the graph.
pub fn selective_multiplicative(g: &mut Graph, z1: &[Var], z2: &[Var], w: &[Var]) -> Result<Var> {
    selective(g, z1, z2, w, false)
}

/// NT-Xent at `tau` per factor over the samples whose view tags anchor to
/// that factor; mean over factors with a non-empty eligible set.
pub fn anchor_loss(
    g: &mut Graph,
    z1: &[Var],
    z2: &[Var],
    tags1: &[AugmentationFamily],
    tags2: &[AugmentationFamily],
    tau: f64,
) -> Result<Var> {
    let t_count = z1.len();
    let mut terms = Vec::new();
    for t in 0..t_count {
        let idx: Vec<usize> = tags1
            .iter()
            .zip(tags2)
            .enumerate()
            .filter(|(_, (a, b))| a.anchored_factor(t_count) == Some(t) || b.anchored_factor(t_count) == Some(t))
            .map(|(i, _)| i)
            .collect();
        match idx.len() {
            0 => {}
            1 => terms.push(g.scalar(0.0)),
            _ => {
                let a = g.gather_rows(z1[t], &idx)?;
                let b = g.gather_rows(z2[t], &idx)?;
                terms.push(simclr_ntxent(g, a, b, tau)?);
            }
        }
    }
    if terms.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let n = terms.len();
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / n as f64))
}

/// Mean over samples and factor pairs of the squared cosine between factor
/// embeddings; 0 when `T = 1`.
pub fn diversity_loss(g: &mut Graph, z: &[Var]) -> Result<Var> {
    let t_count = z.len();
    if t_count < 2 {
        return Ok(g.scalar(0.0));
    }
    let mut acc: Option<Var> = None;
    for s in 0..t_count {
        for t in s + 1..t_count {
            let cos = g.row_dot(z[s], z[t])?;
            let sq = g.square(cos);
            let m = g.mean(sq);
            acc = Some(match acc {
                Some(a) => g.add(a, m)?,
                None => m,
            });
        }
    }
    let pairs = t_count * (t_count - 1) / 2;
    Ok(g.scale(acc.expect("t_count >= 2"), 1.0 / pairs as f64))
}

/// Mean over rows of `KL(Dir(α) ‖ Dir(c·1))` for `alpha: [N, M]`.
pub fn kl_uniform_dirichlet(g: &mut Graph, alpha: Var, c: f64) -> Result<Var> {
    let shape = g.shape(alpha).to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("kl_uniform_dirichlet", &shape, &[]));
    }
    let m = shape[1] as f64;
    let s = g.sum_last(alpha);
    let lg_s = g.ln_gamma(s);
    let lg_a = g.ln_gamma(alpha);
    let sum_lg_a = g.sum_last(lg_a);
    let dig_a = g.digamma(alpha);
    let shifted = g.add_scalar(alpha, -c);
    let cross = g.mul(shifted, dig_a)?;
    let sum_cross = g.sum_last(cross);
    let dig_s = g.digamma(s);
    let s_minus = g.add_scalar(s, -m * c);
    let tail = g.mul(dig_s, s_minus)?;
    let a = g.sub(lg_s, sum_lg_a)?;
    let b = g.add(a, sum_cross)?;
    let kl = g.sub(b, tail)?;
    let constant = m * crate::tensor::special::ln_gamma(c) - crate::tensor::special::ln_gamma(m * c);
    let kl = g.add_scalar(kl, constant);
    Ok(g.mean(kl))
}

/// Mean softmax cross-entropy of `logits: [N, K]` against `labels`.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() || labels.iter().any(|&l| l >= shape[1]) {
        return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
    }
    let mut onehot = Tensor::zeros(&shape);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * shape[1] + l] = 1.0;
    }
    let onehot = g.constant(onehot);
    let picked = g.mul(logits, onehot)?;
    let picked = g.sum_last(picked);
    let lse = g.logsumexp_last(logits);
    let nll = g.sub(lse, picked)?;
    Ok(g.mean(nll))
}
