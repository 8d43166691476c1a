use serde::{Deserialize, Serialize};

use super::ki::mean_ki;
use crate::data::{apply_corruption, standard_view, AugmentConfig, AugmentationFamily, CorruptionSpec, ImageTensor, RngStream};
use crate::error::{Error, Result};
use crate::fusion::BeliefState;
use crate::model::Model;
use crate::tensor::Tensor;

const NATIVE_DOMAIN: u64 = 0x4E41_5456; // "NATV"

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    Mahalanobis,
    Energy,
    FeatureNorm,
    NativeKi,
}

impl Detector {
    pub const ALL: [Detector; 4] = [Detector::Mahalanobis, Detector::Energy, Detector::FeatureNorm, Detector::NativeKi];

    pub fn name(self) -> &'static str {
        match self {
            Detector::Mahalanobis => "mahalanobis",
            Detector::Energy => "energy",
            Detector::FeatureNorm => "feature_norm",
            Detector::NativeKi => "native_ki",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Detector::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown detector {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodScoreSet {
    pub detector: Detector,
    pub shift: String,
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    pub auroc: f64,
}

/// Held-out distribution shifts used as the OOD split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodShift {
    Haze,
    Rain,
    Darken,
    HueRotate,
}

impl OodShift {
    pub const ALL: [OodShift; 4] = [OodShift::Haze, OodShift::Rain, OodShift::Darken, OodShift::HueRotate];

    pub fn name(self) -> &'static str {
        match self {
            OodShift::Haze => "haze",
            OodShift::Rain => "rain",
            OodShift::Darken => "darken",
            OodShift::HueRotate => "hue_rotate",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        OodShift::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown OOD shift {s:?}")))
    }

    /// Haze and rain at severity 4, brightness × 0.35, or a 90° hue
    /// rotation about the grey axis.
    pub fn apply(self, img: &ImageTensor, rng: &mut RngStream) -> ImageTensor {
        match self {
            OodShift::Haze => apply_corruption(img, CorruptionSpec::new(AugmentationFamily::Haze, 4).unwrap(), rng),
            OodShift::Rain => apply_corruption(img, CorruptionSpec::new(AugmentationFamily::Rain, 4).unwrap(), rng),
            OodShift::Darken => {
                let mut out = img.clone();
                out.data_mut().iter_mut().for_each(|v| *v *= 0.35);
                out
            }
            OodShift::HueRotate => {
                // Rodrigues rotation by 90° about (1,1,1)/√3.
                let (c, s) = (0.0f64, 1.0f64);
                let k = 1.0 / 3f64.sqrt();
                let a = c + (1.0 - c) / 3.0;
                let b = (1.0 - c) / 3.0 - k * s;
                let d = (1.0 - c) / 3.0 + k * s;
                let m = [[a, b, d], [d, a, b], [b, d, a]];
                let mut out = img.clone();
                for y in 0..img.height() {
                    for x in 0..img.width() {
                        let px = [img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)];
                        for (ch, row) in m.iter().enumerate() {
                            out.set(ch, y, x, row.iter().zip(&px).map(|(w, v)| w * v).sum());
                        }
                    }
                }
                out.clamp();
                out
            }
        }
    }
}

/// Gaussian fit of in-distribution features with a ridge of
/// `1e-3 · trace(Σ)/d`.
#[derive(Clone, Debug, PartialEq)]
pub struct MahalanobisFit {
    mean: Vec<f64>,
    /// Lower Cholesky factor of the regularized covariance.
    chol: Vec<f64>,
    dim: usize,
}

impl MahalanobisFit {
    pub fn fit(id: &Tensor) -> Result<Self> {
        if id.rank() != 2 {
            return Err(Error::shape("mahalanobis", id.shape(), &[]));
        }
        let (n, d) = (id.num_rows(), id.last_dim());
        if n < d + 1 {
            return Err(Error::InvalidArgument(format!(
                "mahalanobis needs at least {} ID samples for {d}-dim features, got {n}",
                d + 1
            )));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            mean.iter_mut().zip(id.row(r)).for_each(|(m, x)| *m += x / n as f64);
        }
        let mut cov = vec![0.0; d * d];
        for r in 0..n {
            let c: Vec<f64> = id.row(r).iter().zip(&mean).map(|(x, m)| x - m).collect();
            for i in 0..d {
                for j in 0..=i {
                    cov[i * d + j] += c[i] * c[j] / n as f64;
                }
            }
        }
        let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        let ridge = 1e-3 * trace / d as f64;
        for i in 0..d {
            cov[i * d + i] += ridge;
        }
        let chol = cholesky(&cov, d)?;
        Ok(MahalanobisFit { mean, chol, dim: d })
    }

    /// `(x−μ)ᵀ Σ⁻¹ (x−μ)` per query row.
    pub fn score(&self, query: &Tensor) -> Result<Vec<f64>> {
        let d = self.dim;
        if query.rank() != 2 || query.last_dim() != d {
            return Err(Error::shape("mahalanobis", query.shape(), &[d]));
        }
        Ok((0..query.num_rows())
            .map(|r| {
                let mut y: Vec<f64> = query.row(r).iter().zip(&self.mean).map(|(x, m)| x - m).collect();
                for i in 0..d {
                    let s: f64 = (0..i).map(|j| self.chol[i * d + j] * y[j]).sum();
                    y[i] = (y[i] - s) / self.chol[i * d + i];
                }
                y.iter().map(|v| v * v).sum()
            })
            .collect())
    }
}

/// Cholesky of a symmetric matrix given by its lower triangle.
fn cholesky(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let v = a[i * d + i] - s;
                if !(v > 0.0) {
                    return Err(Error::InvalidArgument("covariance is not positive definite".into()));
                }
                l[i * d + i] = v.sqrt();
            } else {
                l[i * d + j] = (a[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    Ok(l)
}

pub fn mahalanobis_score(id: &Tensor, query: &Tensor) -> Result<Vec<f64>> {
    MahalanobisFit::fit(id)?.score(query)
}

/// `−τ · logsumexp(h/τ)` per row; higher means more OOD.
pub fn energy_score(features: &Tensor, tau: f64) -> Vec<f64> {
    let d = features.last_dim().max(1);
    features
        .data()
        .chunks(d)
        .map(|row| {
            let m = row.iter().map(|v| v / tau).fold(f64::NEG_INFINITY, f64::max);
            -tau * (m + row.iter().map(|v| (v / tau - m).exp()).sum::<f64>().ln())
        })
        .collect()
}

/// `−‖h‖₂` per row.
pub fn feature_norm_score(features: &Tensor) -> Vec<f64> {
    let d = features.last_dim().max(1);
    features
        .data()
        .chunks(d)
        .map(|row| -row.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Factor-averaged `K + I` for one pair of per-factor belief states.
pub fn ki_pair_score(a: &[BeliefState], b: &[BeliefState], epsilon: f64) -> Result<f64> {
    let wrap = |s: &[BeliefState]| s.iter().map(|x| vec![x.clone()]).collect::<Vec<_>>();
    let (k, i) = mean_ki(&wrap(a), &wrap(b), epsilon)?;
    Ok(k + i)
}

/// Mean over `draws` pairs of standard (crop + flip) views of the factor-
/// averaged `K + I` between the two views.
pub fn native_ki_score(
    model: &Model,
    images: &[ImageTensor],
    draws: usize,
    seed: u64,
    augment: &AugmentConfig,
    epsilon: f64,
    batch: usize,
) -> Result<Vec<f64>> {
    if !model.heads.evidential {
        return Err(Error::NoEvidentialHeads("the native K+I score reads the evidential heads".into()));
    }
    let mut totals = vec![0.0; images.len()];
    for draw in 0..draws.max(1) {
        let (mut v1, mut v2) = (Vec::with_capacity(images.len()), Vec::with_capacity(images.len()));
        for (i, img) in images.iter().enumerate() {
            let mut rng = RngStream::from_key(&[NATIVE_DOMAIN, seed, i as u64, draw as u64]);
            v1.push(standard_view(img, &mut rng, augment));
            v2.push(standard_view(img, &mut rng, augment));
        }
        let a = super::ki::belief_states(model, &v1, batch)?;
        let b = super::ki::belief_states(model, &v2, batch)?;
        for (i, total) in totals.iter_mut().enumerate() {
            let sa: Vec<_> = a.iter().map(|f| f[i].clone()).collect();
            let sb: Vec<_> = b.iter().map(|f| f[i].clone()).collect();
            *total += ki_pair_score(&sa, &sb, epsilon)?;
        }
    }
    let n = draws.max(1) as f64;
    Ok(totals.into_iter().map(|t| t / n).collect())
}

/// Area under the ROC curve with OOD as the positive class, by trapezoidal
/// integration over thresholds (tied scores form one diagonal segment).
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::InvalidArgument("AUROC needs non-empty ID and OOD sets".into()));
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (ood_scores.len() as f64, id_scores.len() as f64);
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut area = 0.0;
    let mut i = 0;
    while i < all.len() {
        let (prev_tp, prev_fp) = (tp, fp);
        let s = all[i].0;
        while i < all.len() && all[i].0 == s {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - prev_fp) * (tp + prev_tp) / 2.0;
    }
    Ok(area / (np * nn))
}

/// Exhaustive pair counting with half credit for ties.
pub fn auroc_pairwise(id_scores: &[f64], ood_scores: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &o in ood_scores {
        for &d in id_scores {
            if o > d {
                wins += 1.0;
            } else if o == d {
                wins += 0.5;
            }
        }
    }
    wins / (id_scores.len() * ood_scores.len()) as f64
}
