use serde::{Deserialize, Serialize};

use crate::data::{apply_corruption, AugmentationFamily, CorruptionSpec, ImageTensor, RngStream};
use crate::error::{Error, Result};
use crate::fusion::{fuse, BeliefState};
use crate::model::Model;

const KI_DOMAIN: u64 = 0x4B49_5452; // "KITR"

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KiRow {
    pub family: AugmentationFamily,
    /// 0 for the clean/clean baseline.
    pub severity: u8,
    pub mean_conflict: f64,
    pub mean_ignorance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KiTrace {
    pub baseline: KiRow,
    pub rows: Vec<KiRow>,
}

impl KiTrace {
    pub fn row(&self, family: AugmentationFamily, severity: u8) -> Option<&KiRow> {
        self.rows.iter().find(|r| r.family == family && r.severity == severity)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("family,severity,mean_conflict,mean_ignorance\n");
        for r in std::iter::once(&self.baseline).chain(&self.rows) {
            out.push_str(&format!(
                "{},{},{:.9},{:.9}\n",
                r.family.name(),
                r.severity,
                r.mean_conflict,
                r.mean_ignorance
            ));
        }
        out
    }
}

/// Belief states `[factor][sample]`.
pub fn belief_states(model: &Model, images: &[ImageTensor], batch: usize) -> Result<Vec<Vec<BeliefState>>> {
    let beta = model.config.prior_strength;
    model
        .factor_evidence(images, batch)?
        .into_iter()
        .map(|per_sample| per_sample.iter().map(|e| BeliefState::from_evidence(e, beta)).collect())
        .collect()
}

/// Factor-averaged `(K, I)` for each pair, then averaged over pairs.
pub fn mean_ki(a: &[Vec<BeliefState>], b: &[Vec<BeliefState>], epsilon: f64) -> Result<(f64, f64)> {
    let t_count = a.len();
    let n = a.first().map_or(0, Vec::len);
    if n == 0 || b.len() != t_count {
        return Err(Error::InvalidArgument("mismatched belief batches".into()));
    }
    let (mut k_sum, mut i_sum) = (0.0, 0.0);
    for p in 0..n {
        let (mut k, mut i) = (0.0, 0.0);
        for t in 0..t_count {
            let (kt, it) = fuse(&a[t][p], &b[t][p], epsilon)?;
            k += kt;
            i += it;
        }
        k_sum += k / t_count as f64;
        i_sum += i / t_count as f64;
    }
    Ok((k_sum / n as f64, i_sum / n as f64))
}

/// Conflict and ignorance between each clean image and its corrupted copy,
/// over the first `n_pairs` images, for every requested cell in the given
/// order, plus the clean/clean baseline.
#[allow(clippy::too_many_arguments)]
pub fn ki_trajectory(
    model: &Model,
    images: &[ImageTensor],
    n_pairs: usize,
    families: &[AugmentationFamily],
    severities: &[u8],
    seed: u64,
    epsilon: f64,
    batch: usize,
) -> Result<KiTrace> {
    if !model.heads.evidential {
        return Err(Error::NoEvidentialHeads("the K-I trace reads the evidential heads".into()));
    }
    let pairs = &images[..n_pairs.min(images.len())];
    let clean = belief_states(model, pairs, batch)?;
    let (k0, i0) = mean_ki(&clean, &clean, epsilon)?;
    let baseline = KiRow {
        family: AugmentationFamily::Clean,
        severity: 0,
        mean_conflict: k0,
        mean_ignorance: i0,
    };
    let mut rows = Vec::with_capacity(families.len() * severities.len());
    for &family in families {
        for &s in severities {
            let spec = CorruptionSpec::new(family, s)?;
            let corrupted: Vec<_> = pairs
                .iter()
                .enumerate()
                .map(|(i, img)| {
                    let key = [KI_DOMAIN, seed, family.id() as u64, s as u64, i as u64];
                    apply_corruption(img, spec, &mut RngStream::from_key(&key))
                })
                .collect();
            let states = belief_states(model, &corrupted, batch)?;
            let (k, i) = mean_ki(&clean, &states, epsilon)?;
            rows.push(KiRow {
                family,
                severity: s,
                mean_conflict: k,
                mean_ignorance: i,
            });
        }
    }
    Ok(KiTrace { baseline, rows })
}
