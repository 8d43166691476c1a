//! Frozen-feature evaluation: linear probe, corruption grid, conflict and
//! ignorance traces, OOD detectors and AUROC.

mod grid;
mod ki;
mod ood;
mod probe;

pub use grid::{corruption_grid, RobustnessGrid};
pub use ki::{belief_states, ki_trajectory, mean_ki, KiRow, KiTrace};
pub use ood::{
    auroc, auroc_pairwise, energy_score, feature_norm_score, ki_pair_score, mahalanobis_score, native_ki_score, Detector,
    MahalanobisFit, OodScoreSet, OodShift,
};
pub use probe::{linear_probe, LinearProbe, ProbeConfig, ProbeResult};
