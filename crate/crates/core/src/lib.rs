//! Selective-invariance self-supervised learning with evidential trust
//! gating, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and reverse-mode differentiation with a
//!   first-class stop-gradient.
//! - [`data`]: synthetic datasets, PPM and packed containers, seeded
//!   two-view augmentation, and the 9×5 corruption suite.
//! - [`model`]: encoder, projector, factor and evidential heads, the
//!   auxiliary family classifier, and checkpoints.
//! - [`fusion`]: belief states, Dempster–Shafer conflict, fused ignorance
//!   and the trust gate.
//! - [`objective`]: every loss term and the λ schedules.
//! - [`train`]: the epoch loop, momentum SGD, metrics and resume.
//! - [`eval`]: linear probing, corruption grids, K–I traces and OOD scores.

pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
