use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corrupt::{apply_corruption, CorruptionSpec};
use super::image::ImageTensor;
use super::rng::RngStream;
use crate::error::{Error, Result};

/// The family tag of a view. Ids are stable: they index the auxiliary
/// classifier's logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationFamily {
    Clean = 0,
    GaussianBlur = 1,
    MotionBlur = 2,
    Haze = 3,
    Occlusion = 4,
    ColorDistortion = 5,
    BrightnessInversion = 6,
    ContrastReversal = 7,
    ChannelDropout = 8,
    Rain = 9,
}

impl AugmentationFamily {
    pub const COUNT: usize = 10;

    pub const ALL: [AugmentationFamily; 10] = [
        Self::Clean,
        Self::GaussianBlur,
        Self::MotionBlur,
        Self::Haze,
        Self::Occlusion,
        Self::ColorDistortion,
        Self::BrightnessInversion,
        Self::ContrastReversal,
        Self::ChannelDropout,
        Self::Rain,
    ];

    pub const CORRUPTIONS: [AugmentationFamily; 9] = [
        Self::GaussianBlur,
        Self::MotionBlur,
        Self::Haze,
        Self::Occlusion,
        Self::ColorDistortion,
        Self::BrightnessInversion,
        Self::ContrastReversal,
        Self::ChannelDropout,
        Self::Rain,
    ];

    /// Information-loss corruptions.
    pub const ERASURE: [AugmentationFamily; 4] = [Self::Haze, Self::GaussianBlur, Self::MotionBlur, Self::Occlusion];

    /// Corruptions that flip or remap appearance.
    pub const CONTRADICTION: [AugmentationFamily; 4] = [
        Self::ColorDistortion,
        Self::BrightnessInversion,
        Self::ContrastReversal,
        Self::ChannelDropout,
    ];

    pub const WEATHER: [AugmentationFamily; 1] = [Self::Rain];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown augmentation family id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::GaussianBlur => "gaussian_blur",
            Self::MotionBlur => "motion_blur",
            Self::Haze => "haze",
            Self::Occlusion => "occlusion",
            Self::ColorDistortion => "color_distortion",
            Self::BrightnessInversion => "brightness_inversion",
            Self::ContrastReversal => "contrast_reversal",
            Self::ChannelDropout => "channel_dropout",
            Self::Rain => "rain",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown augmentation family {name:?}")))
    }

    /// Factor index this family is anchored to under `num_factors` factors:
    /// corruption id `k` (1-based) maps to factor `(k − 1) mod T`; clean maps
    /// to none.
    pub fn anchored_factor(self, num_factors: usize) -> Option<usize> {
        match self {
            Self::Clean => None,
            f => Some((f.id() - 1) % num_factors.max(1)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Output side length in pixels.
    pub size: usize,
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Probability that a view receives one corruption.
    pub corruption_prob: f64,
    pub eligible: Vec<AugmentationFamily>,
    pub max_severity: u8,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            size: 32,
            crop_scale: (0.6, 1.0),
            flip_prob: 0.5,
            corruption_prob: 0.5,
            eligible: AugmentationFamily::CORRUPTIONS.to_vec(),
            max_severity: 3,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 16 {
            return bad(format!("augment.size {} < 16", self.size));
        }
        let (lo, hi) = self.crop_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad(format!("augment.crop_scale ({lo}, {hi}) outside (0, 1]"));
        }
        for p in [self.flip_prob, self.corruption_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("probability {p} outside [0, 1]"));
            }
        }
        if self.corruption_prob > 0.0 && self.eligible.is_empty() {
            return bad("augment.eligible is empty".into());
        }
        if self.eligible.contains(&AugmentationFamily::Clean) {
            return bad("augment.eligible may not list clean".into());
        }
        if !(1..=5).contains(&self.max_severity) {
            return bad(format!("augment.max_severity {} not in 1..=5", self.max_severity));
        }
        Ok(())
    }
}

fn random_resized_crop(x: &ImageTensor, rng: &mut RngStream, cfg: &AugmentConfig) -> ImageTensor {
    let (h, w) = (x.height() as f64, x.width() as f64);
    let area = h * w * rng.rng().gen_range(cfg.crop_scale.0..=cfg.crop_scale.1);
    let log_ratio = rng.rng().gen_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
    let ratio = log_ratio.exp();
    let cw = (area * ratio).sqrt().min(w);
    let ch = (area / ratio).sqrt().min(h);
    let top = rng.rng().gen_range(0.0..=h - ch);
    let left = rng.rng().gen_range(0.0..=w - cw);
    x.crop_resize(top, left, ch, cw, cfg.size, cfg.size)
}

/// Crop and flip only.
pub fn standard_view(x: &ImageTensor, rng: &mut RngStream, cfg: &AugmentConfig) -> ImageTensor {
    let cropped = random_resized_crop(x, rng, cfg);
    if rng.rng().gen_bool(cfg.flip_prob) {
        cropped.flipped()
    } else {
        cropped
    }
}

/// One stochastic view: crop, flip, then with probability
/// `corruption_prob` one eligible family at a severity in
/// `1..=max_severity`. Returns the applied family tag.
pub fn augment_view(x: &ImageTensor, rng: &mut RngStream, cfg: &AugmentConfig) -> (ImageTensor, AugmentationFamily) {
    let view = standard_view(x, rng, cfg);
    if cfg.eligible.is_empty() || !rng.rng().gen_bool(cfg.corruption_prob) {
        return (view, AugmentationFamily::Clean);
    }
    let family = cfg.eligible[rng.rng().gen_range(0..cfg.eligible.len())];
    let severity = rng.rng().gen_range(1..=cfg.max_severity);
    let spec = CorruptionSpec::new(family, severity).expect("eligible families exclude clean");
    (apply_corruption(&view, spec, rng), family)
}
