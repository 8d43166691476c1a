//! The nine corruption kernels at severities 1–5.
//!
//! Parameterizations are fixed; changing any constant here changes the
//! benchmark.

use rand::seq::index::sample;
use rand::Rng;

use super::augment::AugmentationFamily;
use super::image::{ImageTensor, CHANNELS};
use super::rng::RngStream;
use crate::error::{Error, Result};

/// A corruption family (never `Clean`) at severity 1–5.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CorruptionSpec {
    family: AugmentationFamily,
    severity: u8,
}

impl CorruptionSpec {
    pub fn new(family: AugmentationFamily, severity: u8) -> Result<Self> {
        if family == AugmentationFamily::Clean {
            return Err(Error::InvalidArgument("clean is not a corruption".into()));
        }
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity {severity} not in 1..=5")));
        }
        Ok(CorruptionSpec { family, severity })
    }

    pub fn family(&self) -> AugmentationFamily {
        self.family
    }

    pub fn severity(&self) -> u8 {
        self.severity
    }

    /// All 45 cells in family-major order.
    pub fn grid() -> Vec<CorruptionSpec> {
        AugmentationFamily::CORRUPTIONS
            .iter()
            .flat_map(|&f| (1..=5).map(move |s| CorruptionSpec { family: f, severity: s }))
            .collect()
    }
}

/// Mirror index without edge repetition (`d c b | a b c d | c b a`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Normalized 1-D Gaussian taps for σ, radius ⌈3σ⌉.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn box_kernel(len: usize) -> Vec<f64> {
    vec![1.0 / len as f64; len]
}

fn convolve_rows(img: &ImageTensor, taps: &[f64]) -> ImageTensor {
    let r = (taps.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    acc += t * img.get(c, y, reflect(x as isize + k as isize - r, w));
                }
                out.set(c, y, x, acc);
            }
        }
    }
    out
}

fn convolve_cols(img: &ImageTensor, taps: &[f64]) -> ImageTensor {
    let r = (taps.len() / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut out = img.clone();
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, t) in taps.iter().enumerate() {
                    acc += t * img.get(c, reflect(y as isize + k as isize - r, h), x);
                }
                out.set(c, y, x, acc);
            }
        }
    }
    out
}

/// Applies `spec` to `x`. Stochastic kernels draw only from `rng`.
pub fn apply_corruption(x: &ImageTensor, spec: CorruptionSpec, rng: &mut RngStream) -> ImageTensor {
    use AugmentationFamily as F;
    let s = spec.severity as usize;
    let sf = s as f64;
    let (h, w) = (x.height(), x.width());
    let mut out = match spec.family {
        F::Clean => unreachable!("CorruptionSpec excludes clean"),
        F::GaussianBlur => {
            let taps = gaussian_kernel(0.5 * sf);
            convolve_cols(&convolve_rows(x, &taps), &taps)
        }
        F::MotionBlur => convolve_rows(x, &box_kernel(2 * s + 1)),
        F::Haze => {
            let t = 1.0 - 0.15 * sf;
            let airlight = 0.8;
            x.clone_mapped(|v| t * v + (1.0 - t) * airlight)
        }
        F::Occlusion => {
            let side = 12 * s * h.min(w) / 100;
            let top = rng.rng().gen_range(0..=h - side);
            let left = rng.rng().gen_range(0..=w - side);
            let mut out = x.clone();
            for c in 0..CHANNELS {
                for y in top..top + side {
                    for xx in left..left + side {
                        out.set(c, y, xx, 0.0);
                    }
                }
            }
            out
        }
        F::ColorDistortion => {
            let mut out = x.clone();
            for c in 0..CHANNELS {
                let gain = rng.rng().gen_range(1.0 - 0.15 * sf..=1.0 + 0.15 * sf);
                let bias = rng.rng().gen_range(-0.08 * sf..=0.08 * sf);
                out.plane_mut(c).iter_mut().for_each(|v| *v = gain * *v + bias);
            }
            out
        }
        F::BrightnessInversion => {
            let lambda = 0.2 * sf;
            x.clone_mapped(|v| (1.0 - lambda) * v + lambda * (1.0 - v))
        }
        F::ContrastReversal => {
            let factor = 1.0 - 0.4 * sf;
            let mut out = x.clone();
            for c in 0..CHANNELS {
                let mu = x.channel_mean(c);
                out.plane_mut(c).iter_mut().for_each(|v| *v = mu + factor * (*v - mu));
            }
            out
        }
        F::ChannelDropout => {
            let count = match s {
                1 | 2 => s / 2,
                3 | 4 => 1,
                _ => 2,
            };
            let mut out = x.clone();
            for c in sample(rng.rng(), CHANNELS, count).into_iter() {
                out.plane_mut(c).iter_mut().for_each(|v| *v = 0.0);
            }
            out
        }
        F::Rain => {
            let streaks = 20 * s;
            let len = h / 4;
            let mut out = x.clone();
            for _ in 0..streaks {
                let y0 = rng.rng().gen_range(0..h);
                let x0 = rng.rng().gen_range(0..w);
                for i in 0..len {
                    let (y, xx) = (y0 + i, x0 + i);
                    if y >= h || xx >= w {
                        break;
                    }
                    for c in 0..CHANNELS {
                        let v = out.get(c, y, xx) + 0.6;
                        out.set(c, y, xx, v);
                    }
                }
            }
            out
        }
    };
    out.clamp();
    out
}

impl ImageTensor {
    fn clone_mapped(&self, f: impl Fn(f64) -> f64) -> ImageTensor {
        let mut out = self.clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        out
    }
}
