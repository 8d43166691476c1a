//! Procedural labeled textures standing in for a real image corpus.

use std::f64::consts::{FRAC_PI_4, PI};

use rand::Rng;

use super::image::ImageTensor;
use super::manifest::{Dataset, DatasetManifest, DatasetSource, Split};
use super::rng::{mix_seed, RngStream};
use crate::error::{Error, Result};

pub const TEXTURE_FAMILIES: [&str; 8] = [
    "striped", "checker", "blob", "gradient", "ring", "noise_field", "grid", "diagonal",
];

const SYNTH_DOMAIN: u64 = 0x5359_4E54; // "SYNT"
const TEST_DOMAIN: u64 = 0x5445_5354; // "TEST"

const HUE_JITTER: f64 = 0.1;
const PIXEL_NOISE: f64 = 0.06;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Scalar texture field in `[0, 1]` for one sample.
enum Field {
    Stripes { freq: f64, theta: f64, phase: f64 },
    Checker { freq: f64, theta: f64, phase: (f64, f64) },
    Blobs { centers: Vec<(f64, f64)>, radius: f64 },
    Gradient { theta: f64 },
    Rings { center: (f64, f64), freq: f64, phase: f64 },
    Noise { grid: Vec<f64>, cells: usize },
    Grid { freq: f64, offset: (f64, f64), width: f64 },
}

impl Field {
    fn sample(texture: usize, rng: &mut RngStream) -> Field {
        let r = rng.rng();
        match texture {
            0 | 7 => Field::Stripes {
                freq: r.gen_range(3.0..5.0),
                theta: if texture == 0 { 0.0 } else { FRAC_PI_4 } + r.gen_range(-0.25..0.25),
                phase: r.gen_range(0.0..2.0 * PI),
            },
            1 => Field::Checker {
                freq: r.gen_range(2.0..3.5),
                theta: r.gen_range(-0.2..0.2),
                phase: (r.gen_range(0.0..2.0 * PI), r.gen_range(0.0..2.0 * PI)),
            },
            2 => {
                let n = r.gen_range(3..=5);
                Field::Blobs {
                    centers: (0..n).map(|_| (r.gen_range(0.1..0.9), r.gen_range(0.1..0.9))).collect(),
                    radius: r.gen_range(0.08..0.18),
                }
            }
            3 => Field::Gradient {
                theta: r.gen_range(0.0..2.0 * PI),
            },
            4 => Field::Rings {
                center: (r.gen_range(0.35..0.65), r.gen_range(0.35..0.65)),
                freq: r.gen_range(3.0..5.0),
                phase: r.gen_range(0.0..2.0 * PI),
            },
            5 => {
                let cells = 5;
                Field::Noise {
                    grid: (0..(cells + 1) * (cells + 1)).map(|_| r.gen_range(0.0..1.0)).collect(),
                    cells,
                }
            }
            _ => Field::Grid {
                freq: r.gen_range(3.0..5.0),
                offset: (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)),
                width: 0.05,
            },
        }
    }

    fn eval(&self, u: f64, v: f64) -> f64 {
        match self {
            Field::Stripes { freq, theta, phase } => {
                let s = u * theta.cos() + v * theta.sin();
                0.5 + 0.5 * (2.0 * PI * freq * s + phase).sin()
            }
            Field::Checker { freq, theta, phase } => {
                let (c, s) = (theta.cos(), theta.sin());
                let (a, b) = (u * c - v * s, u * s + v * c);
                let p = (2.0 * PI * freq * a + phase.0).sin() * (2.0 * PI * freq * b + phase.1).sin();
                0.5 + 0.5 * (6.0 * p).tanh()
            }
            Field::Blobs { centers, radius } => {
                let s: f64 = centers
                    .iter()
                    .map(|(cx, cy)| (-((u - cx).powi(2) + (v - cy).powi(2)) / (2.0 * radius * radius)).exp())
                    .sum();
                s.min(1.0)
            }
            Field::Gradient { theta } => (0.5 + 0.9 * ((u - 0.5) * theta.cos() + (v - 0.5) * theta.sin())).clamp(0.0, 1.0),
            Field::Rings { center, freq, phase } => {
                let r = ((u - center.0).powi(2) + (v - center.1).powi(2)).sqrt();
                0.5 + 0.5 * (2.0 * PI * freq * r + phase).sin()
            }
            Field::Noise { grid, cells } => {
                let n = *cells;
                let (gx, gy) = (u * n as f64, v * n as f64);
                let (x0, y0) = ((gx.floor() as usize).min(n - 1), (gy.floor() as usize).min(n - 1));
                let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
                let (tx, ty) = (smooth(gx - x0 as f64), smooth(gy - y0 as f64));
                let at = |x: usize, y: usize| grid[y * (n + 1) + x];
                let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
                let bot = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
                top * (1.0 - ty) + bot * ty
            }
            Field::Grid { freq, offset, width } => {
                let d = |t: f64| {
                    let f = (t * freq + 0.5).rem_euclid(1.0) - 0.5;
                    (f / freq).abs()
                };
                let line = |dist: f64| (-(dist * dist) / (width * width / freq / freq)).exp();
                line(d(u + offset.0)).max(line(d(v + offset.1)))
            }
        }
    }
}

fn render(class: usize, num_classes: usize, size: usize, rng: &mut RngStream) -> ImageTensor {
    let texture = class % TEXTURE_FAMILIES.len();
    let field = Field::sample(texture, rng);
    let hue = class as f64 / num_classes as f64;
    let r = rng.rng();
    // wide enough that neighbouring palettes overlap, so color alone is a
    // weak cue and the texture has to be learned
    let hue_jitter = r.gen_range(-HUE_JITTER..HUE_JITTER);
    let fg = hsv(hue + hue_jitter, r.gen_range(0.25..0.8), r.gen_range(0.55..0.95));
    let bg = hsv(hue + 0.5 + r.gen_range(-HUE_JITTER..HUE_JITTER), r.gen_range(0.2..0.6), r.gen_range(0.1..0.45));
    let mut img = ImageTensor::filled(size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let t = field.eval((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            for c in 0..3 {
                let noise = rng.rng().gen_range(-PIXEL_NOISE..PIXEL_NOISE);
                img.set(c, y, x, bg[c] + t * (fg[c] - bg[c]) + noise);
            }
        }
    }
    img.clamp();
    img
}

/// `num_samples` images with round-robin labels; class `k` uses texture
/// family `k mod 8` and its own palette. Deterministic in `seed`.
pub fn generate_synthetic_dataset(num_samples: usize, num_classes: usize, size: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("num_classes {num_classes} < 2")));
    }
    if size < 16 {
        return Err(Error::InvalidArgument(format!("size {size} < 16")));
    }
    let labels: Vec<usize> = (0..num_samples).map(|i| i % num_classes).collect();
    let images = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let mut rng = RngStream::from_key(&[SYNTH_DOMAIN, seed, i as u64]);
            render(label, num_classes, size, &mut rng)
        })
        .collect();
    Dataset::new(
        DatasetManifest {
            source: DatasetSource::Synthetic,
            num_samples,
            num_classes,
            size,
            split: Split::Train,
            labels,
        },
        images,
    )
}

/// Disjoint train and test splits; the test split draws from a seed derived
/// from `seed`.
pub fn synthetic_splits(train: usize, test: usize, num_classes: usize, size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let tr = generate_synthetic_dataset(train, num_classes, size, seed)?;
    let te = generate_synthetic_dataset(test, num_classes, size, mix_seed(&[TEST_DOMAIN, seed]))?.with_split(Split::Test);
    Ok((tr, te))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic_dataset(8, 8, 32, 7).unwrap();
        let b = generate_synthetic_dataset(8, 8, 32, 7).unwrap();
        assert_eq!(a.images, b.images);
        let c = generate_synthetic_dataset(8, 8, 32, 8).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn labels_are_balanced() {
        let d = generate_synthetic_dataset(203, 8, 16, 1).unwrap();
        let mut hist = [0usize; 8];
        d.manifest.labels.iter().for_each(|&l| hist[l] += 1);
        let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
        assert!(hi - lo <= 1, "{hist:?}");
    }

    #[test]
    fn class_means_are_separated() {
        let (classes, per_class, size) = (8, 100, 16);
        let d = generate_synthetic_dataset(classes * per_class, classes, size, 3).unwrap();
        let n = 3 * size * size;
        let mut means = vec![vec![0.0; n]; classes];
        for (img, &l) in d.images.iter().zip(&d.manifest.labels) {
            for (m, v) in means[l].iter_mut().zip(img.data()) {
                *m += v / per_class as f64;
            }
        }
        for a in 0..classes {
            for b in a + 1..classes {
                let rms = (means[a].iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64).sqrt();
                assert!(rms > 0.03, "classes {a},{b}: {rms}");
            }
        }
    }

    #[test]
    fn rejects_degenerate_requests() {
        assert!(generate_synthetic_dataset(4, 1, 32, 0).is_err());
        assert!(generate_synthetic_dataset(4, 2, 8, 0).is_err());
    }
}
