use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::RngStream;
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

const PROBE_DOMAIN: u64 = 0x5052_4F42; // "PROB"

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Share of each class held out for picking the best epoch.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 50,
            batch_size: 64,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

/// A softmax classifier on standardized features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[dim × classes]`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub num_classes: usize,
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn standardize(&self, features: &Tensor) -> Result<Vec<f64>> {
        let d = self.dim();
        if features.rank() != 2 || features.last_dim() != d {
            return Err(Error::shape("linear_probe", features.shape(), &[d]));
        }
        Ok(features
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s))
            .collect())
    }

    fn logits_std(&self, x: &[f64], n: usize) -> Vec<f64> {
        let k = self.num_classes;
        let mut out: Vec<f64> = (0..n).flat_map(|_| self.bias.iter().copied()).collect();
        gemm(n, self.dim(), k, x, false, &self.weights, false, 1.0, &mut out);
        out
    }

    pub fn logits(&self, features: &Tensor) -> Result<Vec<f64>> {
        let x = self.standardize(features)?;
        Ok(self.logits_std(&x, features.num_rows()))
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        Ok(self
            .logits(features)?
            .chunks(self.num_classes)
            .map(argmax)
            .collect())
    }

    /// Top-1 accuracy in percent.
    pub fn accuracy(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        let pred = self.predict(features)?;
        Ok(percent_correct(&pred, labels))
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

fn percent_correct(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    100.0 * pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub dataset: String,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub val_accuracy: f64,
    pub best_epoch: usize,
    pub head: LinearProbe,
}

fn rows(t: &Tensor, idx: &[usize]) -> Vec<f64> {
    idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect()
}

/// Every `round(1/val_fraction)`-th sample of each class goes to validation.
fn stratified_split(labels: &[usize], k: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    if val_fraction <= 0.0 {
        return ((0..labels.len()).collect(), Vec::new());
    }
    let period = (1.0 / val_fraction).round().max(2.0) as usize;
    let mut seen = vec![0usize; k];
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, &l) in labels.iter().enumerate() {
        seen[l] += 1;
        if seen[l] % period == 0 {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

/// Trains a softmax head on frozen `train` features with minibatch SGD
/// (cosine-decayed), keeps the epoch with the best held-out accuracy and
/// reports it on `test`.
pub fn linear_probe(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train.rank() != 2 || train.num_rows() != train_labels.len() || test.num_rows() != test_labels.len() {
        return Err(Error::InvalidArgument("features and labels disagree in length".into()));
    }
    let k = train_labels.iter().chain(test_labels).max().map_or(0, |m| m + 1);
    let distinct = {
        let mut seen = vec![false; k];
        train_labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::InvalidArgument("linear probe needs at least two classes".into()));
    }
    let d = train.last_dim();
    let n = train.num_rows() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.data().iter().skip(j).step_by(d).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = train.data().iter().skip(j).step_by(d).map(|x| (x - mean[j]).powi(2)).sum::<f64>() / n;
            var.sqrt().max(1e-8)
        })
        .collect();
    let mut head = LinearProbe {
        mean,
        scale,
        weights: vec![0.0; d * k],
        bias: vec![0.0; k],
        num_classes: k,
    };
    let (fit_idx, val_idx) = stratified_split(train_labels, k, cfg.val_fraction);
    let x_all = head.standardize(train)?;
    let fit_x: Vec<f64> = fit_idx.iter().flat_map(|&i| x_all[i * d..(i + 1) * d].iter().copied()).collect();
    let fit_y: Vec<usize> = fit_idx.iter().map(|&i| train_labels[i]).collect();
    let val_t = Tensor::new(vec![val_idx.len(), d], rows(train, &val_idx))?;
    let val_y: Vec<usize> = val_idx.iter().map(|&i| train_labels[i]).collect();

    let (mut vw, mut vb) = (vec![0.0; d * k], vec![0.0; k]);
    let mut best = (f64::NEG_INFINITY, 0usize, head.clone());
    let m = fit_y.len();
    let batch = cfg.batch_size.max(1).min(m.max(1));
    let steps = (m / batch).max(1);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(RngStream::from_key(&[PROBE_DOMAIN, cfg.seed, epoch as u64]).rng());
        for s in 0..steps {
            let idx = &order[s * batch..((s + 1) * batch).min(m)];
            let bx: Vec<f64> = idx.iter().flat_map(|&i| fit_x[i * d..(i + 1) * d].iter().copied()).collect();
            let nb = idx.len();
            let mut p = head.logits_std(&bx, nb);
            for (r, &i) in idx.iter().enumerate() {
                let row = &mut p[r * k..(r + 1) * k];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                row.iter_mut().for_each(|v| *v = (*v - mx).exp() / z / nb as f64);
                row[fit_y[i]] -= 1.0 / nb as f64;
            }
            let mut gw = vec![0.0; d * k];
            gemm(d, nb, k, &bx, true, &p, false, 0.0, &mut gw);
            let progress = (epoch as f64 + s as f64 / steps as f64) / cfg.epochs as f64;
            let lr = cfg.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0;
            for ((w, g), v) in head.weights.iter_mut().zip(&gw).zip(vw.iter_mut()) {
                *v = cfg.momentum * *v + g + cfg.weight_decay * *w;
                *w -= lr * *v;
            }
            for c in 0..k {
                let g: f64 = (0..nb).map(|r| p[r * k + c]).sum();
                vb[c] = cfg.momentum * vb[c] + g;
                head.bias[c] -= lr * vb[c];
            }
        }
        let score = if val_y.is_empty() {
            head.accuracy(&Tensor::new(vec![m, d], rows(train, &fit_idx))?, &fit_y)?
        } else {
            head.accuracy(&val_t, &val_y)?
        };
        // ties go to the later, more annealed epoch
        if score >= best.0 {
            best = (score, epoch, head.clone());
        }
    }
    let (val_accuracy, best_epoch, head) = if cfg.epochs == 0 { (0.0, 0, head) } else { best };
    let pred = head.predict(test)?;
    let per_class_accuracy = (0..k)
        .map(|c| {
            let idx: Vec<usize> = (0..test_labels.len()).filter(|&i| test_labels[i] == c).collect();
            let p: Vec<usize> = idx.iter().map(|&i| pred[i]).collect();
            let l: Vec<usize> = idx.iter().map(|&i| test_labels[i]).collect();
            percent_correct(&p, &l)
        })
        .collect();
    Ok(ProbeResult {
        dataset: String::new(),
        accuracy: percent_correct(&pred, test_labels),
        per_class_accuracy,
        val_accuracy,
        best_epoch,
        head,
    })
}
