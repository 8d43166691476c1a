use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{cosine_lr, sgd_step, OptimizerState};
use super::step::{make_views, train_step};
use super::TrainConfig;
use crate::data::{Dataset, ImageTensor, RngStream};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model};
use crate::objective::{LossBreakdown, Schedule};

const SHUFFLE_DOMAIN: u64 = 0x5348_5546; // "SHUF"
const MOMENTUM_PREFIX: &str = "optim.momentum.";

/// Per-epoch summary. Wall time is kept out of the serialized form so
/// metric files are reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_base: f64,
    pub mean_selective: f64,
    pub mean_aux: f64,
    pub mean_conflict: Option<f64>,
    pub mean_ignorance: Option<f64>,
    pub lambda_sel: f64,
    pub lambda_min: f64,
    pub base_weight: f64,
    pub learning_rate: f64,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub mean_conflict: Option<f64>,
    pub mean_ignorance: Option<f64>,
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub opt: OptimizerState,
    pub epochs_completed: usize,
    pub history: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    train: TrainConfig,
    epochs_completed: usize,
    history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(cfg.effective_model(), cfg.heads(), cfg.seed)?;
        let opt = OptimizerState::zeros_like(model.params.iter().map(|(_, t)| t));
        Ok(TrainState {
            model,
            opt,
            epochs_completed: 0,
            history: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            train: cfg.clone(),
            epochs_completed: self.epochs_completed,
            history: self.history.clone(),
        };
        let mut ck = self.model.to_checkpoint(serde_json::to_string(&meta)?);
        for ((name, _), buf) in self.model.params.iter().zip(&self.opt.momentum) {
            ck.records.push((format!("{MOMENTUM_PREFIX}{name}"), buf.clone()));
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(TrainConfig, Self)> {
        let meta: CheckpointMeta = serde_json::from_str(&ck.config_json)
            .map_err(|e| Error::Checkpoint(format!("config blob: {e}")))?;
        let cfg = meta.train;
        cfg.validate()?;
        let model = Model::from_records(cfg.effective_model(), cfg.heads(), &ck.records)?;
        let momentum = model
            .params
            .iter()
            .map(|(name, t)| match ck.get(&format!("{MOMENTUM_PREFIX}{name}")) {
                Some(buf) if buf.shape() == t.shape() => Ok(buf.clone()),
                Some(_) => Err(Error::Checkpoint(format!("momentum buffer for {name} has the wrong shape"))),
                None => Err(Error::Checkpoint(format!("missing momentum buffer for {name}"))),
            })
            .collect::<Result<_>>()?;
        Ok((
            cfg,
            TrainState {
                model,
                opt: OptimizerState { momentum },
                epochs_completed: meta.epochs_completed,
                history: meta.history,
            },
        ))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrainConfig, TrainState)> {
    TrainState::from_checkpoint(&Checkpoint::load(path)?)
}

fn batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(RngStream::from_key(&[SHUFFLE_DOMAIN, seed, epoch as u64]).rng());
    let count = (n / batch).max(1);
    (0..count)
        .map(|b| order[b * batch..((b + 1) * batch).min(n)].to_vec())
        .collect()
}

/// One pass over `images` (last partial batch dropped).
pub fn train_epoch(
    state: &mut TrainState,
    cfg: &TrainConfig,
    schedule: &Schedule,
    images: &[ImageTensor],
    epoch: usize,
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<EpochMetrics> {
    if images.len() < 2 {
        return Err(Error::InvalidArgument("pretraining needs at least two images".into()));
    }
    let start = Instant::now();
    let plan = batches(images.len(), cfg.batch_size, cfg.seed, epoch);
    let steps = plan.len();
    let mut sums = [0.0; 4];
    let (mut k_sum, mut i_sum, mut gated) = (0.0, 0.0, 0usize);
    let mut last = LossBreakdown::default();
    let lr0 = cosine_lr(cfg.learning_rate, epoch as f64, cfg.epochs as f64);
    for (s, idx) in plan.iter().enumerate() {
        let views = make_views(images, idx, cfg.seed, epoch, &cfg.augment);
        let global_step = epoch * steps + s;
        let out = train_step(&state.model, cfg, schedule, &views, epoch, global_step)?;
        let lr = cosine_lr(cfg.learning_rate, epoch as f64 + s as f64 / steps as f64, cfg.epochs as f64);
        sgd_step(
            state.model.params.tensors_mut(),
            &out.grads,
            &mut state.opt,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;
        let b = &out.breakdown;
        for (acc, v) in sums.iter_mut().zip([b.total, b.base, b.selective, b.aux]) {
            *acc += v;
        }
        if let (Some(k), Some(i)) = (out.mean_conflict, out.mean_ignorance) {
            k_sum += k;
            i_sum += i;
            gated += 1;
        }
        on_step(&StepRecord {
            epoch,
            step: global_step,
            loss: out.breakdown.clone(),
            mean_conflict: out.mean_conflict,
            mean_ignorance: out.mean_ignorance,
        })?;
        last = out.breakdown;
    }
    state.epochs_completed = epoch + 1;
    let n = steps as f64;
    let metrics = EpochMetrics {
        epoch,
        mean_total: sums[0] / n,
        mean_base: sums[1] / n,
        mean_selective: sums[2] / n,
        mean_aux: sums[3] / n,
        mean_conflict: (gated > 0).then(|| k_sum / gated as f64),
        mean_ignorance: (gated > 0).then(|| i_sum / gated as f64),
        lambda_sel: last.lambda_sel,
        lambda_min: last.lambda_min,
        base_weight: last.base_weight,
        learning_rate: lr0,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    state.history.push(metrics.clone());
    Ok(metrics)
}

/// Files written by [`run_pretraining`].
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: TrainState,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub steps_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

fn write_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Step rows of a previous run that precede `epoch`.
fn steps_before(path: &Path, epoch: usize) -> Result<Vec<StepRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: StepRecord = serde_json::from_str(&line)?;
        if row.epoch < epoch {
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Trains for `cfg.epochs` epochs (continuing from `resume` if given),
/// writing into `out_dir`:
/// `metrics.jsonl` (one row per epoch), `steps.jsonl` (one row per step),
/// `timings.jsonl`, `checkpoints/epoch_NNNN.tsslckpt` and
/// `final.tsslckpt`.
pub fn run_pretraining(cfg: &TrainConfig, data: &Dataset, out_dir: &Path, resume: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let mut state = match resume {
        Some(path) => {
            let (saved, state) = load_checkpoint(path)?;
            if saved != *cfg {
                return Err(Error::Config(format!(
                    "{} was written with a different configuration",
                    path.display()
                )));
            }
            state
        }
        None => TrainState::new(cfg)?,
    };
    let ck_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let steps_path = out_dir.join("steps.jsonl");
    let timings_path = out_dir.join("timings.jsonl");

    let first = state.epochs_completed;
    write_lines(&steps_path, &steps_before(&steps_path, first)?)?;
    let open_append = |p: &Path| {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(|e| Error::io(p, e))
    };
    let mut steps_file = std::io::BufWriter::new(open_append(&steps_path)?);
    if resume.is_none() {
        std::fs::write(&timings_path, b"").map_err(|e| Error::io(&timings_path, e))?;
    }
    let mut timings_file = open_append(&timings_path)?;
    let mut checkpoints = Vec::new();
    for epoch in first..cfg.epochs {
        let m = train_epoch(&mut state, cfg, &schedule, &data.images, epoch, |row| {
            serde_json::to_writer(&mut steps_file, row)?;
            steps_file.write_all(b"\n").map_err(|e| Error::io(&steps_path, e))
        })?;
        steps_file.flush().map_err(|e| Error::io(&steps_path, e))?;
        writeln!(timings_file, "{{\"epoch\":{},\"wall_time_s\":{:.3}}}", m.epoch, m.wall_time_s)
            .map_err(|e| Error::io(&timings_path, e))?;
        write_lines(&metrics_path, &state.history)?;
        let done = epoch + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.epochs {
            let path = ck_dir.join(format!("epoch_{done:04}.tsslckpt"));
            state.to_checkpoint(cfg)?.save(&path)?;
            checkpoints.push(path);
        }
    }
    write_lines(&metrics_path, &state.history)?;
    let final_checkpoint = out_dir.join("final.tsslckpt");
    state.to_checkpoint(cfg)?.save(&final_checkpoint)?;
    Ok(RunOutcome {
        state,
        final_checkpoint,
        metrics_path,
        steps_path,
        checkpoints,
    })
}
