use std::path::{Path, PathBuf};

use anyhow::Context;
use trust_ssl::data::{AugmentationFamily, Dataset, RngStream};
use trust_ssl::eval::{
    auroc, corruption_grid, energy_score, feature_norm_score, ki_trajectory, linear_probe, native_ki_score, Detector,
    MahalanobisFit, OodScoreSet, OodShift, ProbeResult, RobustnessGrid,
};
use trust_ssl::model::Model;
use trust_ssl::train::{load_checkpoint, run_pretraining, TrainConfig};
use trust_ssl::Error;

use crate::config::{load_dir, DataSource, ExperimentConfig};
use crate::manifest::{file_entry, unix_now, FileEntry, RunManifest};
use crate::Usage;

const OOD_DOMAIN: u64 = 0x4F4F_4453; // "OODS"

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn require_file(path: &Path) -> anyhow::Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Usage(format!("{}: no such file", path.display())).into())
    }
}

fn input_entry(path: &Path) -> anyhow::Result<FileEntry> {
    file_entry(path, path.to_path_buf())
}

fn datasets(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> anyhow::Result<(Dataset, Dataset)> {
    match data_dir {
        Some(dir) => load_dir(dir),
        None => cfg.dataset.load(),
    }
}

fn dataset_label(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> String {
    match (data_dir, cfg.dataset.source, cfg.dataset.path.as_deref()) {
        (Some(dir), _, _) | (None, DataSource::Directory, Some(dir)) => dir.display().to_string(),
        _ => format!("synthetic-{}c-{}px-seed{}", cfg.dataset.num_classes, cfg.dataset.size, cfg.dataset.seed),
    }
}

fn check_size(model_size: usize, data: &Dataset) -> anyhow::Result<()> {
    if data.manifest.size != model_size {
        return Err(Usage(format!(
            "dataset images are {}px but the model expects {}px",
            data.manifest.size, model_size
        ))
        .into());
    }
    Ok(())
}

struct Loaded {
    train_cfg: TrainConfig,
    model: Model,
    train: Dataset,
    test: Dataset,
    inputs: Vec<FileEntry>,
}

fn load_eval_inputs(cfg: &ExperimentConfig, checkpoint: &Path, data_dir: Option<&Path>) -> anyhow::Result<Loaded> {
    require_file(checkpoint)?;
    let (train_cfg, state) = load_checkpoint(checkpoint)?;
    let (train, test) = datasets(cfg, data_dir)?;
    check_size(state.model.config.image_size, &train)?;
    check_size(state.model.config.image_size, &test)?;
    Ok(Loaded {
        train_cfg,
        model: state.model,
        train,
        test,
        inputs: vec![input_entry(checkpoint)?],
    })
}

fn run_probe(cfg: &ExperimentConfig, l: &Loaded, label: String) -> anyhow::Result<ProbeResult> {
    let batch = cfg.eval.feature_batch;
    let ftr = l.model.features(&l.train.images, batch)?;
    let fte = l.model.features(&l.test.images, batch)?;
    let mut result = linear_probe(&ftr, l.train.labels(), &fte, l.test.labels(), &cfg.eval.probe)?;
    result.dataset = label;
    Ok(result)
}

pub fn pretrain(cfg: &ExperimentConfig, resume: Option<&Path>) -> anyhow::Result<()> {
    let started = unix_now();
    let out = &cfg.output;
    if let Some(r) = resume {
        require_file(r)?;
    }
    let (train, _) = cfg.dataset.load()?;
    check_size(cfg.train.model.image_size, &train)?;
    create_dir(out)?;
    write(&out.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    let outcome = run_pretraining(&cfg.train, &train, out, resume)?;
    let inputs = resume.map(input_entry).transpose()?.into_iter().collect();
    RunManifest::write("pretrain", cfg.hash(), inputs, started, out)?;
    println!(
        "{} epochs of {} -> {}",
        outcome.state.epochs_completed,
        cfg.train.variant.name(),
        outcome.final_checkpoint.display()
    );
    Ok(())
}

pub fn probe(cfg: &ExperimentConfig, checkpoint: &Path, data_dir: Option<&Path>) -> anyhow::Result<()> {
    let started = unix_now();
    let l = load_eval_inputs(cfg, checkpoint, data_dir)?;
    let result = run_probe(cfg, &l, dataset_label(cfg, data_dir))?;
    create_dir(&cfg.output)?;
    write(&cfg.output.join("probe.json"), serde_json::to_vec_pretty(&result)?)?;
    RunManifest::write("probe", cfg.hash(), l.inputs, started, &cfg.output)?;
    println!("probe accuracy {:.2}% (val {:.2}%, epoch {})", result.accuracy, result.val_accuracy, result.best_epoch);
    Ok(())
}

pub fn corrupt_eval(cfg: &ExperimentConfig, checkpoint: &Path, data_dir: Option<&Path>) -> anyhow::Result<()> {
    let started = unix_now();
    let l = load_eval_inputs(cfg, checkpoint, data_dir)?;
    let result = run_probe(cfg, &l, dataset_label(cfg, data_dir))?;
    let grid = corruption_grid(&l.model, &result.head, &l.test, cfg.eval.seed, cfg.eval.feature_batch)?;
    create_dir(&cfg.output)?;
    write(&cfg.output.join("grid.csv"), grid.to_csv())?;
    RunManifest::write("corrupt-eval", cfg.hash(), l.inputs, started, &cfg.output)?;
    print!("{}", grid.to_csv());
    Ok(())
}

pub fn ki_trace(cfg: &ExperimentConfig, checkpoint: &Path, data_dir: Option<&Path>) -> anyhow::Result<()> {
    let started = unix_now();
    let l = load_eval_inputs(cfg, checkpoint, data_dir)?;
    let trace = ki_trajectory(
        &l.model,
        &l.test.images,
        cfg.eval.ki_pairs,
        &AugmentationFamily::CORRUPTIONS,
        &[1, 2, 3, 4, 5],
        cfg.eval.seed,
        l.train_cfg.gate.epsilon,
        cfg.eval.feature_batch,
    )?;
    create_dir(&cfg.output)?;
    write(&cfg.output.join("ki_trace.json"), serde_json::to_vec_pretty(&trace)?)?;
    write(&cfg.output.join("ki_trace.csv"), trace.to_csv())?;
    RunManifest::write("ki-trace", cfg.hash(), l.inputs, started, &cfg.output)?;
    print!("{}", trace.to_csv());
    Ok(())
}

pub fn ood(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    data_dir: Option<&Path>,
    shifts: &[OodShift],
    detectors: &[Detector],
) -> anyhow::Result<()> {
    let started = unix_now();
    let l = load_eval_inputs(cfg, checkpoint, data_dir)?;
    if detectors.contains(&Detector::NativeKi) && !l.model.heads.evidential {
        return Err(Error::NoEvidentialHeads(format!(
            "{} is a {} checkpoint; native_ki is only defined for evidential variants",
            checkpoint.display(),
            l.train_cfg.variant.name()
        ))
        .into());
    }
    let (e, batch) = (&cfg.eval, cfg.eval.feature_batch);
    let fit = if detectors.contains(&Detector::Mahalanobis) {
        Some(MahalanobisFit::fit(&l.model.features(&l.train.images, batch)?)?)
    } else {
        None
    };
    let score = |images: &[trust_ssl::data::ImageTensor], d: Detector| -> anyhow::Result<Vec<f64>> {
        Ok(match d {
            Detector::NativeKi => native_ki_score(
                &l.model,
                images,
                e.native_draws,
                e.seed,
                &l.train_cfg.augment,
                l.train_cfg.gate.epsilon,
                batch,
            )?,
            _ => {
                let h = l.model.features(images, batch)?;
                match d {
                    Detector::Mahalanobis => fit.as_ref().expect("fitted above").score(&h)?,
                    Detector::Energy => energy_score(&h, e.energy_temperature),
                    _ => feature_norm_score(&h),
                }
            }
        })
    };
    let id_scores = detectors
        .iter()
        .map(|&d| score(&l.test.images, d))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut sets = Vec::new();
    let mut csv = String::from("detector,shift,auroc\n");
    for &shift in shifts {
        let shifted: Vec<_> = l
            .test
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let key = [OOD_DOMAIN, e.seed, shift as u64, i as u64];
                shift.apply(img, &mut RngStream::from_key(&key))
            })
            .collect();
        for (&d, id_scores) in detectors.iter().zip(&id_scores) {
            let ood_scores = score(&shifted, d)?;
            let auroc = auroc(id_scores, &ood_scores)?;
            csv.push_str(&format!("{},{},{:.6}\n", d.name(), shift.name(), auroc));
            sets.push(OodScoreSet {
                detector: d,
                shift: shift.name().to_string(),
                id_scores: id_scores.clone(),
                ood_scores,
                auroc,
            });
        }
    }
    create_dir(&cfg.output)?;
    write(&cfg.output.join("ood.json"), serde_json::to_vec_pretty(&sets)?)?;
    write(&cfg.output.join("ood_auroc.csv"), &csv)?;
    RunManifest::write("ood", cfg.hash(), l.inputs, started, &cfg.output)?;
    print!("{csv}");
    Ok(())
}

pub fn gen_data(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let started = unix_now();
    if cfg.dataset.source != DataSource::Synthetic {
        return Err(Usage("gen-data only writes synthetic datasets".into()).into());
    }
    let (train, test) = cfg.dataset.load()?;
    train.save_dir(&cfg.output)?;
    test.save_dir(&cfg.output)?;
    RunManifest::write("gen-data", cfg.hash(), Vec::new(), started, &cfg.output)?;
    println!("{} train / {} test images -> {}", train.len(), test.len(), cfg.output.display());
    Ok(())
}

fn read_grid(path: &Path) -> anyhow::Result<RobustnessGrid> {
    require_file(path)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RobustnessGrid::from_csv(&text).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
}

/// Signed per-cell `candidate - baseline`.
pub fn diff_grids(cfg: &ExperimentConfig, baseline: &Path, candidate: &Path) -> anyhow::Result<PathBuf> {
    let started = unix_now();
    let (a, b) = (read_grid(baseline)?, read_grid(candidate)?);
    let delta = a.diff(&b);
    create_dir(&cfg.output)?;
    let path = cfg.output.join("grid_diff.csv");
    write(&path, delta.to_csv())?;
    let inputs = vec![input_entry(baseline)?, input_entry(candidate)?];
    RunManifest::write("diff-grids", cfg.hash(), inputs, started, &cfg.output)?;
    print!("{}", delta.to_csv());
    Ok(path)
}
