use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use trust_ssl::data::{synthetic_splits, Dataset, Split};
use trust_ssl::eval::{Detector, OodShift, ProbeConfig};
use trust_ssl::train::TrainConfig;

use crate::Usage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Directory holding `train.json`/`test.json` and their payloads; only
    /// read when `source` is `directory`.
    pub path: Option<PathBuf>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub num_classes: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            source: DataSource::Synthetic,
            path: None,
            train_samples: 2000,
            test_samples: 500,
            num_classes: 8,
            size: 32,
            seed: 1,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> anyhow::Result<(Dataset, Dataset)> {
        match self.source {
            DataSource::Synthetic => Ok(synthetic_splits(
                self.train_samples,
                self.test_samples,
                self.num_classes,
                self.size,
                self.seed,
            )?),
            DataSource::Directory => {
                let dir = self
                    .path
                    .as_deref()
                    .ok_or_else(|| Usage("dataset.source is directory but dataset.path is unset".into()))?;
                load_dir(dir)
            }
        }
    }
}

pub fn load_dir(dir: &Path) -> anyhow::Result<(Dataset, Dataset)> {
    for split in ["train.json", "test.json"] {
        if !dir.join(split).is_file() {
            return Err(Usage(format!("{}: missing {split}", dir.display())).into());
        }
    }
    let train = Dataset::load_dir(dir, Split::Train).with_context(|| format!("reading {}", dir.display()))?;
    let test = Dataset::load_dir(dir, Split::Test).with_context(|| format!("reading {}", dir.display()))?;
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub probe: ProbeConfig,
    /// Images per forward pass when extracting frozen features.
    pub feature_batch: usize,
    /// Seeds the corruption, K–I and OOD streams.
    pub seed: u64,
    /// Test images paired with their corrupted copies in the K–I trace.
    pub ki_pairs: usize,
    pub ood_shifts: Vec<OodShift>,
    pub detectors: Vec<Detector>,
    pub energy_temperature: f64,
    /// View pairs averaged by the native K+I score.
    pub native_draws: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            probe: ProbeConfig::default(),
            feature_batch: 256,
            seed: 1,
            ki_pairs: 200,
            ood_shifts: OodShift::ALL.to_vec(),
            detectors: Detector::ALL.to_vec(),
            energy_temperature: 1.0,
            native_draws: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed. When set it replaces `train.seed`, `eval.seed` and
    /// `eval.probe.seed`.
    pub seed: Option<u64>,
    pub output: PathBuf,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub eval: EvalSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: None,
            output: PathBuf::from("runs/default"),
            train: TrainConfig::default(),
            dataset: DatasetSpec::default(),
            eval: EvalSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
    }

    /// Applies command-line overrides and the master seed, then validates.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> anyhow::Result<Self> {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.eval.seed = s;
            self.eval.probe.seed = s;
        }
        if let Some(out) = out {
            self.output = out;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate().map_err(|e| Usage(e.to_string()))?;
        let d = &self.dataset;
        if d.num_classes < 2 || d.train_samples < d.num_classes || d.test_samples == 0 {
            return Err(Usage(format!("dataset: unusable sizes {d:?}")).into());
        }
        if d.source == DataSource::Synthetic && d.size != self.train.model.image_size {
            return Err(Usage(format!(
                "dataset.size {} differs from train.model.image_size {}",
                d.size, self.train.model.image_size
            ))
            .into());
        }
        let e = &self.eval;
        if e.feature_batch == 0 || e.ki_pairs == 0 || e.native_draws == 0 || !(e.energy_temperature > 0.0) {
            return Err(Usage("eval: feature_batch, ki_pairs, native_draws and energy_temperature must be positive".into()).into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON (sorted keys, no whitespace). The
    /// output directory is not part of the experiment and is left out.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value["output"] = serde_json::Value::Null;
        hex::encode(Sha256::digest(canonical(&value).as_bytes()))
    }
}

fn canonical(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<_> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => format!("[{}]", items.iter().map(canonical).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}
