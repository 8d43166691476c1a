//! Encoder, projector, factor head, evidential heads, auxiliary family
//! classifier and the cosine-gate temperatures, as a flat named parameter
//! store plus graph builders.

mod checkpoint;
mod init;

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{AugmentationFamily, ImageTensor};
use crate::error::{Error, Result};
use crate::fusion::BeliefVars;
use crate::tensor::{Conv2dGeometry, Graph, Tensor, Var};

/// Number of auxiliary classes: the nine corruptions plus clean.
pub const NUM_FAMILIES: usize = AugmentationFamily::COUNT;

const CONV: Conv2dGeometry = Conv2dGeometry {
    kernel: 3,
    stride: 2,
    padding: 1,
};

/// Softplus preimage of 1, the initial cosine-gate temperature.
const TAU_RAW_INIT: f64 = 0.541_324_854_612_918_1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub conv_channels: Vec<usize>,
    pub backbone_dim: usize,
    pub projector_dim: usize,
    pub num_factors: usize,
    pub factor_dim: usize,
    pub num_prototypes: usize,
    pub prior_strength: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            conv_channels: vec![16, 32, 64],
            backbone_dim: 128,
            projector_dim: 64,
            num_factors: 6,
            factor_dim: 16,
            num_prototypes: 16,
            prior_strength: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("backbone_dim", self.backbone_dim),
            ("projector_dim", self.projector_dim),
            ("num_factors", self.num_factors),
            ("factor_dim", self.factor_dim),
            ("num_prototypes", self.num_prototypes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("model.image_size {} < 16", self.image_size)));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Config("model.conv_channels must be non-empty and positive".into()));
        }
        if !(self.prior_strength > 0.0) {
            return Err(Error::Config("model.prior_strength must be positive".into()));
        }
        Ok(())
    }
}

/// Which optional heads a model carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSet {
    pub factors: bool,
    pub evidential: bool,
    pub cosine_gate: bool,
    pub aux: bool,
}

impl HeadSet {
    pub const ALL: HeadSet = HeadSet {
        factors: true,
        evidential: true,
        cosine_gate: true,
        aux: true,
    };
}

/// Ordered named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (name, _)) in entries.iter().enumerate() {
            if index.insert(name.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
            }
        }
        Ok(ParamStore { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }
}

/// Parameters registered on one graph, addressable by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    names: Vec<String>,
}

impl BoundParams {
    pub fn var(&self, store: &ParamStore, name: &str) -> Result<Var> {
        store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))
    }

    /// `(name, var)` pairs in store order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(String::as_str).zip(self.vars.iter().copied())
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Evidence and belief state of one factor for a batch.
#[derive(Clone, Copy, Debug)]
pub struct FactorEvidence {
    pub evidence: Var,
    pub belief: BeliefVars,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub heads: HeadSet,
    pub params: ParamStore,
}

fn conv_name(i: usize) -> (String, String) {
    (format!("encoder.conv{i}.weight"), format!("encoder.conv{i}.bias"))
}

impl Model {
    /// Deterministic initialization; each parameter draws from a stream
    /// keyed by `(seed, name)`, so shared parameters agree across head sets.
    pub fn init(config: ModelConfig, heads: HeadSet, seed: u64) -> Result<Self> {
        config.validate()?;
        if heads.evidential && !heads.factors || heads.cosine_gate && !heads.factors {
            return Err(Error::Config("evidential and cosine-gate heads need the factor head".into()));
        }
        let relu_gain = 6f64.sqrt();
        let mut entries = Vec::new();
        let linear = |entries: &mut Vec<(String, Tensor)>, prefix: &str, fan_in: usize, fan_out: usize, gain: f64| {
            let w = format!("{prefix}.weight");
            entries.push((w.clone(), init::uniform(seed, &w, &[fan_in, fan_out], fan_in, gain)));
            entries.push((format!("{prefix}.bias"), Tensor::zeros(&[fan_out])));
        };
        let mut cin = 3;
        for (i, &cout) in config.conv_channels.iter().enumerate() {
            let (w, b) = conv_name(i);
            let fan_in = CONV.kernel * CONV.kernel * cin;
            entries.push((w.clone(), init::uniform(seed, &w, &[fan_in, cout], fan_in, relu_gain)));
            entries.push((b, Tensor::zeros(&[cout])));
            cin = cout;
        }
        let d = config.backbone_dim;
        linear(&mut entries, "encoder.fc", cin, d, 1.0);
        linear(&mut entries, "projector.fc1", d, d, relu_gain);
        linear(&mut entries, "projector.fc2", d, config.projector_dim, 1.0);
        if heads.factors {
            linear(&mut entries, "factor.stem", d, d, relu_gain);
            let cols = config.num_factors * config.factor_dim;
            entries.push(("factor.proj".into(), init::orthogonal_columns(seed, "factor.proj", d, cols)));
        }
        if heads.evidential {
            for t in 0..config.num_factors {
                linear(&mut entries, &format!("evidential.{t}"), config.factor_dim, config.num_prototypes, 1.0);
            }
        }
        if heads.cosine_gate {
            entries.push(("gate.tau_raw".into(), Tensor::full(&[config.num_factors], TAU_RAW_INIT)));
        }
        if heads.aux {
            linear(&mut entries, "aux", d, NUM_FAMILIES, 1.0);
        }
        Ok(Model {
            config,
            heads,
            params: ParamStore::new(entries)?,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes
    /// against a fresh initialization.
    pub fn from_records(config: ModelConfig, heads: HeadSet, records: &[(String, Tensor)]) -> Result<Self> {
        let template = Model::init(config, heads, 0)?;
        let mut entries = Vec::with_capacity(template.params.len());
        for (name, t) in template.params.iter() {
            let found = records
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if found.1.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    found.1.shape(),
                    t.shape()
                )));
            }
            entries.push((name.to_string(), found.1.clone()));
        }
        Ok(Model {
            config: template.config,
            heads,
            params: ParamStore::new(entries)?,
        })
    }

    /// Registers every parameter on `g`: as differentiable leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut names = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            vars.push(if trainable { g.param(t.clone()) } else { g.constant(t.clone()) });
            names.push(name.to_string());
        }
        BoundParams { vars, names }
    }

    fn linear(&self, g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
        let w = p.var(&self.params, &format!("{prefix}.weight"))?;
        let b = p.var(&self.params, &format!("{prefix}.bias"))?;
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    /// `[N, H, W, 3]` constant from a batch of images.
    pub fn input_batch(&self, g: &mut Graph, images: &[ImageTensor]) -> Result<Var> {
        let s = self.config.image_size;
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(img) = images.iter().find(|i| i.height() != s || i.width() != s) {
            return Err(Error::InvalidArgument(format!(
                "image {}x{} but the model expects {s}x{s}",
                img.height(),
                img.width()
            )));
        }
        let data: Vec<f64> = images.iter().flat_map(|i| i.to_hwc()).collect();
        Ok(g.constant(Tensor::new(vec![images.len(), s, s, 3], data)?))
    }

    /// Backbone features `h: [N, D]`.
    pub fn encode(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let mut a = x;
        for i in 0..self.config.conv_channels.len() {
            let (wn, bn) = conv_name(i);
            let w = p.var(&self.params, &wn)?;
            let b = p.var(&self.params, &bn)?;
            let c = g.conv2d(a, w, CONV)?;
            let cb = g.add(c, b)?;
            a = g.relu(cb);
        }
        let pooled = g.global_avg_pool(a)?;
        self.linear(g, p, "encoder.fc", pooled)
    }

    /// Unit-norm projector output `[N, P]`.
    pub fn project(&self, g: &mut Graph, p: &BoundParams, h: Var) -> Result<Var> {
        let a = self.linear(g, p, "projector.fc1", h)?;
        let a = g.relu(a);
        let out = self.linear(g, p, "projector.fc2", a)?;
        Ok(g.l2_normalize_last(out))
    }

    /// `T` unit-norm factor embeddings `[N, d]`.
    pub fn factorize(&self, g: &mut Graph, p: &BoundParams, h: Var) -> Result<Vec<Var>> {
        let stem = self.linear(g, p, "factor.stem", h)?;
        let stem = g.relu(stem);
        let w = p.var(&self.params, "factor.proj")?;
        let all = g.matmul(stem, w)?;
        let d = self.config.factor_dim;
        (0..self.config.num_factors)
            .map(|t| {
                let zt = g.slice_last(all, t * d, (t + 1) * d)?;
                Ok(g.l2_normalize_last(zt))
            })
            .collect()
    }

    /// Evidence `softplus(φᵗ(z))` and its belief state for factor `t`.
    pub fn evidence(&self, g: &mut Graph, p: &BoundParams, t: usize, z: Var) -> Result<FactorEvidence> {
        if !self.heads.evidential {
            return Err(Error::NoEvidentialHeads("model was built without them".into()));
        }
        let logits = self.linear(g, p, &format!("evidential.{t}"), z)?;
        let evidence = g.softplus(logits);
        let belief = BeliefVars::from_evidence(g, evidence, self.config.prior_strength)?;
        Ok(FactorEvidence { evidence, belief })
    }

    /// Raw family logits `[N, 10]`.
    pub fn aux_logits(&self, g: &mut Graph, p: &BoundParams, h: Var) -> Result<Var> {
        self.linear(g, p, "aux", h)
    }

    /// Scalar pre-softplus temperature of factor `t`.
    pub fn gate_tau_raw(&self, g: &mut Graph, p: &BoundParams, t: usize) -> Result<Var> {
        let raw = p.var(&self.params, "gate.tau_raw")?;
        let one = g.slice_last(raw, t, t + 1)?;
        g.reshape(one, &[])
    }

    /// Inference-mode backbone features for many images, in input order.
    pub fn features(&self, images: &[ImageTensor], batch: usize) -> Result<Tensor> {
        let chunks: Vec<Tensor> = images
            .par_chunks(batch.max(1))
            .map(|chunk| {
                let mut g = Graph::new();
                let p = self.bind(&mut g, false);
                let x = self.input_batch(&mut g, chunk)?;
                let h = self.encode(&mut g, &p, x)?;
                Ok(g.value(h).clone())
            })
            .collect::<Result<_>>()?;
        let d = self.config.backbone_dim;
        let data: Vec<f64> = chunks.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(vec![images.len(), d], data)
    }

    /// Inference-mode per-factor evidence: `[factor][sample] → evidence`.
    pub fn factor_evidence(&self, images: &[ImageTensor], batch: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        if !self.heads.evidential {
            return Err(Error::NoEvidentialHeads("model was built without them".into()));
        }
        let t_count = self.config.num_factors;
        let chunks: Vec<Vec<Tensor>> = images
            .par_chunks(batch.max(1))
            .map(|chunk| {
                let mut g = Graph::new();
                let p = self.bind(&mut g, false);
                let x = self.input_batch(&mut g, chunk)?;
                let h = self.encode(&mut g, &p, x)?;
                let zs = self.factorize(&mut g, &p, h)?;
                zs.iter()
                    .enumerate()
                    .map(|(t, &z)| {
                        let ev = self.evidence(&mut g, &p, t, z)?;
                        Ok(g.value(ev.evidence).clone())
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let mut out = vec![Vec::with_capacity(images.len()); t_count];
        for chunk in chunks {
            for (t, e) in chunk.into_iter().enumerate() {
                out[t].extend((0..e.num_rows()).map(|r| e.row(r).to_vec()));
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, config_json: String) -> Checkpoint {
        Checkpoint {
            config_json,
            records: self.params.entries().to_vec(),
        }
    }
}
