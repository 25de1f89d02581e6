//! Run configuration: one JSON document with `data`, `model`, `objective`,
//! `train`, `eval`, `seed` and `output_dir`. Every field has a default and
//! unknown keys are rejected. `section.key=value` overrides are applied to
//! the JSON before it is parsed, so they obey the same schema.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{split_base_novel, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::fsl::EvalConfig;
use crate::model::{ModelDims, PriorTable};
use crate::objective::ObjectiveConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub n_per_class: usize,
    pub d_x: usize,
    pub d_a: usize,
    pub d_z: usize,
    pub noise_sigma: f64,
    pub depth: usize,
    pub z_scale: f64,
    /// The last `novel_classes` classes are held out for evaluation.
    pub novel_classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            classes: s.classes,
            n_per_class: s.n_per_class,
            d_x: s.d_x,
            d_a: s.d_a,
            d_z: s.d_z,
            noise_sigma: s.noise_sigma,
            depth: s.depth,
            z_scale: s.z_scale,
            novel_classes: 5,
        }
    }
}

impl DataConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            classes: self.classes,
            n_per_class: self.n_per_class,
            d_x: self.d_x,
            d_a: self.d_a,
            d_z: self.d_z,
            noise_sigma: self.noise_sigma,
            depth: self.depth,
            z_scale: self.z_scale,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_a: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Fixed standard deviation of both reconstruction likelihoods.
    pub sigma_rec: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_a: 4,
            d_z: 8,
            hidden: 64,
            depth: 1,
            sigma_rec: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            output_dir: "out".into(),
        }
    }
}

/// Sets `path` (dot-separated) in `doc` to `raw`, parsed as JSON when it
/// parses and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override {assignment:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override {path:?}: {} is not a section", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        node = obj
            .entry((*key).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("keys is nonempty")
}

impl RunConfig {
    /// Parses and validates a document after applying `overrides`.
    pub fn from_value(mut doc: Value, overrides: &[String]) -> Result<Self> {
        if !doc.is_object() {
            return Err(Error::config("run config must be a JSON object"));
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let doc = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Self::from_value(doc, overrides)
    }

    /// Reads `path`, or starts from defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => Self::from_json_str(&std::fs::read_to_string(p)?, overrides),
            None => Self::from_value(Value::Object(Default::default()), overrides),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth().validate()?;
        if self.data.novel_classes == 0 || self.data.novel_classes >= self.data.classes {
            return Err(Error::config(format!(
                "data.novel_classes must be in 1..{}, got {}",
                self.data.classes, self.data.novel_classes
            )));
        }
        self.objective.validate()?;
        self.train.validate()?;
        if !(self.model.sigma_rec > 0.0) || !self.model.sigma_rec.is_finite() {
            return Err(Error::config("model.sigma_rec must be positive"));
        }
        if self.model.d_a == 0 || self.model.d_z == 0 || self.model.hidden == 0 {
            return Err(Error::config("model sizes must be >= 1"));
        }
        Ok(())
    }

    /// Copy with derived settings filled in, as echoed into artifacts.
    pub fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        out.objective = self.objective.resolve()?;
        Ok(out)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Splits off the last `data.novel_classes` classes of `ds`.
    pub fn split(&self, ds: &Dataset) -> Result<(Dataset, Dataset)> {
        let c = ds.classes();
        if self.data.novel_classes >= c {
            return Err(Error::config(format!(
                "data.novel_classes = {} but the dataset has {c} classes",
                self.data.novel_classes
            )));
        }
        let novel: Vec<usize> = (c - self.data.novel_classes..c).collect();
        split_base_novel(ds, &novel)
    }

    pub fn model_dims(&self, base: &Dataset) -> ModelDims {
        ModelDims {
            d_x: base.d_x(),
            d_a: self.model.d_a,
            d_z: self.model.d_z,
            hidden: self.model.hidden,
            depth: self.model.depth,
            classes: base.classes(),
        }
    }

    /// Attribute prior for `ds` when it carries attributes of width `d_A`.
    pub fn priors(&self, ds: &Dataset) -> Result<Option<PriorTable>> {
        match &ds.attributes {
            Some(a) if a.shape()[1] == self.model.d_a => Ok(Some(PriorTable::new(a.clone(), self.objective.sigma_a)?)),
            Some(a) => Err(Error::config(format!(
                "dataset attributes have width {}, model.d_a is {}",
                a.shape()[1],
                self.model.d_a
            ))),
            None => Ok(None),
        }
    }
}
