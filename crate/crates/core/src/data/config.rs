use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::exemplars::SelectionMode;
use crate::pscs::StrategyMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CblConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Full-batch loss is logged every this many steps (and at the end).
    pub log_every: usize,
}

impl Default for CblConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_steps: 20_000,
            learning_rate: 5e-4,
            weight_decay: 0.0,
            log_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FclConfig {
    pub batch_size: usize,
    /// Number of minibatch updates.
    pub max_iterations: usize,
    pub lambda: f64,
    pub alpha: f64,
    /// Overrides the default `1 / (3 L)` step.
    pub step_size: Option<f64>,
    /// Stop once the first-order optimality residual drops below this.
    pub tolerance: f64,
}

impl Default for FclConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_iterations: 10_000,
            lambda: 7e-4,
            alpha: 0.99,
            step_size: None,
            tolerance: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExemplarConfig {
    pub shots: usize,
    pub mode: SelectionMode,
}

impl Default for ExemplarConfig {
    fn default() -> Self {
        Self {
            shots: 4,
            mode: SelectionMode::Fps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub top_k: usize,
    /// Number of leading test images to explain.
    pub count: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            count: 10,
        }
    }
}

/// Input files. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub concepts: PathBuf,
    pub text_embeddings: PathBuf,
    pub train_embeddings: PathBuf,
    pub train_labels: PathBuf,
    pub test_embeddings: PathBuf,
    pub test_labels: PathBuf,
    /// Image embeddings from the affinity encoder, if it differs from the
    /// classification backbone. Defaults to `train_embeddings`.
    pub affinity_embeddings: Option<PathBuf>,
    /// Test-split counterpart of `affinity_embeddings`.
    pub test_affinity_embeddings: Option<PathBuf>,
}

impl InputPaths {
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.concepts);
        fix(&mut self.text_embeddings);
        fix(&mut self.train_embeddings);
        fix(&mut self.train_labels);
        fix(&mut self.test_embeddings);
        fix(&mut self.test_labels);
        if let Some(p) = self.affinity_embeddings.as_mut() {
            fix(p);
        }
        if let Some(p) = self.test_affinity_embeddings.as_mut() {
            fix(p);
        }
    }

    pub fn all(&self) -> Vec<&Path> {
        let mut out = vec![
            self.concepts.as_path(),
            self.text_embeddings.as_path(),
            self.train_embeddings.as_path(),
            self.train_labels.as_path(),
            self.test_embeddings.as_path(),
            self.test_labels.as_path(),
        ];
        out.extend(self.affinity_embeddings.as_deref());
        out.extend(self.test_affinity_embeddings.as_deref());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tau_conf: f64,
    pub tau_merge: f64,
    pub k_exclusive: usize,
    pub beta: f64,
    pub seed: u64,
    pub mode: StrategyMode,
    /// Fraction of training rows used for the merge correlation.
    pub merge_subsample: Option<f64>,
    pub cbl: CblConfig,
    pub fcl: FclConfig,
    pub exemplars: ExemplarConfig,
    pub explain: ExplainConfig,
    pub inputs: InputPaths,
    pub out_dir: Option<PathBuf>,
    /// Also write the full affinity matrix as CSV (debugging aid).
    pub dump_affinity: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_conf: 0.20,
            tau_merge: 0.9997,
            k_exclusive: 5,
            beta: 0.25,
            seed: 0,
            mode: StrategyMode::PartiallyShared,
            merge_subsample: None,
            cbl: CblConfig::default(),
            fcl: FclConfig::default(),
            exemplars: ExemplarConfig::default(),
            explain: ExplainConfig::default(),
            inputs: InputPaths::default(),
            out_dir: None,
            dump_affinity: false,
        }
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::out_of_range(name, v, "finite"))
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        finite("tau_conf", self.tau_conf)?;
        if !(self.tau_conf > 0.0 && self.tau_conf < 1.0) {
            return Err(Error::out_of_range("tau_conf", self.tau_conf, "(0, 1)"));
        }
        finite("tau_merge", self.tau_merge)?;
        if !(self.tau_merge > 0.0 && self.tau_merge <= 1.0) {
            return Err(Error::out_of_range("tau_merge", self.tau_merge, "(0, 1]"));
        }
        finite("beta", self.beta)?;
        if self.beta < 0.0 {
            return Err(Error::out_of_range("beta", self.beta, ">= 0"));
        }
        if let Some(f) = self.merge_subsample {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::out_of_range("merge_subsample", f, "(0, 1]"));
            }
        }
        let cbl = &self.cbl;
        if cbl.batch_size == 0 {
            return Err(Error::out_of_range("cbl.batch_size", 0, ">= 1"));
        }
        finite("cbl.learning_rate", cbl.learning_rate)?;
        if cbl.learning_rate <= 0.0 {
            return Err(Error::out_of_range(
                "cbl.learning_rate",
                cbl.learning_rate,
                "> 0",
            ));
        }
        finite("cbl.weight_decay", cbl.weight_decay)?;
        if cbl.weight_decay < 0.0 {
            return Err(Error::out_of_range(
                "cbl.weight_decay",
                cbl.weight_decay,
                ">= 0",
            ));
        }
        if cbl.log_every == 0 {
            return Err(Error::out_of_range("cbl.log_every", 0, ">= 1"));
        }
        let fcl = &self.fcl;
        if fcl.batch_size == 0 {
            return Err(Error::out_of_range("fcl.batch_size", 0, ">= 1"));
        }
        finite("fcl.lambda", fcl.lambda)?;
        if fcl.lambda < 0.0 {
            return Err(Error::out_of_range("fcl.lambda", fcl.lambda, ">= 0"));
        }
        finite("fcl.alpha", fcl.alpha)?;
        if !(0.0..=1.0).contains(&fcl.alpha) {
            return Err(Error::out_of_range("fcl.alpha", fcl.alpha, "[0, 1]"));
        }
        if let Some(step) = fcl.step_size {
            if !(step.is_finite() && step > 0.0) {
                return Err(Error::out_of_range("fcl.step_size", step, "finite and > 0"));
            }
        }
        finite("fcl.tolerance", fcl.tolerance)?;
        if self.exemplars.shots == 0 {
            return Err(Error::out_of_range("exemplars.shots", 0, ">= 1"));
        }
        if self.explain.top_k == 0 {
            return Err(Error::out_of_range("explain.top_k", 0, ">= 1"));
        }
        Ok(())
    }

    /// Parses a JSON document after applying `key.path=value` overrides.
    /// Override values are parsed as JSON, falling back to a plain string.
    pub fn from_json_with_overrides(
        json: &str,
        path: &Path,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let invalid = |e: serde_json::Error| Error::Invalid(format!("{}: {e}", path.display()));
        let mut doc: Value = serde_json::from_str(json).map_err(invalid)?;
        for (key, raw) in overrides {
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut doc, key, value)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(invalid)?;
        Ok(cfg)
    }

    /// Reads, overrides, resolves relative input paths and validates.
    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json_with_overrides(&json, path, overrides)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.inputs.resolve(base);
        if let Some(out) = cfg.out_dir.as_mut() {
            if out.is_relative() {
                *out = base.join(&*out);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Invalid(format!("override {key}: not an object at {part}")))?;
        if depth + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj
            .entry((*part).to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Invalid(format!("empty override key {key:?}")))
}
