//! Run configuration shared by every command.
//!
//! A run is described by one JSON document with the sections `data`,
//! `train`, `eval`, `lipschitz` and `out_dir`. Unknown keys are rejected and
//! missing keys take their defaults. [`RunConfig::resolved`] writes every
//! default out so the persisted copy alone reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::lipschitz::LipschitzOptions;
use crate::losses::{LossConfig, Variant};
use crate::training::TrainConfig;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

/// Probe and robustness options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Fraction of the labelled training split available to the probe.
    pub label_fraction: f64,
    /// Seed for label subsets and probe validation splits.
    pub seed: u64,
    /// Seed for shift-suite draws.
    pub shift_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { label_fraction: 1.0, seed: 0, shift_seed: 0 }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!("eval.label_fraction must be in (0, 1], got {}", self.label_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub lipschitz: LipschitzOptions,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: GeneratorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            lipschitz: LipschitzOptions::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    /// Sets every seed in the document.
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub variant: Option<Variant>,
    pub beta: Option<f64>,
    pub label_fraction: Option<f64>,
}

impl RunConfig {
    /// Parses a JSON document. Syntax and schema errors keep their line and
    /// column.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::json("run config", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Applies `o`, then resolves and validates.
    pub fn with_overrides(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.set_seed(s);
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(v) = o.variant {
            let old = self.train.loss.clone();
            self.train.loss = LossConfig { deterministic: old.deterministic, ..LossConfig::new(v) };
            if old.variant.is_byol() == v.is_byol() {
                self.train.loss.kappa_e = old.kappa_e;
            }
            self.train.loss.kappa_b = old.kappa_b;
            self.train.loss.kappa_d = old.kappa_d;
            if old.variant.is_compressed() == v.is_compressed() {
                self.train.loss.beta = old.beta;
            }
        }
        if let Some(b) = o.beta {
            self.train.loss.beta = Some(b);
        }
        if let Some(f) = o.label_fraction {
            self.eval.label_fraction = f;
        }
        let r = self.resolved();
        r.validate()?;
        Ok(r)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self.eval.shift_seed = seed;
        self.lipschitz.seed = seed;
    }

    /// Defaults written out; the stack input width follows the data layout.
    pub fn resolved(&self) -> Self {
        let mut r = self.clone();
        r.train = r.train.resolved();
        r.train.dims.input_dim = r.data.input_dim();
        r
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.lipschitz.validate()?;
        if self.train.dims.input_dim != self.data.input_dim() {
            return Err(Error::Config(format!(
                "train.dims.input_dim {} does not match data width {}",
                self.train.dims.input_dim,
                self.data.input_dim()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::json("run config", e))?;
        s.push('\n');
        Ok(s)
    }

    /// Writes the resolved document to `dir`.
    pub fn persist(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.resolved().to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
