//! Run configuration: every tunable of the training and inference pipeline.
//!
//! On disk the configuration is TOML whose dotted keys mirror the module
//! surfaces (`mask.rate`, `net.conv`, `wtv.gamma`, `train.t1`,
//! `infer.samples`, ...). Missing keys take their defaults; unknown keys are
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Architecture, ConvVariant};
use crate::types::MaskMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub mask: MaskConfig,
    pub net: NetConfig,
    pub wtv: WtvConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub mode: MaskMode,
    /// Fraction of traces (rows, elements) hidden per instance.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub depth: usize,
    pub width: usize,
    pub conv: ConvVariant,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WtvConfig {
    pub gamma: f64,
    pub mu: f64,
    pub weight_period: usize,
    pub weight_freeze: usize,
    pub epsilon: f64,
    /// `false` keeps the weight matrix at 1 (plain anisotropic TV).
    pub adaptive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub t1: usize,
    pub tk: usize,
    pub step_size: f64,
    /// Iterations between full-reference PSNR probes (only with ground truth).
    pub psnr_every: usize,
    /// Ensemble size of each PSNR probe.
    pub psnr_samples: usize,
    /// Iterations between parameter checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub samples: usize,
}


impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            mode: MaskMode::Trace,
            rate: 0.4,
        }
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            depth: 5,
            width: 48,
            conv: ConvVariant::Mgrconv,
            dropout: 0.5,
        }
    }
}

impl Default for WtvConfig {
    fn default() -> Self {
        WtvConfig {
            gamma: 0.01,
            mu: 0.1,
            weight_period: 100,
            weight_freeze: 3000,
            epsilon: 1e-8,
            adaptive: true,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t1: 5000,
            tk: 500,
            step_size: 1e-4,
            psnr_every: 100,
            psnr_samples: 8,
            checkpoint_every: 0,
        }
    }
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { samples: 100 }
    }
}

fn open_unit(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::InvalidConfig(format!("{name} = {v} must lie in (0, 1)")));
    }
    Ok(())
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::InvalidConfig(format!("{name} = {v} must be finite and >= 0")));
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML text and validates the result.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Overrides one dotted key, e.g. `set("wtv.gamma", "0")`. The value is
    /// parsed as a TOML literal, falling back to a bare string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));

        let mut parts = key.split('.').peekable();
        let mut cursor = &mut root;
        while let Some(part) = parts.next() {
            let table = cursor
                .as_table_mut()
                .ok_or_else(|| Error::InvalidConfig(format!("{key} does not name a config key")))?;
            if parts.peek().is_none() {
                let slot = table
                    .get_mut(part)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown config key {key}")))?;
                // Integers given where floats are expected (`wtv.gamma=0`).
                *slot = match (&*slot, parsed) {
                    (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
                    (_, v) => v,
                };
                break;
            }
            cursor = table
                .get_mut(part)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown config key {key}")))?;
        }

        let updated: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        open_unit("mask.rate", self.mask.rate)?;
        open_unit("net.dropout", self.net.dropout)?;
        non_negative("wtv.gamma", self.wtv.gamma)?;
        non_negative("wtv.mu", self.wtv.mu)?;
        if !(self.wtv.epsilon > 0.0) {
            return Err(Error::InvalidConfig("wtv.epsilon must be > 0".into()));
        }
        if self.wtv.weight_period == 0 {
            return Err(Error::InvalidConfig("wtv.weight_period must be >= 1".into()));
        }
        if self.wtv.weight_freeze < self.wtv.weight_period {
            return Err(Error::InvalidConfig("wtv.weight_freeze must be >= wtv.weight_period".into()));
        }
        if self.train.tk > self.train.t1 {
            return Err(Error::InvalidConfig("train.tk must not exceed train.t1".into()));
        }
        if !(self.train.step_size > 0.0 && self.train.step_size.is_finite()) {
            return Err(Error::InvalidConfig("train.step_size must be > 0".into()));
        }
        if self.infer.samples == 0 {
            return Err(Error::InvalidConfig("infer.samples must be >= 1".into()));
        }
        self.architecture().validate()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            depth: self.net.depth,
            width: self.net.width,
            conv: self.net.conv,
            dropout: self.net.dropout,
        }
    }

    /// Total ADMM iterations for a group of `slices` gathers.
    pub fn total_iterations(&self, slices: usize) -> usize {
        match slices {
            0 => 0,
            k => self.train.t1 + (k - 1) * self.train.tk,
        }
    }
}
