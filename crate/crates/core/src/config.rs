//! Run configuration: one JSON object per module, dotted-path overrides and a
//! content hash shared by every run of a seed sweep.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::controller::{MpcConfig, NominalFeedback};
use crate::estimator::EstimatorConfig;
use crate::model::{BearingScenario, NoiseSpec};
use crate::simulation::{LoopConfig, LyapunovConfig, Mode, WarmupPolicy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed configuration: {0}")]
    Parse(#[from] serde_json::Error),
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_owned(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorSection {
    pub window_len: usize,
    pub p_init: Vec<f64>,
    #[serde(flatten)]
    pub solver: EstimatorConfig,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            window_len: 10,
            p_init: vec![3.0, 10.0],
            solver: EstimatorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerSection {
    /// Gain `k` of the nominal feedback.
    pub gain: f64,
    /// Radius below which the nominal feedback is linear.
    pub sat_radius: f64,
    #[serde(flatten)]
    pub mpc: MpcConfig,
}

impl Default for ControllerSection {
    fn default() -> Self {
        Self {
            gain: 1.0,
            sat_radius: 2.0,
            mpc: MpcConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationSection {
    pub steps: usize,
    pub mode: Mode,
    pub oracle: bool,
    /// Defaults to `3 L` when absent.
    pub burn_in: Option<usize>,
    pub lyapunov_lambda: f64,
    pub warmup: WarmupPolicy,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            steps: 300,
            mode: Mode::ObservabilitySeeking,
            oracle: false,
            burn_in: None,
            lyapunov_lambda: LyapunovConfig::default().lambda,
            warmup: WarmupPolicy::Nominal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub model: BearingScenario,
    pub estimator: EstimatorSection,
    pub controller: ControllerSection,
    pub noise: NoiseSpec,
    pub simulation: SimulationSection,
    pub output: OutputSection,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let doc: Value = serde_json::from_str(text)?;
        let cfg: Self = serde_json::from_value(doc.clone())?;
        reject_unknown(&doc, &serde_json::to_value(&cfg)?, "")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    /// Applies `path=value` overrides; `value` is parsed as JSON and falls back
    /// to a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut doc = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| invalid(item, "override must look like path=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
            set_path(&mut doc, path, value)?;
        }
        let cfg: Self = serde_json::from_value(doc)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if !(m.delta > 0.0) {
            return Err(invalid("model.delta", "must be positive"));
        }
        if !(m.u_max > 0.0) {
            return Err(invalid("model.u_max", "must be positive"));
        }
        if m.p_true.iter().chain(&m.x0).any(|v| !v.is_finite()) {
            return Err(invalid("model", "p_true and x0 must be finite"));
        }
        let e = &self.estimator;
        if e.window_len < 2 {
            return Err(invalid("estimator.window_len", "must be at least 2"));
        }
        if e.p_init.len() != 2 || e.p_init.iter().any(|v| !v.is_finite()) {
            return Err(invalid("estimator.p_init", "must be a finite 2-vector"));
        }
        e.solver.validate().map_err(|msg| invalid("estimator", msg))?;
        let c = &self.controller;
        let mpc = &c.mpc;
        if !(mpc.mu > 0.0 && mpc.mu < 1.0) {
            return Err(invalid("controller.mu", "must lie in (0, 1)"));
        }
        if !(mpc.delta_prime > 0.0) {
            return Err(invalid("controller.delta_prime", "must be positive"));
        }
        mpc.validate().map_err(|msg| invalid("controller", msg))?;
        if !(m.delta * c.gain < 1.0) {
            return Err(invalid("controller.gain", "model.delta * gain must be below 1"));
        }
        self.feedback().validate().map_err(|msg| invalid("controller", msg))?;
        if !(self.noise.nu >= 0.0) {
            return Err(invalid("noise.nu", "must be nonnegative"));
        }
        let s = &self.simulation;
        if s.steps <= e.window_len {
            return Err(invalid("simulation.steps", "must exceed estimator.window_len"));
        }
        if !(s.lyapunov_lambda > 0.0) {
            return Err(invalid("simulation.lyapunov_lambda", "must be positive"));
        }
        if s.burn_in.is_some_and(|b| b >= s.steps) {
            return Err(invalid("simulation.burn_in", "must be below simulation.steps"));
        }
        if let WarmupPolicy::Scripted { controls } = &s.warmup {
            if controls.iter().any(|u| u.len() != 2) {
                return Err(invalid("simulation.warmup.controls", "entries must be 2-vectors"));
            }
        }
        Ok(())
    }

    pub fn burn_in(&self) -> usize {
        self.simulation.burn_in.unwrap_or(3 * self.estimator.window_len)
    }

    pub fn feedback(&self) -> NominalFeedback {
        NominalFeedback {
            gain: self.controller.gain,
            sat_radius: self.controller.sat_radius,
            u_max: self.model.u_max,
            delta: self.model.delta,
        }
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            window_len: self.estimator.window_len,
            p_init: DVector::from_column_slice(&self.estimator.p_init),
            estimator: self.estimator.solver.clone(),
            mpc: self.controller.mpc.clone(),
            feedback: self.feedback(),
            noise: self.noise,
            lyapunov: LyapunovConfig {
                lambda: self.simulation.lyapunov_lambda,
            },
            warmup: self.simulation.warmup.clone(),
        }
    }

    /// SHA-256 of the canonical JSON with the seed, mode and output directory
    /// removed, so runs that differ only in those share a hash.
    pub fn hash(&self) -> String {
        let mut doc = serde_json::to_value(self).expect("configuration serializes");
        if let Some(obj) = doc.as_object_mut() {
            obj.remove("output");
            if let Some(noise) = obj.get_mut("noise").and_then(Value::as_object_mut) {
                noise.remove("seed");
            }
            if let Some(sim) = obj.get_mut("simulation").and_then(Value::as_object_mut) {
                sim.remove("mode");
            }
        }
        // serde_json maps are ordered by key, so this is canonical
        let digest = Sha256::digest(doc.to_string().as_bytes());
        hex::encode(digest)
    }
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    let mut node = doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| invalid(path, format!("'{}' is not an object", parts[..i].join("."))))?;
        if !obj.contains_key(*key) {
            return Err(invalid(path, format!("unknown key '{key}'")));
        }
        if i + 1 == parts.len() {
            obj.insert((*key).to_owned(), value);
            return Ok(());
        }
        node = obj.get_mut(*key).expect("checked above");
    }
    Err(invalid(path, "empty override path"))
}

/// Every key of the input document must survive a parse/serialize cycle;
/// anything dropped on the way is a misspelt field.
fn reject_unknown(input: &Value, canonical: &Value, prefix: &str) -> Result<(), ConfigError> {
    if let (Value::Object(given), Value::Object(known)) = (input, canonical) {
        for (key, value) in given {
            let field = if prefix.is_empty() {
                key.clone()
            } else {
                format!("{prefix}.{key}")
            };
            match known.get(key) {
                Some(k) => reject_unknown(value, k, &field)?,
                None => return Err(invalid(&field, "unknown field")),
            }
        }
    }
    Ok(())
}
