//! Run-configuration schema: one JSON document with a section per pipeline
//! stage. Sections are optional; each command names the ones it needs.
//!
//! Parsing is strict. After deserialization the raw document is re-checked
//! against the parsed echo, so a key serde would silently drop — a typo, a
//! setting under the wrong section — fails the load instead of being
//! ignored.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use lacuna_core::denoiser::DenoiserConfig;
use lacuna_core::error::{CoreError, Result};
use lacuna_core::evalkit::Region;
use lacuna_core::masks::{MaskSpec, PartitionSpec};
use lacuna_core::pdegen::PdeConfig;
use lacuna_core::sampling::{OmegaKind, SamplerConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PdeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<MaskSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<DenoiserConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Dataset directory produced by `gen-data`.
    pub dataset: PathBuf,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    #[serde(default = "default_betas")]
    pub adam_betas: (f64, f64),
    /// Steps between intermediate checkpoint files; `None` keeps only the
    /// final one.
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMethod {
    /// One ensemble-averaged denoiser evaluation at minimal noise.
    SingleStep,
    /// Full reverse-ODE trajectory with per-step context redraws.
    #[default]
    MultiStep,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    /// Ensemble size.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub omega: OmegaKind,
    #[serde(default)]
    pub method: SampleMethod,
    /// Impute only the first `limit` samples when set.
    #[serde(default)]
    pub limit: Option<usize>,
}

fn default_k() -> usize {
    16
}

fn default_steps() -> usize {
    200
}

fn default_delta() -> f64 {
    1e-3
}

impl SampleSection {
    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            k: self.k,
            delta: self.delta,
            steps: self.steps,
            omega: self.omega,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Dataset directory holding observations, masks, and ground truth.
    pub dataset: PathBuf,
    /// Directory of imputed fields produced by `impute`.
    pub imputed: PathBuf,
    #[serde(default = "default_region")]
    pub region: Region,
}

fn default_region() -> Region {
    Region::Unobserved
}

impl RunConfig {
    /// Validates every section that is present; commands check separately
    /// that the sections they need exist.
    pub fn validate(&self) -> Result<()> {
        if let Some(d) = &self.data {
            d.validate()?;
        }
        if let Some(m) = &self.masks {
            m.validate()?;
        }
        if let Some(p) = &self.partition {
            p.validate()?;
        }
        if let Some(m) = &self.model {
            m.validate()?;
        }
        if let Some(t) = &self.train {
            if t.batch_size == 0 || t.steps == 0 {
                return Err(CoreError::config(
                    "train.batch_size and train.steps must be positive",
                ));
            }
            if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
                return Err(CoreError::config(format!(
                    "train.learning_rate must be finite and non-negative, got {}",
                    t.learning_rate
                )));
            }
            let (b1, b2) = t.adam_betas;
            if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
                return Err(CoreError::config(format!(
                    "train.adam_betas must lie in [0, 1), got ({b1}, {b2})"
                )));
            }
        }
        if let Some(s) = &self.sample {
            // the seed is irrelevant to validation
            s.sampler(0).validate()?;
        }
        Ok(())
    }
}

pub fn load(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    let raw: Value = serde_json::from_str(&text)
        .map_err(|e| CoreError::config(format!("config is not valid JSON: {e}")))?;
    let parsed: RunConfig = serde_json::from_value(raw.clone())
        .map_err(|e| CoreError::config(format!("config does not match the schema: {e}")))?;
    let echo = serde_json::to_value(&parsed)?;
    let mut unknown = Vec::new();
    collect_unknown_keys(&raw, &echo, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(CoreError::config(format!(
            "unknown config keys: {}",
            unknown.join(", ")
        )));
    }
    parsed.validate()?;
    Ok(parsed)
}

/// Flags object keys present in the document but absent from its parsed
/// echo. Serde skips unrecognized keys inside nested structs by default, and
/// a config typo must not pass silently.
fn collect_unknown_keys(input: &Value, echo: &Value, path: &str, out: &mut Vec<String>) {
    match (input, echo) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in a {
                let here =
                    if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get(k) {
                    Some(bv) => collect_unknown_keys(v, bv, &here, out),
                    None => out.push(here),
                }
            }
        }
        (Value::Array(a), Value::Array(b)) => {
            for (i, v) in a.iter().enumerate() {
                if let Some(bv) = b.get(i) {
                    collect_unknown_keys(v, bv, &format!("{path}[{i}]"), out);
                }
            }
        }
        _ => {}
    }
}
