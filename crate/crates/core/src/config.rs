//! Run configuration: one TOML file with strict key checking.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/var"
//! precision = "f64"
//!
//! [data]
//! source = "synthetic"
//! split = [2000, 300, 300]
//!
//! [data.synthetic]
//! kind = "var"
//! channels = 4
//! length = 2600
//!
//! [window]
//! lookback = 24
//! horizon = 24
//!
//! [schedule]
//! beta_start = 0.0001
//! beta_end = 0.5
//! steps = 50
//! ```
//!
//! `[model]`, `[contrastive]`, `[train]` and `[evaluation]` are optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::contrastive::ContrastiveConfig;
use crate::data::{ring_coefficients, MissingPolicy, SynthSpec, Wave, WindowSpec};
use crate::denoiser::{DenoiserConfig, Mixer};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum SynthConfig {
    Var {
        channels: usize,
        length: usize,
        #[serde(default = "default_persistence")]
        persistence: f64,
        #[serde(default = "default_coupling")]
        coupling: f64,
        /// Explicit coefficient matrix; overrides persistence and coupling.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        coefficients: Option<Vec<Vec<f64>>>,
        #[serde(default = "one")]
        noise_std: f64,
        #[serde(default = "default_burn_in")]
        burn_in: usize,
        /// Generator seed; the run seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Sinusoid {
        channels: usize,
        length: usize,
        waves: Vec<Wave>,
        #[serde(default = "default_noise")]
        noise_std: f64,
        #[serde(default)]
        noise_correlation: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

fn default_persistence() -> f64 {
    0.5
}
fn default_coupling() -> f64 {
    0.4
}
fn one() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.1
}
fn default_burn_in() -> usize {
    200
}
fn yes() -> bool {
    true
}

impl SynthConfig {
    pub fn channels(&self) -> usize {
        match self {
            SynthConfig::Var { channels, .. } | SynthConfig::Sinusoid { channels, .. } => *channels,
        }
    }

    pub fn length(&self) -> usize {
        match self {
            SynthConfig::Var { length, .. } | SynthConfig::Sinusoid { length, .. } => *length,
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            SynthConfig::Var { seed, .. } | SynthConfig::Sinusoid { seed, .. } => *seed,
        }
    }

    pub fn spec(&self) -> SynthSpec {
        match self {
            SynthConfig::Var {
                channels,
                persistence,
                coupling,
                coefficients,
                noise_std,
                burn_in,
                ..
            } => SynthSpec::Var {
                coefficients: coefficients
                    .clone()
                    .unwrap_or_else(|| ring_coefficients(*channels, *persistence, *coupling)),
                noise_std: *noise_std,
                burn_in: *burn_in,
            },
            SynthConfig::Sinusoid {
                waves,
                noise_std,
                noise_correlation,
                ..
            } => SynthSpec::Sinusoid {
                waves: waves.clone(),
                noise_std: *noise_std,
                noise_correlation: *noise_correlation,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// CSV file, relative to the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Number of value columns (CSV only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default)]
    pub missing: MissingPolicy,
    #[serde(default = "yes")]
    pub timestamp_column: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SynthConfig>,
    /// Rows in the train, validation and test segments.
    pub split: [usize; 3],
    #[serde(default = "yes")]
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub lookback: usize,
    pub horizon: usize,
    #[serde(default = "one_usize")]
    pub train_stride: usize,
    /// Stride of validation and test windows; the horizon when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_stride: Option<usize>,
}

fn one_usize() -> usize {
    1
}

impl WindowConfig {
    pub fn train_spec(&self) -> WindowSpec {
        WindowSpec {
            lookback: self.lookback,
            horizon: self.horizon,
            stride: self.train_stride,
        }
    }

    pub fn eval_spec(&self) -> WindowSpec {
        WindowSpec {
            lookback: self.lookback,
            horizon: self.horizon,
            stride: self.eval_stride.unwrap_or(self.horizon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Hidden width; chosen from the horizon when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub att_depth: usize,
    pub heads: usize,
    /// Sinusoidal step-embedding size; the hidden width when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_embed_dim: Option<usize>,
    pub mlp_ratio: usize,
    pub mixer: Mixer,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            enc_depth: 2,
            dec_depth: 2,
            att_depth: 2,
            heads: 8,
            step_embed_dim: None,
            mlp_ratio: 4,
            mixer: Mixer::Attention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::quadratic(self.beta_start, self.beta_end, self.steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Ensemble size per window.
    pub samples: usize,
    /// Score on the original data scale.
    pub denormalize: bool,
    pub parallel: bool,
    /// Number of leading test windows whose samples are written as CSV.
    pub export_windows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            denormalize: false,
            parallel: true,
            export_windows: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    pub data: DataConfig,
    pub window: WindowConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub evaluation: EvalConfig,
}

impl RunConfig {
    /// Parses and validates; errors carry the dotted path of the bad key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            if path == "." {
                Error::Config(msg)
            } else {
                Error::Config(format!("{path}: {msg}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; a relative CSV path is resolved against its directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn channels(&self) -> Result<usize> {
        match self.data.source {
            DataSource::Synthetic => Ok(self.data.synthetic.as_ref().map_or(0, |s| s.channels())),
            DataSource::Csv => self
                .data
                .channels
                .ok_or_else(|| Error::Config("data.channels: required for csv sources".into())),
        }
    }

    pub fn denoiser(&self) -> Result<DenoiserConfig> {
        let m = &self.model;
        let hidden = m.hidden.unwrap_or_else(|| DenoiserConfig::default_hidden(self.window.horizon));
        Ok(DenoiserConfig {
            lookback: self.window.lookback,
            horizon: self.window.horizon,
            channels: self.channels()?,
            hidden,
            enc_depth: m.enc_depth,
            dec_depth: m.dec_depth,
            att_depth: m.att_depth,
            heads: m.heads,
            step_embed_dim: m.step_embed_dim.unwrap_or(hidden),
            mlp_ratio: m.mlp_ratio,
            mixer: m.mixer,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match d.source {
            DataSource::Csv => {
                if d.path.is_none() {
                    return Err(Error::Config("data.path: required when data.source = \"csv\"".into()));
                }
                if d.synthetic.is_some() {
                    return Err(Error::Config("data.synthetic: not allowed when data.source = \"csv\"".into()));
                }
            }
            DataSource::Synthetic => {
                let Some(s) = &d.synthetic else {
                    return Err(Error::Config(
                        "data.synthetic: required when data.source = \"synthetic\"".into(),
                    ));
                };
                if d.path.is_some() {
                    return Err(Error::Config("data.path: not allowed for synthetic data".into()));
                }
                let total: usize = d.split.iter().sum();
                if total > s.length() {
                    return Err(Error::Config(format!(
                        "data.split: {total} rows requested but data.synthetic.length is {}",
                        s.length()
                    )));
                }
            }
        }
        let w = &self.window;
        if w.lookback == 0 || w.horizon == 0 || w.train_stride == 0 || w.eval_stride == Some(0) {
            return Err(Error::Config("window: lengths and strides must be positive".into()));
        }
        if d.split[0] < w.lookback + w.horizon {
            return Err(Error::Config(format!(
                "data.split: training segment of {} rows is shorter than lookback + horizon = {}",
                d.split[0],
                w.lookback + w.horizon
            )));
        }
        self.schedule.build()?;
        self.denoiser()?.validate()?;
        self.contrastive.validate(w.horizon)?;
        self.train.validate()?;
        if self.evaluation.samples == 0 {
            return Err(Error::Config("evaluation.samples must be positive".into()));
        }
        Ok(())
    }

    /// Hash of everything that determines parameter shapes and the meaning
    /// of the diffusion steps. Checkpoints record it; evaluation compares.
    pub fn fingerprint(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Key<'a> {
            model: DenoiserConfig,
            schedule: &'a ScheduleConfig,
            precision: Precision,
        }
        let key = Key {
            model: self.denoiser()?,
            schedule: &self.schedule,
            precision: self.precision,
        };
        let json = serde_json::to_string(&key).expect("fingerprint key serializes");
        Ok(sha256_hex(json.as_bytes())[..16].to_string())
    }
}
