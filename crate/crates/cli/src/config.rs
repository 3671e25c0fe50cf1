//! Run configuration: `[section]` headers and `key = value` lines.
//!
//! ```text
//! [model]
//! c_emb = 16
//! modules_enabled = pfm,fm,ifa
//!
//! [train]
//! lr = 0.001
//! steps = 400
//!
//! [data]
//! n_events = 100
//!
//! [eval]
//! thresholds = 16,74,133,160,181,219
//! ```
//!
//! `#` starts a comment. Every error names the offending `section.key`.

use std::path::{Path, PathBuf};

use foucast_core::data::synth::SyntheticEventConfig;
use foucast_core::metrics::SEVIR_THRESHOLDS;
use foucast_core::model::ModelConfig;
use foucast_core::train::TrainConfig;
use foucast_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Manifest consumed by `train` and `eval`, relative to the config file.
    pub manifest: Option<PathBuf>,
    pub n_events: usize,
    pub train_fraction: f64,
    /// Radar and covariate generator settings; `t_in`, `k_out` and `hw`
    /// come from `[model]`.
    pub synth: SyntheticEventConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            data: DataConfig {
                manifest: None,
                n_events: 100,
                train_fraction: 0.8,
                synth: synth_for(&model, SyntheticEventConfig::default()),
            },
            eval: EvalConfig {
                thresholds: SEVIR_THRESHOLDS.to_vec(),
            },
            model,
            train,
        }
    }
}

fn synth_for(model: &ModelConfig, s: SyntheticEventConfig) -> SyntheticEventConfig {
    SyntheticEventConfig {
        t_in: model.t_in,
        k_out: model.k_out,
        hw: model.hw,
        ..s
    }
}

fn err(section: &str, key: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        key: format!("{section}.{key}"),
        reason: reason.into(),
    }
}

/// Prefix a core config error with its section.
fn scoped(section: &str, e: Error) -> Error {
    match e {
        Error::InvalidConfig { key, reason } if !key.contains('.') => err(section, &key, reason),
        other => other,
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, v: &str, what: &str) -> Result<T> {
    v.parse().map_err(|_| err(section, key, format!("expected {what}, got `{v}`")))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::parse(&text)?;
        if let Some(m) = &cfg.data.manifest {
            if m.is_relative() {
                cfg.data.manifest = Some(path.parent().unwrap_or(Path::new(".")).join(m));
            }
        }
        Ok(cfg)
    }

    /// Parse and validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let (mut steps, mut p1, mut p2) = (None, None, None);
        let mut synth = SyntheticEventConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "model" | "train" | "data" | "eval") {
                    return Err(err(&section, "*", format!("unknown section on line {}", n + 1)));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(&section, line, format!("line {} is not `key = value`", n + 1)))?;
            let s = section.as_str();
            match s {
                "" => return Err(err("", key, "key outside any section")),
                "model" => cfg.model.set(key, value).map_err(|e| scoped(s, e))?,
                "train" => {
                    let t = &mut cfg.train;
                    match key {
                        "lr" => t.lr = parse_num(s, key, value, "a number")?,
                        "weight_decay" => t.weight_decay = parse_num(s, key, value, "a number")?,
                        "batch" => t.batch = parse_num(s, key, value, "a positive integer")?,
                        "seed" => t.seed = parse_num(s, key, value, "an unsigned integer")?,
                        "steps" => steps = Some(parse_num::<u64>(s, key, value, "an unsigned integer")?),
                        "phase1_steps" => p1 = Some(parse_num::<u64>(s, key, value, "an unsigned integer")?),
                        "phase2_steps" => p2 = Some(parse_num::<u64>(s, key, value, "an unsigned integer")?),
                        _ => return Err(err(s, key, "unknown key")),
                    }
                }
                "data" => {
                    let range = |v: &str| -> Result<f64> { parse_num(s, key, v, "a number") };
                    match key {
                        "manifest" => cfg.data.manifest = Some(PathBuf::from(value)),
                        "n_events" => cfg.data.n_events = parse_num(s, key, value, "an unsigned integer")?,
                        "train_fraction" => cfg.data.train_fraction = parse_num(s, key, value, "a number")?,
                        "seed" => synth.seed = parse_num(s, key, value, "an unsigned integer")?,
                        "cov_hw" => synth.cov_hw = parse_num(s, key, value, "an unsigned integer")?,
                        "cov_step" => synth.cov_step = parse_num(s, key, value, "an unsigned integer")?,
                        "cadence" => synth.cadence = parse_num(s, key, value, "a number")?,
                        "n_blobs" => synth.n_blobs = parse_num(s, key, value, "an unsigned integer")?,
                        "noise" => synth.noise = parse_num(s, key, value, "a number")?,
                        "cov_noise" => synth.cov_noise = parse_num(s, key, value, "a number")?,
                        "velocity_min" => synth.velocity.0 = range(value)?,
                        "velocity_max" => synth.velocity.1 = range(value)?,
                        "growth_min" => synth.growth.0 = range(value)?,
                        "growth_max" => synth.growth.1 = range(value)?,
                        "anisotropy_min" => synth.anisotropy.0 = range(value)?,
                        "anisotropy_max" => synth.anisotropy.1 = range(value)?,
                        "radius_min" => synth.radius.0 = range(value)?,
                        "radius_max" => synth.radius.1 = range(value)?,
                        "amplitude_min" => synth.amplitude.0 = range(value)?,
                        "amplitude_max" => synth.amplitude.1 = range(value)?,
                        _ => return Err(err(s, key, "unknown key")),
                    }
                }
                _ => match key {
                    "thresholds" => {
                        cfg.eval.thresholds = value
                            .split(',')
                            .map(|v| parse_num(s, key, v.trim(), "a comma-separated list of numbers"))
                            .collect::<Result<_>>()?
                    }
                    _ => return Err(err(s, key, "unknown key")),
                },
            }
        }
        let (a, b) = match (steps, p1, p2) {
            (None, None, None) => (cfg.train.phase1_steps, cfg.train.phase2_steps),
            (Some(t), None, None) => (t / 4, t - t / 4),
            (None, Some(a), Some(b)) => (a, b),
            (Some(t), Some(a), None) if a <= t => (a, t - a),
            (Some(t), None, Some(b)) if b <= t => (t - b, b),
            (Some(t), Some(a), Some(b)) if a + b == t => (a, b),
            (None, Some(a), None) => (a, 3 * a),
            (None, None, Some(b)) => (b / 3, b),
            _ => return Err(err("train", "steps", "must equal phase1_steps + phase2_steps")),
        };
        cfg.train.phase1_steps = a;
        cfg.train.phase2_steps = b;
        cfg.data.synth = synth_for(&cfg.model, synth);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| scoped("model", e))?;
        self.train.validate().map_err(|e| scoped("train", e))?;
        self.data.synth.validate().map_err(|e| scoped("data", e))?;
        if !(0.0..=1.0).contains(&self.data.train_fraction) {
            return Err(err("data", "train_fraction", format!("must lie in [0, 1], got {}", self.data.train_fraction)));
        }
        if self.eval.thresholds.is_empty() {
            return Err(err("eval", "thresholds", "at least one threshold is required"));
        }
        if let Some(t) = self.eval.thresholds.iter().find(|t| !(0.0..=255.0).contains(*t)) {
            return Err(err("eval", "thresholds", format!("{t} is outside [0, 255]")));
        }
        Ok(())
    }

    /// Number of training events among `n_events`.
    pub fn n_train(&self) -> usize {
        (self.data.n_events as f64 * self.data.train_fraction).round() as usize
    }
}
