//! Run configuration, read from TOML.
//!
//! Unknown keys are rejected so a misspelled gain name fails loudly instead
//! of silently falling back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::{ControlMode, ControllerGains, Policy, RateLimits};
use crate::error::{Error, Result};
use crate::linearization::{GainRanges, TuneConfig};
use crate::plant::PlantConfig;
use crate::sim::{ChannelStep, Scenario, StreamSpec};
use crate::source::{ModelFamily, ParamNoiseSpec, SourceParams};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub horizon: usize,
    pub policy: Policy,
    pub channel: ChannelConfig,
    pub gains: ControllerGains,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub limits: RateLimits,
    /// Parameter noise for streams that do not set their own. Frozen if absent.
    #[serde(default = "ParamNoiseSpec::frozen")]
    pub noise: ParamNoiseSpec,
    pub streams: Vec<StreamConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tuning: Option<TuningConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// kbit/s at slot 1.
    pub rate: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub changes: Vec<ChannelStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamConfig {
    pub id: usize,
    pub model: ModelFamily,
    pub a1: f64,
    pub a2: f64,
    #[serde(default = "first_slot")]
    pub join_slot: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leave_slot: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<ParamNoiseSpec>,
}

fn first_slot() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningConfig {
    #[serde(default = "default_realizations")]
    pub realizations: usize,
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// Streams per realization; defaults to the number of configured streams.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_streams: Option<usize>,
    /// Spread of the drawn characteristics around the stream mean.
    #[serde(default)]
    pub noise: ParamNoiseSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranges: Option<GainRanges>,
}

fn default_realizations() -> usize {
    10
}

fn default_budget() -> usize {
    1000
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig { realizations: 10, budget: 1000, n_streams: None, noise: ParamNoiseSpec::default(), ranges: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {}, expected {CONFIG_VERSION}", self.version)));
        }
        // TOML integers are signed 64-bit.
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} does not fit a TOML integer", self.seed)));
        }
        self.scenario()?.validate()?;
        if let Some(t) = &self.tuning {
            t.noise.validate()?;
            if let Some(r) = &t.ranges {
                r.validate()?;
            }
            if t.n_streams == Some(0) {
                return Err(Error::Config("tuning.n_streams must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn params(&self) -> Result<Vec<SourceParams>> {
        self.streams
            .iter()
            .map(|s| SourceParams::new(s.model, s.a1, s.a2).map_err(|e| Error::Config(format!("stream {}: {e}", s.id))))
            .collect()
    }

    /// Parameters of the streams active in slot 1, for the static analyses.
    pub fn initial_params(&self) -> Result<Vec<SourceParams>> {
        let p = self.params()?;
        Ok(self.streams.iter().zip(p).filter(|(s, _)| s.join_slot == 1).map(|(_, p)| p).collect())
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let params = self.params()?;
        Ok(Scenario {
            horizon: self.horizon,
            policy: self.policy,
            gains: self.gains,
            plant: self.plant,
            limits: self.limits,
            channel_rate: self.channel.rate,
            channel_changes: self.channel.changes.clone(),
            streams: self
                .streams
                .iter()
                .zip(params)
                .map(|(s, p)| StreamSpec { id: s.id, params: p, noise: s.noise.unwrap_or(self.noise), join_slot: s.join_slot, leave_slot: s.leave_slot })
                .collect(),
            seed: self.seed,
        })
    }

    pub fn tune_config(&self) -> Result<TuneConfig> {
        let t = self.tuning.clone().unwrap_or_default();
        let base = self.initial_params()?;
        Ok(TuneConfig {
            mode: self.gains.mode,
            n_streams: t.n_streams.unwrap_or(base.len()),
            realizations: t.realizations,
            budget: t.budget,
            base_params: base,
            noise: t.noise,
            channel_rate: self.channel.rate,
            plant: self.plant,
            ranges: t.ranges.unwrap_or_else(|| GainRanges::for_mode(self.gains.mode)),
        })
    }

    /// A config for `params` on a constant channel with the reference delay-mode gains.
    pub fn basic(params: &[SourceParams], channel_rate: f64, horizon: usize, policy: Policy) -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            horizon,
            policy,
            channel: ChannelConfig { rate: channel_rate, changes: Vec::new() },
            gains: ControllerGains::reference_delay(),
            plant: PlantConfig::default(),
            limits: RateLimits::default(),
            noise: ParamNoiseSpec::frozen(),
            streams: params
                .iter()
                .enumerate()
                .map(|(i, p)| StreamConfig { id: i, model: p.model, a1: p.a1, a2: p.a2, join_slot: 1, leave_slot: None, noise: None })
                .collect(),
            tuning: None,
            output: None,
        }
    }

    pub fn mode(&self) -> ControlMode {
        self.gains.mode
    }
}
