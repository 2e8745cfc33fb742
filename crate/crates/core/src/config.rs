//! Engine configuration, read from a TOML document.
//!
//! Every key is optional; unknown keys are rejected. `LOCATER_CONFIG` names
//! the document when set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{LocaterError, Result};

pub const CONFIG_ENV: &str = "LOCATER_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Interval covering 95% of per-device mean durations.
    Population,
    /// 95% confidence interval of the mean.
    MeanCi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Independent,
    Dependent,
}

/// Posterior used for a device's clusters in the dependent variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DependentFormula {
    /// Clusters combined like independent neighbors.
    Odds,
    /// `1 / (1 + (1 - prod A) / (1 - prior))`.
    Verbatim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Both loosened conditions plus the strict one.
    Loose,
    Strict,
    /// Process every neighbor.
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoomWeights {
    pub pf: f64,
    pub pb: f64,
    pub pr: f64,
}

impl Default for RoomWeights {
    fn default() -> Self {
        RoomWeights {
            pf: 0.6,
            pb: 0.3,
            pr: 0.1,
        }
    }
}

impl RoomWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.pf > self.pb
            && self.pb > self.pr
            && self.pr > 0.0
            && ((self.pf + self.pb + self.pr) - 1.0).abs() < 1e-9;
        if ok {
            Ok(())
        } else {
            Err(LocaterError::InvalidConfig(format!(
                "room weights need pf > pb > pr > 0 summing to 1, got {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeltaConfig {
    pub default_s: i64,
    pub min_s: i64,
    pub cap_s: i64,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        DeltaConfig {
            default_s: 600,
            min_s: 10,
            cap_s: 1800,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    pub enabled: bool,
    pub ts_days: i64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            enabled: false,
            ts_days: 90,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub history_days: i64,
    pub tau_low_s: i64,
    pub tau_high_s: i64,
    pub threshold_mode: ThresholdMode,
    pub lr_iterations: usize,
    /// Gradient steps per self-training round after the first.
    pub lr_warm_iterations: usize,
    pub lr_rate: f64,
    pub lr_l2: f64,
    /// Devices with fewer bootstrap labels use the pooled classifier.
    pub min_device_labeled: usize,
    /// Share of self-training rounds to run; 0 keeps bootstrap labels only.
    pub self_training_fraction: f64,
    pub seed: u64,
    pub weights: RoomWeights,
    pub variant: Variant,
    pub eq2_prior: bool,
    pub dependent_formula: DependentFormula,
    pub stop_rule: StopRule,
    pub max_neighbors: usize,
    pub affinity_window_days: i64,
    pub cache: CacheConfig,
    pub timezone: String,
    pub delta: DeltaConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            history_days: 56,
            tau_low_s: 1200,
            tau_high_s: 10_800,
            threshold_mode: ThresholdMode::Population,
            lr_iterations: 150,
            lr_warm_iterations: 10,
            lr_rate: 0.5,
            lr_l2: 1e-3,
            min_device_labeled: 5,
            self_training_fraction: 1.0,
            seed: 7,
            weights: RoomWeights::default(),
            variant: Variant::Independent,
            eq2_prior: false,
            dependent_formula: DependentFormula::Odds,
            stop_rule: StopRule::Loose,
            max_neighbors: 32,
            affinity_window_days: 21,
            cache: CacheConfig::default(),
            timezone: "UTC".to_string(),
            delta: DeltaConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: EngineConfig =
            toml::from_str(s).map_err(|e| LocaterError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LocaterError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Reads the document named by `LOCATER_CONFIG`, or returns defaults.
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(CONFIG_ENV) {
            Some(p) => Self::from_path(Path::new(&p)),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn clock(&self) -> Result<Clock> {
        Clock::new(&self.timezone)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LocaterError::InvalidConfig(m.to_string()));
        self.weights.validate()?;
        self.clock()?;
        if self.tau_low_s < 1 || self.tau_high_s < self.tau_low_s {
            return bad("need 1 <= tau_low_s <= tau_high_s");
        }
        if self.history_days < 1 || self.affinity_window_days < 1 {
            return bad("history_days and affinity_window_days must be positive");
        }
        if self.lr_iterations == 0 || self.lr_warm_iterations == 0 || self.lr_rate <= 0.0 || self.lr_l2 < 0.0 {
            return bad("lr_iterations, lr_warm_iterations and lr_rate must be positive, lr_l2 non-negative");
        }
        if !(0.0..=1.0).contains(&self.self_training_fraction) {
            return bad("self_training_fraction must lie in [0, 1]");
        }
        if self.delta.min_s < 1 || self.delta.cap_s < self.delta.min_s {
            return bad("need 1 <= delta.min_s <= delta.cap_s");
        }
        if self.cache.ts_days < 1 {
            return bad("cache.ts_days must be positive");
        }
        Ok(())
    }
}
