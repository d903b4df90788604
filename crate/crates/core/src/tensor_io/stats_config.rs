use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::ObjectiveWeights;
use crate::distribution::TargetStats;
use crate::error::{Error, Result};

/// Inclusive search interval per calibration parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchRanges {
    #[serde(alias = "a")]
    pub scale: [f64; 2],
    #[serde(alias = "b")]
    pub bias: [f64; 2],
    #[serde(alias = "alpha")]
    pub temperature: [f64; 2],
    #[serde(alias = "epsilon")]
    pub smoothing: [f64; 2],
}

impl Default for SearchRanges {
    fn default() -> Self {
        SearchRanges { scale: [1.0, 60.0], bias: [-0.10, 0.10], temperature: [0.5, 2.0], smoothing: [0.0, 0.05] }
    }
}

/// Grid densities for the sweep stages of the calibration search.
///
/// Each sweep evaluates `*_points` evenly spaced values over its range, then
/// runs `refine_rounds` zoom passes of `refine_points` values spanning one
/// coarse step either side of the incumbent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSettings {
    pub temperature_points: usize,
    pub smoothing_points: usize,
    pub bias_points: usize,
    pub refine_rounds: usize,
    pub refine_points: usize,
    pub max_bisection_iters: usize,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings {
            temperature_points: 16,
            smoothing_points: 11,
            bias_points: 21,
            refine_rounds: 4,
            refine_points: 9,
            max_bisection_iters: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub target_stats: Option<TargetStats>,
    pub objective_weights: ObjectiveWeights,
    pub search_ranges: SearchRanges,
    pub entropy_tolerance: f64,
    pub search: SearchSettings,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            target_stats: None,
            objective_weights: ObjectiveWeights::default(),
            search_ranges: SearchRanges::default(),
            entropy_tolerance: 0.02,
            search: SearchSettings::default(),
        }
    }
}

impl StatsConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: StatsConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.objective_weights.validate()?;
        if !(self.entropy_tolerance > 0.0 && self.entropy_tolerance.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "entropy_tolerance must be positive, got {}",
                self.entropy_tolerance
            )));
        }
        let r = &self.search_ranges;
        for (name, [lo, hi]) in
            [("scale", r.scale), ("bias", r.bias), ("temperature", r.temperature), ("smoothing", r.smoothing)]
        {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(Error::InvalidConfig(format!("{name} range [{lo}, {hi}] is inverted or not finite")));
            }
        }
        if r.scale[0] <= 0.0 {
            return Err(Error::InvalidConfig("scale range must be positive".into()));
        }
        if r.temperature[0] <= 0.0 {
            return Err(Error::InvalidConfig("temperature range must be positive".into()));
        }
        if r.smoothing[0] < 0.0 || r.smoothing[1] > 1.0 {
            return Err(Error::InvalidConfig("smoothing range must lie in [0, 1]".into()));
        }
        let s = &self.search;
        if s.temperature_points == 0 || s.smoothing_points == 0 || s.bias_points == 0 {
            return Err(Error::InvalidConfig("sweeps need at least one point".into()));
        }
        if s.refine_rounds > 0 && s.refine_points < 2 {
            return Err(Error::InvalidConfig("refine_points must be at least 2".into()));
        }
        if let Some(t) = &self.target_stats {
            t.validate()?;
        }
        Ok(())
    }
}

pub fn read_stats_config(path: impl AsRef<Path>) -> Result<StatsConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    StatsConfig::from_json(&text)
}
