//! Scenario files (TOML). Every field except `seed` and `[agents].count` has
//! a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MovementModel {
    Stationary,
    Waypoint,
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentsSpec {
    pub count: usize,
    #[serde(default = "d_model")]
    pub model: MovementModel,
    #[serde(default = "d_speed")]
    pub speed_mps: f64,
    /// Number of shared venues for the waypoint model.
    #[serde(default = "d_venues")]
    pub venues: usize,
    #[serde(default = "d_stay_min")]
    pub stay_min_s: u64,
    #[serde(default = "d_stay_max")]
    pub stay_max_s: u64,
    /// Radius within which agents at the same venue or home are scattered.
    #[serde(default = "d_jitter")]
    pub venue_jitter_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpsSpec {
    #[serde(default = "d_sigma")]
    pub sigma_m: f64,
    /// Fraction of fixes that are wildly off and report poor accuracy.
    #[serde(default = "d_bad_fix")]
    pub bad_fix_rate: f64,
}

impl Default for GpsSpec {
    fn default() -> Self {
        Self {
            sigma_m: d_sigma(),
            bad_fix_rate: d_bad_fix(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosisSpec {
    pub agent: usize,
    /// Offset from the scenario start.
    pub at_s: u64,
    pub consent: bool,
    /// How far back the shared trace and report reach.
    #[serde(default = "d_lookback")]
    pub lookback_s: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtaSpec {
    #[serde(default = "d_min_exposure")]
    pub min_exposure_s: u64,
    #[serde(default)]
    pub max_distance_m: f64,
    #[serde(default = "d_expansion")]
    pub expansion_m: f64,
    #[serde(default = "d_pad")]
    pub time_pad_s: u64,
    #[serde(default)]
    pub movement_discs: bool,
}

impl Default for CtaSpec {
    fn default() -> Self {
        Self {
            min_exposure_s: d_min_exposure(),
            max_distance_m: 0.0,
            expansion_m: d_expansion(),
            time_pad_s: d_pad(),
            movement_discs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub seed: u64,
    /// Unix seconds of the first step.
    #[serde(default = "d_start")]
    pub start: u64,
    #[serde(default = "d_duration")]
    pub duration_s: u64,
    #[serde(default = "d_dt")]
    pub dt_s: u64,
    #[serde(default = "d_proximity")]
    pub proximity_m: f64,
    #[serde(default = "d_adoption")]
    pub adoption: f64,
    /// `[lat, lon]` of the simulated town centre.
    #[serde(default = "d_origin")]
    pub origin: [f64; 2],
    #[serde(default = "d_area")]
    pub area_radius_m: f64,
    #[serde(default)]
    pub notes_per_day: f64,
    #[serde(default = "d_sync")]
    pub sync_interval_s: u64,
    #[serde(default)]
    pub download_all: bool,
    /// Adoption rates to re-run the scenario at for the sensitivity curve.
    #[serde(default)]
    pub adoption_curve: Vec<f64>,
    /// `[from_s, to_s]` offsets during which the network is down.
    #[serde(default)]
    pub outages: Vec<[u64; 2]>,
    pub agents: AgentsSpec,
    #[serde(default)]
    pub gps: GpsSpec,
    #[serde(default)]
    pub diagnosis: Vec<DiagnosisSpec>,
    #[serde(default)]
    pub cta: CtaSpec,
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Self = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Invalid(m.into()));
        if self.dt_s == 0 {
            return bad("dt_s must be positive");
        }
        if self.start == 0 {
            return bad("start must be a positive Unix time");
        }
        if !(0.0..=1.0).contains(&self.adoption) || self.adoption_curve.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("adoption rates must lie in [0, 1]");
        }
        if !(self.proximity_m > 0.0) || !(self.area_radius_m > 0.0) {
            return bad("proximity_m and area_radius_m must be positive");
        }
        if diary_core::GeoPoint::new(self.origin[0], self.origin[1]).is_err() || self.origin[0].abs() > 80.0 {
            return bad("origin must be a valid point away from the poles");
        }
        if self.agents.stay_min_s > self.agents.stay_max_s {
            return bad("stay_min_s exceeds stay_max_s");
        }
        if !(self.agents.speed_mps >= 0.0) || !(self.gps.sigma_m >= 0.0) || !(0.0..=1.0).contains(&self.gps.bad_fix_rate) {
            return bad("speeds, sigma and bad_fix_rate must be sensible");
        }
        if self.diagnosis.iter().any(|d| d.agent >= self.agents.count) {
            return bad("diagnosis refers to a missing agent");
        }
        if self.outages.iter().any(|[a, b]| a > b) {
            return bad("outage windows must be ordered");
        }
        Ok(())
    }
}

fn d_model() -> MovementModel {
    MovementModel::Waypoint
}
fn d_speed() -> f64 {
    1.4
}
fn d_venues() -> usize {
    4
}
fn d_stay_min() -> u64 {
    1200
}
fn d_stay_max() -> u64 {
    3600
}
fn d_jitter() -> f64 {
    3.0
}
fn d_sigma() -> f64 {
    10.0
}
fn d_bad_fix() -> f64 {
    0.05
}
fn d_lookback() -> u64 {
    14 * 86_400
}
fn d_min_exposure() -> u64 {
    900
}
fn d_expansion() -> f64 {
    100.0
}
fn d_pad() -> u64 {
    1800
}
fn d_start() -> u64 {
    1_587_369_600
}
fn d_duration() -> u64 {
    7200
}
fn d_dt() -> u64 {
    10
}
fn d_proximity() -> f64 {
    10.0
}
fn d_adoption() -> f64 {
    1.0
}
fn d_origin() -> [f64; 2] {
    [43.7262, 12.6365]
}
fn d_area() -> f64 {
    600.0
}
fn d_sync() -> u64 {
    1800
}
