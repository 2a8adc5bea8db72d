//! JSON documents exchanged between devices, authorities and the back end.
//!
//! Timestamps are Unix seconds, coordinates are `[lat, lon]` pairs in
//! degrees, TCNs and chain keys are lowercase hex, coarse cells are
//! `"lat_idx:lon_idx"` strings and days are `YYYY-MM-DD` (UTC).

use diary_core::geo::is_on_grid;
use diary_core::stats::CENTROID_CELL_DEG;
use diary_core::{
    ChainKey, DailyStats, GeoPoint, InstallationId, Interval, LocationSample, RawCta, RawRegion, SampleSource, Tcn,
    TcnReport,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::calendar;

#[derive(Debug, Error, PartialEq)]
pub enum WireError {
    /// The document could not be parsed at all.
    #[error("malformed document: {0}")]
    Malformed(String),
    /// The document parsed but breaks a content rule.
    #[error("invalid document: {0}")]
    Invalid(String),
}

fn malformed(e: impl std::fmt::Display) -> WireError {
    WireError::Malformed(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionDoc {
    pub polygon: Vec<[f64; 2]>,
    pub start: u64,
    pub end: u64,
}

/// Canonical call-to-action document. `id` and `coverage_cells` are filled in
/// by the server and may be omitted when publishing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CtaDoc {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub id: String,
    #[serde(default)]
    pub authority_id: String,
    #[serde(default)]
    pub regions: Vec<RegionDoc>,
    #[serde(default)]
    pub tcns: Vec<String>,
    pub max_distance_m: f64,
    pub min_exposure_s: u64,
    pub message: String,
    pub created_at: u64,
    pub expires_at: u64,
    #[serde(default)]
    pub coverage_cells: Vec<String>,
}

impl From<&RawCta> for CtaDoc {
    fn from(raw: &RawCta) -> Self {
        Self {
            id: raw.id.clone(),
            authority_id: raw.authority_id.clone(),
            regions: raw
                .regions
                .iter()
                .map(|r| RegionDoc {
                    polygon: r.vertices.iter().map(|&(lat, lon)| [lat, lon]).collect(),
                    start: r.interval.start,
                    end: r.interval.end,
                })
                .collect(),
            tcns: raw.tcns.iter().map(ToString::to_string).collect(),
            max_distance_m: raw.max_distance,
            min_exposure_s: raw.min_exposure,
            message: raw.message.clone(),
            created_at: raw.created_at,
            expires_at: raw.expires_at,
            coverage_cells: raw.coverage_cells.iter().map(ToString::to_string).collect(),
        }
    }
}

impl CtaDoc {
    pub fn into_raw(self) -> Result<RawCta, WireError> {
        let tcns = self
            .tcns
            .iter()
            .map(|s| s.parse::<Tcn>().map_err(|_| malformed(format!("bad TCN {s:?}"))))
            .collect::<Result<_, _>>()?;
        let coverage_cells = self
            .coverage_cells
            .iter()
            .map(|s| s.parse().map_err(malformed))
            .collect::<Result<_, _>>()?;
        Ok(RawCta {
            id: self.id,
            authority_id: self.authority_id,
            regions: self
                .regions
                .into_iter()
                .map(|r| RawRegion {
                    vertices: r.polygon.into_iter().map(|[lat, lon]| (lat, lon)).collect(),
                    interval: Interval::new(r.start, r.end),
                })
                .collect(),
            tcns,
            max_distance: self.max_distance_m,
            min_exposure: self.min_exposure_s,
            message: self.message,
            created_at: self.created_at,
            expires_at: self.expires_at,
            coverage_cells,
        })
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, WireError> {
        serde_json::from_slice(bytes).map_err(malformed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishResponse {
    pub id: String,
    pub coverage_cells: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtaList {
    pub server_time: u64,
    pub ctas: Vec<CtaDoc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDoc {
    pub error: String,
    pub message: String,
}

/// Daily statistics upload. The field set is closed: anything else is
/// rejected on both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsDoc {
    pub installation_id: String,
    pub day: String,
    pub minutes_tracked: u64,
    pub centroid: Option<[f64; 2]>,
    pub bbox_diag_m: f64,
    pub known_locations_visited: u64,
    pub notes: u64,
    pub samples_recorded: u64,
    pub samples_discarded: u64,
    pub minutes_at_home: u64,
}

pub fn installation_id_to_string(id: InstallationId) -> String {
    Uuid::from_bytes(id.0).hyphenated().to_string()
}

/// Rounds a bounding-box diagonal to 0.1 m for transport.
pub fn round_diag(m: f64) -> f64 {
    (m * 10.0).round() / 10.0
}

/// Refuses to serialize a centroid that is not on the 0.02° grid.
pub fn serialize_stats(s: &DailyStats) -> Result<Vec<u8>, WireError> {
    s.check().map_err(|e| WireError::Invalid(e.to_string()))?;
    let doc = StatsDoc {
        installation_id: installation_id_to_string(s.installation_id),
        day: calendar::format_day(s.day),
        minutes_tracked: s.minutes_tracked,
        centroid: s.centroid.map(|c| [c.lat(), c.lon()]),
        bbox_diag_m: round_diag(s.bbox_diagonal_m),
        known_locations_visited: s.known_locations_visited,
        notes: s.notes_count,
        samples_recorded: s.samples_recorded,
        samples_discarded: s.samples_discarded,
        minutes_at_home: s.minutes_at_home,
    };
    Ok(serde_json::to_vec(&doc).expect("plain struct serializes"))
}

pub fn parse_stats(bytes: &[u8]) -> Result<DailyStats, WireError> {
    let doc: StatsDoc = serde_json::from_slice(bytes).map_err(malformed)?;
    let id = Uuid::parse_str(&doc.installation_id).map_err(malformed)?;
    let day = calendar::parse_day(&doc.day).ok_or_else(|| malformed(format!("bad day {:?}", doc.day)))?;
    let centroid = match doc.centroid {
        None => None,
        Some([lat, lon]) => {
            if !is_on_grid(lat, CENTROID_CELL_DEG) || !is_on_grid(lon, CENTROID_CELL_DEG) {
                return Err(WireError::Invalid(format!("centroid ({lat}, {lon}) is off the 0.02 degree grid")));
            }
            Some(GeoPoint::new(lat, lon).map_err(|e| WireError::Invalid(e.to_string()))?)
        }
    };
    if !doc.bbox_diag_m.is_finite() || doc.bbox_diag_m < 0.0 {
        return Err(WireError::Invalid("bbox_diag_m must be a non-negative number".into()));
    }
    let stats = DailyStats {
        installation_id: InstallationId(id.into_bytes()),
        day,
        minutes_tracked: doc.minutes_tracked,
        centroid,
        bbox_diagonal_m: doc.bbox_diag_m,
        known_locations_visited: doc.known_locations_visited,
        notes_count: doc.notes,
        samples_recorded: doc.samples_recorded,
        samples_discarded: doc.samples_discarded,
        minutes_at_home: doc.minutes_at_home,
    };
    stats.check().map_err(|e| WireError::Invalid(e.to_string()))?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleDoc {
    pub t: u64,
    pub lat: f64,
    pub lon: f64,
    pub accuracy_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportDoc {
    pub chain_key: String,
    pub start_index: u64,
    pub end_index: u64,
}

impl From<&TcnReport> for ReportDoc {
    fn from(r: &TcnReport) -> Self {
        Self {
            chain_key: r.chain_key_at_start.to_string(),
            start_index: r.start_index,
            end_index: r.end_index,
        }
    }
}

impl ReportDoc {
    pub fn to_report(&self) -> Result<TcnReport, WireError> {
        let key: ChainKey = self.chain_key.parse().map_err(|_| malformed("bad chain key"))?;
        TcnReport::new(key, self.start_index, self.end_index).map_err(|e| WireError::Invalid(e.to_string()))
    }
}

/// Voluntary upload from a diagnosed user to the authority intake.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosisDoc {
    pub consent: bool,
    pub samples: Vec<SampleDoc>,
    pub report: Option<ReportDoc>,
}

impl DiagnosisDoc {
    pub fn samples(&self) -> Result<Vec<LocationSample>, WireError> {
        self.samples
            .iter()
            .map(|s| {
                let position = GeoPoint::new(s.lat, s.lon).map_err(|e| WireError::Invalid(e.to_string()))?;
                Ok(LocationSample {
                    timestamp: s.t,
                    position,
                    accuracy: s.accuracy_m,
                    source: SampleSource::Gps,
                })
            })
            .collect()
    }
}
