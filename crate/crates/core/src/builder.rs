//! Turns a diagnosed user's shared trace and TCN report into an anonymous
//! call to action.
//!
//! Stays become padded 12-gons around a snapped centre; vertices are kept
//! clear of every raw sample and interval endpoints are widened to whole
//! minutes, so the published query reveals neither exact fixes nor exact
//! sample times.

use alloc::string::String;
use alloc::vec::Vec;

use libm::{cos, round};
use thiserror::Error;

use crate::cta::{RawCta, RawRegion};
use crate::geo::{haversine, GeoPoint, LocalProjection, METERS_PER_DEGREE};
use crate::tcn::TcnReport;
use crate::trace::{Interval, LocationSample, SECONDS_PER_DAY};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StayPointConfig {
    pub min_stay_duration: u64,
    pub max_stay_radius: f64,
}

impl Default for StayPointConfig {
    fn default() -> Self {
        Self {
            min_stay_duration: 300,
            max_stay_radius: 75.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StayPoint {
    pub center: GeoPoint,
    /// Largest distance from the centre to a supporting sample.
    pub radius: f64,
    pub interval: Interval,
    pub support_samples: usize,
}

fn mean(points: &[GeoPoint]) -> GeoPoint {
    let n = points.len() as f64;
    let (la, lo) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.lat(), b + p.lon()));
    GeoPoint::new(la / n, lo / n).expect("mean of valid points")
}

/// Greedy forward scan: a run grows while every member stays within
/// `max_stay_radius` of the run's running centroid. Runs lasting at least
/// `min_stay_duration` become stay points; runs never overlap.
pub fn detect_stay_points(samples: &[LocationSample], cfg: StayPointConfig) -> Vec<StayPoint> {
    let mut out = Vec::new();
    let mut i = 0;
    let mut run: Vec<GeoPoint> = Vec::new();
    while i < samples.len() {
        run.clear();
        run.push(samples[i].position);
        let mut center = samples[i].position;
        let mut j = i + 1;
        while j < samples.len() {
            run.push(samples[j].position);
            let candidate = mean(&run);
            if run.iter().all(|p| haversine(*p, candidate) <= cfg.max_stay_radius) {
                center = candidate;
                j += 1;
            } else {
                run.pop();
                break;
            }
        }
        let (t0, t1) = (samples[i].timestamp, samples[j - 1].timestamp);
        if t1 - t0 >= cfg.min_stay_duration {
            let radius = run.iter().map(|p| haversine(*p, center)).fold(0.0, f64::max);
            out.push(StayPoint {
                center,
                radius,
                interval: Interval::new(t0, t1),
                support_samples: j - i,
            });
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildParams {
    /// Added to each stay radius before building the region.
    pub expansion_m: f64,
    pub time_pad_s: u64,
    pub lifetime_s: u64,
    pub max_distance: f64,
    pub min_exposure: u64,
    /// Also emit one disc region per sample outside every stay.
    pub movement_discs: bool,
    pub vertex_clearance_m: f64,
    pub center_snap_m: f64,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            expansion_m: 100.0,
            time_pad_s: 1800,
            lifetime_s: 14 * SECONDS_PER_DAY,
            max_distance: 0.0,
            min_exposure: 900,
            movement_discs: false,
            vertex_clearance_m: 5.0,
            center_snap_m: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("nothing to build: no stay points and no TCN report")]
    Empty,
}

#[derive(Debug, Clone)]
pub struct CtaSource<'a> {
    pub stay_points: &'a [StayPoint],
    pub report: Option<&'a TcnReport>,
    /// Every raw sample the diagnosed user shared; vertices are kept clear of
    /// all of them.
    pub raw_samples: &'a [LocationSample],
}

const POLYGON_SIDES: usize = 12;
const ROTATION_TRIES: usize = 8;
const TIME_GRAIN_S: u64 = 60;

/// Snaps to a metric grid of `step_m`.
fn snap_center(p: GeoPoint, step_m: f64) -> GeoPoint {
    if step_m <= 0.0 {
        return p;
    }
    let dlat = step_m / METERS_PER_DEGREE;
    let lat = (round(p.lat() / dlat) * dlat).clamp(-89.0, 89.0);
    let dlon = dlat / cos(lat.to_radians());
    let lon = (round(p.lon() / dlon) * dlon).clamp(-180.0, 180.0);
    GeoPoint::new(lat, lon).expect("clamped")
}

fn polygon_around(center: GeoPoint, vertex_radius: f64, phase: f64) -> Vec<GeoPoint> {
    let proj = LocalProjection::new(center);
    let step = core::f64::consts::TAU / POLYGON_SIDES as f64;
    (0..POLYGON_SIDES)
        .map(|k| {
            let a = phase + step * k as f64;
            proj.to_geo(vertex_radius * libm::sin(a), vertex_radius * libm::cos(a))
        })
        .collect()
}

/// Regular 12-gon circumscribing a circle of `inner_radius` around the
/// snapped centre, rotated or grown until every vertex clears the raw samples.
fn anonymous_polygon(center: GeoPoint, inner_radius: f64, params: &BuildParams, raw: &[LocationSample]) -> Vec<(f64, f64)> {
    let snapped = snap_center(center, params.center_snap_m);
    let half = core::f64::consts::PI / POLYGON_SIDES as f64;
    let sector = 2.0 * half;
    let mut vertex_radius = inner_radius / cos(half);
    loop {
        for k in 0..ROTATION_TRIES {
            let phase = sector * k as f64 / ROTATION_TRIES as f64;
            let verts = polygon_around(snapped, vertex_radius, phase);
            let clear = verts.iter().all(|v| {
                raw.iter()
                    .all(|s| haversine(*v, s.position) >= params.vertex_clearance_m)
            });
            if clear {
                return verts.iter().map(|v| (v.lat(), v.lon())).collect();
            }
        }
        vertex_radius += 2.0 * params.vertex_clearance_m;
    }
}

fn padded(interval: Interval, pad: u64) -> Interval {
    let start = interval.start.saturating_sub(pad) / TIME_GRAIN_S * TIME_GRAIN_S;
    let end = (interval.end + pad).div_ceil(TIME_GRAIN_S) * TIME_GRAIN_S;
    Interval::new(start, end.max(start + TIME_GRAIN_S))
}

/// Builds the unvalidated call to action; the publishing service assigns the
/// id and coverage cells.
pub fn build_cta(
    source: &CtaSource<'_>,
    authority_id: &str,
    message: &str,
    created_at: u64,
    params: &BuildParams,
) -> Result<RawCta, BuildError> {
    if source.stay_points.is_empty() && source.report.is_none() && !params.movement_discs {
        return Err(BuildError::Empty);
    }
    let mut regions: Vec<RawRegion> = source
        .stay_points
        .iter()
        .map(|sp| RawRegion {
            vertices: anonymous_polygon(sp.center, sp.radius + params.expansion_m, params, source.raw_samples),
            interval: padded(sp.interval, params.time_pad_s),
        })
        .collect();

    if params.movement_discs {
        for s in source.raw_samples {
            let covered = source.stay_points.iter().any(|sp| sp.interval.contains(s.timestamp));
            if !covered {
                regions.push(RawRegion {
                    vertices: anonymous_polygon(s.position, params.expansion_m, params, source.raw_samples),
                    interval: padded(Interval::new(s.timestamp, s.timestamp), params.time_pad_s),
                });
            }
        }
    }

    let tcns = source.report.map(TcnReport::expand).unwrap_or_default();
    if regions.is_empty() && tcns.is_empty() {
        return Err(BuildError::Empty);
    }
    Ok(RawCta {
        id: String::new(),
        authority_id: authority_id.into(),
        regions,
        tcns,
        max_distance: params.max_distance,
        min_exposure: params.min_exposure,
        message: message.into(),
        created_at,
        expires_at: created_at + params.lifetime_s,
        coverage_cells: Vec::new(),
    })
}
