//! Calls to action: authority-published geo-temporal queries and their
//! evaluation against a device's local trace and contact log.
//!
//! Matching is a pure function of its arguments. Nothing here touches the
//! network or storage, so the result of a match never has to leave the device.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::geo::{distance_to_polygon, CoarseCell, GeoError, GeoPoint, GeoPolygon};
use crate::tcn::{ContactLog, Tcn};
use crate::trace::{Interval, TraceStore};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CtaError {
    #[error("call to action has neither regions nor TCNs")]
    NoQuery,
    #[error("region {index}: {source}")]
    Polygon { index: usize, source: GeoError },
    #[error("region {0}: interval start must precede its end")]
    InvertedInterval(usize),
    #[error("expiry must be after creation")]
    ExpiredAtCreation,
    #[error("max distance must be a non-negative number")]
    BadMaxDistance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("call to action expired at {expires_at}")]
pub struct Expired {
    pub expires_at: u64,
}

/// Unvalidated region as it arrives from an author: `(lat, lon)` vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRegion {
    pub vertices: Vec<(f64, f64)>,
    pub interval: Interval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawCta {
    pub id: String,
    pub authority_id: String,
    pub regions: Vec<RawRegion>,
    pub tcns: Vec<Tcn>,
    pub max_distance: f64,
    pub min_exposure: u64,
    pub message: String,
    pub created_at: u64,
    pub expires_at: u64,
    pub coverage_cells: Vec<CoarseCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtaRegion {
    pub polygon: GeoPolygon,
    pub interval: Interval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    /// Metres.
    pub max_distance: f64,
    /// Seconds.
    pub min_exposure: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallToAction {
    pub id: String,
    pub authority_id: String,
    pub regions: Vec<CtaRegion>,
    pub tcns: Vec<Tcn>,
    pub params: MatchParams,
    pub message: String,
    pub created_at: u64,
    pub expires_at: u64,
    pub coverage_cells: Vec<CoarseCell>,
}

impl CallToAction {
    pub fn is_expired(&self, now: u64) -> bool {
        now >= self.expires_at
    }

    pub fn to_raw(&self) -> RawCta {
        RawCta {
            id: self.id.clone(),
            authority_id: self.authority_id.clone(),
            regions: self
                .regions
                .iter()
                .map(|r| RawRegion {
                    vertices: r.polygon.vertices().iter().map(|v| (v.lat(), v.lon())).collect(),
                    interval: r.interval,
                })
                .collect(),
            tcns: self.tcns.clone(),
            max_distance: self.params.max_distance,
            min_exposure: self.params.min_exposure,
            message: self.message.clone(),
            created_at: self.created_at,
            expires_at: self.expires_at,
            coverage_cells: self.coverage_cells.clone(),
        }
    }
}

pub fn validate_cta(raw: RawCta) -> Result<CallToAction, CtaError> {
    if raw.regions.is_empty() && raw.tcns.is_empty() {
        return Err(CtaError::NoQuery);
    }
    if raw.expires_at <= raw.created_at {
        return Err(CtaError::ExpiredAtCreation);
    }
    if !raw.max_distance.is_finite() || raw.max_distance < 0.0 {
        return Err(CtaError::BadMaxDistance);
    }
    let mut regions = Vec::with_capacity(raw.regions.len());
    for (index, r) in raw.regions.into_iter().enumerate() {
        if r.interval.start >= r.interval.end {
            return Err(CtaError::InvertedInterval(index));
        }
        let vertices = r
            .vertices
            .iter()
            .map(|&(lat, lon)| GeoPoint::new(lat, lon))
            .collect::<Result<Vec<_>, _>>()
            .and_then(GeoPolygon::new)
            .map_err(|source| CtaError::Polygon { index, source })?;
        regions.push(CtaRegion {
            polygon: vertices,
            interval: r.interval,
        });
    }
    Ok(CallToAction {
        id: raw.id,
        authority_id: raw.authority_id,
        regions,
        tcns: raw.tcns,
        params: MatchParams {
            max_distance: raw.max_distance,
            min_exposure: raw.min_exposure,
        },
        message: raw.message,
        created_at: raw.created_at,
        expires_at: raw.expires_at,
        coverage_cells: raw.coverage_cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExposureChannel {
    Geo,
    Tcn,
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExposureMatch {
    pub cta_id: String,
    pub channel: ExposureChannel,
    pub exposure_seconds: u64,
    pub matched_regions: Vec<usize>,
    pub matched_tcns: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GeoExposure {
    /// Largest exposure among matched regions.
    pub exposure_seconds: u64,
    pub matched_regions: Vec<usize>,
}

/// Per region: dwell of accepted samples inside the interval and within
/// `max_distance` of the polygon. A region matches when at least one sample
/// qualifies and the dwell reaches `min_exposure`.
pub fn match_geo(store: &TraceStore, cta: &CallToAction) -> GeoExposure {
    let mut out = GeoExposure::default();
    for (i, region) in cta.regions.iter().enumerate() {
        let mut hits = 0usize;
        let mut exposure = 0u64;
        for seg in store.dwell_segments(region.interval) {
            if distance_to_polygon(seg.position, &region.polygon) <= cta.params.max_distance {
                hits += 1;
                exposure += seg.dwell;
            }
        }
        if hits > 0 && exposure >= cta.params.min_exposure {
            out.matched_regions.push(i);
            out.exposure_seconds = out.exposure_seconds.max(exposure);
        }
    }
    out
}

/// Number of distinct CTA TCNs present in the contact log.
pub fn match_tcn(log: &ContactLog, cta: &CallToAction) -> usize {
    let wanted: BTreeSet<&Tcn> = cta.tcns.iter().collect();
    wanted.into_iter().filter(|t| log.contains(t)).count()
}

/// Evaluates a call to action locally. `Ok(None)` means no channel fired.
pub fn match_cta(
    store: &TraceStore,
    log: &ContactLog,
    cta: &CallToAction,
    now: u64,
) -> Result<Option<ExposureMatch>, Expired> {
    if cta.is_expired(now) {
        return Err(Expired {
            expires_at: cta.expires_at,
        });
    }
    let geo = match_geo(store, cta);
    let tcns = match_tcn(log, cta);
    let channel = match (!geo.matched_regions.is_empty(), tcns > 0) {
        (true, true) => ExposureChannel::Both,
        (true, false) => ExposureChannel::Geo,
        (false, true) => ExposureChannel::Tcn,
        (false, false) => return Ok(None),
    };
    Ok(Some(ExposureMatch {
        cta_id: cta.id.clone(),
        channel,
        exposure_seconds: geo.exposure_seconds,
        matched_regions: geo.matched_regions,
        matched_tcns: tcns,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::METERS_PER_DEGREE;
    use crate::tcn::TcnRatchet;
    use crate::trace::{LocationSample, SECONDS_PER_DAY};
    use alloc::string::ToString;
    use alloc::vec;

    const T0: u64 = 1_587_340_800;
    const LAT: f64 = 43.7262;
    const LON: f64 = 12.6365;

    fn at(north_m: f64, east_m: f64) -> GeoPoint {
        let lat = LAT + north_m / METERS_PER_DEGREE;
        let lon = LON + east_m / (METERS_PER_DEGREE * LAT.to_radians().cos());
        GeoPoint::new(lat, lon).unwrap()
    }

    fn square(half_m: f64) -> Vec<(f64, f64)> {
        [(-1.0, -1.0), (-1.0, 1.0), (1.0, 1.0), (1.0, -1.0)]
            .iter()
            .map(|(n, e)| {
                let p = at(n * half_m, e * half_m);
                (p.lat(), p.lon())
            })
            .collect()
    }

    fn raw(regions: Vec<RawRegion>, tcns: Vec<Tcn>) -> RawCta {
        RawCta {
            id: "cta-1".to_string(),
            authority_id: "auth".to_string(),
            regions,
            tcns,
            max_distance: 0.0,
            min_exposure: 900,
            message: "get tested".to_string(),
            created_at: T0,
            expires_at: T0 + 14 * SECONDS_PER_DAY,
            coverage_cells: vec![],
        }
    }

    fn region(start: u64, end: u64) -> RawRegion {
        RawRegion {
            vertices: square(100.0),
            interval: Interval::new(start, end),
        }
    }

    fn trace(points: &[(u64, GeoPoint)]) -> TraceStore {
        let mut s = TraceStore::new();
        for &(t, p) in points {
            s.append_sample(LocationSample::gps(t, p, 5.0)).unwrap();
        }
        s
    }

    #[test]
    fn validation() {
        assert!(validate_cta(raw(vec![region(T0, T0 + 3600)], vec![])).is_ok());
        assert_eq!(validate_cta(raw(vec![], vec![])), Err(CtaError::NoQuery));
        assert_eq!(
            validate_cta(raw(vec![region(T0 + 10, T0 + 10)], vec![])),
            Err(CtaError::InvertedInterval(0))
        );
        let flat = RawRegion {
            vertices: vec![(43.0, 12.0), (43.0, 12.1), (43.0, 12.2)],
            interval: Interval::new(T0, T0 + 60),
        };
        assert!(matches!(
            validate_cta(raw(vec![flat], vec![])),
            Err(CtaError::Polygon { index: 0, source: GeoError::Degenerate })
        ));
        let mut r = raw(vec![region(T0, T0 + 60)], vec![]);
        r.expires_at = r.created_at;
        assert_eq!(validate_cta(r), Err(CtaError::ExpiredAtCreation));
        let mut r = raw(vec![region(T0, T0 + 60)], vec![]);
        r.max_distance = -1.0;
        assert_eq!(validate_cta(r), Err(CtaError::BadMaxDistance));
    }

    #[test]
    fn geo_examples() {
        let cta = validate_cta(raw(vec![region(T0, T0 + 7200)], vec![])).unwrap();
        assert_eq!(match_geo(&TraceStore::new(), &cta), GeoExposure::default());

        // 20 minutes inside, one sample a minute
        let pts: Vec<(u64, GeoPoint)> = (0..=20).map(|k| (T0 + k * 60, at(10.0, 10.0))).collect();
        let store = trace(&pts);
        let geo = match_geo(&store, &cta);
        assert_eq!(geo.exposure_seconds, 1200);
        assert_eq!(geo.matched_regions, vec![0]);

        let late = validate_cta(raw(vec![region(T0 + 10_000, T0 + 20_000)], vec![])).unwrap();
        assert!(match_geo(&store, &late).matched_regions.is_empty());
    }

    #[test]
    fn max_distance_buffer() {
        // 150 m north of a 100 m half-width square: 50 m outside
        let pts: Vec<(u64, GeoPoint)> = (0..=20).map(|k| (T0 + k * 60, at(150.0, 0.0))).collect();
        let store = trace(&pts);
        let mut r = raw(vec![region(T0, T0 + 7200)], vec![]);
        r.max_distance = 40.0;
        assert!(match_geo(&store, &validate_cta(r.clone()).unwrap()).matched_regions.is_empty());
        r.max_distance = 60.0;
        assert_eq!(match_geo(&store, &validate_cta(r).unwrap()).exposure_seconds, 1200);
    }

    #[test]
    fn overlapping_regions_take_max() {
        let pts: Vec<(u64, GeoPoint)> = (0..=20).map(|k| (T0 + k * 60, at(0.0, 0.0))).collect();
        let store = trace(&pts);
        let mut r = raw(vec![region(T0, T0 + 7200), region(T0, T0 + 600)], vec![]);
        r.min_exposure = 0;
        let geo = match_geo(&store, &validate_cta(r).unwrap());
        assert_eq!(geo.matched_regions, vec![0, 1]);
        assert_eq!(geo.exposure_seconds, 1200);
    }

    #[test]
    fn zero_min_exposure_needs_one_sample() {
        let mut r = raw(vec![region(T0, T0 + 7200)], vec![]);
        r.min_exposure = 0;
        let cta = validate_cta(r).unwrap();
        assert!(match_geo(&TraceStore::new(), &cta).matched_regions.is_empty());
        let store = trace(&[(T0 + 5, at(0.0, 0.0))]);
        assert_eq!(match_geo(&store, &cta).matched_regions, vec![0]);
    }

    #[test]
    fn tcn_examples() {
        let mine = TcnRatchet::new([1u8; 32], 0);
        let theirs = TcnRatchet::new([2u8; 32], 0);
        let mut log = ContactLog::new();
        log.record_observation(mine.tcn_at(5).unwrap(), T0, None);

        let disjoint = validate_cta(raw(vec![], vec![theirs.tcn_at(5).unwrap()])).unwrap();
        assert_eq!(match_tcn(&log, &disjoint), 0);
        let shared = validate_cta(raw(
            vec![],
            vec![theirs.tcn_at(1).unwrap(), mine.tcn_at(5).unwrap()],
        ))
        .unwrap();
        assert_eq!(match_tcn(&log, &shared), 1);

        log.expire(T0 + 31 * SECONDS_PER_DAY, 30);
        assert_eq!(match_tcn(&log, &shared), 0);
    }

    #[test]
    fn channels_and_expiry() {
        let r = TcnRatchet::new([4u8; 32], 0);
        let tcn = r.tcn_at(0).unwrap();
        let pts: Vec<(u64, GeoPoint)> = (0..=20).map(|k| (T0 + k * 60, at(0.0, 0.0))).collect();
        let store = trace(&pts);
        let mut log = ContactLog::new();

        let geo_only = validate_cta(raw(vec![region(T0, T0 + 7200)], vec![tcn])).unwrap();
        let m = match_cta(&store, &log, &geo_only, T0).unwrap().unwrap();
        assert_eq!(m.channel, ExposureChannel::Geo);

        log.record_observation(tcn, T0, None);
        let m = match_cta(&store, &log, &geo_only, T0).unwrap().unwrap();
        assert_eq!(m.channel, ExposureChannel::Both);
        assert_eq!(m.matched_tcns, 1);

        let m = match_cta(&TraceStore::new(), &log, &geo_only, T0).unwrap().unwrap();
        assert_eq!(m.channel, ExposureChannel::Tcn);

        assert_eq!(match_cta(&TraceStore::new(), &ContactLog::new(), &geo_only, T0), Ok(None));
        assert_eq!(
            match_cta(&store, &log, &geo_only, geo_only.expires_at),
            Err(Expired { expires_at: geo_only.expires_at })
        );
    }
}
