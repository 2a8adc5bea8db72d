//! Anonymized per-installation daily statistics.

use alloc::collections::BTreeSet;
use core::fmt;

use thiserror::Error;

use crate::geo::{grid_round, is_on_grid, BoundingBox, GeoPoint};
use crate::trace::{Interval, TraceStore, SECONDS_PER_DAY};

/// Grid step applied to the uploaded centroid, in degrees.
pub const CENTROID_CELL_DEG: f64 = 0.02;

/// Random per-installation identifier, never derived from the device.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstallationId(pub [u8; 16]);

impl fmt::Debug for InstallationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("InstallationId(..)")
    }
}

/// UTC day number since the Unix epoch.
pub fn day_of(t: u64) -> u64 {
    t / SECONDS_PER_DAY
}

pub fn day_start(day: u64) -> u64 {
    day * SECONDS_PER_DAY
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("centroid ({0}, {1}) is not on the {CENTROID_CELL_DEG}° grid")]
    OffGrid(f64, f64),
    #[error("minutes at home exceed minutes tracked")]
    HomeExceedsTracked,
    #[error("discarded samples exceed recorded samples")]
    DiscardedExceedsRecorded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DailyStats {
    pub installation_id: InstallationId,
    pub day: u64,
    pub minutes_tracked: u64,
    /// Grid-rounded mean position; absent when no usable sample exists.
    pub centroid: Option<GeoPoint>,
    pub bbox_diagonal_m: f64,
    pub known_locations_visited: u64,
    pub notes_count: u64,
    pub samples_recorded: u64,
    pub samples_discarded: u64,
    pub minutes_at_home: u64,
}

impl DailyStats {
    /// Checks the invariants an upload must satisfy.
    pub fn check(&self) -> Result<(), StatsError> {
        if let Some(c) = self.centroid {
            if !is_on_grid(c.lat(), CENTROID_CELL_DEG) || !is_on_grid(c.lon(), CENTROID_CELL_DEG) {
                return Err(StatsError::OffGrid(c.lat(), c.lon()));
            }
        }
        if self.minutes_at_home > self.minutes_tracked {
            return Err(StatsError::HomeExceedsTracked);
        }
        if self.samples_discarded > self.samples_recorded {
            return Err(StatsError::DiscardedExceedsRecorded);
        }
        Ok(())
    }
}

pub fn compute_daily_stats(store: &TraceStore, day: u64, installation_id: InstallationId) -> DailyStats {
    let start = day_start(day);
    let end = start + SECONDS_PER_DAY;
    let in_day = |t: u64| t >= start && t < end;

    let tracked: u64 = store
        .dwell_segments(Interval::new(start, end))
        .iter()
        .filter(|s| in_day(s.start))
        .map(|s| s.dwell)
        .sum();

    let accepted: alloc::vec::Vec<GeoPoint> = store
        .accepted()
        .filter(|s| in_day(s.timestamp))
        .map(|s| s.position)
        .collect();
    let centroid = (!accepted.is_empty()).then(|| {
        let n = accepted.len() as f64;
        let (la, lo) = accepted.iter().fold((0.0, 0.0), |(a, b), p| (a + p.lat(), b + p.lon()));
        let mean = GeoPoint::new(la / n, lo / n).expect("mean of valid points is valid");
        grid_round(mean, CENTROID_CELL_DEG)
    });
    let bbox_diagonal_m = BoundingBox::from_points(accepted.iter().copied()).map_or(0.0, |b| b.diagonal_m());

    let mut visited = BTreeSet::new();
    let mut home_seconds = 0u64;
    let home = store.known_locations().iter().position(|k| k.is_home);
    for (i, loc, dwell) in store.geofence_assignments() {
        let t = store.samples()[i].sample.timestamp;
        if !in_day(t) {
            continue;
        }
        if let Some(l) = loc {
            visited.insert(l);
            if Some(l) == home {
                home_seconds += dwell.min(end - t);
            }
        }
    }

    let recorded = store.samples().iter().filter(|s| in_day(s.sample.timestamp));
    let (samples_recorded, samples_discarded) =
        recorded.fold((0, 0), |(r, d), s| (r + 1, d + u64::from(s.discarded)));

    DailyStats {
        installation_id,
        day,
        minutes_tracked: tracked / 60,
        centroid,
        bbox_diagonal_m,
        known_locations_visited: visited.len() as u64,
        notes_count: store.notes().iter().filter(|n| in_day(n.timestamp)).count() as u64,
        samples_recorded,
        samples_discarded,
        minutes_at_home: home_seconds / 60,
    }
}
