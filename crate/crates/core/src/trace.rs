//! The device-local trace: location samples, known locations and notes.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::geo::{haversine, GeoPoint};

/// Samples with an accuracy radius above this are kept but never matched.
pub const DISCARD_ACCURACY_M: f64 = 50.0;
/// Longest presence a single sample can claim.
pub const DWELL_CAP_S: u64 = 300;
pub const DEFAULT_RETENTION_DAYS: u32 = 30;
pub const DEFAULT_KNOWN_LOCATION_RADIUS_M: f64 = 100.0;
pub const SECONDS_PER_DAY: u64 = 86_400;
/// Upper bound on note text, in UTF-8 bytes.
pub const MAX_NOTE_BYTES: usize = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("sample at {got} is not after the last sample at {last}")]
    OutOfOrder { last: u64, got: u64 },
    #[error("sample timestamp must be positive")]
    ZeroTimestamp,
    #[error("accuracy radius must be a non-negative number, got {0}")]
    BadAccuracy(f64),
    #[error("known location radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("a home location is already registered")]
    SecondHome,
    #[error("known location id {0:?} already registered")]
    DuplicateLocation(String),
    #[error("note text is empty")]
    EmptyNote,
    #[error("note text exceeds {MAX_NOTE_BYTES} bytes")]
    NoteTooLong,
}

/// Closed time interval in UTC seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Interval {
    pub start: u64,
    pub end: u64,
}

impl Interval {
    pub fn new(start: u64, end: u64) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, t: u64) -> bool {
        self.start <= t && t <= self.end
    }

    pub fn len(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleSource {
    Gps,
    GeofenceEvent,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationSample {
    pub timestamp: u64,
    pub position: GeoPoint,
    /// Metres.
    pub accuracy: f64,
    pub source: SampleSource,
}

impl LocationSample {
    pub fn gps(timestamp: u64, position: GeoPoint, accuracy: f64) -> Self {
        Self {
            timestamp,
            position,
            accuracy,
            source: SampleSource::Gps,
        }
    }
}

/// A stored sample plus its accuracy verdict.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordedSample {
    pub sample: LocationSample,
    pub discarded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnownLocation {
    pub id: String,
    pub label: String,
    pub center: GeoPoint,
    pub radius: f64,
    pub is_home: bool,
}

impl KnownLocation {
    pub fn new(id: impl Into<String>, label: impl Into<String>, center: GeoPoint) -> Self {
        Self {
            id: id.into(),
            label: label.into(),
            center,
            radius: DEFAULT_KNOWN_LOCATION_RADIUS_M,
            is_home: false,
        }
    }

    pub fn home(mut self) -> Self {
        self.is_home = true;
        self
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = radius;
        self
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        haversine(self.center, p) <= self.radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Note {
    pub timestamp: u64,
    pub position: Option<GeoPoint>,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DwellSegment {
    pub position: GeoPoint,
    pub start: u64,
    pub dwell: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeofenceEvent {
    pub location_id: String,
    pub enter: u64,
    pub exit: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStore {
    samples: Vec<RecordedSample>,
    known: Vec<KnownLocation>,
    notes: Vec<Note>,
    retention_days: u32,
}

impl Default for TraceStore {
    fn default() -> Self {
        Self::new()
    }
}

impl TraceStore {
    pub fn new() -> Self {
        Self::with_retention(DEFAULT_RETENTION_DAYS)
    }

    pub fn with_retention(retention_days: u32) -> Self {
        Self {
            samples: Vec::new(),
            known: Vec::new(),
            notes: Vec::new(),
            retention_days,
        }
    }

    pub fn retention_days(&self) -> u32 {
        self.retention_days
    }

    pub fn samples(&self) -> &[RecordedSample] {
        &self.samples
    }

    pub fn known_locations(&self) -> &[KnownLocation] {
        &self.known
    }

    pub fn notes(&self) -> &[Note] {
        &self.notes
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty() && self.notes.is_empty()
    }

    pub fn last_timestamp(&self) -> Option<u64> {
        self.samples.last().map(|s| s.sample.timestamp)
    }

    /// Samples usable for matching.
    pub fn accepted(&self) -> impl Iterator<Item = &LocationSample> + '_ {
        self.samples.iter().filter(|s| !s.discarded).map(|s| &s.sample)
    }

    /// Appends a sample; timestamps must be strictly increasing. Samples less
    /// accurate than [`DISCARD_ACCURACY_M`] are stored flagged as discarded.
    pub fn append_sample(&mut self, sample: LocationSample) -> Result<(), TraceError> {
        if sample.timestamp == 0 {
            return Err(TraceError::ZeroTimestamp);
        }
        if !sample.accuracy.is_finite() || sample.accuracy < 0.0 {
            return Err(TraceError::BadAccuracy(sample.accuracy));
        }
        if let Some(last) = self.last_timestamp() {
            if sample.timestamp <= last {
                return Err(TraceError::OutOfOrder {
                    last,
                    got: sample.timestamp,
                });
            }
        }
        self.samples.push(RecordedSample {
            discarded: sample.accuracy > DISCARD_ACCURACY_M,
            sample,
        });
        Ok(())
    }

    /// Re-inserts a sample whose verdict is already known, e.g. when loading
    /// from disk.
    pub fn restore_sample(&mut self, record: RecordedSample) -> Result<(), TraceError> {
        if let Some(last) = self.last_timestamp() {
            if record.sample.timestamp <= last {
                return Err(TraceError::OutOfOrder {
                    last,
                    got: record.sample.timestamp,
                });
            }
        }
        self.samples.push(record);
        Ok(())
    }

    pub fn add_known_location(&mut self, loc: KnownLocation) -> Result<(), TraceError> {
        if !loc.radius.is_finite() || loc.radius <= 0.0 {
            return Err(TraceError::BadRadius(loc.radius));
        }
        if loc.is_home && self.known.iter().any(|k| k.is_home) {
            return Err(TraceError::SecondHome);
        }
        if self.known.iter().any(|k| k.id == loc.id) {
            return Err(TraceError::DuplicateLocation(loc.id));
        }
        self.known.push(loc);
        Ok(())
    }

    pub fn add_note(&mut self, note: Note) -> Result<(), TraceError> {
        if note.text.trim().is_empty() {
            return Err(TraceError::EmptyNote);
        }
        if note.text.len() > MAX_NOTE_BYTES {
            return Err(TraceError::NoteTooLong);
        }
        let at = self.notes.partition_point(|n| n.timestamp <= note.timestamp);
        self.notes.insert(at, note);
        Ok(())
    }

    /// First-registered known location containing `p`.
    pub fn known_location_at(&self, p: GeoPoint) -> Option<&KnownLocation> {
        self.known.iter().find(|k| k.contains(p))
    }

    pub fn home(&self) -> Option<&KnownLocation> {
        self.known.iter().find(|k| k.is_home)
    }

    /// Drops samples and notes older than the retention horizon. Known
    /// locations are kept.
    pub fn expire(&mut self, now: u64) {
        let cutoff = now.saturating_sub(u64::from(self.retention_days) * SECONDS_PER_DAY);
        let keep_from = self.samples.partition_point(|s| s.sample.timestamp < cutoff);
        self.samples.drain(..keep_from);
        self.notes.retain(|n| n.timestamp >= cutoff);
    }

    /// `(index, dwell)` for every accepted sample: the gap to
    /// the next accepted sample capped at [`DWELL_CAP_S`], zero for the last.
    pub(crate) fn accepted_dwells(&self) -> Vec<(usize, u64)> {
        let idx: Vec<usize> = (0..self.samples.len())
            .filter(|&i| !self.samples[i].discarded)
            .collect();
        idx.iter()
            .enumerate()
            .map(|(k, &i)| {
                let dwell = idx.get(k + 1).map_or(0, |&j| {
                    (self.samples[j].sample.timestamp - self.samples[i].sample.timestamp)
                        .min(DWELL_CAP_S)
                });
                (i, dwell)
            })
            .collect()
    }

    /// Presence segments of accepted samples inside `window`, each clipped so
    /// it never extends past the window end.
    pub fn dwell_segments(&self, window: Interval) -> Vec<DwellSegment> {
        if window.start > window.end {
            return Vec::new();
        }
        self.accepted_dwells()
            .into_iter()
            .filter_map(|(i, dwell)| {
                let s = &self.samples[i].sample;
                window.contains(s.timestamp).then(|| DwellSegment {
                    position: s.position,
                    start: s.timestamp,
                    dwell: dwell.min(window.end - s.timestamp),
                })
            })
            .collect()
    }

    /// Accepted samples paired with the known location they fall in and their
    /// dwell.
    pub(crate) fn geofence_assignments(&self) -> Vec<(usize, Option<usize>, u64)> {
        self.accepted_dwells()
            .into_iter()
            .map(|(i, dwell)| {
                let p = self.samples[i].sample.position;
                let loc = self.known.iter().position(|k| k.contains(p));
                (i, loc, dwell)
            })
            .collect()
    }

    /// Maximal visits to known locations. A visit ends at its last sample
    /// plus that sample's dwell.
    pub fn geofence_events(&self) -> Vec<GeofenceEvent> {
        let mut events = Vec::new();
        let mut open: Option<(usize, u64, u64)> = None; // (location, enter, exit)
        for (i, loc, dwell) in self.geofence_assignments() {
            let t = self.samples[i].sample.timestamp;
            match (open, loc) {
                (Some((cur, enter, _)), Some(l)) if cur == l => open = Some((cur, enter, t + dwell)),
                (prev, next) => {
                    if let Some((cur, enter, exit)) = prev {
                        events.push(GeofenceEvent {
                            location_id: self.known[cur].id.clone(),
                            enter,
                            exit,
                        });
                    }
                    open = next.map(|l| (l, t, t + dwell));
                }
            }
        }
        if let Some((cur, enter, exit)) = open {
            events.push(GeofenceEvent {
                location_id: self.known[cur].id.clone(),
                enter,
                exit,
            });
        }
        events
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    const T0: u64 = 1_587_340_800;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    fn store_with(times: &[u64]) -> TraceStore {
        let mut s = TraceStore::new();
        for &t in times {
            s.append_sample(LocationSample::gps(t, pt(43.0, 12.0), 10.0)).unwrap();
        }
        s
    }

    #[test]
    fn append_and_ordering() {
        let mut s = TraceStore::new();
        s.append_sample(LocationSample::gps(T0, pt(43.0, 12.0), 5.0)).unwrap();
        assert_eq!(s.samples().len(), 1);
        s.append_sample(LocationSample::gps(T0 + 10, pt(43.0, 12.0), 80.0)).unwrap();
        assert!(s.samples()[1].discarded);
        let err = s.append_sample(LocationSample::gps(T0 + 5, pt(43.0, 12.0), 5.0));
        assert_eq!(err, Err(TraceError::OutOfOrder { last: T0 + 10, got: T0 + 5 }));
        let err = s.append_sample(LocationSample::gps(T0 + 10, pt(43.0, 12.0), 5.0));
        assert!(matches!(err, Err(TraceError::OutOfOrder { .. })));
    }

    #[test]
    fn discarded_samples_are_excluded_from_dwell() {
        let mut s = store_with(&[T0, T0 + 60]);
        s.append_sample(LocationSample::gps(T0 + 120, pt(43.0, 12.0), 80.0)).unwrap();
        s.append_sample(LocationSample::gps(T0 + 180, pt(43.0, 12.0), 5.0)).unwrap();
        let segs = s.dwell_segments(Interval::new(T0, T0 + 180));
        let starts: Vec<u64> = segs.iter().map(|d| d.start - T0).collect();
        assert_eq!(starts, vec![0, 60, 180]);
        // the gap over the discarded sample is 120 s
        assert_eq!(segs[1].dwell, 120);
    }

    #[test]
    fn expiry_boundaries() {
        let now = T0 + 40 * SECONDS_PER_DAY;
        let mut s = store_with(&[now - 31 * SECONDS_PER_DAY, now - 29 * SECONDS_PER_DAY]);
        s.add_note(Note {
            timestamp: now - 31 * SECONDS_PER_DAY,
            position: None,
            text: "old".to_string(),
        })
        .unwrap();
        s.add_known_location(KnownLocation::new("h", "home", pt(43.0, 12.0)).home())
            .unwrap();
        s.expire(now);
        assert_eq!(s.samples().len(), 1);
        assert_eq!(s.samples()[0].sample.timestamp, now - 29 * SECONDS_PER_DAY);
        assert!(s.notes().is_empty());
        assert_eq!(s.known_locations().len(), 1);

        let mut empty = TraceStore::new();
        empty.expire(now);
        assert!(empty.is_empty());
    }

    #[test]
    fn dwell_examples() {
        let s = store_with(&[T0, T0 + 60, T0 + 120]);
        let d: Vec<u64> = s
            .dwell_segments(Interval::new(T0, T0 + 120))
            .iter()
            .map(|d| d.dwell)
            .collect();
        assert_eq!(d, vec![60, 60, 0]);

        let s = store_with(&[T0, T0 + 3600, T0 + 3660]);
        let segs = s.dwell_segments(Interval::new(T0, T0 + 4000));
        assert_eq!(segs[0].dwell, DWELL_CAP_S);
        // brute-force re-summation of the cap rule
        let resum: u64 = [3600u64, 60].iter().map(|g| (*g).min(300)).sum();
        assert_eq!(segs.iter().map(|d| d.dwell).sum::<u64>(), resum);

        assert!(s.dwell_segments(Interval::new(T0 + 10, T0 + 20)).is_empty());
        // clipped at the window end
        let segs = s.dwell_segments(Interval::new(T0, T0 + 100));
        assert_eq!(segs[0].dwell, 100);
    }

    #[test]
    fn known_location_rules() {
        let mut s = TraceStore::new();
        s.add_known_location(KnownLocation::new("a", "home", pt(43.0, 12.0)).home())
            .unwrap();
        assert_eq!(
            s.add_known_location(KnownLocation::new("b", "home2", pt(44.0, 12.0)).home()),
            Err(TraceError::SecondHome)
        );
        assert_eq!(
            s.add_known_location(KnownLocation::new("c", "x", pt(44.0, 12.0)).with_radius(0.0)),
            Err(TraceError::BadRadius(0.0))
        );
        assert!(s
            .add_note(Note { timestamp: T0, position: None, text: "  ".to_string() })
            .is_err());
        let long = "é".repeat(MAX_NOTE_BYTES / 2 + 1);
        assert_eq!(
            s.add_note(Note { timestamp: T0, position: None, text: long }),
            Err(TraceError::NoteTooLong)
        );
    }

    fn offset(meters_north: f64) -> GeoPoint {
        pt(43.0 + meters_north / crate::geo::METERS_PER_DEGREE, 12.0)
    }

    #[test]
    fn geofence_half_hour_at_home() {
        let mut s = TraceStore::new();
        s.add_known_location(KnownLocation::new("home", "home", offset(0.0)).home())
            .unwrap();
        for k in 0..30 {
            s.append_sample(LocationSample::gps(T0 + k * 60, offset(10.0), 5.0)).unwrap();
        }
        s.append_sample(LocationSample::gps(T0 + 1800, offset(500.0), 5.0)).unwrap();
        let ev = s.geofence_events();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].exit - ev[0].enter, 1800);
    }

    #[test]
    fn geofence_outside_and_two_visits() {
        let mut s = TraceStore::new();
        s.add_known_location(KnownLocation::new("work", "work", offset(0.0))).unwrap();
        for k in 0..5 {
            s.append_sample(LocationSample::gps(T0 + k * 60, offset(1000.0), 5.0)).unwrap();
        }
        assert!(s.geofence_events().is_empty());

        let path = [0.0, 0.0, 500.0, 500.0, 0.0, 0.0];
        let mut s2 = TraceStore::new();
        s2.add_known_location(KnownLocation::new("work", "work", offset(0.0))).unwrap();
        for (k, m) in path.iter().enumerate() {
            s2.append_sample(LocationSample::gps(T0 + k as u64 * 60, offset(*m), 5.0)).unwrap();
        }
        let ev = s2.geofence_events();
        assert_eq!(ev.len(), 2);
        assert_eq!((ev[0].enter - T0, ev[0].exit - T0), (0, 120));
        assert_eq!((ev[1].enter - T0, ev[1].exit - T0), (240, 300));
    }

    #[test]
    fn overlapping_locations_first_registered_wins() {
        let mut s = TraceStore::new();
        s.add_known_location(KnownLocation::new("first", "a", offset(0.0))).unwrap();
        s.add_known_location(KnownLocation::new("second", "b", offset(20.0))).unwrap();
        s.append_sample(LocationSample::gps(T0, offset(10.0), 5.0)).unwrap();
        let ev = s.geofence_events();
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].location_id, "first");
        assert_eq!(ev[0].exit, ev[0].enter);
    }
}
