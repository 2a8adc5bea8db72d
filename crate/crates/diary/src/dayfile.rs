//! On-device persistence: one binary file per UTC day.
//!
//! A day file starts with the magic `DIAY`, a version byte and the day number
//! (`u32`, days since the Unix epoch). It is followed by length-prefixed
//! records, all little-endian:
//!
//! ```text
//! u16 len | u8 kind | payload (len - 1 bytes)
//!
//! kind 1  sample     u64 timestamp | i32 lat e7 | i32 lon e7 | u16 accuracy m | u8 flags
//!                    flags: bit 0 discarded, bits 1-2 source (0 gps, 1 geofence, 2 manual)
//! kind 2  note       u64 timestamp | u8 has_position | i32 lat e7 | i32 lon e7 | utf-8 text
//! kind 3  contact    [16] tcn | u64 first_seen | u64 last_seen | u8 has_rssi | i16 rssi
//! kind 4  broadcast  u64 rotation index | [16] tcn
//! ```
//!
//! Known locations live in `known.bin` (magic `DIAK`, same framing, kind 5:
//! `u8 is_home | i32 lat e7 | i32 lon e7 | f64 radius | u8 id_len | id | label`).
//! Expiry deletes whole day files.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use diary_core::{
    BroadcastLog, ContactLog, ContactRecord, GeoPoint, KnownLocation, LocationSample, Note, RecordedSample,
    SampleSource, Tcn, TraceError, TraceStore,
};
use diary_core::tcn::{BroadcastRecord, ROTATION_PERIOD_S};
use diary_core::trace::SECONDS_PER_DAY;
use thiserror::Error;

use crate::calendar;

const DAY_MAGIC: &[u8; 4] = b"DIAY";
const KNOWN_MAGIC: &[u8; 4] = b"DIAK";
const VERSION: u8 = 1;
pub const KNOWN_FILE: &str = "known.bin";
pub const DAY_EXT: &str = "day";

const KIND_SAMPLE: u8 = 1;
const KIND_NOTE: u8 = 2;
const KIND_CONTACT: u8 = 3;
const KIND_BROADCAST: u8 = 4;
const KIND_KNOWN: u8 = 5;

#[derive(Debug, Error)]
pub enum DayFileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}: not a day file")]
    BadMagic(String),
    #[error("unsupported format version {0}")]
    Version(u8),
    #[error("truncated record at byte {0}")]
    Truncated(usize),
    #[error("malformed record of kind {kind} at byte {at}")]
    BadRecord { kind: u8, at: usize },
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Everything a device keeps locally.
#[derive(Debug, Clone, Default)]
pub struct DeviceData {
    pub store: TraceStore,
    pub contacts: ContactLog,
    pub broadcasts: BroadcastLog,
}

/// Decoded content of a single day file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DayContents {
    pub day: u64,
    pub samples: Vec<RecordedSample>,
    pub notes: Vec<Note>,
    pub contacts: Vec<ContactRecord>,
    pub broadcasts: Vec<BroadcastRecord>,
}

fn to_e7(x: f64) -> i32 {
    (x * 1e7).round() as i32
}

fn from_e7(x: i32) -> f64 {
    f64::from(x) / 1e7
}

fn push_record(buf: &mut Vec<u8>, kind: u8, payload: &[u8]) {
    let len = u16::try_from(payload.len() + 1).expect("record fits in u16");
    buf.extend_from_slice(&len.to_le_bytes());
    buf.push(kind);
    buf.extend_from_slice(payload);
}

fn source_bits(s: SampleSource) -> u8 {
    match s {
        SampleSource::Gps => 0,
        SampleSource::GeofenceEvent => 1,
        SampleSource::Manual => 2,
    }
}

fn source_from_bits(b: u8) -> Option<SampleSource> {
    match b {
        0 => Some(SampleSource::Gps),
        1 => Some(SampleSource::GeofenceEvent),
        2 => Some(SampleSource::Manual),
        _ => None,
    }
}

fn encode_sample(r: &RecordedSample) -> Vec<u8> {
    let mut p = Vec::with_capacity(19);
    p.extend_from_slice(&r.sample.timestamp.to_le_bytes());
    p.extend_from_slice(&to_e7(r.sample.position.lat()).to_le_bytes());
    p.extend_from_slice(&to_e7(r.sample.position.lon()).to_le_bytes());
    let acc = r.sample.accuracy.round().min(f64::from(u16::MAX)) as u16;
    p.extend_from_slice(&acc.to_le_bytes());
    p.push(u8::from(r.discarded) | (source_bits(r.sample.source) << 1));
    p
}

fn encode_note(n: &Note) -> Vec<u8> {
    let mut p = Vec::with_capacity(17 + n.text.len());
    p.extend_from_slice(&n.timestamp.to_le_bytes());
    let (has, lat, lon) = n.position.map_or((0u8, 0, 0), |g| (1, to_e7(g.lat()), to_e7(g.lon())));
    p.push(has);
    p.extend_from_slice(&lat.to_le_bytes());
    p.extend_from_slice(&lon.to_le_bytes());
    p.extend_from_slice(n.text.as_bytes());
    p
}

fn encode_contact(c: &ContactRecord) -> Vec<u8> {
    let mut p = Vec::with_capacity(35);
    p.extend_from_slice(c.tcn.as_bytes());
    p.extend_from_slice(&c.first_seen.to_le_bytes());
    p.extend_from_slice(&c.last_seen.to_le_bytes());
    p.push(u8::from(c.rssi_hint.is_some()));
    p.extend_from_slice(&c.rssi_hint.unwrap_or(0).to_le_bytes());
    p
}

fn encode_broadcast(b: &BroadcastRecord) -> Vec<u8> {
    let mut p = Vec::with_capacity(24);
    p.extend_from_slice(&b.index.to_le_bytes());
    p.extend_from_slice(b.tcn.as_bytes());
    p
}

/// Serializes every record of `data` that falls on `day`.
pub fn encode_day(day: u64, data: &DeviceData) -> Vec<u8> {
    let on_day = |t: u64| t / SECONDS_PER_DAY == day;
    encode_contents(&DayContents {
        day,
        samples: data.store.samples().iter().filter(|s| on_day(s.sample.timestamp)).cloned().collect(),
        notes: data.store.notes().iter().filter(|n| on_day(n.timestamp)).cloned().collect(),
        contacts: data.contacts.records().iter().filter(|c| on_day(c.first_seen)).copied().collect(),
        broadcasts: data
            .broadcasts
            .records()
            .iter()
            .filter(|b| on_day(b.index * ROTATION_PERIOD_S))
            .copied()
            .collect(),
    })
}

pub fn encode_contents(c: &DayContents) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DAY_MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(c.day as u32).to_le_bytes());
    for s in &c.samples {
        push_record(&mut buf, KIND_SAMPLE, &encode_sample(s));
    }
    for n in &c.notes {
        push_record(&mut buf, KIND_NOTE, &encode_note(n));
    }
    for r in &c.contacts {
        push_record(&mut buf, KIND_CONTACT, &encode_contact(r));
    }
    for b in &c.broadcasts {
        push_record(&mut buf, KIND_BROADCAST, &encode_broadcast(b));
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn i16(&mut self) -> Option<i16> {
        self.take(2).map(|b| i16::from_le_bytes(b.try_into().unwrap()))
    }

    fn i32(&mut self) -> Option<i32> {
        self.take(4).map(|b| i32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn tcn(&mut self) -> Option<Tcn> {
        self.take(16).map(|b| Tcn(b.try_into().unwrap()))
    }

    fn point(&mut self) -> Option<GeoPoint> {
        let lat = from_e7(self.i32()?);
        let lon = from_e7(self.i32()?);
        GeoPoint::new(lat, lon).ok()
    }

    fn rest(&mut self) -> &'a [u8] {
        let out = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        out
    }
}

/// Splits the framed body into `(offset, kind, payload)` triples.
fn records(bytes: &[u8], mut pos: usize) -> Result<Vec<(usize, u8, &[u8])>, DayFileError> {
    let mut out = Vec::new();
    while pos < bytes.len() {
        let at = pos;
        let len = bytes
            .get(pos..pos + 2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]) as usize)
            .ok_or(DayFileError::Truncated(at))?;
        if len == 0 {
            return Err(DayFileError::Truncated(at));
        }
        let body = bytes.get(pos + 2..pos + 2 + len).ok_or(DayFileError::Truncated(at))?;
        out.push((at, body[0], &body[1..]));
        pos += 2 + len;
    }
    Ok(out)
}

pub fn decode_day(bytes: &[u8]) -> Result<DayContents, DayFileError> {
    if bytes.len() < 9 || &bytes[..4] != DAY_MAGIC {
        return Err(DayFileError::BadMagic("day file".into()));
    }
    if bytes[4] != VERSION {
        return Err(DayFileError::Version(bytes[4]));
    }
    let mut out = DayContents {
        day: u64::from(u32::from_le_bytes(bytes[5..9].try_into().unwrap())),
        ..Default::default()
    };
    for (at, kind, payload) in records(bytes, 9)? {
        let mut r = Reader { bytes: payload, pos: 0 };
        let bad = DayFileError::BadRecord { kind, at };
        match kind {
            KIND_SAMPLE => {
                let parsed = (|| {
                    let timestamp = r.u64()?;
                    let position = r.point()?;
                    let accuracy = f64::from(r.u16()?);
                    let flags = r.u8()?;
                    Some(RecordedSample {
                        sample: LocationSample {
                            timestamp,
                            position,
                            accuracy,
                            source: source_from_bits((flags >> 1) & 0b11)?,
                        },
                        discarded: flags & 1 == 1,
                    })
                })();
                out.samples.push(parsed.ok_or(bad)?);
            }
            KIND_NOTE => {
                let parsed = (|| {
                    let timestamp = r.u64()?;
                    let has = r.u8()?;
                    let p = r.point()?;
                    let text = String::from_utf8(r.rest().to_vec()).ok()?;
                    Some(Note {
                        timestamp,
                        position: (has == 1).then_some(p),
                        text,
                    })
                })();
                out.notes.push(parsed.ok_or(bad)?);
            }
            KIND_CONTACT => {
                let parsed = (|| {
                    let tcn = r.tcn()?;
                    let first_seen = r.u64()?;
                    let last_seen = r.u64()?;
                    let has = r.u8()?;
                    let rssi = r.i16()?;
                    Some(ContactRecord {
                        tcn,
                        first_seen,
                        last_seen,
                        rssi_hint: (has == 1).then_some(rssi),
                    })
                })();
                out.contacts.push(parsed.ok_or(bad)?);
            }
            KIND_BROADCAST => {
                let parsed = (|| {
                    Some(BroadcastRecord {
                        index: r.u64()?,
                        tcn: r.tcn()?,
                    })
                })();
                out.broadcasts.push(parsed.ok_or(bad)?);
            }
            // unknown kinds are skipped so newer writers stay readable
            _ => {}
        }
    }
    Ok(out)
}

pub fn encode_known(locations: &[KnownLocation]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(KNOWN_MAGIC);
    buf.push(VERSION);
    for k in locations {
        let mut p = Vec::new();
        p.push(u8::from(k.is_home));
        p.extend_from_slice(&to_e7(k.center.lat()).to_le_bytes());
        p.extend_from_slice(&to_e7(k.center.lon()).to_le_bytes());
        p.extend_from_slice(&k.radius.to_le_bytes());
        let id = &k.id.as_bytes()[..k.id.len().min(255)];
        p.push(id.len() as u8);
        p.extend_from_slice(id);
        p.extend_from_slice(k.label.as_bytes());
        push_record(&mut buf, KIND_KNOWN, &p);
    }
    buf
}

pub fn decode_known(bytes: &[u8]) -> Result<Vec<KnownLocation>, DayFileError> {
    if bytes.len() < 5 || &bytes[..4] != KNOWN_MAGIC {
        return Err(DayFileError::BadMagic(KNOWN_FILE.into()));
    }
    if bytes[4] != VERSION {
        return Err(DayFileError::Version(bytes[4]));
    }
    let mut out = Vec::new();
    for (at, kind, payload) in records(bytes, 5)? {
        if kind != KIND_KNOWN {
            continue;
        }
        let mut r = Reader { bytes: payload, pos: 0 };
        let parsed = (|| {
            let is_home = r.u8()? == 1;
            let center = r.point()?;
            let radius = f64::from_le_bytes(r.take(8)?.try_into().ok()?);
            let id_len = r.u8()? as usize;
            let id = String::from_utf8(r.take(id_len)?.to_vec()).ok()?;
            let label = String::from_utf8(r.rest().to_vec()).ok()?;
            Some(KnownLocation {
                id,
                label,
                center,
                radius,
                is_home,
            })
        })();
        out.push(parsed.ok_or(DayFileError::BadRecord { kind, at })?);
    }
    Ok(out)
}

pub fn day_file_name(day: u64) -> String {
    format!("{}.{DAY_EXT}", calendar::day_to_date(day).format("%Y-%m-%d"))
}

fn day_files(dir: &Path) -> io::Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(DAY_EXT) {
            continue;
        }
        let day = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d").ok())
            .map(calendar::date_to_day);
        if let Some(day) = day {
            out.push((day, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Writes one file per day that has data, plus `known.bin`, and removes day
/// files for days that no longer hold anything.
pub fn write_device_dir(dir: &Path, data: &DeviceData) -> Result<(), DayFileError> {
    fs::create_dir_all(dir)?;
    let mut days: Vec<u64> = data
        .store
        .samples()
        .iter()
        .map(|s| s.sample.timestamp / SECONDS_PER_DAY)
        .chain(data.store.notes().iter().map(|n| n.timestamp / SECONDS_PER_DAY))
        .chain(data.contacts.records().iter().map(|c| c.first_seen / SECONDS_PER_DAY))
        .chain(
            data.broadcasts
                .records()
                .iter()
                .map(|b| b.index * ROTATION_PERIOD_S / SECONDS_PER_DAY),
        )
        .collect();
    days.sort_unstable();
    days.dedup();
    for (day, path) in day_files(dir)? {
        if days.binary_search(&day).is_err() {
            fs::remove_file(path)?;
        }
    }
    for day in days {
        fs::write(dir.join(day_file_name(day)), encode_day(day, data))?;
    }
    fs::write(dir.join(KNOWN_FILE), encode_known(data.store.known_locations()))?;
    Ok(())
}

pub fn read_day_files(dir: &Path) -> Result<Vec<DayContents>, DayFileError> {
    day_files(dir)?
        .into_iter()
        .map(|(_, path)| decode_day(&fs::read(path)?))
        .collect()
}

pub fn read_device_dir(dir: &Path) -> Result<DeviceData, DayFileError> {
    let mut data = DeviceData::default();
    let known_path = dir.join(KNOWN_FILE);
    if known_path.exists() {
        for k in decode_known(&fs::read(known_path)?)? {
            data.store.add_known_location(k)?;
        }
    }
    for day in read_day_files(dir)? {
        for s in day.samples {
            data.store.restore_sample(s)?;
        }
        for n in day.notes {
            data.store.add_note(n)?;
        }
        for c in day.contacts {
            data.contacts.restore(c);
        }
        for b in day.broadcasts {
            data.broadcasts.record(b.index, b.tcn);
        }
    }
    Ok(data)
}

/// Deletes day files entirely before the retention horizon.
pub fn expire_dir(dir: &Path, now: u64, retention_days: u32) -> Result<usize, DayFileError> {
    let cutoff_day = now.saturating_sub(u64::from(retention_days) * SECONDS_PER_DAY) / SECONDS_PER_DAY;
    let mut removed = 0;
    for (day, path) in day_files(dir)? {
        if day < cutoff_day {
            fs::remove_file(path)?;
            removed += 1;
        }
    }
    Ok(removed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use diary_core::TcnRatchet;

    const T0: u64 = 1_587_340_800; // 2020-04-20T00:00:00Z

    fn sample_data() -> DeviceData {
        let mut d = DeviceData::default();
        let home = GeoPoint::new(43.7262, 12.6365).unwrap();
        d.store
            .add_known_location(KnownLocation::new("h", "Home", home).home())
            .unwrap();
        for k in 0..5u64 {
            let acc = if k == 2 { 80.0 } else { 12.0 };
            d.store.append_sample(LocationSample::gps(T0 + k * 60, home, acc)).unwrap();
        }
        d.store
            .append_sample(LocationSample {
                timestamp: T0 + SECONDS_PER_DAY + 5,
                position: home,
                accuracy: 3.0,
                source: SampleSource::Manual,
            })
            .unwrap();
        d.store
            .add_note(Note { timestamp: T0 + 30, position: Some(home), text: "café ☕".into() })
            .unwrap();
        let r = TcnRatchet::new([1; 32], 0);
        d.contacts.record_observation(r.tcn_at(3).unwrap(), T0 + 10, Some(-70));
        d.contacts.record_observation(r.tcn_at(4).unwrap(), T0 + 20, None);
        d.broadcasts.record(T0 / ROTATION_PERIOD_S, r.tcn_at(9).unwrap());
        d
    }

    #[test]
    fn day_round_trip() {
        let d = sample_data();
        let bytes = encode_day(T0 / SECONDS_PER_DAY, &d);
        let back = decode_day(&bytes).unwrap();
        assert_eq!(back.day, T0 / SECONDS_PER_DAY);
        assert_eq!(back.samples.len(), 5);
        assert!(back.samples[2].discarded);
        assert_eq!(back.samples[0].sample.accuracy, 12.0);
        assert_eq!(back.notes[0].text, "café ☕");
        assert_eq!(back.contacts, d.contacts.records());
        assert_eq!(back.broadcasts, d.broadcasts.records());
        // 9-byte header + 5 samples of 22 bytes
        let only_samples = 9 + 5 * 22;
        assert!(bytes.len() > only_samples);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(decode_day(b"nope"), Err(DayFileError::BadMagic(_))));
        let mut bytes = encode_day(T0 / SECONDS_PER_DAY, &sample_data());
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_day(&bytes), Err(DayFileError::Truncated(_))));
        let mut bytes = encode_day(0, &DeviceData::default());
        bytes[4] = 9;
        assert!(matches!(decode_day(&bytes), Err(DayFileError::Version(9))));
    }

    #[test]
    fn directory_round_trip_and_expiry() {
        let dir = tempfile::tempdir().unwrap();
        let d = sample_data();
        write_device_dir(dir.path(), &d).unwrap();
        assert!(dir.path().join("2020-04-20.day").exists());
        assert!(dir.path().join("2020-04-21.day").exists());
        let back = read_device_dir(dir.path()).unwrap();
        assert_eq!(back.store.samples().len(), 6);
        assert_eq!(back.store.known_locations(), d.store.known_locations());
        assert_eq!(back.contacts.len(), 2);

        let removed = expire_dir(dir.path(), T0 + 31 * SECONDS_PER_DAY, 30).unwrap();
        assert_eq!(removed, 1);
        let back = read_device_dir(dir.path()).unwrap();
        assert_eq!(back.store.samples().len(), 1);
    }
}
