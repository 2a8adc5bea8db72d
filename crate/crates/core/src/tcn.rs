//! Temporary contact numbers: a SHA-256 hash ratchet, rotation schedule,
//! the local contact log and compact reports for diagnosed users.
//!
//! The chain advances as `key[i+1] = SHA-256(key[i])` and the number broadcast
//! during rotation `i` is the first 16 bytes of `SHA-256(0x01 || key[i])`.
//! Publishing `key[s]` reveals numbers from rotation `s` on, never earlier ones.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trace::SECONDS_PER_DAY;

pub const ROTATION_PERIOD_S: u64 = 900;
pub const ROTATIONS_PER_DAY: u64 = SECONDS_PER_DAY / ROTATION_PERIOD_S;
pub const TCN_LEN: usize = 16;
const TCN_DOMAIN: u8 = 0x01;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TcnError {
    #[error("rotation {index} precedes the ratchet's creation at {created}")]
    BeforeCreation { index: u64, created: u64 },
    #[error("inverted rotation range {from}..={to}")]
    InvertedRange { from: u64, to: u64 },
    #[error("malformed TCN hex")]
    MalformedHex,
}

/// Epoch-aligned rotation window containing `t`.
pub fn rotation_index(t: u64) -> u64 {
    t / ROTATION_PERIOD_S
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tcn(pub [u8; TCN_LEN]);

impl Tcn {
    pub fn as_bytes(&self) -> &[u8; TCN_LEN] {
        &self.0
    }
}

impl fmt::Debug for Tcn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tcn({self})")
    }
}

impl fmt::Display for Tcn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl FromStr for Tcn {
    type Err = TcnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; TCN_LEN];
        decode_hex(s, &mut out)?;
        Ok(Self(out))
    }
}

pub(crate) fn decode_hex(s: &str, out: &mut [u8]) -> Result<(), TcnError> {
    let bytes = s.as_bytes();
    if bytes.len() != out.len() * 2 {
        return Err(TcnError::MalformedHex);
    }
    let nibble = |c: u8| match c {
        b'0'..=b'9' => Ok(c - b'0'),
        b'a'..=b'f' => Ok(c - b'a' + 10),
        b'A'..=b'F' => Ok(c - b'A' + 10),
        _ => Err(TcnError::MalformedHex),
    };
    for (i, o) in out.iter_mut().enumerate() {
        *o = (nibble(bytes[2 * i])? << 4) | nibble(bytes[2 * i + 1])?;
    }
    Ok(())
}

/// A 32-byte link of the key chain.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChainKey(pub [u8; 32]);

impl ChainKey {
    pub fn next(&self) -> Self {
        Self(Sha256::digest(self.0).into())
    }

    pub fn tcn(&self) -> Tcn {
        let mut h = Sha256::new();
        h.update([TCN_DOMAIN]);
        h.update(self.0);
        let digest: [u8; 32] = h.finalize().into();
        let mut out = [0u8; TCN_LEN];
        out.copy_from_slice(&digest[..TCN_LEN]);
        Tcn(out)
    }
}

impl fmt::Debug for ChainKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ChainKey(..)")
    }
}

impl fmt::Display for ChainKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl FromStr for ChainKey {
    type Err = TcnError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        decode_hex(s, &mut out)?;
        Ok(Self(out))
    }
}

/// Key chain rooted at a random seed; the seed is the key of rotation
/// `created_at_index`.
#[derive(Clone, PartialEq, Eq)]
pub struct TcnRatchet {
    seed: ChainKey,
    created_at_index: u64,
}

impl fmt::Debug for TcnRatchet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TcnRatchet")
            .field("created_at_index", &self.created_at_index)
            .finish_non_exhaustive()
    }
}

impl TcnRatchet {
    pub fn new(seed: [u8; 32], created_at_index: u64) -> Self {
        Self {
            seed: ChainKey(seed),
            created_at_index,
        }
    }

    pub fn created_at_index(&self) -> u64 {
        self.created_at_index
    }

    /// The seed, for on-device persistence only.
    pub fn seed_bytes(&self) -> &[u8; 32] {
        &self.seed.0
    }

    fn key_at(&self, index: u64) -> Result<ChainKey, TcnError> {
        if index < self.created_at_index {
            return Err(TcnError::BeforeCreation {
                index,
                created: self.created_at_index,
            });
        }
        let mut key = self.seed;
        for _ in self.created_at_index..index {
            key = key.next();
        }
        Ok(key)
    }

    pub fn tcn_at(&self, index: u64) -> Result<Tcn, TcnError> {
        self.key_at(index).map(|k| k.tcn())
    }

    /// Cursor that walks the chain forward without rehashing from the seed.
    pub fn cursor(&self) -> RatchetCursor {
        RatchetCursor {
            index: self.created_at_index,
            key: self.seed,
        }
    }
}

/// Forward-only position on a key chain.
#[derive(Clone, Debug)]
pub struct RatchetCursor {
    index: u64,
    key: ChainKey,
}

impl RatchetCursor {
    pub fn from_key(key: ChainKey, index: u64) -> Self {
        Self { index, key }
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    /// Advances to `index` and returns its TCN.
    pub fn tcn_at(&mut self, index: u64) -> Result<Tcn, TcnError> {
        if index < self.index {
            return Err(TcnError::BeforeCreation {
                index,
                created: self.index,
            });
        }
        while self.index < index {
            self.key = self.key.next();
            self.index += 1;
        }
        Ok(self.key.tcn())
    }
}

/// A diagnosed user's TCNs for a rotation range, as one key plus the range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcnReport {
    pub chain_key_at_start: ChainKey,
    pub start_index: u64,
    pub end_index: u64,
}

impl TcnReport {
    pub fn new(chain_key_at_start: ChainKey, start_index: u64, end_index: u64) -> Result<Self, TcnError> {
        if start_index > end_index {
            return Err(TcnError::InvertedRange {
                from: start_index,
                to: end_index,
            });
        }
        Ok(Self {
            chain_key_at_start,
            start_index,
            end_index,
        })
    }

    pub fn len(&self) -> usize {
        (self.end_index - self.start_index + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn expand(&self) -> Vec<Tcn> {
        let mut key = self.chain_key_at_start;
        let mut out = Vec::with_capacity(self.len());
        for i in self.start_index..=self.end_index {
            out.push(key.tcn());
            if i < self.end_index {
                key = key.next();
            }
        }
        out
    }
}

pub fn build_report(ratchet: &TcnRatchet, from: u64, to: u64) -> Result<TcnReport, TcnError> {
    if from > to {
        return Err(TcnError::InvertedRange { from, to });
    }
    let key = ratchet.key_at(from)?;
    TcnReport::new(key, from, to)
}

pub fn expand_report(report: &TcnReport) -> Vec<Tcn> {
    report.expand()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContactRecord {
    pub tcn: Tcn,
    pub first_seen: u64,
    pub last_seen: u64,
    pub rssi_hint: Option<i16>,
}

/// Fully local log of foreign TCNs heard nearby.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContactLog {
    records: Vec<ContactRecord>,
    latest: BTreeMap<Tcn, usize>,
}

impl ContactLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[ContactRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, tcn: &Tcn) -> bool {
        self.latest.contains_key(tcn)
    }

    /// Merges into the latest record for `tcn` when it was last seen less
    /// than one rotation period ago, otherwise starts a new record.
    pub fn record_observation(&mut self, tcn: Tcn, t: u64, rssi_hint: Option<i16>) {
        if let Some(&i) = self.latest.get(&tcn) {
            let rec = &mut self.records[i];
            if t >= rec.last_seen && t - rec.last_seen < ROTATION_PERIOD_S {
                rec.last_seen = t;
                if rssi_hint.is_some() {
                    rec.rssi_hint = rssi_hint;
                }
                return;
            }
        }
        self.latest.insert(tcn, self.records.len());
        self.records.push(ContactRecord {
            tcn,
            first_seen: t,
            last_seen: t,
            rssi_hint,
        });
    }

    /// Restores a stored record verbatim.
    pub fn restore(&mut self, rec: ContactRecord) {
        self.latest.insert(rec.tcn, self.records.len());
        self.records.push(rec);
    }

    /// Drops records first seen before the retention horizon.
    pub fn expire(&mut self, now: u64, retention_days: u32) {
        let cutoff = now.saturating_sub(u64::from(retention_days) * SECONDS_PER_DAY);
        let before = self.records.len();
        self.records.retain(|r| r.first_seen >= cutoff);
        if self.records.len() != before {
            self.latest.clear();
            for (i, r) in self.records.iter().enumerate() {
                self.latest.insert(r.tcn, i);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BroadcastRecord {
    pub index: u64,
    pub tcn: Tcn,
}

/// Local log of this device's own broadcast TCNs, one entry per rotation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BroadcastLog {
    records: Vec<BroadcastRecord>,
}

impl BroadcastLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[BroadcastRecord] {
        &self.records
    }

    /// Records `tcn` for `index` unless that rotation is already logged.
    pub fn record(&mut self, index: u64, tcn: Tcn) {
        if self.records.last().is_some_and(|r| r.index >= index) {
            return;
        }
        self.records.push(BroadcastRecord { index, tcn });
    }

    pub fn expire(&mut self, now: u64, retention_days: u32) {
        let cutoff = now.saturating_sub(u64::from(retention_days) * SECONDS_PER_DAY);
        let cutoff_index = rotation_index(cutoff);
        self.records.retain(|r| r.index >= cutoff_index);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;
    use alloc::string::ToString;

    #[test]
    fn rotation_examples() {
        assert_eq!(rotation_index(0), 0);
        assert_eq!(rotation_index(899), 0);
        assert_eq!(rotation_index(900), 1);
        let day_start = 1_587_340_800;
        let first = rotation_index(day_start);
        let last = rotation_index(day_start + SECONDS_PER_DAY - 1);
        assert_eq!(last - first + 1, 96);
        assert_eq!(ROTATIONS_PER_DAY, 96);
    }

    #[test]
    fn zero_seed_vector() {
        // SHA-256(0x01 || 0^32)[..16], computed with an independent tool
        // (python hashlib) before the implementation existed.
        let r = TcnRatchet::new([0u8; 32], 0);
        assert_eq!(r.tcn_at(0).unwrap().to_string(), "1a7dfdeaffeedac489287e85be5e9c04");
        // SHA-256(SHA-256(0^32)) chain step, same tool.
        assert_eq!(r.tcn_at(1).unwrap().to_string(), "ee0d7e9f93660b2b9b399dc296326330");
    }

    #[test]
    fn determinism_and_distinctness() {
        let r = TcnRatchet::new([7u8; 32], 100);
        assert_eq!(r.tcn_at(150).unwrap(), r.tcn_at(150).unwrap());
        let day: BTreeSet<Tcn> = (100..196).map(|i| r.tcn_at(i).unwrap()).collect();
        assert_eq!(day.len(), 96);
        assert_eq!(
            r.tcn_at(99),
            Err(TcnError::BeforeCreation { index: 99, created: 100 })
        );
        let mut c = r.cursor();
        for i in 100..196 {
            assert_eq!(c.tcn_at(i).unwrap(), r.tcn_at(i).unwrap());
        }
        assert!(c.tcn_at(150).is_err());
    }

    #[test]
    fn report_round_trip() {
        let r = TcnRatchet::new([3u8; 32], 0);
        let rep = build_report(&r, 5, 8).unwrap();
        let tcns = expand_report(&rep);
        assert_eq!(tcns.len(), 4);
        let direct: Vec<Tcn> = (5..=8).map(|i| r.tcn_at(i).unwrap()).collect();
        assert_eq!(tcns, direct);
        assert_eq!(
            build_report(&r, 8, 5),
            Err(TcnError::InvertedRange { from: 8, to: 5 })
        );
        // the report carries the key of its first rotation, nothing earlier
        assert_eq!(rep.chain_key_at_start.tcn(), r.tcn_at(5).unwrap());
        assert_ne!(rep.chain_key_at_start.tcn(), r.tcn_at(4).unwrap());
    }

    #[test]
    fn hex_round_trip() {
        let t = TcnRatchet::new([9u8; 32], 0).tcn_at(3).unwrap();
        assert_eq!(t.to_string().parse::<Tcn>().unwrap(), t);
        assert!("abc".parse::<Tcn>().is_err());
        assert!("zz".repeat(16).parse::<Tcn>().is_err());
    }

    #[test]
    fn contact_log_merge_and_expiry() {
        let tcn = TcnRatchet::new([1u8; 32], 0).tcn_at(0).unwrap();
        let t0 = 1_587_340_800;
        let mut log = ContactLog::new();
        log.record_observation(tcn, t0, None);
        assert_eq!(log.records()[0].first_seen, t0);
        assert_eq!(log.records()[0].last_seen, t0);
        log.record_observation(tcn, t0 + 60, Some(-60));
        assert_eq!(log.len(), 1);
        assert_eq!(log.records()[0].last_seen, t0 + 60);
        log.record_observation(tcn, t0 + 60 + ROTATION_PERIOD_S, None);
        assert_eq!(log.len(), 2);

        log.expire(t0 + 31 * SECONDS_PER_DAY, 30);
        assert!(log.is_empty());
        assert!(!log.contains(&tcn));
    }

    #[test]
    fn broadcast_log_one_per_rotation() {
        let r = TcnRatchet::new([2u8; 32], 0);
        let mut log = BroadcastLog::new();
        for i in [0, 0, 1, 1, 2] {
            log.record(i, r.tcn_at(i).unwrap());
        }
        assert_eq!(log.records().len(), 3);
        log.expire(30 * SECONDS_PER_DAY + 2 * ROTATION_PERIOD_S, 30);
        assert_eq!(log.records().len(), 1);
    }
}
