//! The loop a device runs: adaptive sampling, TCN rotation, CTA sync with
//! local matching, daily statistics and the consented diagnosis upload.

use std::collections::BTreeSet;

use diary_core::trace::DISCARD_ACCURACY_M;
use diary_core::{
    build_report, compute_daily_stats, day_of, match_cta, rotation_index, validate_cta, CallToAction, CoarseCell,
    ExposureMatch, GeoPoint, InstallationId, Interval, LocationSample, Note, RatchetCursor, SampleSource, Tcn,
    TcnRatchet, TraceError,
};
use rand::RngCore;

use crate::dayfile::DeviceData;
use crate::transport::{ApiRequest, Transport, INTAKE_PATH};
use crate::wire::{self, CtaList, DiagnosisDoc, ReportDoc, SampleDoc};

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub fast_interval_s: u64,
    pub slow_interval_s: u64,
    /// Speeds above this (m/s) use the fast interval.
    pub speed_threshold: f64,
    pub sync_interval_s: u64,
    pub backoff_initial_s: u64,
    pub backoff_max_s: u64,
    /// Fetch every active CTA instead of only those covering our cells.
    pub download_all: bool,
    pub upload_stats: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            fast_interval_s: 30,
            slow_interval_s: 300,
            speed_threshold: 1.0,
            sync_interval_s: 3600,
            backoff_initial_s: 60,
            backoff_max_s: 3600,
            download_all: false,
            upload_stats: true,
        }
    }
}

pub fn sampling_interval(speed: f64, cfg: &AgentConfig) -> u64 {
    if speed > cfg.speed_threshold {
        cfg.fast_interval_s
    } else {
        cfg.slow_interval_s
    }
}

/// Generates a fresh installation id (random UUID v4) and ratchet seed.
pub fn random_identity(rng: &mut impl RngCore) -> (InstallationId, [u8; 32]) {
    let mut id = [0u8; 16];
    rng.fill_bytes(&mut id);
    let uuid = uuid::Builder::from_random_bytes(id).into_uuid();
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    (InstallationId(uuid.into_bytes()), seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncOutcome {
    NotDue,
    Synced { fetched: usize, new_alerts: usize },
    Failed { retry_at: u64 },
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DiagnosisError {
    #[error("diagnosis uploads require explicit consent")]
    ConsentRequired,
    #[error("nothing to upload in the selected range")]
    Empty,
    #[error("upload failed: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiagnosisReceipt {
    pub bytes_sent: usize,
    pub tcns_reported: usize,
}

#[derive(Debug, Clone)]
struct SyncState {
    next_attempt: u64,
    backoff: u64,
}

#[derive(Debug, Clone)]
pub struct DeviceAgent {
    installation_id: InstallationId,
    pub data: DeviceData,
    ratchet: TcnRatchet,
    cursor: RatchetCursor,
    current: Option<(u64, Tcn)>,
    pending_alerts: Vec<ExposureMatch>,
    alerted: BTreeSet<String>,
    ctas: Vec<CallToAction>,
    config: AgentConfig,
    last_sample_t: Option<u64>,
    last_zone: Option<String>,
    sync: SyncState,
    stats_uploaded: BTreeSet<u64>,
}

impl DeviceAgent {
    pub fn new(installation_id: InstallationId, seed: [u8; 32], installed_at: u64, config: AgentConfig) -> Self {
        let ratchet = TcnRatchet::new(seed, rotation_index(installed_at));
        Self {
            installation_id,
            data: DeviceData::default(),
            cursor: ratchet.cursor(),
            ratchet,
            current: None,
            pending_alerts: Vec::new(),
            alerted: BTreeSet::new(),
            ctas: Vec::new(),
            sync: SyncState {
                next_attempt: 0,
                backoff: config.backoff_initial_s,
            },
            config,
            last_sample_t: None,
            last_zone: None,
            stats_uploaded: BTreeSet::new(),
        }
    }

    pub fn installation_id(&self) -> InstallationId {
        self.installation_id
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn pending_alerts(&self) -> &[ExposureMatch] {
        &self.pending_alerts
    }

    pub fn cached_ctas(&self) -> &[CallToAction] {
        &self.ctas
    }

    pub fn next_sync_attempt(&self) -> u64 {
        self.sync.next_attempt
    }

    pub fn current_backoff(&self) -> u64 {
        self.sync.backoff
    }

    /// Offers a location fix. It is recorded when the sampling interval for
    /// `speed` has elapsed or when it crosses a known-location boundary.
    /// Returns whether the fix was stored.
    pub fn observe_fix(&mut self, mut fix: LocationSample, speed: f64) -> Result<bool, TraceError> {
        let accurate = fix.accuracy <= DISCARD_ACCURACY_M;
        let zone = if accurate {
            self.data.store.known_location_at(fix.position).map(|k| k.id.clone())
        } else {
            self.last_zone.clone()
        };
        let crossing = self.last_sample_t.is_some() && zone != self.last_zone;
        let due = self
            .last_sample_t
            .is_none_or(|t| fix.timestamp >= t + sampling_interval(speed, &self.config));
        if !(due || crossing) || self.last_sample_t.is_some_and(|t| fix.timestamp <= t) {
            return Ok(false);
        }
        if crossing && !due {
            fix.source = SampleSource::GeofenceEvent;
        }
        self.data.store.append_sample(fix)?;
        self.last_sample_t = Some(fix.timestamp);
        self.last_zone = zone;
        Ok(true)
    }

    pub fn add_note(&mut self, t: u64, position: Option<GeoPoint>, text: &str) -> Result<(), TraceError> {
        self.data.store.add_note(Note {
            timestamp: t,
            position,
            text: text.into(),
        })
    }

    /// The TCN to broadcast at `t`; each rotation is logged once.
    pub fn current_tcn(&mut self, t: u64) -> Tcn {
        let idx = rotation_index(t).max(self.ratchet.created_at_index());
        if let Some((i, tcn)) = self.current {
            if i == idx {
                return tcn;
            }
        }
        let tcn = if idx >= self.cursor.index() {
            self.cursor.tcn_at(idx).expect("cursor moves forward")
        } else {
            self.ratchet.tcn_at(idx).expect("index after creation")
        };
        self.current = Some((idx, tcn));
        self.data.broadcasts.record(idx, tcn);
        tcn
    }

    pub fn observe_tcn(&mut self, tcn: Tcn, t: u64, rssi_hint: Option<i16>) {
        self.data.contacts.record_observation(tcn, t, rssi_hint);
    }

    /// Coarse cells of every accepted sample and of the home location.
    pub fn home_cells(&self) -> Vec<CoarseCell> {
        let mut cells: BTreeSet<CoarseCell> = self.data.store.accepted().map(|s| CoarseCell::containing(s.position)).collect();
        if let Some(h) = self.data.store.home() {
            cells.insert(CoarseCell::containing(h.center));
        }
        cells.into_iter().collect()
    }

    /// Fetches the CTA feed and matches it locally. Match results are never
    /// sent anywhere. Failures back off exponentially.
    pub fn sync_and_match(&mut self, now: u64, transport: &mut dyn Transport) -> SyncOutcome {
        if now < self.sync.next_attempt {
            return SyncOutcome::NotDue;
        }
        let cells = self.home_cells();
        let cells = if self.config.download_all || cells.is_empty() {
            "*".to_string()
        } else {
            cells.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
        };
        let req = ApiRequest::get(&format!("/v1/cta?cells={cells}"));
        let list = transport
            .send(req)
            .ok()
            .filter(|r| r.status == 200)
            .and_then(|r| serde_json::from_slice::<CtaList>(&r.body).ok());
        let Some(list) = list else {
            let retry_at = now + self.sync.backoff;
            self.sync.next_attempt = retry_at;
            self.sync.backoff = (self.sync.backoff * 2).min(self.config.backoff_max_s);
            return SyncOutcome::Failed { retry_at };
        };
        self.sync.backoff = self.config.backoff_initial_s;
        self.sync.next_attempt = now + self.config.sync_interval_s;
        self.ctas = list
            .ctas
            .into_iter()
            .filter_map(|d| validate_cta(d.into_raw().ok()?).ok())
            .collect();
        let fetched = self.ctas.len();
        let new_alerts = self.rematch(now);
        SyncOutcome::Synced { fetched, new_alerts }
    }

    /// Syncs immediately, ignoring the schedule and any pending backoff.
    pub fn sync_now(&mut self, now: u64, transport: &mut dyn Transport) -> SyncOutcome {
        self.sync.next_attempt = now;
        self.sync_and_match(now, transport)
    }

    /// Matches cached CTAs against current local data; works offline.
    pub fn rematch(&mut self, now: u64) -> usize {
        let mut new = 0;
        for cta in &self.ctas {
            if self.alerted.contains(&cta.id) {
                continue;
            }
            if let Ok(Some(m)) = match_cta(&self.data.store, &self.data.contacts, cta, now) {
                self.alerted.insert(cta.id.clone());
                self.pending_alerts.push(m);
                new += 1;
            }
        }
        new
    }

    /// Uploads statistics for each finished day not yet uploaded. Returns
    /// the number of accepted uploads.
    pub fn upload_daily_stats(&mut self, now: u64, transport: &mut dyn Transport) -> usize {
        if !self.config.upload_stats {
            return 0;
        }
        let today = day_of(now);
        let days: BTreeSet<u64> = self
            .data
            .store
            .samples()
            .iter()
            .map(|s| day_of(s.sample.timestamp))
            .filter(|d| *d < today && !self.stats_uploaded.contains(d))
            .collect();
        let mut sent = 0;
        for day in days {
            let stats = compute_daily_stats(&self.data.store, day, self.installation_id);
            let Ok(body) = wire::serialize_stats(&stats) else { continue };
            match transport.send(ApiRequest::post("/v1/stats", body)) {
                Ok(r) if r.status == 202 => {
                    self.stats_uploaded.insert(day);
                    sent += 1;
                }
                Ok(_) => {}
                Err(_) => break,
            }
        }
        sent
    }

    /// Shares the trace and a TCN report for `range` with the authority.
    /// Without consent nothing is sent.
    pub fn submit_diagnosis_report(
        &self,
        consent: bool,
        range: Interval,
        now: u64,
        transport: &mut dyn Transport,
    ) -> Result<DiagnosisReceipt, DiagnosisError> {
        if !consent {
            return Err(DiagnosisError::ConsentRequired);
        }
        let samples: Vec<SampleDoc> = self
            .data
            .store
            .accepted()
            .filter(|s| range.contains(s.timestamp))
            .map(|s| SampleDoc {
                t: s.timestamp,
                lat: s.position.lat(),
                lon: s.position.lon(),
                accuracy_m: s.accuracy,
            })
            .collect();
        let from = rotation_index(range.start).max(self.ratchet.created_at_index());
        let to = rotation_index(range.end.min(now));
        let report = (from <= to).then(|| build_report(&self.ratchet, from, to).expect("range checked"));
        if samples.is_empty() && report.is_none() {
            return Err(DiagnosisError::Empty);
        }
        let doc = DiagnosisDoc {
            consent: true,
            samples,
            report: report.as_ref().map(ReportDoc::from),
        };
        let body = serde_json::to_vec(&doc).expect("serializable");
        let bytes_sent = body.len();
        match transport.send(ApiRequest::post(INTAKE_PATH, body)) {
            Ok(r) if r.is_success() => Ok(DiagnosisReceipt {
                bytes_sent,
                tcns_reported: report.map_or(0, |r| r.len()),
            }),
            Ok(r) => Err(DiagnosisError::Failed(format!("status {}", r.status))),
            Err(e) => Err(DiagnosisError::Failed(e.to_string())),
        }
    }

    /// Daily sweep: drops samples, notes, contacts and broadcasts older than
    /// the retention window.
    pub fn expire(&mut self, now: u64) {
        let days = self.data.store.retention_days();
        self.data.store.expire(now);
        self.data.contacts.expire(now, days);
        self.data.broadcasts.expire(now, days);
        let horizon = day_of(now).saturating_sub(u64::from(days));
        self.stats_uploaded.retain(|d| *d >= horizon);
    }
}
