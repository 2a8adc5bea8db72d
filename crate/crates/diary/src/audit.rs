//! Byte-level privacy audit over every message of a simulated run.
//!
//! Checks, per message:
//! - no raw sample coordinate of any device appears, except inside a
//!   diagnosis upload sent with consent;
//! - no TCN a device heard (contact log) appears in anything a device
//!   sends, except inside a consented diagnosis upload;
//! - no TCN a device broadcast appears anywhere unless that device shared
//!   a consented report;
//! - installation ids appear only in statistics uploads;
//! - statistics uploads carry exactly the published field set with an
//!   on-grid centroid;
//! - every diagnosis upload says `consent: true`, and refused attempts sent
//!   nothing.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead};
use std::path::Path;

use regex::Regex;

use crate::dayfile;
use crate::sim::{DiagnosisLogEntry, World, AUTHORITY_ORIGIN};
use crate::transport::{WireRecord, INTAKE_PATH};
use crate::wire::{self, installation_id_to_string, DiagnosisDoc};

/// What one device holds, used as the reference for the scan.
#[derive(Debug, Clone, Default)]
pub struct AgentEvidence {
    pub label: String,
    pub installation_id: String,
    pub samples: Vec<(f64, f64)>,
    pub contact_tcns: BTreeSet<String>,
    pub broadcast_tcns: BTreeSet<String>,
}

#[derive(Debug, Clone, Default)]
pub struct AuditInput {
    pub records: Vec<WireRecord>,
    pub agents: Vec<AgentEvidence>,
    pub diagnosis_log: Vec<DiagnosisLogEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub check: &'static str,
    pub message_index: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.message_index {
            Some(i) => write!(f, "[{}] message {i}: {}", self.check, self.detail),
            None => write!(f, "[{}] {}", self.check, self.detail),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AuditReport {
    pub messages: usize,
    pub coordinates_scanned: usize,
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

pub const CHECKS: [&str; 6] = ["coordinates", "contact-log", "broadcast-tcn", "installation-id", "stats-payload", "consent"];

/// Quantization used to look up coordinates: 1e-6 degrees (about 0.1 m).
const QUANTUM: f64 = 1e6;

struct CoordIndex(HashSet<(i64, i64)>);

impl CoordIndex {
    fn new(points: impl IntoIterator<Item = (f64, f64)>) -> Self {
        Self(
            points
                .into_iter()
                .map(|(a, b)| ((a * QUANTUM).round() as i64, (b * QUANTUM).round() as i64))
                .collect(),
        )
    }

    fn hit(&self, a: f64, b: f64) -> bool {
        let (qa, qb) = ((a * QUANTUM).round() as i64, (b * QUANTUM).round() as i64);
        (-1..=1).any(|da| (-1..=1).any(|db| self.0.contains(&(qa + da, qb + db))))
    }
}

impl AuditInput {
    pub fn from_world(w: &World) -> Self {
        let agents = w
            .agents
            .iter()
            .filter_map(|a| {
                let d = a.device.as_ref()?;
                Some(AgentEvidence {
                    label: a.label.clone(),
                    installation_id: installation_id_to_string(d.installation_id()),
                    samples: d
                        .data
                        .store
                        .samples()
                        .iter()
                        .map(|s| (s.sample.position.lat(), s.sample.position.lon()))
                        .collect(),
                    contact_tcns: d.data.contacts.records().iter().map(|c| c.tcn.to_string()).collect(),
                    broadcast_tcns: d.data.broadcasts.records().iter().map(|b| b.tcn.to_string()).collect(),
                })
            })
            .collect();
        Self {
            records: w.network.log().to_vec(),
            agents,
            diagnosis_log: w.diagnosis_log.clone(),
        }
    }

    /// Loads a run directory written by the simulator.
    pub fn load(dir: &Path) -> io::Result<Self> {
        fn jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> io::Result<Vec<T>> {
            let f = io::BufReader::new(fs::File::open(path)?);
            f.lines()
                .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
                .map(|l| serde_json::from_str(&l?).map_err(io::Error::other))
                .collect()
        }
        let records = jsonl(&dir.join("network.jsonl"))?;
        let diagnosis_log = jsonl(&dir.join("diagnosis_log.jsonl"))?;
        let mut agents = Vec::new();
        let agents_dir = dir.join("agents");
        if agents_dir.exists() {
            let mut entries: Vec<_> = fs::read_dir(&agents_dir)?.collect::<Result<_, _>>()?;
            entries.sort_by_key(|e| e.file_name());
            for e in entries {
                let path = e.path();
                let days = dayfile::read_day_files(&path).map_err(io::Error::other)?;
                let mut ev = AgentEvidence {
                    label: e.file_name().to_string_lossy().into_owned(),
                    installation_id: fs::read_to_string(path.join("installation_id"))?.trim().to_string(),
                    ..Default::default()
                };
                for d in days {
                    ev.samples
                        .extend(d.samples.iter().map(|s| (s.sample.position.lat(), s.sample.position.lon())));
                    ev.contact_tcns.extend(d.contacts.iter().map(|c| c.tcn.to_string()));
                    ev.broadcast_tcns.extend(d.broadcasts.iter().map(|b| b.tcn.to_string()));
                }
                agents.push(ev);
            }
        }
        Ok(Self {
            records,
            agents,
            diagnosis_log,
        })
    }
}

fn is_consented_upload(r: &WireRecord) -> bool {
    r.path.starts_with(INTAKE_PATH)
        && serde_json::from_str::<DiagnosisDoc>(&r.request_body).is_ok_and(|d| d.consent)
}

pub fn audit(input: &AuditInput) -> AuditReport {
    let number = Regex::new(r"-?\d+\.\d+").expect("static regex");
    let hex32 = Regex::new(r"[0-9a-fA-F]{32}").expect("static regex");
    let mut report = AuditReport {
        messages: input.records.len(),
        ..Default::default()
    };
    let mut violate = |check: &'static str, idx: Option<usize>, detail: String| {
        report.violations.push(Violation {
            check,
            message_index: idx,
            detail,
        });
    };

    let coords = CoordIndex::new(input.agents.iter().flat_map(|a| a.samples.iter().copied()));
    let contact: BTreeSet<&str> = input
        .agents
        .iter()
        .flat_map(|a| a.contact_tcns.iter().map(String::as_str))
        .collect();
    let consenting: BTreeSet<&str> = input
        .records
        .iter()
        .filter(|r| is_consented_upload(r) && (200..300).contains(&r.status))
        .map(|r| r.origin.as_str())
        .collect();
    let protected_broadcasts: BTreeMap<&str, &str> = input
        .agents
        .iter()
        .filter(|a| !consenting.contains(a.label.as_str()))
        .flat_map(|a| a.broadcast_tcns.iter().map(move |t| (t.as_str(), a.label.as_str())))
        .collect();
    let ids: Vec<String> = input
        .agents
        .iter()
        .flat_map(|a| [a.installation_id.to_ascii_lowercase(), a.installation_id.replace('-', "").to_ascii_lowercase()])
        .filter(|s| !s.is_empty())
        .collect();

    let mut scanned = 0usize;
    for (i, r) in input.records.iter().enumerate() {
        let from_device = r.origin != AUTHORITY_ORIGIN;
        let consented = is_consented_upload(r);
        let headers: String = r.headers.iter().map(|(k, v)| format!("{k}: {v}\n")).collect();
        let request = format!("{} {}?{}\n{headers}{}", r.method, r.path, r.query, r.request_body);
        let texts = [("request", request.as_str()), ("response", r.response_body.as_str())];

        for (which, text) in texts {
            // coordinates: every adjacent pair of decimal numbers
            if !(consented && which == "request") {
                let nums: Vec<f64> = number.find_iter(text).filter_map(|m| m.as_str().parse().ok()).collect();
                scanned += nums.len();
                for w in nums.windows(2) {
                    if coords.hit(w[0], w[1]) {
                        violate("coordinates", Some(i), format!("{which} carries raw sample ({}, {})", w[0], w[1]));
                    }
                }
            }
            let lower = text.to_ascii_lowercase();
            for m in hex32.find_iter(&lower) {
                let tcn = m.as_str();
                if from_device && which == "request" && !consented && contact.contains(tcn) {
                    violate("contact-log", Some(i), format!("device request carries observed TCN {tcn}"));
                }
                if let Some(owner) = protected_broadcasts.get(tcn) {
                    violate("broadcast-tcn", Some(i), format!("{which} carries a TCN broadcast by {owner}"));
                }
            }
            let stats_body = which == "request" && r.path == "/v1/stats";
            if !stats_body {
                for id in &ids {
                    if lower.contains(id.as_str()) {
                        violate("installation-id", Some(i), format!("{which} outside a stats upload carries an installation id"));
                    }
                }
            }
        }

        if r.path == "/v1/stats" && r.method == "POST" {
            if let Err(e) = wire::parse_stats(r.request_body.as_bytes()) {
                violate("stats-payload", Some(i), e.to_string());
            }
        }
        if r.path.starts_with(INTAKE_PATH) && !consented {
            violate("consent", Some(i), "diagnosis upload without consent".into());
        }
    }
    report.coordinates_scanned = scanned;

    for e in &input.diagnosis_log {
        if e.consent {
            continue;
        }
        let sent = input
            .records
            .iter()
            .any(|r| r.origin == e.agent && r.t == e.t && r.path.starts_with(INTAKE_PATH));
        if e.bytes_sent != 0 || sent {
            violate("consent", None, format!("{} sent data at {} without consent", e.agent, e.t));
        }
    }
    report
}
