//! The back-end service: CTA publication and feed, anonymous statistics
//! ingestion and the open-data export.
//!
//! [`Backend::handle`] is transport-independent; [`serve`] mounts it on an
//! HTTP listener. Storage is a single SQLite database:
//!
//! ```sql
//! cta(id TEXT PRIMARY KEY, authority_id TEXT, idempotency_key TEXT,
//!     body TEXT, published_at INTEGER, expires_at INTEGER, status TEXT)
//! cta_cell(cta_id TEXT, cell TEXT)
//! daily_stats(installation_id TEXT, day TEXT, minutes_tracked INTEGER,
//!     centroid_lat REAL, centroid_lon REAL, bbox_diag_m REAL,
//!     known_locations INTEGER, notes INTEGER, samples_recorded INTEGER,
//!     samples_discarded INTEGER, minutes_at_home INTEGER)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use diary_core::geo::METERS_PER_DEGREE;
use diary_core::{validate_cta, BoundingBox, CallToAction, CoarseCell};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rusqlite::{params, params_from_iter, Connection, OptionalExtension};
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::transport::{ApiRequest, ApiResponse};
use crate::wire::{self, CtaDoc, CtaList, ErrorDoc, PublishResponse, WireError};

pub const OPEN_DATA_HEADER: [&str; 11] = [
    "day",
    "row_key",
    "minutes_tracked",
    "centroid_lat",
    "centroid_lon",
    "bbox_diag_m",
    "known_locations",
    "notes",
    "samples_recorded",
    "samples_discarded",
    "minutes_at_home",
];

/// Minimum bearer token length accepted in the registry.
pub const MIN_TOKEN_LEN: usize = 32;
/// Upper bound on coverage cells per CTA; larger queries are rejected.
pub const MAX_COVERAGE_CELLS: usize = 400;

pub trait Clock: Send + Sync {
    fn now_s(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_s(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
    }
}

#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(t: u64) -> Self {
        Self(AtomicU64::new(t))
    }

    pub fn set(&self, t: u64) {
        self.0.store(t, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_s(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error(transparent)]
    Db(#[from] rusqlite::Error),
    #[error("authority registry: {0}")]
    Registry(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthorityAccount {
    pub id: String,
    pub display_name: String,
    pub token: String,
    pub competence_cells: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct AuthorityRegistry {
    accounts: Vec<(AuthorityAccount, BTreeSet<CoarseCell>)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    #[serde(default)]
    authority: Vec<AuthorityAccount>,
}

impl AuthorityRegistry {
    pub fn new(accounts: Vec<AuthorityAccount>) -> Result<Self, BackendError> {
        let mut ids = BTreeSet::new();
        let mut tokens = BTreeSet::new();
        let mut out = Vec::new();
        for a in accounts {
            let err = |m: &str| BackendError::Registry(format!("authority {:?}: {m}", a.id));
            if a.token.len() < MIN_TOKEN_LEN {
                return Err(err("token must be at least 32 characters"));
            }
            if a.competence_cells.is_empty() {
                return Err(err("competence_cells must not be empty"));
            }
            if !ids.insert(a.id.clone()) || !tokens.insert(a.token.clone()) {
                return Err(err("duplicate id or token"));
            }
            let cells = a
                .competence_cells
                .iter()
                .map(|c| c.parse::<CoarseCell>().map_err(|e| err(&e.to_string())))
                .collect::<Result<_, _>>()?;
            out.push((a, cells));
        }
        Ok(Self { accounts: out })
    }

    pub fn from_toml(text: &str) -> Result<Self, BackendError> {
        let file: RegistryFile = toml::from_str(text).map_err(|e| BackendError::Registry(e.to_string()))?;
        Self::new(file.authority)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path).map_err(|e| BackendError::Registry(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    fn by_token(&self, token: &str) -> Option<&(AuthorityAccount, BTreeSet<CoarseCell>)> {
        self.accounts
            .iter()
            .find(|(a, _)| constant_time_eq(a.token.as_bytes(), token.as_bytes()))
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

fn error(status: u16, code: &str, message: impl Into<String>) -> ApiResponse {
    let doc = ErrorDoc {
        error: code.into(),
        message: message.into(),
    };
    ApiResponse::json(status, serde_json::to_vec(&doc).expect("serializable"))
}

fn json<T: serde::Serialize>(status: u16, value: &T) -> ApiResponse {
    ApiResponse::json(status, serde_json::to_vec(value).expect("serializable"))
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS cta (
    id TEXT PRIMARY KEY,
    authority_id TEXT NOT NULL,
    idempotency_key TEXT,
    body TEXT NOT NULL,
    published_at INTEGER NOT NULL,
    expires_at INTEGER NOT NULL,
    status TEXT NOT NULL CHECK (status IN ('active', 'expired', 'revoked')),
    UNIQUE (authority_id, idempotency_key)
);
CREATE TABLE IF NOT EXISTS cta_cell (
    cta_id TEXT NOT NULL REFERENCES cta(id),
    cell TEXT NOT NULL,
    PRIMARY KEY (cta_id, cell)
);
CREATE INDEX IF NOT EXISTS cta_cell_by_cell ON cta_cell(cell);
CREATE TABLE IF NOT EXISTS daily_stats (
    installation_id TEXT NOT NULL,
    day TEXT NOT NULL,
    minutes_tracked INTEGER NOT NULL,
    centroid_lat REAL,
    centroid_lon REAL,
    bbox_diag_m REAL NOT NULL,
    known_locations INTEGER NOT NULL,
    notes INTEGER NOT NULL,
    samples_recorded INTEGER NOT NULL,
    samples_discarded INTEGER NOT NULL,
    minutes_at_home INTEGER NOT NULL,
    PRIMARY KEY (installation_id, day)
);
";

pub struct Backend {
    db: Mutex<Connection>,
    registry: AuthorityRegistry,
    clock: Arc<dyn Clock>,
    rng: Mutex<ChaCha20Rng>,
}

impl Backend {
    /// Opens (or creates) the database at `path`. Use `":memory:"` for a
    /// throwaway instance. A `seed` makes ids and export keys reproducible.
    pub fn open(
        path: impl AsRef<Path>,
        registry: AuthorityRegistry,
        clock: Arc<dyn Clock>,
        seed: Option<u64>,
    ) -> Result<Self, BackendError> {
        let conn = Connection::open(path)?;
        conn.execute_batch(SCHEMA)?;
        let rng = match seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        Ok(Self {
            db: Mutex::new(conn),
            registry,
            clock,
            rng: Mutex::new(rng),
        })
    }

    pub fn in_memory(registry: AuthorityRegistry, clock: Arc<dyn Clock>, seed: Option<u64>) -> Self {
        Self::open(":memory:", registry, clock, seed).expect("in-memory database opens")
    }

    pub fn handle(&self, req: &ApiRequest) -> ApiResponse {
        let segments: Vec<&str> = req.path.trim_matches('/').split('/').collect();
        let outcome = match (req.method.as_str(), segments.as_slice()) {
            ("POST", ["v1", "cta"]) => self.publish(req),
            ("GET", ["v1", "cta"]) => self.list(req),
            ("DELETE", ["v1", "cta", id]) => self.revoke(req, id),
            ("POST", ["v1", "stats"]) => self.ingest_stats(req),
            ("GET", ["v1", "opendata", "daily.csv"]) => self.export_csv().map(|csv| ApiResponse {
                status: 200,
                content_type: "text/csv".into(),
                body: csv.into_bytes(),
            }),
            (_, ["v1", "cta"] | ["v1", "cta", _] | ["v1", "stats"] | ["v1", "opendata", "daily.csv"]) => {
                Ok(error(405, "method_not_allowed", "method not allowed"))
            }
            _ => Ok(error(404, "not_found", "no such endpoint")),
        };
        outcome.unwrap_or_else(|e| {
            log::error!("request failed: {e}");
            error(500, "internal", "internal error")
        })
    }

    fn authenticate(&self, req: &ApiRequest) -> Option<&(AuthorityAccount, BTreeSet<CoarseCell>)> {
        let token = req.header_value("authorization")?.strip_prefix("Bearer ")?.trim();
        self.registry.by_token(token)
    }

    fn new_id(&self) -> String {
        let bytes: [u8; 16] = self.rng.lock().expect("rng lock").gen();
        uuid::Builder::from_random_bytes(bytes).into_uuid().to_string()
    }

    fn sweep_expired(conn: &Connection, now: u64) -> rusqlite::Result<()> {
        conn.execute(
            "UPDATE cta SET status = 'expired' WHERE status = 'active' AND expires_at <= ?1",
            params![now as i64],
        )?;
        Ok(())
    }

    fn publish(&self, req: &ApiRequest) -> Result<ApiResponse, BackendError> {
        let Some((account, competence)) = self.authenticate(req) else {
            return Ok(error(401, "unauthorized", "missing or invalid bearer token"));
        };
        let doc = match CtaDoc::parse(&req.body) {
            Ok(d) => d,
            Err(e) => return Ok(error(400, "bad_request", e.to_string())),
        };
        if !doc.authority_id.is_empty() && doc.authority_id != account.id {
            return Ok(error(403, "wrong_authority", "authority_id does not match the token"));
        }
        let mut raw = match doc.into_raw() {
            Ok(r) => r,
            Err(e) => return Ok(error(422, "invalid_cta", e.to_string())),
        };
        raw.authority_id = account.id.clone();
        raw.id = String::new();
        raw.coverage_cells.clear();
        let now = self.clock.now_s();
        let mut cta = match validate_cta(raw) {
            Ok(c) => c,
            Err(e) => return Ok(error(422, "invalid_cta", e.to_string())),
        };
        if cta.expires_at <= now {
            return Ok(error(422, "invalid_cta", "call to action is already expired"));
        }
        for (i, region) in cta.regions.iter().enumerate() {
            if !competence.contains(&CoarseCell::containing(region.polygon.centroid())) {
                return Ok(error(403, "outside_competence", format!("region {i} lies outside the authority's competence")));
            }
        }
        let coverage = coverage_cells(&cta, competence);
        if coverage.len() > MAX_COVERAGE_CELLS {
            return Ok(error(422, "invalid_cta", "call to action covers too large an area"));
        }

        let idem = req.header_value("idempotency-key").map(str::to_owned);
        let mut conn = self.db.lock().expect("db lock");
        if let Some(key) = &idem {
            let existing: Option<String> = conn
                .query_row(
                    "SELECT id FROM cta WHERE authority_id = ?1 AND idempotency_key = ?2",
                    params![account.id, key],
                    |r| r.get(0),
                )
                .optional()?;
            if let Some(id) = existing {
                let cells = Self::cells_of(&conn, &id)?;
                return Ok(json(200, &PublishResponse { id, coverage_cells: cells }));
            }
        }
        cta.id = self.new_id();
        cta.coverage_cells = coverage.into_iter().collect();
        let body = serde_json::to_string(&CtaDoc::from(&cta.to_raw())).expect("serializable");
        let tx = conn.transaction()?;
        tx.execute(
            "INSERT INTO cta (id, authority_id, idempotency_key, body, published_at, expires_at, status)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, 'active')",
            params![cta.id, account.id, idem, body, now as i64, cta.expires_at as i64],
        )?;
        for c in &cta.coverage_cells {
            tx.execute("INSERT INTO cta_cell (cta_id, cell) VALUES (?1, ?2)", params![cta.id, c.to_string()])?;
        }
        tx.commit()?;
        log::info!("published cta {} ({} cells)", cta.id, cta.coverage_cells.len());
        Ok(json(
            201,
            &PublishResponse {
                id: cta.id,
                coverage_cells: cta.coverage_cells.iter().map(ToString::to_string).collect(),
            },
        ))
    }

    fn cells_of(conn: &Connection, id: &str) -> rusqlite::Result<Vec<String>> {
        let mut stmt = conn.prepare("SELECT cell FROM cta_cell WHERE cta_id = ?1 ORDER BY rowid")?;
        let rows = stmt.query_map(params![id], |r| r.get(0))?;
        rows.collect()
    }

    fn list(&self, req: &ApiRequest) -> Result<ApiResponse, BackendError> {
        let mut cells: Option<Vec<String>> = None;
        let mut since = 0u64;
        for (k, v) in form_urlencoded::parse(req.query.as_bytes()) {
            match k.as_ref() {
                "cells" if v == "*" => cells = Some(Vec::new()),
                "cells" => {
                    let mut parsed = Vec::new();
                    for part in v.split(',') {
                        match part.parse::<CoarseCell>() {
                            Ok(c) => parsed.push(c.to_string()),
                            Err(e) => return Ok(error(400, "bad_request", format!("cell {part:?}: {e}"))),
                        }
                    }
                    cells = Some(parsed);
                }
                "since" => match v.parse() {
                    Ok(s) => since = s,
                    Err(_) => return Ok(error(400, "bad_request", "since must be Unix seconds")),
                },
                _ => return Ok(error(400, "bad_request", format!("unknown parameter {k:?}"))),
            }
        }
        let Some(cells) = cells else {
            return Ok(error(400, "bad_request", "cells is required (use * for all)"));
        };
        let now = self.clock.now_s();
        let conn = self.db.lock().expect("db lock");
        Self::sweep_expired(&conn, now)?;
        let base = "SELECT DISTINCT c.body, c.published_at, c.id FROM cta c";
        let filter = "c.status = 'active' AND c.expires_at > ? AND c.published_at > ?";
        let sql = if cells.is_empty() {
            format!("{base} WHERE {filter} ORDER BY c.published_at, c.id")
        } else {
            let marks = vec!["?"; cells.len()].join(",");
            format!("{base} JOIN cta_cell k ON k.cta_id = c.id WHERE {filter} AND k.cell IN ({marks}) ORDER BY c.published_at, c.id")
        };
        let mut values: Vec<rusqlite::types::Value> = vec![(now as i64).into(), (since as i64).into()];
        values.extend(cells.into_iter().map(Into::into));
        let mut stmt = conn.prepare(&sql)?;
        let bodies = stmt
            .query_map(params_from_iter(values), |r| r.get::<_, String>(0))?
            .collect::<Result<Vec<_>, _>>()?;
        let ctas = bodies
            .iter()
            .map(|b| serde_json::from_str(b).expect("stored documents are valid"))
            .collect();
        Ok(json(200, &CtaList { server_time: now, ctas }))
    }

    fn revoke(&self, req: &ApiRequest, id: &str) -> Result<ApiResponse, BackendError> {
        let Some((account, _)) = self.authenticate(req) else {
            return Ok(error(401, "unauthorized", "missing or invalid bearer token"));
        };
        let now = self.clock.now_s();
        let conn = self.db.lock().expect("db lock");
        Self::sweep_expired(&conn, now)?;
        let row: Option<(String, String)> = conn
            .query_row("SELECT authority_id, status FROM cta WHERE id = ?1", params![id], |r| {
                Ok((r.get(0)?, r.get(1)?))
            })
            .optional()?;
        match row {
            None => Ok(error(404, "not_found", "no such call to action")),
            Some((owner, _)) if owner != account.id => Ok(error(403, "wrong_authority", "not published by this authority")),
            Some((_, status)) if status != "active" => Ok(error(409, "conflict", format!("call to action is {status}"))),
            Some(_) => {
                conn.execute("UPDATE cta SET status = 'revoked' WHERE id = ?1", params![id])?;
                Ok(json(200, &serde_json::json!({ "id": id, "status": "revoked" })))
            }
        }
    }

    fn ingest_stats(&self, req: &ApiRequest) -> Result<ApiResponse, BackendError> {
        let s = match wire::parse_stats(&req.body) {
            Ok(s) => s,
            Err(WireError::Malformed(m)) => return Ok(error(400, "bad_request", m)),
            Err(WireError::Invalid(m)) => return Ok(error(422, "invalid_stats", m)),
        };
        let conn = self.db.lock().expect("db lock");
        conn.execute(
            "INSERT INTO daily_stats VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11)
             ON CONFLICT (installation_id, day) DO UPDATE SET
                minutes_tracked = excluded.minutes_tracked, centroid_lat = excluded.centroid_lat,
                centroid_lon = excluded.centroid_lon, bbox_diag_m = excluded.bbox_diag_m,
                known_locations = excluded.known_locations, notes = excluded.notes,
                samples_recorded = excluded.samples_recorded, samples_discarded = excluded.samples_discarded,
                minutes_at_home = excluded.minutes_at_home",
            params![
                wire::installation_id_to_string(s.installation_id),
                crate::calendar::format_day(s.day),
                s.minutes_tracked as i64,
                s.centroid.map(|c| c.lat()),
                s.centroid.map(|c| c.lon()),
                s.bbox_diagonal_m,
                s.known_locations_visited as i64,
                s.notes_count as i64,
                s.samples_recorded as i64,
                s.samples_discarded as i64,
                s.minutes_at_home as i64,
            ],
        )?;
        Ok(json(202, &serde_json::json!({ "status": "accepted" })))
    }

    /// Renders the open-data CSV. Installation ids are replaced by keys
    /// salted afresh for every export, so rows cannot be joined across
    /// exports.
    pub fn export_csv(&self) -> Result<String, BackendError> {
        let salt: [u8; 16] = self.rng.lock().expect("rng lock").gen();
        let conn = self.db.lock().expect("db lock");
        let mut stmt = conn.prepare(
            "SELECT day, installation_id, minutes_tracked, centroid_lat, centroid_lon, bbox_diag_m,
                    known_locations, notes, samples_recorded, samples_discarded, minutes_at_home
             FROM daily_stats",
        )?;
        let mut rows: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
        let fmt_coord = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
        let mut q = stmt.query([])?;
        while let Some(r) = q.next()? {
            let day: String = r.get(0)?;
            let inst: String = r.get(1)?;
            let mut h = Sha256::new();
            h.update(salt);
            h.update(inst.as_bytes());
            let key = hex::encode(&h.finalize()[..8]);
            let fields = vec![
                day.clone(),
                key.clone(),
                r.get::<_, i64>(2)?.to_string(),
                fmt_coord(r.get(3)?),
                fmt_coord(r.get(4)?),
                format!("{:.1}", r.get::<_, f64>(5)?),
                r.get::<_, i64>(6)?.to_string(),
                r.get::<_, i64>(7)?.to_string(),
                r.get::<_, i64>(8)?.to_string(),
                r.get::<_, i64>(9)?.to_string(),
                r.get::<_, i64>(10)?.to_string(),
            ];
            rows.insert((day, key), fields);
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(OPEN_DATA_HEADER).expect("in-memory write");
        for fields in rows.values() {
            w.write_record(fields).expect("in-memory write");
        }
        Ok(String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii csv"))
    }

    pub fn stats_row_count(&self) -> Result<usize, BackendError> {
        let conn = self.db.lock().expect("db lock");
        let n: i64 = conn.query_row("SELECT COUNT(*) FROM daily_stats", [], |r| r.get(0))?;
        Ok(n as usize)
    }
}

/// Coarse cells a device must request to receive `cta`: those meeting any
/// region's bounding box grown by the CTA's max distance, plus the
/// authority's whole competence area when the CTA carries TCNs.
pub fn coverage_cells(cta: &CallToAction, competence: &BTreeSet<CoarseCell>) -> BTreeSet<CoarseCell> {
    let mut out = BTreeSet::new();
    let grow = cta.params.max_distance;
    for region in &cta.regions {
        let b = region.polygon.bounding_box();
        let dlat = grow / METERS_PER_DEGREE;
        let widest = b.min_lat.abs().max(b.max_lat.abs()) + dlat;
        let dlon = grow / (METERS_PER_DEGREE * widest.min(89.0).to_radians().cos());
        let grown = BoundingBox {
            min_lat: (b.min_lat - dlat).max(-90.0),
            min_lon: (b.min_lon - dlon).max(-180.0),
            max_lat: (b.max_lat + dlat).min(90.0),
            max_lon: (b.max_lon + dlon).min(180.0),
        };
        out.extend(CoarseCell::covering(&grown));
    }
    if !cta.tcns.is_empty() {
        out.extend(competence.iter().copied());
    }
    out
}

/// Runs the HTTP front end until interrupted.
pub async fn serve(backend: Arc<Backend>, addr: SocketAddr) -> std::io::Result<()> {
    use axum::body::Bytes;
    use axum::extract::State;
    use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
    use axum::response::{IntoResponse, Response};

    async fn handler(
        State(backend): State<Arc<Backend>>,
        method: Method,
        uri: Uri,
        headers: HeaderMap,
        body: Bytes,
    ) -> Response {
        let req = ApiRequest {
            method: method.as_str().to_string(),
            path: uri.path().to_string(),
            query: uri.query().unwrap_or("").to_string(),
            headers: headers
                .iter()
                .filter_map(|(k, v)| Some((k.as_str().to_string(), v.to_str().ok()?.to_string())))
                .collect(),
            body: body.to_vec(),
        };
        let path = req.path.clone();
        let resp = match tokio::task::spawn_blocking(move || backend.handle(&req)).await {
            Ok(r) => r,
            Err(_) => error(500, "internal", "handler panicked"),
        };
        log::info!("{method} {path} -> {}", resp.status);
        let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, [(header::CONTENT_TYPE, resp.content_type)], resp.body).into_response()
    }

    let app = axum::Router::new().fallback(handler).with_state(backend);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
