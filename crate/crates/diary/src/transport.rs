//! Request/response values shared by the back end, the device agent and the
//! simulated network, plus the transports that carry them.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, Clock, ManualClock};
use crate::intake::AuthorityIntake;

pub const INTAKE_PATH: &str = "/v1/intake";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiRequest {
    pub method: String,
    pub path: String,
    /// Raw query string without the leading `?`.
    pub query: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl ApiRequest {
    pub fn new(method: &str, path_and_query: &str) -> Self {
        let (path, query) = path_and_query.split_once('?').unwrap_or((path_and_query, ""));
        Self {
            method: method.to_ascii_uppercase(),
            path: path.into(),
            query: query.into(),
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn get(path_and_query: &str) -> Self {
        Self::new("GET", path_and_query)
    }

    pub fn post(path: &str, body: Vec<u8>) -> Self {
        Self::new("POST", path).header("content-type", "application/json").body(body)
    }

    pub fn header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.to_ascii_lowercase(), value.into()));
        self
    }

    pub fn body(mut self, body: Vec<u8>) -> Self {
        self.body = body;
        self
    }

    pub fn bearer(self, token: &str) -> Self {
        self.header("authorization", &format!("Bearer {token}"))
    }

    /// Case-insensitive header lookup.
    pub fn header_value(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn path_and_query(&self) -> String {
        if self.query.is_empty() {
            self.path.clone()
        } else {
            format!("{}?{}", self.path, self.query)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiResponse {
    pub status: u16,
    pub content_type: String,
    pub body: Vec<u8>,
}

impl ApiResponse {
    pub fn json(status: u16, body: Vec<u8>) -> Self {
        Self {
            status,
            content_type: "application/json".into(),
            body,
        }
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("network unreachable: {0}")]
    Unreachable(String),
}

pub trait Transport {
    fn send(&mut self, req: ApiRequest) -> Result<ApiResponse, TransportError>;
}

/// Blocking HTTP client. Intake uploads go to `intake_url`, everything else
/// to `base_url`.
pub struct HttpTransport {
    base_url: String,
    intake_url: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(base_url: &str) -> Self {
        Self {
            base_url: base_url.trim_end_matches('/').into(),
            intake_url: None,
            client: reqwest::blocking::Client::new(),
        }
    }

    pub fn with_intake(mut self, url: &str) -> Self {
        self.intake_url = Some(url.trim_end_matches('/').into());
        self
    }
}

impl Transport for HttpTransport {
    fn send(&mut self, req: ApiRequest) -> Result<ApiResponse, TransportError> {
        let base = match (&self.intake_url, req.path.starts_with(INTAKE_PATH)) {
            (Some(u), true) => u,
            _ => &self.base_url,
        };
        let url = format!("{base}{}", req.path_and_query());
        let method = reqwest::Method::from_bytes(req.method.as_bytes())
            .map_err(|e| TransportError::Unreachable(e.to_string()))?;
        let mut builder = self.client.request(method, url);
        for (k, v) in &req.headers {
            builder = builder.header(k, v);
        }
        let resp = builder
            .body(req.body)
            .send()
            .map_err(|e| TransportError::Unreachable(e.to_string()))?;
        let status = resp.status().as_u16();
        let content_type = resp
            .headers()
            .get(reqwest::header::CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .unwrap_or("")
            .to_string();
        let body = resp
            .bytes()
            .map_err(|e| TransportError::Unreachable(e.to_string()))?
            .to_vec();
        Ok(ApiResponse {
            status,
            content_type,
            body,
        })
    }
}

/// One message that crossed the simulated network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRecord {
    pub t: u64,
    pub origin: String,
    pub method: String,
    pub path: String,
    pub query: String,
    /// Authorization values are redacted before logging.
    pub headers: Vec<(String, String)>,
    pub request_body: String,
    /// Zero when the request never reached a server.
    pub status: u16,
    pub response_body: String,
}

/// In-process network joining devices, the authority intake and the back
/// end. Every message is logged for the privacy audit.
pub struct InProcessNetwork {
    pub backend: Arc<Backend>,
    pub intake: AuthorityIntake,
    pub clock: Arc<ManualClock>,
    log: Vec<WireRecord>,
    /// While set, every send fails as if the device were offline.
    pub offline: bool,
}

impl InProcessNetwork {
    pub fn new(backend: Arc<Backend>, intake: AuthorityIntake, clock: Arc<ManualClock>) -> Self {
        Self {
            backend,
            intake,
            clock,
            log: Vec::new(),
            offline: false,
        }
    }

    pub fn log(&self) -> &[WireRecord] {
        &self.log
    }

    /// A transport handle that tags each message with `origin`.
    pub fn endpoint(&mut self, origin: impl Into<String>) -> Endpoint<'_> {
        Endpoint {
            net: self,
            origin: origin.into(),
        }
    }

    fn deliver(&mut self, origin: &str, req: ApiRequest) -> Result<ApiResponse, TransportError> {
        let now = self.clock.now_s();
        let mut record = WireRecord {
            t: now,
            origin: origin.into(),
            method: req.method.clone(),
            path: req.path.clone(),
            query: req.query.clone(),
            headers: req
                .headers
                .iter()
                .map(|(k, v)| {
                    let v = if k == "authorization" { "<redacted>".to_string() } else { v.clone() };
                    (k.clone(), v)
                })
                .collect(),
            request_body: String::from_utf8_lossy(&req.body).into_owned(),
            status: 0,
            response_body: String::new(),
        };
        if self.offline {
            self.log.push(record);
            return Err(TransportError::Unreachable("simulated outage".into()));
        }
        let resp = if req.path.starts_with(INTAKE_PATH) {
            self.intake.receive(&req, now)
        } else {
            self.backend.handle(&req)
        };
        record.status = resp.status;
        record.response_body = resp.text();
        self.log.push(record);
        Ok(resp)
    }
}

pub struct Endpoint<'a> {
    net: &'a mut InProcessNetwork,
    origin: String,
}

impl Transport for Endpoint<'_> {
    fn send(&mut self, req: ApiRequest) -> Result<ApiResponse, TransportError> {
        self.net.deliver(&self.origin, req)
    }
}
