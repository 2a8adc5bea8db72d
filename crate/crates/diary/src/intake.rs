//! Authority side of the voluntary diagnosis flow: receive a consented
//! upload, turn it into an anonymous call to action and publish it.

use diary_core::trace::DISCARD_ACCURACY_M;
use diary_core::{build_cta, detect_stay_points, BuildParams, CtaSource, RawCta, StayPointConfig};

use crate::transport::{ApiRequest, ApiResponse, Transport, TransportError};
use crate::wire::{CtaDoc, DiagnosisDoc, ErrorDoc, PublishResponse};

#[derive(Debug, Clone)]
pub struct IntakeConfig {
    pub authority_id: String,
    pub token: String,
    pub message: String,
    pub stay: StayPointConfig,
    pub build: BuildParams,
}

#[derive(Debug, thiserror::Error)]
pub enum PublishError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("server answered {status}: {body}")]
    Rejected { status: u16, body: String },
}

/// Receives diagnosis uploads and keeps them until the authority processes
/// them. Nothing is forwarded to the back end except the built CTA.
#[derive(Debug, Clone)]
pub struct AuthorityIntake {
    pub config: IntakeConfig,
    inbox: Vec<(u64, DiagnosisDoc)>,
    received: usize,
}

fn reply(status: u16, code: &str, message: &str) -> ApiResponse {
    let doc = ErrorDoc {
        error: code.into(),
        message: message.into(),
    };
    ApiResponse::json(status, serde_json::to_vec(&doc).expect("serializable"))
}

impl AuthorityIntake {
    pub fn new(config: IntakeConfig) -> Self {
        Self {
            config,
            inbox: Vec::new(),
            received: 0,
        }
    }

    pub fn received(&self) -> usize {
        self.received
    }

    pub fn pending(&self) -> usize {
        self.inbox.len()
    }

    pub fn receive(&mut self, req: &ApiRequest, now: u64) -> ApiResponse {
        if req.method != "POST" {
            return reply(405, "method_not_allowed", "POST only");
        }
        let doc: DiagnosisDoc = match serde_json::from_slice(&req.body) {
            Ok(d) => d,
            Err(e) => return reply(400, "bad_request", &e.to_string()),
        };
        if !doc.consent {
            return reply(422, "consent_required", "uploads require explicit consent");
        }
        if let Err(e) = doc.samples() {
            return reply(422, "invalid_upload", &e.to_string());
        }
        if let Some(Err(e)) = doc.report.as_ref().map(|r| r.to_report()) {
            return reply(422, "invalid_upload", &e.to_string());
        }
        self.inbox.push((now, doc));
        self.received += 1;
        ApiResponse::json(202, br#"{"status":"accepted"}"#.to_vec())
    }

    /// Builds one call to action per pending upload and empties the inbox.
    /// Uploads that yield nothing to query are dropped.
    pub fn build_pending(&mut self, now: u64) -> Vec<RawCta> {
        let mut out = Vec::new();
        for (_, doc) in self.inbox.drain(..) {
            let Ok(mut raw_samples) = doc.samples() else { continue };
            raw_samples.sort_by_key(|s| s.timestamp);
            let accurate: Vec<_> = raw_samples
                .iter()
                .filter(|s| s.accuracy <= DISCARD_ACCURACY_M)
                .copied()
                .collect();
            let stays = detect_stay_points(&accurate, self.config.stay);
            let report = doc.report.as_ref().and_then(|r| r.to_report().ok());
            let source = CtaSource {
                stay_points: &stays,
                report: report.as_ref(),
                raw_samples: &raw_samples,
            };
            if let Ok(cta) = build_cta(&source, &self.config.authority_id, &self.config.message, now, &self.config.build) {
                out.push(cta);
            }
        }
        out
    }

    pub fn publish_request(&self, cta: &RawCta, idempotency_key: &str) -> ApiRequest {
        let body = serde_json::to_vec(&CtaDoc::from(cta)).expect("serializable");
        ApiRequest::post("/v1/cta", body)
            .bearer(&self.config.token)
            .header("idempotency-key", idempotency_key)
    }

    pub fn publish(
        &self,
        cta: &RawCta,
        idempotency_key: &str,
        transport: &mut dyn Transport,
    ) -> Result<PublishResponse, PublishError> {
        let resp = transport.send(self.publish_request(cta, idempotency_key))?;
        parse_publish_response(&resp)
    }
}

pub fn parse_publish_response(resp: &ApiResponse) -> Result<PublishResponse, PublishError> {
    if !resp.is_success() {
        return Err(PublishError::Rejected {
            status: resp.status,
            body: resp.text(),
        });
    }
    serde_json::from_slice(&resp.body).map_err(|e| PublishError::Rejected {
        status: resp.status,
        body: e.to_string(),
    })
}
