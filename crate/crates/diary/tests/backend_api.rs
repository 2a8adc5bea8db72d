use std::sync::Arc;

use diary::backend::{AuthorityRegistry, Backend, ManualClock, OPEN_DATA_HEADER};
use diary::core::{CoarseCell, GeoPoint};
use diary::transport::{ApiRequest, ApiResponse};
use diary::wire::{CtaList, PublishResponse};
use serde_json::{json, Value};

const NOW: u64 = 1_587_400_000;
const TOKEN: &str = "rimini-health-office-0123456789abcdef";
const OTHER_TOKEN: &str = "bologna-health-office-0123456789abcdef";
const LAT: f64 = 44.06;
const LON: f64 = 12.57;

fn cell(lat: f64, lon: f64) -> String {
    CoarseCell::containing(GeoPoint::new(lat, lon).unwrap()).to_string()
}

fn setup() -> (Backend, Arc<ManualClock>) {
    let registry = AuthorityRegistry::from_toml(&format!(
        r#"
[[authority]]
id = "rimini"
display_name = "Rimini health office"
token = "{TOKEN}"
competence_cells = ["{}"]

[[authority]]
id = "bologna"
display_name = "Bologna health office"
token = "{OTHER_TOKEN}"
competence_cells = ["{}"]
"#,
        cell(LAT, LON),
        cell(44.49, 11.34)
    ))
    .unwrap();
    let clock = Arc::new(ManualClock::new(NOW));
    (Backend::in_memory(registry, clock.clone(), Some(1)), clock)
}

fn square(lat: f64, lon: f64, d: f64) -> Value {
    json!([[lat - d, lon - d], [lat - d, lon + d], [lat + d, lon + d], [lat + d, lon - d]])
}

fn cta_doc(expires_at: u64) -> Value {
    json!({
        "regions": [{"polygon": square(LAT, LON, 0.001), "start": NOW - 7200, "end": NOW - 3600}],
        "tcns": [],
        "max_distance_m": 0.0,
        "min_exposure_s": 900,
        "message": "You may have been exposed; please call your GP.",
        "created_at": NOW,
        "expires_at": expires_at,
    })
}

fn post_cta(b: &Backend, doc: &Value, token: Option<&str>) -> ApiResponse {
    let mut req = ApiRequest::post("/v1/cta", serde_json::to_vec(doc).unwrap());
    if let Some(t) = token {
        req = req.bearer(t);
    }
    b.handle(&req)
}

fn feed(b: &Backend, cells: &str) -> CtaList {
    let r = b.handle(&ApiRequest::get(&format!("/v1/cta?cells={cells}")));
    assert_eq!(r.status, 200, "{}", r.text());
    serde_json::from_slice(&r.body).unwrap()
}

fn error_code(r: &ApiResponse) -> String {
    let v: Value = serde_json::from_slice(&r.body).unwrap();
    v["error"].as_str().unwrap().to_owned()
}

fn stats(id: &str, day: &str, centroid: Value) -> Value {
    json!({
        "installation_id": id,
        "day": day,
        "minutes_tracked": 600,
        "centroid": centroid,
        "bbox_diag_m": 1234.5,
        "known_locations_visited": 2,
        "notes": 1,
        "samples_recorded": 140,
        "samples_discarded": 3,
        "minutes_at_home": 420,
    })
}

fn post_stats(b: &Backend, doc: &Value) -> ApiResponse {
    b.handle(&ApiRequest::post("/v1/stats", serde_json::to_vec(doc).unwrap()))
}

#[test]
fn publishing_requires_a_known_token() {
    let (b, _) = setup();
    let doc = cta_doc(NOW + 86_400);
    assert_eq!(post_cta(&b, &doc, None).status, 401);
    let r = post_cta(&b, &doc, Some("not-a-registered-token-at-all-xxxxxxxx"));
    assert_eq!(r.status, 401);
    assert_eq!(error_code(&r), "unauthorized");
    assert!(feed(&b, "*").ctas.is_empty());
}

#[test]
fn published_cta_appears_in_the_feed_for_its_cells() {
    let (b, _) = setup();
    let r = post_cta(&b, &cta_doc(NOW + 86_400), Some(TOKEN));
    assert_eq!(r.status, 201, "{}", r.text());
    let p: PublishResponse = serde_json::from_slice(&r.body).unwrap();
    assert!(p.coverage_cells.contains(&cell(LAT, LON)));

    let list = feed(&b, &cell(LAT, LON));
    assert_eq!(list.server_time, NOW);
    assert_eq!(list.ctas.len(), 1);
    assert_eq!(list.ctas[0].id, p.id);
    assert_eq!(list.ctas[0].authority_id, "rimini");
    assert!(feed(&b, &cell(44.49, 11.34)).ctas.is_empty());
    assert_eq!(feed(&b, "*").ctas.len(), 1);
}

#[test]
fn regions_outside_competence_are_forbidden() {
    let (b, _) = setup();
    let r = post_cta(&b, &cta_doc(NOW + 86_400), Some(OTHER_TOKEN));
    assert_eq!(r.status, 403);
    let mut doc = cta_doc(NOW + 86_400);
    doc["authority_id"] = json!("bologna");
    assert_eq!(post_cta(&b, &doc, Some(TOKEN)).status, 403);
}

#[test]
fn invalid_documents_are_rejected() {
    let (b, _) = setup();
    let req = ApiRequest::post("/v1/cta", b"{not json".to_vec()).bearer(TOKEN);
    assert_eq!(b.handle(&req).status, 400);

    let mut unknown = cta_doc(NOW + 86_400);
    unknown["radius"] = json!(5);
    assert_eq!(post_cta(&b, &unknown, Some(TOKEN)).status, 400);

    let mut inverted = cta_doc(NOW + 86_400);
    inverted["regions"][0]["start"] = json!(NOW);
    inverted["regions"][0]["end"] = json!(NOW - 10);
    assert_eq!(post_cta(&b, &inverted, Some(TOKEN)).status, 422);

    let mut empty = cta_doc(NOW + 86_400);
    empty["regions"] = json!([]);
    assert_eq!(post_cta(&b, &empty, Some(TOKEN)).status, 422);

    let mut huge = cta_doc(NOW + 86_400);
    huge["regions"][0]["polygon"] = square(LAT, LON, 3.0);
    assert_eq!(post_cta(&b, &huge, Some(TOKEN)).status, 422);

    let mut bad_tcn = cta_doc(NOW + 86_400);
    bad_tcn["tcns"] = json!(["xyz"]);
    assert_eq!(post_cta(&b, &bad_tcn, Some(TOKEN)).status, 422);

    let r = post_cta(&b, &cta_doc(NOW - 1), Some(TOKEN));
    assert_eq!(r.status, 422);
    assert!(feed(&b, "*").ctas.is_empty());
}

#[test]
fn expired_ctas_leave_the_feed() {
    let (b, clock) = setup();
    assert_eq!(post_cta(&b, &cta_doc(NOW + 600), Some(TOKEN)).status, 201);
    assert_eq!(post_cta(&b, &cta_doc(NOW + 86_400), Some(TOKEN)).status, 201);
    assert_eq!(feed(&b, "*").ctas.len(), 2);
    clock.set(NOW + 600);
    let list = feed(&b, "*");
    assert_eq!(list.ctas.len(), 1);
    assert_eq!(list.ctas[0].expires_at, NOW + 86_400);
}

#[test]
fn since_filters_by_publication_time() {
    let (b, clock) = setup();
    post_cta(&b, &cta_doc(NOW + 86_400), Some(TOKEN));
    clock.set(NOW + 100);
    post_cta(&b, &cta_doc(NOW + 86_400), Some(TOKEN));
    let r = b.handle(&ApiRequest::get(&format!("/v1/cta?cells=*&since={NOW}")));
    let list: CtaList = serde_json::from_slice(&r.body).unwrap();
    assert_eq!(list.ctas.len(), 1);
}

#[test]
fn feed_query_is_validated() {
    let (b, _) = setup();
    assert_eq!(b.handle(&ApiRequest::get("/v1/cta")).status, 400);
    assert_eq!(b.handle(&ApiRequest::get("/v1/cta?cells=abc")).status, 400);
    assert_eq!(b.handle(&ApiRequest::get("/v1/cta?cells=*&lat=44.06")).status, 400);
    assert_eq!(b.handle(&ApiRequest::get("/v1/cta?cells=*&since=yesterday")).status, 400);
    assert_eq!(b.handle(&ApiRequest::new("PUT", "/v1/cta")).status, 405);
    assert_eq!(b.handle(&ApiRequest::get("/v1/nothing")).status, 404);
}

#[test]
fn idempotency_key_returns_the_original_id() {
    let (b, _) = setup();
    let body = serde_json::to_vec(&cta_doc(NOW + 86_400)).unwrap();
    let req = ApiRequest::post("/v1/cta", body).bearer(TOKEN).header("Idempotency-Key", "case-17");
    let first = b.handle(&req);
    let second = b.handle(&req);
    assert_eq!(first.status, 201);
    assert_eq!(second.status, 200);
    let (a, c): (PublishResponse, PublishResponse) =
        (serde_json::from_slice(&first.body).unwrap(), serde_json::from_slice(&second.body).unwrap());
    assert_eq!(a, c);
    assert_eq!(feed(&b, "*").ctas.len(), 1);
}

#[test]
fn revocation() {
    let (b, _) = setup();
    let r = post_cta(&b, &cta_doc(NOW + 86_400), Some(TOKEN));
    let id = serde_json::from_slice::<PublishResponse>(&r.body).unwrap().id;
    let path = format!("/v1/cta/{id}");
    assert_eq!(b.handle(&ApiRequest::new("DELETE", &path)).status, 401);
    assert_eq!(b.handle(&ApiRequest::new("DELETE", &path).bearer(OTHER_TOKEN)).status, 403);
    assert_eq!(b.handle(&ApiRequest::new("DELETE", "/v1/cta/nope").bearer(TOKEN)).status, 404);
    assert_eq!(b.handle(&ApiRequest::new("DELETE", &path).bearer(TOKEN)).status, 200);
    assert_eq!(b.handle(&ApiRequest::new("DELETE", &path).bearer(TOKEN)).status, 409);
    assert!(feed(&b, "*").ctas.is_empty());
}

#[test]
fn stats_upload_is_idempotent_per_installation_and_day() {
    let (b, _) = setup();
    let id = "6f1c2a8e-3b4d-4e5f-8a9b-0c1d2e3f4a5b";
    let doc = stats(id, "2020-04-20", json!([44.06, 12.58]));
    assert_eq!(post_stats(&b, &doc).status, 202);
    assert_eq!(post_stats(&b, &doc).status, 202);
    assert_eq!(b.stats_row_count().unwrap(), 1);
    assert_eq!(post_stats(&b, &stats(id, "2020-04-21", Value::Null)).status, 202);
    assert_eq!(b.stats_row_count().unwrap(), 2);
}

#[test]
fn stats_validation() {
    let (b, _) = setup();
    let id = "6f1c2a8e-3b4d-4e5f-8a9b-0c1d2e3f4a5b";
    let off_grid = stats(id, "2020-04-20", json!([44.0612, 12.5789]));
    assert_eq!(post_stats(&b, &off_grid).status, 422);
    let mut extra = stats(id, "2020-04-20", json!([44.06, 12.58]));
    extra["home"] = json!([44.0612, 12.5789]);
    assert_eq!(post_stats(&b, &extra).status, 400);
    assert_eq!(post_stats(&b, &stats("not-a-uuid", "2020-04-20", Value::Null)).status, 400);
    assert_eq!(post_stats(&b, &stats(id, "20/04/2020", Value::Null)).status, 400);
    assert_eq!(b.stats_row_count().unwrap(), 0);
}

#[test]
fn open_data_export() {
    let (b, _) = setup();
    let r = b.handle(&ApiRequest::get("/v1/opendata/daily.csv"));
    assert_eq!(r.status, 200);
    assert_eq!(r.content_type, "text/csv");
    assert_eq!(r.text().trim_end(), OPEN_DATA_HEADER.join(","));

    let ids = [
        "6f1c2a8e-3b4d-4e5f-8a9b-0c1d2e3f4a5b",
        "0a1b2c3d-4e5f-4a6b-9c8d-7e6f5a4b3c2d",
        "11111111-2222-4333-8444-555555555555",
    ];
    for (k, id) in ids.iter().enumerate() {
        post_stats(&b, &stats(id, "2020-04-20", json!([44.06, 12.58 + 0.02 * k as f64])));
    }
    post_stats(&b, &stats(ids[0], "2020-04-21", Value::Null));

    let csv = b.export_csv().unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), OPEN_DATA_HEADER);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    for row in &rows {
        for id in ids {
            assert!(!row.iter().any(|f| f.contains(id) || f.contains(&id.replace('-', ""))));
        }
        for col in [3, 4] {
            let f = &row[col];
            assert!(f.is_empty() || f.split('.').nth(1).is_some_and(|d| d.len() <= 2), "{f}");
        }
    }
    let days: Vec<&str> = rows.iter().map(|r| r.get(0).unwrap()).collect();
    assert_eq!(days, ["2020-04-20", "2020-04-20", "2020-04-20", "2020-04-21"]);

    // Keys are salted per export, so two exports cannot be joined.
    let again = b.export_csv().unwrap();
    let keys = |s: &str| -> Vec<String> {
        csv::Reader::from_reader(s.as_bytes())
            .records()
            .map(|r| r.unwrap()[1].to_owned())
            .collect()
    };
    let (k1, k2) = (keys(&csv), keys(&again));
    assert!(k1.iter().all(|k| !k2.contains(k)));
}
