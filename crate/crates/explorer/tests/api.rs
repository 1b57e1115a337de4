//! Endpoint behaviour on a small session built in-process.

use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;
use xmodal_core::ae::{self, TrainConfig};
use xmodal_core::checkpoint::ModelCheckpoint;
use xmodal_core::cohort::{filter_cohort, Clause, FilterPredicate};
use xmodal_core::synth::{generate_cohort, Covariate, Modality};
use xmodal_core::tsne::TsneConfig;
use xmodal_core::Error;
use xmodal_explorer::api::{
    EmbeddingResponse, GroupCreated, IdsResponse, InterpolateResponse, PerturbResponse, ReconstructResponse,
    SubjectResponse, Summary, TranslateResponse,
};
use xmodal_explorer::error::{classify, ErrorBody};
use xmodal_explorer::session::compute_embeddings;
use xmodal_explorer::{router, SessionState};

fn session() -> Arc<SessionState> {
    static SESSION: OnceLock<Arc<SessionState>> = OnceLock::new();
    SESSION
        .get_or_init(|| {
            let dataset = generate_cohort(200, 3).unwrap();
            let config = TrainConfig {
                hidden_width: 32,
                max_epochs: 5,
                ..TrainConfig::default()
            };
            let checkpoint = ModelCheckpoint::from_trained(ae::train(&dataset, &config).unwrap(), &dataset);
            let table = xmodal_core::latent::LatentTable::compute(&checkpoint.model, &dataset).unwrap();
            let tsne = TsneConfig {
                iterations: 300,
                ..TsneConfig::default()
            };
            let embeddings = compute_embeddings(&table, &dataset.ids(), &tsne).unwrap();
            Arc::new(SessionState::new(dataset, checkpoint, Some(embeddings)).unwrap())
        })
        .clone()
}

fn app() -> Router {
    router(session())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec())
}

async fn ok<T: serde::de::DeserializeOwned>(app: &Router, method: &str, uri: &str, body: Option<Value>) -> T {
    let (status, bytes) = call(app, method, uri, body).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

async fn err(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, ErrorBody) {
    let (status, bytes) = call(app, method, uri, body).await;
    assert!(!status.is_success());
    (status, serde_json::from_slice(&bytes).expect("errors are JSON {code, message}"))
}

async fn new_group(app: &Router, name: &str, body: Value) -> u64 {
    let mut body = body;
    body["name"] = json!(name);
    ok::<GroupCreated>(app, "POST", "/api/group", Some(body)).await.id
}

#[tokio::test]
async fn summary_describes_the_session() {
    let s: Summary = ok(&app(), "GET", "/api/summary", None).await;
    assert_eq!(s.count, 200);
    assert_eq!(s.latent_dim, 16);
    assert_eq!(s.display_range.len(), 16);
    assert_eq!(s.covariate_schema.len(), Covariate::ALL.len());
    assert_eq!(s.modalities.len(), 2);
    assert_eq!(s.phenotypes.len(), 6);
    let counts = &s.split_sizes;
    assert_eq!(counts.train + counts.validation + counts.test, 200);
}

#[tokio::test]
async fn embeddings_are_served_exactly_as_cached() {
    let app = app();
    for m in Modality::ALL {
        let e: EmbeddingResponse = ok(&app, "GET", &format!("/api/embedding/{}", m.as_str()), None).await;
        let cached = &session().embeddings[&m];
        assert_eq!(e.ids, cached.ids);
        assert_eq!(e.points, cached.points);
    }
    let (status, body) = err(&app, "GET", "/api/embedding/ct", None).await;
    assert_eq!((status, body.code.as_str()), (StatusCode::NOT_FOUND, "not_found"));
}

#[tokio::test]
async fn read_endpoints_are_byte_stable() {
    let app = app();
    for uri in ["/api/embedding/mri", "/api/embedding/ecg", "/api/histogram?selection=1,2,3", "/api/subject/4"] {
        let a = call(&app, "GET", uri, None).await;
        let b = call(&app, "GET", uri, None).await;
        assert_eq!(a, b, "{uri}");
    }
}

#[tokio::test]
async fn filter_and_lasso_select_subjects() {
    let app = app();
    let body = json!({"clauses": [{"covariate": "sex", "categories": ["female"]}]});
    let got: IdsResponse = ok(&app, "POST", "/api/cohort/filter", Some(body)).await;
    let expected = filter_cohort(
        &session().dataset,
        &FilterPredicate::new(vec![Clause::categories(Covariate::Sex, &["female"])]).unwrap(),
    );
    assert_eq!(got.ids, expected);

    let bad = json!({"clauses": [{"covariate": "sex", "categories": ["other"]}]});
    let (status, e) = err(&app, "POST", "/api/cohort/filter", Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(e.code, "malformed_request");

    let points = &session().embeddings[&Modality::Mri].points;
    let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let bbox = json!({"modality": "mri", "polygon": [[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]]});
    let all: IdsResponse = ok(&app, "POST", "/api/cohort/lasso", Some(bbox)).await;
    assert_eq!(all.ids, session().dataset.ids());
    let (status, e) = err(&app, "POST", "/api/cohort/lasso", Some(json!({"modality": "mri", "polygon": [[0.0, 0.0], [1.0, 1.0]]}))).await;
    assert_eq!((status, e.code.as_str()), (StatusCode::BAD_REQUEST, "invalid_argument"));
}

#[tokio::test]
async fn groups_follow_their_provenance() {
    let app = app();
    let predicate = json!({"clauses": [{"covariate": "age", "interval": [40.0, 60.0]}]});
    let by_filter = new_group(&app, "younger", json!({"provenance": {"kind": "filter", "predicate": predicate}})).await;
    let explicit = new_group(&app, "picked", json!({"ids": [5, 1, 3, 3]})).await;
    let both = new_group(&app, "both", json!({"provenance": {"kind": "intersection", "groups": [by_filter, explicit]}})).await;

    let groups: Vec<Value> = ok(&app, "GET", "/api/group", None).await;
    let find = |id: u64| groups.iter().find(|g| g["id"] == id).unwrap().clone();
    assert_eq!(find(explicit)["subject_ids"], json!([1, 3, 5]));
    assert_eq!(find(explicit)["provenance"]["kind"], "explicit");
    let young: Vec<u64> = serde_json::from_value(find(by_filter)["subject_ids"].clone()).unwrap();
    let shared: Vec<u64> = serde_json::from_value(find(both)["subject_ids"].clone()).unwrap();
    assert_eq!(shared, [1, 3, 5].into_iter().filter(|id| young.contains(id)).collect::<Vec<u64>>());

    let h: Value = ok(&app, "GET", &format!("/api/histogram?selection=group:{explicit}"), None).await;
    assert_eq!(h["selected"], 3);

    let (status, _) = err(&app, "POST", "/api/group", Some(json!({"name": "x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let mismatch = json!({"name": "x", "ids": [0], "provenance": {"kind": "filter", "predicate": {"clauses": []}}});
    assert_eq!(err(&app, "POST", "/api/group", Some(mismatch)).await.0, StatusCode::BAD_REQUEST);
    let (_, e) = err(&app, "POST", "/api/group", Some(json!({"name": "x", "ids": [100000]}))).await;
    assert_eq!(e.code, "invalid_argument");
    let (_, e) = err(&app, "GET", "/api/histogram?selection=1,x", None).await;
    assert_eq!(e.code, "malformed_request");
}

#[tokio::test]
async fn interpolation_at_zero_reproduces_the_reconstruction() {
    let app = app();
    let a = new_group(&app, "a", json!({"ids": [0, 2, 4, 6, 8]})).await;
    let b = new_group(&app, "b", json!({"ids": [1, 3, 5]})).await;
    for method in ["mean", "median", "nearest_subject"] {
        let rec: ReconstructResponse = ok(&app, "POST", "/api/reconstruct", Some(json!({"group_id": a, "method": method}))).await;
        let mid: InterpolateResponse = ok(
            &app,
            "POST",
            "/api/interpolate",
            Some(json!({"group_a": a, "group_b": b, "t": 0.0, "method": method})),
        )
        .await;
        assert_eq!(serde_json::to_vec(&rec.samples).unwrap(), serde_json::to_vec(&mid.samples).unwrap());
        assert_eq!(rec.latent.values, mid.latent.values);
        assert_eq!(rec.prediction.cells.len(), 3);
    }
    let (_, e) = err(&app, "POST", "/api/interpolate", Some(json!({"group_a": a, "group_b": b, "t": 1.5}))).await;
    assert_eq!(e.code, "invalid_argument");
    let (_, e) = err(&app, "POST", "/api/reconstruct", Some(json!({"group_id": 999_999}))).await;
    assert_eq!(e.code, "invalid_argument");
}

#[tokio::test]
async fn concurrent_perturbations_match_serial_replay() {
    let app = app();
    let base = session().table.vector(7, xmodal_core::latent::LatentSource::Fused).unwrap();
    let range = session().table.display_range().to_vec();
    let request = |i: usize| {
        let k = i % 16;
        json!({"base": base, "k": k, "value": range[k] * ((i as f32 / 25.0) - 1.0)})
    };
    let mut serial = Vec::new();
    for i in 0..50 {
        serial.push(call(&app, "POST", "/api/perturb", Some(request(i))).await);
    }
    let handles: Vec<_> = (0..50)
        .map(|i| {
            let app = app.clone();
            let body = request(i);
            tokio::spawn(async move { call(&app, "POST", "/api/perturb", Some(body)).await })
        })
        .collect();
    for (i, h) in handles.into_iter().enumerate() {
        let got = h.await.unwrap();
        assert_eq!(got.0, StatusCode::OK);
        assert_eq!(got, serial[i]);
    }
    let p: PerturbResponse = serde_json::from_slice(&serial[3].1).unwrap();
    let changed: Vec<usize> = (0..16).filter(|&j| p.perturbed.values[j] != p.original.values[j]).collect();
    assert!(changed.iter().all(|&j| j == 3));

    let too_far = json!({"base": base, "k": 0, "value": range[0] * 1.5});
    let (status, e) = err(&app, "POST", "/api/perturb", Some(too_far)).await;
    assert_eq!((status, e.code.as_str()), (StatusCode::BAD_REQUEST, "invalid_argument"));
    assert!(e.message.contains("R ="), "{}", e.message);
}

#[tokio::test]
async fn subjects_and_translation() {
    let app = app();
    let s: SubjectResponse = ok(&app, "GET", "/api/subject/12", None).await;
    let state = session();
    let subject = state.dataset.get(12).unwrap();
    assert_eq!(s.samples[&Modality::Mri].decode().unwrap(), subject.mri);
    assert_eq!(s.samples[&Modality::Ecg].decode().unwrap(), subject.ecg);
    assert_eq!(s.samples[&Modality::Ecg].shape, vec![4, 256]);
    assert_eq!(err(&app, "GET", "/api/subject/5000", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(err(&app, "GET", "/api/subject/abc", None).await.1.code, "malformed_request");

    let t: TranslateResponse = ok(&app, "POST", "/api/translate", Some(json!({"subject_id": 12, "from": "ecg", "to": "mri"}))).await;
    let expected = xmodal_core::latent::translate(&session().checkpoint.model, &subject.ecg, Modality::Ecg, Modality::Mri).unwrap();
    assert_eq!(t.sample.decode().unwrap(), expected);
    let (_, e) = err(&app, "POST", "/api/translate", Some(json!({"subject_id": 12, "from": "ecg", "to": "ecg"}))).await;
    assert_eq!(e.code, "invalid_argument");
}

#[tokio::test]
async fn malformed_requests_get_structured_errors() {
    let app = app();
    let req = Request::builder()
        .method("POST")
        .uri("/api/perturb")
        .header("content-type", "application/json")
        .body(Body::from("{not json"))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let body: ErrorBody = serde_json::from_slice(&axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap()).unwrap();
    assert_eq!(body.code, "malformed_request");
    let (status, e) = err(&app, "GET", "/api/nothing", None).await;
    assert_eq!((status, e.code.as_str()), (StatusCode::NOT_FOUND, "not_found"));
    let (_, e) = err(&app, "POST", "/api/reconstruct", Some(json!({"group_id": 0, "colour": "red"}))).await;
    assert_eq!(e.code, "malformed_request");
}

#[test]
fn every_library_error_has_its_own_code() {
    let errors = [
        Error::Dimension { layer: 0, expected: 1, got: 2 },
        Error::Shape("s".into()),
        Error::Contract("c".into()),
        Error::NonFinite { tensor: "t".into() },
        Error::InvalidArgument("a".into()),
        Error::Training { epoch: 1, batch: 2, message: "m".into() },
        Error::Numeric { iteration: 3, message: "m".into() },
        Error::Format("f".into()),
        Error::Io(std::io::Error::other("io")),
        Error::Json(serde_json::from_str::<Value>("{").unwrap_err()),
    ];
    let mut codes: Vec<&str> = errors.iter().map(|e| classify(e).0).collect();
    codes.sort_unstable();
    codes.dedup();
    assert_eq!(codes.len(), errors.len());
    assert!(!codes.contains(&"not_found") && !codes.contains(&"malformed_request"));
}
