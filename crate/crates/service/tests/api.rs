use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use chrono::{TimeZone, Utc};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use monoprobe_core::corpus::QualityMetric;
use monoprobe_core::featurize::PlantedFeature;
use monoprobe_core::journal::{Annotation, Theme};
use monoprobe_core::pipeline::{Pipeline, RunConfig, SaeKind, SaeSpec};
use monoprobe_core::synthetic::{SyntheticCorpus, SyntheticSpec, DEFAULT_TRIGGERS};
use monoprobe_service::api::{router, AppState, StartupError};

const PLANTED: usize = 74;
const SAE_ID: &str = "mock-lm/layer_20/width_512";
const SAE_PATH: &str = "mock-lm%2Flayer_20%2Fwidth_512";

fn run(dir: &Path) -> RunConfig {
    let synth = SyntheticCorpus::generate(&SyntheticSpec { seed: 11, ..Default::default() });
    fs::write(dir.join("papers.jsonl"), synth.papers_jsonl()).unwrap();
    fs::write(dir.join("venues.jsonl"), synth.venues_jsonl()).unwrap();
    let sae = SaeSpec {
        kind: SaeKind::Mock,
        model_id: Some("mock-lm".into()),
        layer_index: Some(20),
        feature_count: Some(512),
        sae_id: Some(SAE_ID.into()),
        seed: None,
        active_per_token: None,
        planted: vec![PlantedFeature {
            feature_index: PLANTED,
            trigger_words: DEFAULT_TRIGGERS.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
            strength: 1.0,
        }],
        weights: None,
        embedding_seed: None,
    };
    let mut cfg = RunConfig::mock(dir.join("papers.jsonl"), dir.join("venues.jsonl"), dir.join("out"), 11, sae);
    cfg.tasks = vec![QualityMetric::CitationCount, QualityMetric::Sjr];
    Pipeline::new(cfg.clone()).unwrap().run().unwrap();
    cfg
}

fn app(cfg: &RunConfig) -> Router {
    router(Arc::new(AppState::load(cfg).unwrap()))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, Method::GET, uri, None).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn annotation(label: &str, secs: i64) -> Annotation {
    Annotation {
        feature_index: PLANTED,
        sae_id: SAE_ID.into(),
        task_id: "citation_count".into(),
        label_text: label.into(),
        theme: Theme::PublicationType,
        annotator: "analyst".into(),
        timestamp: Utc.timestamp_opt(1_750_000_000 + secs, 0).unwrap(),
    }
}

fn to_value(a: &Annotation) -> Value {
    serde_json::to_value(a).unwrap()
}

#[tokio::test]
async fn tasks_and_features_mirror_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run(dir.path());
    let app = app(&cfg);
    let (s, tasks) = get_json(&app, "/v1/tasks").await;
    assert_eq!(s, StatusCode::OK);
    let ids: Vec<&str> = tasks.as_array().unwrap().iter().map(|t| t["task_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["citation_count", "sjr"]);

    let (s, rows) = get_json(&app, "/v1/tasks/citation_count/features").await;
    assert_eq!(s, StatusCode::OK);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows[0]["feature_index"], PLANTED);
    assert_eq!(rows[0]["importance"], 1.0);
    assert_eq!(rows[0]["sign"], "Positive");
    assert!(rows[0]["annotation"].is_null());

    let (s, sjr) = get_json(&app, "/v1/tasks/sjr/features").await;
    assert_eq!(s, StatusCode::OK);
    let imps: Vec<f64> = sjr.as_array().unwrap().iter().map(|r| r["importance"].as_f64().unwrap()).collect();
    assert!(imps.windows(2).all(|w| w[0] >= w[1]), "{imps:?}");

    let (s, _) = get_json(&app, "/v1/tasks/nope/features").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn exemplars_contrast_high_and_low() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&run(dir.path()));
    let (s, ex) = get_json(&app, &format!("/v1/features/{SAE_PATH}/{PLANTED}/exemplars?k=3")).await;
    assert_eq!(s, StatusCode::OK, "{ex}");
    let high = ex["high"].as_array().unwrap();
    let low = ex["low"].as_array().unwrap();
    assert_eq!((high.len(), low.len()), (3, 3));
    assert!(high.iter().all(|e| e["activation"].as_f64().unwrap() > 0.0));
    assert!(low.iter().all(|e| e["activation"].as_f64().unwrap() == 0.0));
    assert!(high[0]["title"].as_str().is_some_and(|t| !t.is_empty()));

    let (s, _) = get_json(&app, &format!("/v1/features/{SAE_PATH}/{PLANTED}/exemplars")).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = get_json(&app, &format!("/v1/features/{SAE_PATH}/99999/exemplars")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = get_json(&app, "/v1/features/unknown/1/exemplars").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn saliency_peaks_on_planted_token() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&run(dir.path()));
    let (_, ex) = get_json(&app, &format!("/v1/features/{SAE_PATH}/{PLANTED}/exemplars?k=1")).await;
    let paper = ex["high"][0]["paper_id"].as_str().unwrap().to_owned();
    let (s, view) = get_json(&app, &format!("/v1/features/{SAE_PATH}/{PLANTED}/saliency/{paper}")).await;
    assert_eq!(s, StatusCode::OK, "{view}");
    let tokens = view["tokens"].as_array().unwrap();
    let acts = view["activations"].as_array().unwrap();
    assert_eq!(tokens.len(), acts.len());
    let peak = view["peak"].as_u64().unwrap() as usize;
    let word = tokens[peak].as_str().unwrap().trim().to_lowercase();
    assert!(DEFAULT_TRIGGERS.contains(&word.as_str()), "peak on `{word}`");

    let (s, err) = get_json(&app, &format!("/v1/features/{SAE_PATH}/{PLANTED}/saliency/no-such-paper")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(err["error"].as_str().unwrap().contains("token retention"), "{err}");
}

#[tokio::test]
async fn annotate_round_trip_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run(dir.path());
    let app = app(&cfg);
    let uri = format!("/v1/features/{SAE_PATH}/{PLANTED}/annotation");

    let (_, csv) = call(&app, Method::GET, "/v1/tasks/citation_count/export", None).await;
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.starts_with("setting,index,sign,description\n"));
    assert!(csv.lines().skip(1).all(|l| l.ends_with("(unlabeled)")));

    let (s, b) = call(&app, Method::PUT, &uri, Some(to_value(&annotation("Academic survey and reviews", 10)))).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    let (s, _) = call(&app, Method::PUT, &uri, Some(to_value(&annotation("Landmark claims", 20)))).await;
    assert_eq!(s, StatusCode::OK);

    let (_, rows) = get_json(&app, "/v1/tasks/citation_count/features").await;
    assert_eq!(rows[0]["annotation"]["label_text"], "Landmark claims");
    let (_, csv) = call(&app, Method::GET, "/v1/tasks/citation_count/export", None).await;
    let csv = String::from_utf8(csv).unwrap();
    assert!(csv.contains(&format!("setting-1,{PLANTED},positive,Landmark claims")));
    assert!(!csv.contains("Academic survey"));

    // Restart: the journal alone restores state, and the CLI export path agrees.
    drop(app);
    let state = AppState::load(&cfg).unwrap();
    assert_eq!(state.journal().history().len(), 2);
    let reloaded = router(Arc::new(state));
    let (_, again) = call(&reloaded, Method::GET, "/v1/tasks/citation_count/export", None).await;
    assert_eq!(String::from_utf8(again).unwrap(), csv);
    assert_eq!(AppState::load(&cfg).unwrap().export_csv("citation_count").unwrap(), csv);
}

#[tokio::test]
async fn annotation_validation() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&run(dir.path()));
    let uri = format!("/v1/features/{SAE_PATH}/{PLANTED}/annotation");
    let (s, _) = call(&app, Method::PUT, &uri, Some(to_value(&annotation("   ", 0)))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call(&app, Method::PUT, &format!("/v1/features/{SAE_PATH}/3/annotation"), Some(to_value(&annotation("x", 0)))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, Method::PUT, &uri, Some(json!({"label_text": "x"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let mut wrong_task = annotation("x", 0);
    wrong_task.task_id = "h_index".into();
    let (s, _) = call(&app, Method::PUT, &uri, Some(to_value(&wrong_task))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_puts_keep_history_latest_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run(dir.path());
    let app = app(&cfg);
    let uri = format!("/v1/features/{SAE_PATH}/{PLANTED}/annotation");
    let (a, b) = tokio::join!(
        call(&app, Method::PUT, &uri, Some(to_value(&annotation("later", 50)))),
        call(&app, Method::PUT, &uri, Some(to_value(&annotation("earlier", 40)))),
    );
    assert_eq!((a.0, b.0), (StatusCode::OK, StatusCode::OK));
    let (_, rows) = get_json(&app, "/v1/tasks/citation_count/features").await;
    assert_eq!(rows[0]["annotation"]["label_text"], "later");
    let lines = fs::read_to_string(cfg.journal_path()).unwrap();
    assert_eq!(lines.lines().count(), 2);
}

#[tokio::test]
async fn reads_do_not_touch_journal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run(dir.path());
    let app = app(&cfg);
    let before = fs::read(cfg.journal_path()).unwrap();
    for uri in [
        "/v1/tasks".to_owned(),
        "/v1/tasks/citation_count/features".to_owned(),
        "/v1/tasks/citation_count/export".to_owned(),
        format!("/v1/features/{SAE_PATH}/{PLANTED}/exemplars?k=2"),
    ] {
        assert_eq!(call(&app, Method::GET, &uri, None).await.0, StatusCode::OK, "{uri}");
    }
    assert_eq!(fs::read(cfg.journal_path()).unwrap(), before);
}

#[test]
fn startup_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = run(dir.path());

    let good = serde_json::to_string(&annotation("ok", 0)).unwrap();
    fs::write(cfg.journal_path(), format!("{good}\n{good}\n{{broken\n")).unwrap();
    let err = AppState::load(&cfg).err().unwrap();
    assert!(err.to_string().contains("malformed line 3"), "{err}");

    fs::remove_file(cfg.journal_path()).unwrap();
    fs::remove_dir_all(cfg.report_dir()).unwrap();
    assert!(matches!(AppState::load(&cfg), Err(StartupError::MissingBundle { .. })));
}
