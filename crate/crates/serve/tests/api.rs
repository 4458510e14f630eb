use std::sync::Arc;
use std::thread;
use std::time::Duration;

use albalance::dataset::Dataset;
use albalance::harness::{load_dataset, oracle_label, run_loop, Journal, OracleLabeler, RunConfig, RunLog};
use albalance::rle::encode_labels;
use albalance_serve::{router, Phase, QueueItem, Session, SessionStatus, SubmitReceipt, UnitMask};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.total_budget_fraction = 0.1;
    cfg.data.seed = 2;
    cfg
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json<T: serde::de::DeserializeOwned>(app: &Router, uri: &str) -> T {
    let (status, body) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK, "{uri}: {}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

async fn post(app: &Router, body: Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post("/api/labels")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(app, req).await
}

/// Waits until a round is open or the run is over; returns the pending units.
async fn next_round(app: &Router) -> Option<Vec<QueueItem>> {
    loop {
        let st: SessionStatus = get_json(app, "/api/status").await;
        match st.phase {
            Phase::Finished => return None,
            Phase::Labeling if st.queue_len > 0 => return Some(get_json(app, "/api/queue").await),
            _ => thread::sleep(Duration::from_millis(5)),
        }
    }
}

fn truth_labels(session: &Session, data: &Dataset, id: &str) -> Value {
    let unit = session.unit(id).unwrap();
    let sample = data.train.iter().find(|s| s.id == unit.image_id).unwrap();
    let runs = encode_labels(&oracle_label(&unit, &sample.truth).unwrap());
    json!({ "unit_id": id, "rle_labels": runs })
}

/// Answers every round from ground truth until the run ends, or until
/// `limit` submissions have been made.
async fn answer_all(app: &Router, session: &Session, data: &Dataset, limit: Option<usize>) {
    let mut sent = 0;
    while let Some(items) = next_round(app).await {
        for item in items {
            if limit == Some(sent) {
                return;
            }
            let (status, body) = post(app, truth_labels(session, data, &item.unit_id)).await;
            assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
            sent += 1;
        }
    }
}

fn oracle_log(cfg: &RunConfig, data: &Dataset) -> String {
    run_loop(cfg, data, 2, &mut OracleLabeler::new(&data.train))
        .unwrap()
        .log
        .to_jsonl()
        .unwrap()
}

fn spawn_loop(cfg: &RunConfig, data: &Dataset, session: &Arc<Session>) -> thread::JoinHandle<albalance::Result<RunLog>> {
    let (cfg, data, session) = (cfg.clone(), data.clone(), Arc::clone(session));
    thread::spawn(move || {
        let mut labeler = session.labeler();
        run_loop(&cfg, &data, 2, &mut labeler).map(|o| o.log)
    })
}

#[tokio::test]
async fn human_round_trip_matches_oracle_run() {
    let cfg = config();
    let data = load_dataset(&cfg).unwrap();
    let session = Session::new(&data, Journal::in_memory());
    let app = router(Arc::clone(&session), None);
    let handle = spawn_loop(&cfg, &data, &session);

    let items = next_round(&app).await.unwrap();
    let first = &items[0];
    let png = base64::engine::general_purpose::STANDARD
        .decode(&first.image_png_base64)
        .unwrap();
    assert_eq!(&png[1..4], b"PNG");
    let (status, body) = call(
        &app,
        Request::get(format!("/api/unit/{}/image", first.unit_id)).body(Body::empty()).unwrap(),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, png);
    let mask: UnitMask = get_json(&app, &format!("/api/unit/{}/mask", first.unit_id)).await;
    assert_eq!(mask.cost, first.cost);
    assert_eq!(mask.rle_mask, first.rle_mask);
    assert_eq!(mask.rle_mask.iter().skip(1).step_by(2).map(|&n| u64::from(n)).sum::<u64>(), first.cost);

    let before: SessionStatus = get_json(&app, "/api/status").await;
    let mut bad = truth_labels(&session, &data, &first.unit_id);
    bad["rle_labels"][0][0] = json!(data.num_classes());
    assert_eq!(post(&app, bad).await.0, StatusCode::BAD_REQUEST);
    let mut short = truth_labels(&session, &data, &first.unit_id);
    short["rle_labels"] = json!([[0, first.cost - 1]]);
    assert_eq!(post(&app, short).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(&app, json!({ "unit_id": first.unit_id })).await.0, StatusCode::BAD_REQUEST);
    let malformed = Request::post("/api/labels").body(Body::from("{")).unwrap();
    assert_eq!(call(&app, malformed).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(&app, json!({ "unit_id": "nope", "skip": true })).await.0, StatusCode::NOT_FOUND);
    let missing = Request::get("/api/unit/nope/mask").body(Body::empty()).unwrap();
    assert_eq!(call(&app, missing).await.0, StatusCode::NOT_FOUND);
    let after: SessionStatus = get_json(&app, "/api/status").await;
    assert_eq!((after.queue_len, after.labeled_pixels), (before.queue_len, before.labeled_pixels));
    assert!(session.journal().is_empty());

    let (status, body) = post(&app, truth_labels(&session, &data, &first.unit_id)).await;
    assert_eq!(status, StatusCode::OK);
    let receipt: SubmitReceipt = serde_json::from_slice(&body).unwrap();
    assert_eq!(receipt.labeled_pixels, before.labeled_pixels + first.cost);
    assert_eq!(receipt.remaining, before.queue_len - 1);
    let queue: Vec<QueueItem> = get_json(&app, "/api/queue").await;
    assert!(queue.iter().all(|i| i.unit_id != first.unit_id));
    assert_eq!(
        post(&app, truth_labels(&session, &data, &first.unit_id)).await.0,
        StatusCode::CONFLICT
    );

    answer_all(&app, &session, &data, None).await;
    let log = handle.join().unwrap().unwrap();
    let metrics: Vec<Value> = get_json(&app, "/api/metrics").await;
    assert_eq!(metrics.len(), log.records.len());
    assert_eq!(log.to_jsonl().unwrap(), oracle_log(&cfg, &data));
    let done: SessionStatus = get_json(&app, "/api/status").await;
    assert_eq!(done.phase, Phase::Finished);
    assert_eq!(done.labeled_pixels, log.last().unwrap().labeled_pixels);
}

#[tokio::test]
async fn skips_are_accepted_and_cost_nothing() {
    let cfg = config();
    let data = load_dataset(&cfg).unwrap();
    let session = Session::new(&data, Journal::in_memory());
    let app = router(Arc::clone(&session), None);
    let handle = spawn_loop(&cfg, &data, &session);
    let items = next_round(&app).await.unwrap();
    let before: SessionStatus = get_json(&app, "/api/status").await;
    let (status, body) = post(&app, json!({ "unit_id": items[0].unit_id, "skip": true })).await;
    assert_eq!(status, StatusCode::OK);
    let receipt: SubmitReceipt = serde_json::from_slice(&body).unwrap();
    assert!(receipt.skipped);
    assert_eq!(receipt.labeled_pixels, before.labeled_pixels);
    session.close();
    assert!(handle.join().unwrap().is_err());
}

#[tokio::test]
async fn journal_resumes_an_interrupted_session() {
    let cfg = config();
    let data = load_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("journal.bin");

    let session = Session::new(&data, Journal::open(&path).unwrap());
    let app = router(Arc::clone(&session), None);
    let handle = spawn_loop(&cfg, &data, &session);
    let first_round = next_round(&app).await.unwrap().len();
    answer_all(&app, &session, &data, Some(first_round + 2)).await;
    session.close();
    assert!(handle.join().unwrap().is_err());
    let answered: Vec<String> = session.journal().records().iter().map(|r| r.unit_id().to_string()).collect();
    assert_eq!(answered.len(), first_round + 2);
    drop(session);

    let session = Session::new(&data, Journal::open(&path).unwrap());
    let app = router(Arc::clone(&session), None);
    let handle = spawn_loop(&cfg, &data, &session);
    let queue = next_round(&app).await.unwrap();
    assert!(queue.iter().all(|i| !answered.contains(&i.unit_id)));
    answer_all(&app, &session, &data, None).await;
    let log = handle.join().unwrap().unwrap();
    assert_eq!(log.to_jsonl().unwrap(), oracle_log(&cfg, &data));
}

#[tokio::test]
async fn static_assets_are_served() {
    let cfg = config();
    let data = load_dataset(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>console</p>").unwrap();
    let app = router(Session::new(&data, Journal::in_memory()), Some(dir.path()));
    let (status, body) = call(&app, Request::get("/index.html").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<p>console</p>");
    let st: SessionStatus = get_json(&app, "/api/status").await;
    assert_eq!(st.phase, Phase::Starting);
    assert_eq!(st.class_names, data.class_names);
}
