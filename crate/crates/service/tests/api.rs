use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use planlens_core::model::CostModel;
use planlens_core::workload::{generate_workload, Complexity, Workload};
use planlens_service::{router, AppState, CACHE_HEADER};
use serde_json::{json, Value};
use tower::ServiceExt;

fn workload() -> Workload {
    generate_workload(11, 6, Complexity::default()).unwrap()
}

fn app() -> (Router, Workload) {
    let w = workload();
    let models = BTreeMap::from([("m".to_string(), CostModel::with_seed(3))]);
    let state = AppState::new(vec![w.clone()], models, 16).unwrap();
    (router(Arc::new(state)), w)
}

struct Reply {
    status: StatusCode,
    cache: Option<String>,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap()
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> Reply {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let cache = res
        .headers()
        .get(CACHE_HEADER)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        cache,
        bytes,
    }
}

#[tokio::test]
async fn lists_workloads_and_plans() {
    let (app, w) = app();
    let r = call(&app, "GET", "/api/workloads", None).await;
    assert_eq!(r.status, StatusCode::OK);
    let list = r.json();
    assert_eq!(list[0]["workload_id"], json!(w.workload_id));
    assert_eq!(list[0]["plan_count"], json!(6));
    assert!(list[0]["params"]["operators"]["Hash Join"].is_object());

    let r = call(
        &app,
        "GET",
        &format!("/api/workloads/{}/plans", w.workload_id),
        None,
    )
    .await;
    let plans = r.json();
    assert_eq!(plans.as_array().unwrap().len(), 6);
    assert_eq!(plans[0]["plan_id"], json!(w.plans[0].plan_id()));
    assert_eq!(
        plans[0]["operator_count"],
        json!(w.plans[0].operator_count())
    );

    let r = call(&app, "GET", "/api/workloads/nope/plans", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.json()["error"], "workload_not_found");
}

#[tokio::test]
async fn plan_document_round_trips() {
    let (app, w) = app();
    let r = call(
        &app,
        "GET",
        &format!("/api/plans/{}", w.plans[2].plan_id()),
        None,
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    let plan = planlens_core::plan::parse_plan(std::str::from_utf8(&r.bytes).unwrap()).unwrap();
    assert_eq!(plan, w.plans[2]);
}

#[tokio::test]
async fn unknown_plan_is_404_with_code() {
    let (app, _) = app();
    let r = call(&app, "GET", "/api/plans/missing", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.json()["error"], "plan_not_found");
    let r = call(
        &app,
        "POST",
        "/api/models/m/predict",
        Some(json!({"plan_id": "missing"})),
    )
    .await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.json()["error"], "plan_not_found");
    let r = call(
        &app,
        "POST",
        "/api/models/zz/predict",
        Some(json!({"plan_id": "missing"})),
    )
    .await;
    assert_eq!(r.json()["error"], "model_not_found");
}

#[tokio::test]
async fn predict_reports_q_error() {
    let (app, w) = app();
    let plan = &w.plans[0];
    let r = call(
        &app,
        "POST",
        "/api/models/m/predict",
        Some(json!({"plan_id": plan.plan_id()})),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    let pred = v["predicted_ms"].as_f64().unwrap();
    let actual = v["actual_ms"].as_f64().unwrap();
    assert_eq!(actual, plan.actual_total_runtime_ms());
    assert_eq!(
        pred,
        CostModel::with_seed(3)
            .predict(plan, None)
            .unwrap()
            .predicted_runtime_ms
    );
    assert!((v["q_error"].as_f64().unwrap() - (pred / actual).max(actual / pred)).abs() < 1e-12);
}

#[tokio::test]
async fn unknown_algorithm_lists_valid_names() {
    let (app, w) = app();
    let body = json!({"plan_id": w.plans[0].plan_id(), "algorithm": "magic"});
    let r = call(&app, "POST", "/api/models/m/explain", Some(body)).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let v = r.json();
    assert_eq!(v["error"], "unknown_algorithm");
    assert_eq!(
        v["valid_algorithms"],
        json!([
            "sensitivity",
            "guided_backprop",
            "gnn_explainer",
            "diff_mask"
        ])
    );
}

#[tokio::test]
async fn malformed_requests_are_400() {
    let (app, w) = app();
    let r = call(
        &app,
        "POST",
        "/api/models/m/predict",
        Some(json!({"plan": 1})),
    )
    .await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["error"], "invalid_request");
    let body = json!({"plan_id": w.plans[0].plan_id(), "algorithm": "gnn_explainer", "config": {"lr": -1.0}});
    let r = call(&app, "POST", "/api/models/m/explain", Some(body)).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["error"], "invalid_config");
}

#[tokio::test]
async fn repeated_explain_is_served_from_cache_byte_identical() {
    let (app, w) = app();
    let body = json!({
        "plan_id": w.plans[1].plan_id(),
        "algorithm": "gnn_explainer",
        "config": {"steps": 30}
    });
    let first = call(&app, "POST", "/api/models/m/explain", Some(body.clone())).await;
    assert_eq!(first.status, StatusCode::OK);
    assert_eq!(first.cache.as_deref(), Some("miss"));
    let second = call(&app, "POST", "/api/models/m/explain", Some(body)).await;
    assert_eq!(second.cache.as_deref(), Some("hit"));
    assert_eq!(first.bytes, second.bytes);

    let v = first.json();
    assert_eq!(v["explanation"]["algorithm"], "gnn_explainer");
    assert_eq!(
        v["explanation"]["diagnostics"]["loss_curve"]
            .as_array()
            .unwrap()
            .len(),
        30
    );
    let seed = v["explanation"]["diagnostics"]["seed"].as_u64().unwrap();
    assert_eq!(
        seed,
        planlens_core::settings::default_seed(
            w.plans[1].plan_id(),
            planlens_core::explain::Algorithm::GnnExplainer
        )
    );
    let fractions: f64 = v["report"]["runtime_fractions"]
        .as_object()
        .unwrap()
        .values()
        .map(|x| x.as_f64().unwrap())
        .sum();
    assert!((fractions - 1.0).abs() < 1e-9);
}

#[tokio::test]
async fn every_algorithm_explains_every_node() {
    let (app, w) = app();
    let plan = &w.plans[3];
    for alg in [
        "sensitivity",
        "guided_backprop",
        "gnn_explainer",
        "diff_mask",
    ] {
        let body = json!({"plan_id": plan.plan_id(), "algorithm": alg, "config": {"steps": 5}});
        let r = call(&app, "POST", "/api/models/m/explain", Some(body)).await;
        assert_eq!(r.status, StatusCode::OK, "{alg}");
        let v = r.json();
        assert_eq!(
            v["explanation"]["scores"].as_array().unwrap().len(),
            plan.len()
        );
        assert_eq!(v["report"]["ranking"].as_array().unwrap().len(), plan.len());
    }
}

#[tokio::test]
async fn lists_models_and_algorithms() {
    let (app, _) = app();
    let v = call(&app, "GET", "/api/models", None).await.json();
    assert_eq!(v[0]["model_id"], "m");
    assert_eq!(v[0]["hyperparams"]["hidden_width"], 32);
    assert!(v[0]["training"].is_null());
    let v = call(&app, "GET", "/api/algorithms", None).await.json();
    assert_eq!(v.as_array().unwrap().len(), 4);
}

#[tokio::test]
async fn loads_state_from_disk_skipping_history_files() {
    let dir = tempfile::tempdir().unwrap();
    let wdir = dir.path().join("workloads");
    let mdir = dir.path().join("models");
    std::fs::create_dir_all(&mdir).unwrap();
    let w = workload();
    w.save(&wdir.join("w1")).unwrap();
    CostModel::with_seed(1)
        .save(&mdir.join("small.json"))
        .unwrap();
    std::fs::write(mdir.join("small.history.json"), "[]").unwrap();
    std::fs::write(mdir.join("notes.txt"), "ignored").unwrap();

    let state = AppState::load(&wdir, &mdir, 8).unwrap();
    assert_eq!(
        state.models().map(|(k, _)| k.as_str()).collect::<Vec<_>>(),
        vec!["small"]
    );
    assert_eq!(state.workloads().count(), 1);
    // A single workload directory works too.
    let state = AppState::load(&wdir.join("w1"), &mdir, 8).unwrap();
    assert!(state.plan_graph(w.plans[0].plan_id()).is_some());
}

#[tokio::test]
async fn duplicate_plan_ids_are_rejected() {
    let w = workload();
    let mut other = w.clone();
    other.workload_id = "copy".into();
    assert!(AppState::new(vec![w, other], BTreeMap::new(), 4).is_err());
}
