use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use ifam_cli::service::{router, AppState};
use ifam_cli::{pipeline, pngio};
use ifam_core::databench::{generate, DatasetSpec, MetricsReport, Split};
use ifam_core::interventions::{InterventionPlan, LooReport, ThresholdTable};
use ifam_core::model::{Architecture, IfamConfig, IfamModel, Prediction};
use ifam_core::vit::ModelConfig;
use ifam_core::Rng;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

fn state(architecture: Architecture, plans: Option<std::path::PathBuf>) -> Arc<AppState> {
    let data = generate(&DatasetSpec {
        n_classes: 2,
        n_train: 12,
        n_val: 6,
        n_test: 6,
        image_size: 16,
        margin: 2,
        min_extent: 7,
        max_extent: 10,
        seed: 4,
        ..DatasetSpec::default()
    })
    .unwrap();
    let cfg = IfamConfig {
        model: ModelConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 16,
            n_heads: 2,
            n_layers: 1,
            mlp_ratio: 2,
            n_registers: 1,
            n_classes: 2,
            n_parts: 3,
        },
        architecture,
        ..IfamConfig::default()
    };
    let model = IfamModel::new(cfg, &mut Rng::new(8)).unwrap();
    AppState::new(model, data, plans).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = call(app, "GET", uri, None).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn encode(plan: &InterventionPlan) -> String {
    serde_json::to_string(plan)
        .unwrap()
        .bytes()
        .map(|b| match b {
            b'a'..=b'z' | b'0'..=b'9' | b'_' | b'.' | b'-' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

#[tokio::test]
async fn model_and_sample_listing() {
    let st = state(Architecture::TwoStage, None);
    let app = router(st.clone(), None);
    let (s, v) = get_json(&app, "/api/model").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["n_parts"], 3);
    assert_eq!(v["class_names"].as_array().unwrap().len(), 2);
    assert_eq!(v["palette"][1], json!(pngio::PART_PALETTE[1]));

    let (s, v) = get_json(&app, "/api/samples?split=val&page=1&page_size=4").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["total"], 6);
    let items = v["samples"].as_array().unwrap();
    assert_eq!(items.len(), 2);
    assert_eq!(items[0]["id"], 4);
    assert_eq!(items[0]["group"], st.data.val[4].group);

    assert_eq!(get_json(&app, "/api/samples?split=nope").await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn images_and_part_maps() {
    let st = state(Architecture::TwoStage, None);
    let app = router(st.clone(), None);
    let (s, bytes) = call(&app, "GET", "/api/sample/2/image?split=test-mixed-rand", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(pngio::decode_rgb(&bytes).unwrap(), st.data.test_mixed_rand[2].image);

    let (s, bytes) = call(&app, "GET", "/api/sample/2/parts", None).await;
    assert_eq!(s, StatusCode::OK);
    let (px, _, w, _) = pngio::decode_indexed(&bytes).unwrap();
    let pred = st.model.predict(&st.data.test_iid[2].image, &InterventionPlan::empty()).unwrap();
    let parts = pred.parts.unwrap();
    assert_eq!(w, 16);
    assert_eq!(px[5 * 16 + 9] as usize, parts[4 + 2]);

    assert_eq!(call(&app, "GET", "/api/sample/99/image", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn predictions_match_the_library() {
    let st = state(Architecture::TwoStage, None);
    let app = router(st.clone(), None);
    let table = st.model.calibrate(&st.data.train, 90.0).unwrap();
    for plan in [InterventionPlan::empty(), InterventionPlan::dropping(&[2]).with_table(&table)] {
        for id in 0..3 {
            let uri = format!("/api/sample/{id}/predict?split=val&plan={}", encode(&plan));
            let (s, body) = call(&app, "GET", &uri, None).await;
            assert_eq!(s, StatusCode::OK);
            let got: Prediction = serde_json::from_slice(&body).unwrap();
            let want = st.model.predict(&st.data.val[id].image, &plan).unwrap();
            assert_eq!(got, want);
            let bits = |p: &Prediction| p.logits.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&got), bits(&want));
            // GETs are pure: the same request yields the same bytes.
            assert_eq!(call(&app, "GET", &uri, None).await.1, body);
        }
    }
    let bad = encode(&InterventionPlan::dropping(&[4]));
    assert_eq!(call(&app, "GET", &format!("/api/sample/0/predict?plan={bad}"), None).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let all = encode(&InterventionPlan::dropping(&[1, 2, 3]));
    assert_eq!(call(&app, "GET", &format!("/api/sample/0/predict?plan={all}"), None).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "GET", "/api/sample/0/predict?plan=%7Bnot", None).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "GET", "/api/sample/6/predict?split=val", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn evaluate_is_idempotent_and_matches_pipeline() {
    let st = state(Architecture::TwoStage, None);
    let app = router(st.clone(), None);
    let plan = InterventionPlan::dropping(&[3]);
    let body = json!({ "split": "test-mixed-same", "plan": plan });
    let (s, a) = call(&app, "POST", "/api/evaluate", Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK);
    let (_, b) = call(&app, "POST", "/api/evaluate", Some(body)).await;
    assert_eq!(a, b);
    let report: MetricsReport = serde_json::from_slice(&a).unwrap();
    assert_eq!(report, pipeline::evaluate(&st.model, &st.data, Split::TestMixedSame, &plan).unwrap());

    let bad = json!({ "split": "val", "plan": { "dropped_parts": [0] } });
    assert_eq!(call(&app, "POST", "/api/evaluate", Some(bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let (_, status) = get_json(&app, "/api/status").await;
    assert_eq!(status["active"], Value::Null);
    assert_eq!(status["completed"], 2);
    assert_eq!(status["last"]["kind"], "evaluate");
}

#[tokio::test]
async fn loo_and_calibration() {
    let st = state(Architecture::TwoStage, None);
    let app = router(st.clone(), None);
    let (s, body) = call(&app, "POST", "/api/plan/loo", Some(json!({ "split": "val", "metric": "aa" }))).await;
    assert_eq!(s, StatusCode::OK);
    let report: LooReport = serde_json::from_slice(&body).unwrap();
    assert_eq!(report.table().len(), 4);
    assert_eq!(
        report,
        pipeline::loo(&st.model, &st.data, Split::Val, pipeline::Metric::Aa, &InterventionPlan::empty(), false).unwrap()
    );
    // The suggested plan replays to the metric its row reports.
    let replay = pipeline::evaluate(&st.model, &st.data, Split::Val, &report.plan).unwrap();
    let row = report
        .table()
        .iter()
        .find(|r| r.dropped == report.plan.dropped_parts.first().copied())
        .unwrap();
    assert_eq!(replay.aa, row.metric);

    let (s, body) = call(&app, "POST", "/api/plan/calibrate", Some(json!({ "q": 99 }))).await;
    assert_eq!(s, StatusCode::OK);
    let table: ThresholdTable = serde_json::from_slice(&body).unwrap();
    assert_eq!(table, st.model.calibrate(&st.data.train, 99.0).unwrap());
    assert_eq!(call(&app, "POST", "/api/plan/calibrate", Some(json!({ "q": 0 }))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "POST", "/api/plan/calibrate", Some(json!({ "q": 99, "x": 1 }))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn one_job_at_a_time() {
    let st = state(Architecture::TwoStage, None);
    let app = router(st.clone(), None);
    let guard = st.begin_job("evaluate").unwrap();
    let (_, status) = get_json(&app, "/api/status").await;
    assert_eq!(status["active"], "evaluate");
    for (uri, body) in [
        ("/api/evaluate", json!({ "split": "val" })),
        ("/api/plan/loo", json!({ "split": "val", "metric": "wga" })),
        ("/api/plan/calibrate", json!({ "q": 97 })),
    ] {
        assert_eq!(call(&app, "POST", uri, Some(body)).await.0, StatusCode::CONFLICT);
    }
    // Reads are unaffected.
    assert_eq!(call(&app, "GET", "/api/sample/0/predict", None).await.0, StatusCode::OK);
    drop(guard);
    assert_eq!(call(&app, "POST", "/api/evaluate", Some(json!({ "split": "val" }))).await.0, StatusCode::OK);
}

#[tokio::test]
async fn named_plans_persist() {
    let dir = TempDir::new().unwrap();
    let st = state(Architecture::TwoStage, Some(dir.path().to_path_buf()));
    let app = router(st.clone(), None);
    let plan = InterventionPlan::dropping(&[1]);
    let (s, _) = call(&app, "PUT", "/api/plans/no-part-1", Some(serde_json::to_value(&plan).unwrap())).await;
    assert_eq!(s, StatusCode::OK);
    assert!(dir.path().join("no-part-1.json").exists());
    let (_, names) = get_json(&app, "/api/plans").await;
    assert_eq!(names, json!(["no-part-1"]));
    let (_, stored) = get_json(&app, "/api/plans/no-part-1").await;
    assert_eq!(serde_json::from_value::<InterventionPlan>(stored).unwrap(), plan);

    let (_, by_name) = call(&app, "GET", "/api/sample/1/predict?plan=no-part-1", None).await;
    let (_, inline) = call(&app, "GET", &format!("/api/sample/1/predict?plan={}", encode(&plan)), None).await;
    assert_eq!(by_name, inline);

    assert_eq!(get_json(&app, "/api/plans/missing").await.0, StatusCode::NOT_FOUND);
    let bad = json!({ "dropped_parts": [9] });
    assert_eq!(call(&app, "PUT", "/api/plans/x", Some(bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "PUT", "/api/plans/..%2Fx", Some(json!({}))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn dense_model_serves_predictions_only() {
    let st = state(Architecture::Dense, None);
    let app = router(st.clone(), None);
    let (s, body) = call(&app, "GET", "/api/sample/0/predict", None).await;
    assert_eq!(s, StatusCode::OK);
    let p: Prediction = serde_json::from_slice(&body).unwrap();
    assert!(p.parts.is_none());
    assert_eq!(call(&app, "GET", "/api/sample/0/parts", None).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let plan = encode(&InterventionPlan::dropping(&[1]));
    assert_eq!(call(&app, "GET", &format!("/api/sample/0/predict?plan={plan}"), None).await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn static_bundle_is_served() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>console</html>").unwrap();
    let app = router(state(Architecture::TwoStage, None), Some(dir.path().to_path_buf()));
    let (s, body) = call(&app, "GET", "/index.html", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"<html>console</html>");
    assert_eq!(get_json(&app, "/api/model").await.0, StatusCode::OK);
}
