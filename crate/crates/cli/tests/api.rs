use std::path::Path;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use interattr::attribution::{interaction_attributions, slice_project, AttributionConfig, Selection};
use interattr::data::{load_manifest, Corpus, Span};
use interattr::encoders::{load_checkpoint, DualEncoder};
use interattr_cli::server::{router, AppState, CACHE_CAPACITY};
use serde_json::{json, Value};
use tower::ServiceExt;

fn assets() -> &'static (Corpus, DualEncoder) {
    static ASSETS: OnceLock<(Corpus, DualEncoder)> = OnceLock::new();
    ASSETS.get_or_init(|| {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo");
        let corpus = load_manifest(dir.join("corpus.json")).unwrap();
        let model = load_checkpoint(dir.join("model.ckpt"), None).unwrap().model;
        (corpus, model)
    })
}

fn state() -> Arc<AppState> {
    let (corpus, model) = assets();
    Arc::new(AppState::new(corpus.clone(), model.clone(), 2, 0))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn test_pair() -> String {
    assets().0.items.iter().find(|p| p.split == interattr::data::Split::Test).unwrap().id.clone()
}

#[tokio::test]
async fn health_reports_version_and_digest() {
    let app = router(state());
    let (status, body) = call(&app, "GET", "/api/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(body["model_digest"], assets().1.digest());
}

#[tokio::test]
async fn pairs_list_and_detail() {
    let app = router(state());
    let (status, list) = call(&app, "GET", "/api/pairs", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((list["height"].as_u64(), list["width"].as_u64()), (Some(8), Some(8)));
    assert_eq!(list["pairs"].as_array().unwrap().len(), assets().0.items.len());

    let id = test_pair();
    let (status, detail) = call(&app, "GET", &format!("/api/pairs/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let pair = assets().0.get(&id).unwrap();
    assert_eq!(detail["image"].as_array().unwrap().len(), 8);
    assert_eq!(detail["image"][0][0].as_array().unwrap().len(), pair.image.features());
    assert_eq!(detail["image"][0][1][2].as_f64().unwrap(), pair.image.patch(1)[2]);
    assert_eq!(detail["tokens"].as_array().unwrap().len(), pair.tokens.len());
    assert_eq!(detail["annotations"].as_array().unwrap().len(), pair.annotations.len());

    let (status, err) = call(&app, "GET", "/api/pairs/missing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"], "unknown_name");
}

#[tokio::test]
async fn attribute_then_slice_matches_the_library() {
    let app = router(state());
    let id = test_pair();
    let (status, res) = call(&app, "POST", "/api/attribute", Some(json!({"pair_id": id, "method": "ours", "steps": 12}))).await;
    assert_eq!(status, StatusCode::OK, "{res}");
    let (corpus, model) = assets();
    let pair = corpus.get(&id).unwrap();
    let cfg = AttributionConfig {
        integration: interattr::attribution::IntegrationConfig::new(12, Default::default()),
        ..Default::default()
    };
    let t = interaction_attributions(model, &pair.image, &pair.caption, &cfg).unwrap();
    let corners = t.corners().unwrap();
    assert_eq!(res["corners"]["f_ab"].as_f64().unwrap(), corners.f_ab);
    assert_eq!(res["completeness_residual"].as_f64().unwrap(), t.total() - corners.four_term());
    assert_eq!(res["shape"], json!([8, 8, pair.tokens.len()]));

    let span = pair.annotations[0].span;
    let tensor_id = res["tensor_id"].as_str().unwrap();
    let (status, sl) = call(
        &app,
        "POST",
        "/api/slice",
        Some(json!({"tensor_id": tensor_id, "selection": {"span": [span.start, span.end]}})),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{sl}");
    let expected = slice_project(&t, &Selection::Span(span)).unwrap();
    let values: Vec<f64> = serde_json::from_value(sl["values"].clone()).unwrap();
    assert_eq!(values, expected.data());
    assert_eq!(sl["shape"], json!([8, 8]));

    let b = pair.annotations[0].bbox;
    let (_, sl) = call(
        &app,
        "POST",
        "/api/slice",
        Some(json!({"tensor_id": tensor_id, "selection": {"bbox": [b.row0, b.col0, b.row1, b.col1]}})),
    )
    .await;
    assert_eq!(sl["shape"], json!([pair.tokens.len()]));
}

#[tokio::test]
async fn icam_and_one_step_zero_reference_slices_agree() {
    let app = router(state());
    let id = test_pair();
    let span = assets().0.get(&id).unwrap().annotations[0].span;
    let mut maps = Vec::new();
    for req in [
        json!({"pair_id": id, "method": "icam"}),
        json!({"pair_id": id, "method": "ours", "steps": 1, "zero_ref": true}),
    ] {
        let (_, res) = call(&app, "POST", "/api/attribute", Some(req)).await;
        let (_, sl) = call(
            &app,
            "POST",
            "/api/slice",
            Some(json!({"tensor_id": res["tensor_id"], "selection": {"span": [span.start, span.end]}})),
        )
        .await;
        maps.push(sl["values"].clone());
    }
    assert_eq!(maps[0], maps[1]);
}

#[tokio::test]
async fn slice_recomputes_uncached_tensors() {
    let s = state();
    let app = router(s.clone());
    let id = test_pair();
    let tensor_id = format!("{id}:itsm-out:0:right");
    let (status, sl) = call(&app, "POST", "/api/slice", Some(json!({"tensor_id": tensor_id, "selection": {"span": [0, 1]}}))).await;
    assert_eq!(status, StatusCode::OK, "{sl}");
    assert_eq!(s.cached_tensors(), 1);
}

#[tokio::test]
async fn bad_requests_get_json_errors() {
    let app = router(state());
    let id = test_pair();
    let cases = [
        ("/api/slice", json!({"tensor_id": "nonsense", "selection": {"span": [0, 1]}}), StatusCode::BAD_REQUEST),
        ("/api/slice", json!({"tensor_id": format!("{id}:ours:5:right"), "selection": {"span": [0, 99]}}), StatusCode::BAD_REQUEST),
        ("/api/slice", json!({"tensor_id": "nope:ours:5:right", "selection": {"span": [0, 1]}}), StatusCode::NOT_FOUND),
        ("/api/attribute", json!({"pair_id": id, "method": "magic"}), StatusCode::UNPROCESSABLE_ENTITY),
        ("/api/attribute", json!({"pair_id": id, "method": "ours", "steps": 0}), StatusCode::BAD_REQUEST),
        ("/api/attribute", json!({"pair_id": "nope", "method": "ours"}), StatusCode::NOT_FOUND),
    ];
    for (uri, body, expected) in cases {
        let (status, err) = call(&app, "POST", uri, Some(body.clone())).await;
        assert_eq!(status, expected, "{body}");
        assert!(err["error"].is_string() && err["message"].is_string(), "{err}");
    }
}

#[tokio::test]
async fn cache_is_bounded() {
    let s = state();
    let app = router(s.clone());
    let ids: Vec<String> = assets().0.items.iter().take(CACHE_CAPACITY + 5).map(|p| p.id.clone()).collect();
    for id in &ids {
        let (status, _) = call(&app, "POST", "/api/attribute", Some(json!({"pair_id": id, "method": "itsm-hidden"}))).await;
        assert_eq!(status, StatusCode::OK);
    }
    assert_eq!(s.cached_tensors(), CACHE_CAPACITY);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_requests_agree() {
    let app = router(state());
    let id = test_pair();
    let req = json!({"pair_id": id, "method": "ours", "steps": 6});
    let results = futures_join(&app, req, 4).await;
    assert!(results.windows(2).all(|w| w[0] == w[1]));
    assert!(results[0]["total"].is_number());
}

async fn futures_join(app: &Router, req: Value, n: usize) -> Vec<Value> {
    let handles: Vec<_> = (0..n)
        .map(|_| {
            let (app, req) = (app.clone(), req.clone());
            tokio::spawn(async move { call(&app, "POST", "/api/attribute", Some(req)).await.1 })
        })
        .collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}

#[test]
fn span_selection_round_trips() {
    let sel: Selection = serde_json::from_value(json!({"span": [1, 3]})).unwrap();
    assert_eq!(sel, Selection::Span(Span::new(1, 3)));
}
