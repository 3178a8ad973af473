#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use exloop_core::nn::{build_initial_cnn, Model};
use exloop_core::simplayer::{make_population, render_expression, PopulationMode};
use exloop_core::verify::ThresholdTable;
use exloop_core::{ExpressionLabel, Image};
use exloop_service::{router, AppState};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub struct TestServer {
    pub dir: tempfile::TempDir,
    pub state: Arc<AppState>,
    pub app: Router,
}

pub fn server(threshold: f64) -> TestServer {
    let dir = tempfile::tempdir().unwrap();
    let (spec, weights) = build_initial_cnn(3);
    let model = Model::new(spec, weights).unwrap();
    let state = AppState::with_model(dir.path(), model, ThresholdTable::new([threshold; 7]).unwrap()).unwrap();
    let app = router(state.clone());
    TestServer { dir, state, app }
}

impl TestServer {
    pub async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
        let req = match body {
            Some(b) => req.body(Body::from(b.to_string())).unwrap(),
            None => req.body(Body::empty()).unwrap(),
        };
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let json = serde_json::from_slice(&bytes).unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()));
        (status, json)
    }

    pub async fn new_session(&self) -> String {
        let (status, body) = self.call("POST", "/api/v1/sessions", Some(serde_json::json!({"mode": "general", "seed": 1}))).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        body["session_id"].as_str().unwrap().to_string()
    }
}

pub fn png_b64(image: &Image) -> String {
    STANDARD.encode(image.encode_png())
}

pub fn face(label: ExpressionLabel, frame: u64) -> Image {
    let p = &make_population(1, PopulationMode::Exaggerated, 11).unwrap()[0];
    render_expression(p, label, frame)
}
