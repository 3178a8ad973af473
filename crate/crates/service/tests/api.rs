mod common;

use std::time::{Duration, Instant};

use axum::http::StatusCode;
use common::{face, png_b64, server};
use exloop_core::{ExpressionLabel, Image};
use serde_json::json;

#[tokio::test]
async fn health_and_unknown_routes() {
    let s = server(0.4);
    assert_eq!(s.call("GET", "/healthz", None).await.0, StatusCode::OK);
    let (status, body) = s.call("POST", "/api/v1/sessions/nope/frames", Some(json!({"image_b64": png_b64(&face(ExpressionLabel::Happy, 0)), "client_ts": 1.0}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "not_found");
}

#[tokio::test]
async fn session_lifecycle() {
    let s = server(0.4);
    let (status, body) = s.call("POST", "/api/v1/sessions", Some(json!({"mode": "general"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((body["lives"].as_u64(), body["score"].as_u64()), (Some(5), Some(0)));
    assert!(body["target"].is_string());
    assert_eq!(body["deadline"], 8.0);
    let id = body["session_id"].as_str().unwrap();

    let (status, r) = s
        .call("POST", &format!("/api/v1/sessions/{id}/frames"), Some(json!({"image_b64": png_b64(&face(ExpressionLabel::Sad, 1)), "client_ts": 1.0})))
        .await;
    assert_eq!(status, StatusCode::OK, "{r}");
    assert_eq!(r["probabilities"].as_array().unwrap().len(), 7);
    assert_eq!(r["throttled"], false);

    let (_, r) = s
        .call("POST", &format!("/api/v1/sessions/{id}/frames"), Some(json!({"image_b64": png_b64(&face(ExpressionLabel::Sad, 2)), "client_ts": 1.4})))
        .await;
    assert_eq!(r["throttled"], true);

    for k in 1..=5 {
        s.call("POST", &format!("/api/v1/sessions/{id}/tick"), Some(json!({"now": 100.0 * k as f64}))).await;
    }
    let (_, state) = s.call("GET", &format!("/api/v1/sessions/{id}"), None).await;
    assert_eq!(state["game_over"], true);
    let (status, body) = s
        .call("POST", &format!("/api/v1/sessions/{id}/frames"), Some(json!({"image_b64": png_b64(&face(ExpressionLabel::Sad, 3)), "client_ts": 600.0})))
        .await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "conflict");
}

#[tokio::test]
async fn malformed_frames_leave_the_session_alone() {
    let s = server(0.4);
    let id = s.new_session().await;
    let (_, before) = s.call("GET", &format!("/api/v1/sessions/{id}"), None).await;
    for bad in ["!!!not base64", "aGVsbG8="] {
        let (status, body) = s
            .call("POST", &format!("/api/v1/sessions/{id}/frames"), Some(json!({"image_b64": bad, "client_ts": 50.0})))
            .await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(body["code"], "bad_request");
    }
    let (_, after) = s.call("GET", &format!("/api/v1/sessions/{id}"), None).await;
    assert_eq!(before, after);
}

#[tokio::test]
async fn only_matched_frames_are_harvested() {
    // An untrained network is close to uniform (≈0.14), so 0.99 never matches
    // and 0.05 always does.
    let never = server(0.99);
    let id = never.new_session().await;
    for t in 1..=4 {
        never
            .call("POST", &format!("/api/v1/sessions/{id}/frames"), Some(json!({"image_b64": png_b64(&face(ExpressionLabel::Fear, t)), "client_ts": t as f64})))
            .await;
    }
    let (_, stats) = never.call("GET", "/api/v1/dataset/stats", None).await;
    assert_eq!(stats["total"], 0);
    assert!(!never.dir.path().join("images").exists());

    let always = server(0.05);
    let id = always.new_session().await;
    let (_, r) = always
        .call("POST", &format!("/api/v1/sessions/{id}/frames"), Some(json!({"image_b64": png_b64(&face(ExpressionLabel::Fear, 9)), "client_ts": 1.0})))
        .await;
    assert_eq!(r["matched"], true);
    assert_eq!(r["score"], 1);
    let (_, stats) = always.call("GET", "/api/v1/dataset/stats", None).await;
    assert_eq!(stats["total"], 1);
    assert!(always.dir.path().join("harvest.json").exists());
}

#[tokio::test]
async fn template_registration_and_recapture() {
    let s = server(0.4);
    let mut images: Vec<String> = ExpressionLabel::ALL.iter().map(|&l| png_b64(&face(l, 0))).collect();
    let (status, body) = s.call("POST", "/api/v1/sessions", Some(json!({"mode": "customized", "user_id": "ann"}))).await;
    assert_eq!(status, StatusCode::PRECONDITION_FAILED, "{body}");

    images[2] = png_b64(&Image::filled(0.5));
    images[5] = png_b64(&Image::filled(0.9));
    let (status, body) = s.call("POST", "/api/v1/users/ann/templates", Some(json!({"images": images}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["code"], "recapture_needed");
    assert_eq!(body["detail"]["failed_indices"], json!([2, 5]));

    let (status, _) = s.call("POST", "/api/v1/users/ann/templates", Some(json!({"images": images[..6]}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    images[2] = png_b64(&face(ExpressionLabel::Fear, 0));
    images[5] = png_b64(&face(ExpressionLabel::Sad, 0));
    let (status, body) = s.call("POST", "/api/v1/users/ann/templates", Some(json!({"images": images}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["dim"], 38);

    let (status, body) = s.call("POST", "/api/v1/sessions", Some(json!({"mode": "customized", "user_id": "ann", "seed": 4}))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let id = body["session_id"].as_str().unwrap();
    let (status, r) = s
        .call("POST", &format!("/api/v1/sessions/{id}/frames"), Some(json!({"image_b64": images[3], "client_ts": 1.0})))
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(r["matched"], body["target"] == "Happy");
}

async fn wait_for_job(s: &common::TestServer, job: &str) -> (Vec<String>, serde_json::Value) {
    let deadline = Instant::now() + Duration::from_secs(120);
    let mut seen = Vec::new();
    loop {
        let (status, body) = s.call("GET", &format!("/api/v1/train/{job}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let st = body["status"].as_str().unwrap().to_string();
        if seen.last() != Some(&st) {
            seen.push(st.clone());
        }
        if st == "done" || st == "failed" {
            return (seen, body);
        }
        assert!(Instant::now() < deadline, "job {job} stuck in {st}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test]
async fn training_jobs() {
    let s = server(0.05);
    let id = s.new_session().await;
    for t in 1..=6 {
        s.call("POST", &format!("/api/v1/sessions/{id}/frames"), Some(json!({"image_b64": png_b64(&face(ExpressionLabel::ALL[t % 7], t as u64)), "client_ts": t as f64})))
            .await;
    }
    let (_, models) = s.call("GET", "/api/v1/models", None).await;
    let base = models["serving"].as_str().unwrap().to_string();

    let (status, _) = s.call("POST", "/api/v1/train", Some(json!({"dataset_id": "nope", "base_model_id": base, "freeze_prefix": 2}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = s.call("POST", "/api/v1/train", Some(json!({"dataset_id": "harvest", "base_model_id": "nope", "freeze_prefix": 2}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let req = json!({"dataset_id": "harvest", "base_model_id": base, "freeze_prefix": 2, "epochs": 1, "activate": true});
    let (_, a) = s.call("POST", "/api/v1/train", Some(req.clone())).await;
    let (_, b) = s.call("POST", "/api/v1/train", Some(req)).await;
    assert_ne!(a["job_id"], b["job_id"]);
    for job in [&a, &b] {
        let (seen, body) = wait_for_job(&s, job["job_id"].as_str().unwrap()).await;
        let order = ["queued", "running", "done"];
        let mut last = 0;
        for st in &seen {
            let pos = order.iter().position(|o| o == st).unwrap_or_else(|| panic!("{body}"));
            assert!(pos >= last);
            last = pos;
        }
        assert_eq!(body["status"], "done");
        let model = body["result_model_id"].as_str().unwrap();
        assert!(s.dir.path().join("models").join(format!("{model}.expw")).exists());
    }
    let (_, models) = s.call("GET", "/api/v1/models", None).await;
    assert_ne!(models["serving"].as_str().unwrap(), base);

    std::fs::write(s.dir.path().join("datasets/broken.json"), "{ not json").unwrap();
    let (_, job) = s.call("POST", "/api/v1/train", Some(json!({"dataset_id": "broken", "base_model_id": base, "freeze_prefix": 2}))).await;
    let (_, body) = wait_for_job(&s, job["job_id"].as_str().unwrap()).await;
    assert_eq!(body["status"], "failed");
    assert!(!body["error"].as_str().unwrap().is_empty());
}
