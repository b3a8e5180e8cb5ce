mod common;

use std::time::Duration;

use axum::http::{Method, StatusCode};
use axum::Router;
use common::call;
use convqa_cli::server::{router, AppState};
use convqa_core::data::{ReformulationProvider, Vocabulary};
use convqa_core::{KnowledgeGraph, ModelBundle, PipelineConfig};
use serde_json::{json, Value};

fn toy_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default().with_seed(5);
    for (k, v) in [
        ("complex.dim", "4"),
        ("encoder.token_dim", "8"),
        ("encoder.question_dim", "8"),
        ("encoder.heads", "2"),
        ("encoder.ffn_dim", "16"),
        ("policy.hidden_dim", "8"),
        ("policy.history_dim", "4"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

/// A small cycle plus `lonely`, which only has its self-loop.
fn toy_app(ttl: Duration) -> (Router, AppState) {
    let mut kg = KnowledgeGraph::from_labeled([
        ("alpha", "likes", "beta"),
        ("beta", "likes", "gamma"),
        ("gamma", "knows", "alpha"),
        ("gamma", "knows", "delta"),
    ])
    .unwrap();
    kg.add_isolated_entity("lonely").unwrap();
    let vocab = Vocabulary::build(["who does it like", "who does it know"]);
    let bundle = ModelBundle::untrained(&toy_config(), kg, vocab).unwrap();
    let state = AppState::new(bundle, ReformulationProvider::template(2), ttl, 3);
    (router(state.clone()), state)
}

fn app() -> Router {
    toy_app(Duration::from_secs(3600)).0
}

async fn create(app: &Router, key: &str) -> String {
    let (status, body) = call(app, Method::POST, "/sessions", Some(&json!({ "topic_entity_key": key }).to_string())).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body["session_id"].as_str().unwrap().to_string()
}

async fn ask(app: &Router, id: &str, question: &str) -> (StatusCode, Value) {
    call(app, Method::POST, &format!("/sessions/{id}/ask"), Some(&json!({ "question": question }).to_string())).await
}

#[tokio::test]
async fn health_reports_ok() {
    let (status, body) = call(&app(), Method::GET, "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn self_loop_only_topic_answers_itself() {
    let app = app();
    let id = create(&app, "lonely").await;
    let (status, body) = ask(&app, &id, "who does it like").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["answer"], "lonely");
    assert_eq!(body["topic_used"], "lonely");
    assert_eq!(body["top_k"][0]["source"], "beam");
    assert!(body["trace"].as_array().unwrap().iter().all(|s| s["entity"] == "lonely"));
    // Everything else is reached only by the fallback.
    assert!(body["top_k"].as_array().unwrap()[1..].iter().all(|c| c["source"] == "fallback"));
}

#[tokio::test]
async fn full_session_lifecycle() {
    let app = app();
    let id = create(&app, "alpha").await;
    for q in ["who does it like", "who does it know"] {
        let (status, body) = ask(&app, &id, q).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        assert_eq!(body["question"], q);
        assert_eq!(body["top_k"].as_array().unwrap().len(), 3);
        let scores: Vec<f64> = body["top_k"].as_array().unwrap().iter().map(|c| c["score"].as_f64().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{scores:?}");
    }
    let (status, view) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["topic_entity"], "alpha");
    assert_eq!(view["turns"].as_array().unwrap().len(), 2);
    assert_eq!(view["turns"][1]["turn"], 2);

    let (status, _) = call(&app, Method::DELETE, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, body) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "session_not_found");
}

#[tokio::test]
async fn top_k_override_is_honoured() {
    let app = app();
    let id = create(&app, "alpha").await;
    let body = json!({ "question": "who does it like", "top_k": 5 }).to_string();
    let (status, reply) = call(&app, Method::POST, &format!("/sessions/{id}/ask"), Some(&body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(reply["top_k"].as_array().unwrap().len(), 5);
}

#[tokio::test]
async fn unknown_session_is_not_found() {
    let app = app();
    let (status, body) = ask(&app, "nope", "who does it like").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["code"], "session_not_found");
    let (status, _) = call(&app, Method::DELETE, "/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unknown_entity_lists_nearest_keys() {
    let (status, body) = call(&app(), Method::POST, "/sessions", Some(r#"{"topic_entity_key":"alpah"}"#)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"]["code"], "unknown_entity");
    assert_eq!(body["error"]["field"], "topic_entity_key");
    assert_eq!(body["error"]["suggestions"][0], "alpha");
}

#[tokio::test]
async fn malformed_bodies_name_the_field() {
    let app = app();
    let cases = [
        (r#"{"topic_entity_key": 3}"#, "topic_entity_key"),
        (r#"{"topic": "alpha"}"#, "topic"),
        ("{}", "."),
        ("not json", "."),
    ];
    for (body, field) in cases {
        let (status, reply) = call(&app, Method::POST, "/sessions", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(reply["error"]["code"], "bad_request");
        assert_eq!(reply["error"]["field"], field, "{body}: {reply}");
    }
    let id = create(&app, "alpha").await;
    let uri = format!("/sessions/{id}/ask");
    let (status, reply) = call(&app, Method::POST, &uri, Some(r#"{"question": ["x"]}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(reply["error"]["field"], "question");
    let (status, reply) = call(&app, Method::POST, &uri, Some(r#"{"question": "   "}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(reply["error"]["field"], "question");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_sessions_keep_independent_histories() {
    let app = app();
    let (a, b) = (create(&app, "alpha").await, create(&app, "gamma").await);
    const QA: [&str; 3] = ["who does it like", "who does it like", "who does it know"];
    const QB: [&str; 2] = ["who does it know", "who does it know"];
    let run = |id: String, qs: &'static [&'static str]| {
        let app = app.clone();
        async move {
            for q in qs {
                assert_eq!(ask(&app, &id, q).await.0, StatusCode::OK);
            }
        }
    };
    tokio::join!(run(a.clone(), &QA), run(b.clone(), &QB));

    let (_, va) = call(&app, Method::GET, &format!("/sessions/{a}"), None).await;
    let (_, vb) = call(&app, Method::GET, &format!("/sessions/{b}"), None).await;
    let questions = |v: &Value| -> Vec<String> {
        v["turns"].as_array().unwrap().iter().map(|t| t["question"].as_str().unwrap().to_string()).collect()
    };
    assert_eq!(questions(&va), QA);
    assert_eq!(questions(&vb), QB);
    assert_eq!(va["turns"][0]["topic_used"], "alpha");
    assert_eq!(vb["turns"][0]["topic_used"], "gamma");
}

#[tokio::test]
async fn idle_sessions_expire() {
    let (app, state) = toy_app(Duration::from_millis(20));
    let id = create(&app, "alpha").await;
    assert_eq!(state.session_count(), 1);
    tokio::time::sleep(Duration::from_millis(60)).await;
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(state.session_count(), 0);
}
