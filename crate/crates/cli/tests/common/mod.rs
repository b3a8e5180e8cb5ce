//! Shared helpers: tiny configs, the CLI binary and an in-process router.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

/// Small enough that the whole pipeline trains in a few seconds.
pub const TINY: &str = "\
seed = 11
synth.entities = 40
synth.n_conversations = 30
complex.dim = 8
complex.epochs = 5
encoder.token_dim = 8
encoder.question_dim = 8
encoder.heads = 2
encoder.ffn_dim = 16
encoder.max_len = 16
policy.hidden_dim = 16
policy.history_dim = 8
teacher.epochs = 2
teacher.rollouts = 4
student.epochs = 2
student.rollouts = 4
selector.hidden_dim = 8
selector.epochs = 3
";

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let p = dir.join("run.conf");
    std::fs::write(&p, text).unwrap();
    p
}

pub fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.conf")
}

/// Runs the binary with `--config` and `--out` set.
pub fn convqa(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convqa"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn convqa")
}

pub fn expect_ok(out: &Output, what: &str) -> String {
    assert!(
        out.status.success(),
        "{what} failed ({}):\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Every training stage in order.
pub fn train_all(config: &Path, out: &Path) {
    for cmd in ["synth", "train-complex", "train-teacher", "pretrain-selector", "train-student"] {
        expect_ok(&convqa(config, out, &[cmd]), cmd);
    }
}

/// Sends one request and decodes the JSON reply (`Null` when empty).
pub async fn call(app: &Router, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}
