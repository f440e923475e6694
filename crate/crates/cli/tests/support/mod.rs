#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt;

use forumint_cli::server::{router, AppState};
use forumint_core::backend::ReplayBackend;
use forumint_core::corpus::{ingest, IngestMode};
use forumint_core::eval::{AdjudicationRecord, AnnotationRecord, MergedDecision};
use forumint_core::pipeline::{run, RunConfig};
use forumint_core::review::ReviewService;
use forumint_core::schema::default_schema;
use forumint_core::store::Store;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Runs the binary with a clean environment and working directory, so no
/// ambient config or variables leak in.
pub fn forumint(args: &[&str]) -> Output {
    forumint_env(args, &[])
}

pub fn forumint_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let cwd = tempfile::tempdir().unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_forumint"));
    cmd.args(args).current_dir(cwd.path());
    for (k, _) in std::env::vars() {
        if k.starts_with("FORUMINT_") {
            cmd.env_remove(k);
        }
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

/// Demo corpus ingested and summarized by replay.
pub fn demo_store(dir: &Path) -> Store {
    let store = Store::init(dir).unwrap();
    let (corpus, _) = ingest(&fixtures().join("demo/corpus.jsonl"), IngestMode::Strict).unwrap();
    store.import_corpus(&corpus).unwrap();
    let backend = ReplayBackend::from_file(&fixtures().join("demo/transcripts.jsonl")).unwrap();
    let report = run(&corpus, &default_schema(), &backend, &store, &RunConfig::default()).unwrap();
    assert_eq!(report.quarantined, 0);
    store
}

/// Store holding only previously merged decisions.
pub fn merged_store(dir: &Path) -> Store {
    let store = Store::init(dir).unwrap();
    for m in read_jsonl::<MergedDecision>(&fixtures().join("paper/merged.jsonl")) {
        store.append_merged(&m).unwrap();
    }
    store
}

/// Store holding two coders' annotations plus adjudications.
pub fn annotated_store(dir: &Path) -> Store {
    let store = Store::init(dir).unwrap();
    for f in ["coder_a.jsonl", "coder_b.jsonl"] {
        for a in read_jsonl::<AnnotationRecord>(&fixtures().join("paper").join(f)) {
            store.append_annotation(&a).unwrap();
        }
    }
    for a in read_jsonl::<AdjudicationRecord>(&fixtures().join("paper/adjudications.jsonl")) {
        store.append_adjudication(&a).unwrap();
    }
    store
}

pub fn app(store: Arc<Store>, coders: Option<&[&str]>) -> Router {
    let allow = coders.map(|c| c.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>());
    let service = ReviewService::new(store, default_schema(), allow).unwrap();
    router(AppState {
        service: Arc::new(service),
        static_dir: None,
    })
}

pub async fn call(
    app: &Router,
    method: &str,
    uri: &str,
    coder: Option<&str>,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(c) = coder {
        req = req.header("X-Coder-Id", c);
    }
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

/// A complete annotation body: every variable judged `1` unless listed in
/// `disagree`, presence true for both conditional variables.
pub fn annotation(unit_id: &str, disagree: &[&str]) -> Value {
    let judgments: serde_json::Map<String, Value> = default_schema()
        .variables
        .iter()
        .map(|v| {
            let bit = if disagree.contains(&v.name.as_str()) { 0 } else { 1 };
            (v.name.clone(), json!(bit))
        })
        .collect();
    json!({
        "unit_id": unit_id,
        "judgments": judgments,
        "summary_judgment": if disagree.contains(&"summary") { 0 } else { 1 },
        "presence": { "targeted_technologies": true, "industries": true },
    })
}

/// Sorts object keys recursively so two documents compare by content.
pub fn canonical(v: &Value) -> String {
    // serde_json's default map is ordered by key.
    serde_json::to_string(&serde_json::from_str::<Value>(&v.to_string()).unwrap()).unwrap()
}
