use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use fwprobe_core::forge::{load_dataset, serialize_dataset, Dataset, SemanticSentence, Subset};
use fwprobe_core::service::ProbeService;
use fwprobe_server::{api_router, ApiState};
use http_body_util::BodyExt;
use jsonschema::JSONSchema;
use serde_json::{json, Value};
use tower::ServiceExt;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn schema(name: &str) -> JSONSchema {
    let text = std::fs::read_to_string(root().join(format!("schemas/api/{name}.json"))).unwrap();
    let value: Value = serde_json::from_str(&text).unwrap();
    JSONSchema::compile(&value).unwrap_or_else(|e| panic!("schema {name}: {e}"))
}

struct Api {
    router: Router,
    service: Arc<ProbeService>,
    _dir: tempfile::TempDir,
}

impl Api {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let service = Arc::new(ProbeService::open(dir.path()).unwrap());
        let router = api_router(ApiState {
            service: Arc::clone(&service),
            default_endpoint: "builtin:mock".into(),
        });
        Api { router, service, _dir: dir }
    }

    /// Sends a request and checks the body against `schema_name`.
    async fn call(&self, method: &str, uri: &str, body: Option<Value>, schema_name: &str) -> (StatusCode, Value) {
        let req = Request::builder().method(method).uri(uri);
        let req = match body {
            Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
            None => req.body(Body::empty()),
        }
        .unwrap();
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value: Value = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{uri}: {e}"));
        let compiled = schema(schema_name);
        if let Err(errors) = compiled.validate(&value) {
            let msgs: Vec<String> = errors.map(|e| format!("{} at {}", e, e.instance_path)).collect();
            panic!("{method} {uri} does not match {schema_name}: {msgs:?}");
        }
        (status, value)
    }

    async fn wait(&self, run_id: &str) {
        let svc = Arc::clone(&self.service);
        let id = run_id.to_string();
        tokio::task::spawn_blocking(move || svc.wait(&id).unwrap()).await.unwrap();
    }
}

#[tokio::test]
async fn empty_store_lists_nothing() {
    let api = Api::new();
    let (status, runs) = api.call("GET", "/runs", None, "run_list").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(runs, json!({ "runs": [] }));
    let (_, datasets) = api.call("GET", "/datasets", None, "dataset_list").await;
    assert_eq!(datasets, json!({ "datasets": [] }));
}

#[tokio::test]
async fn full_run_over_the_api() {
    let api = Api::new();
    let dataset = load_dataset(&root().join("data/datasets/semantic.jsonl")).unwrap();
    let entry = api.service.register_dataset(&dataset).unwrap();

    let (status, started) = api
        .call("POST", "/runs", Some(json!({ "datasets": [entry.dataset_id] })), "start_run")
        .await;
    assert_eq!(status, StatusCode::CREATED);
    let run_id = started["run"]["run_id"].as_str().unwrap().to_string();
    assert_eq!(run_id, "run-0001");
    api.wait(&run_id).await;

    let (_, run) = api.call("GET", &format!("/runs/{run_id}"), None, "run").await;
    assert_eq!(run["status"], "complete");
    assert_eq!(run["progress"], json!({ "done": 2780, "total": 2780 }));
    let (_, runs) = api.call("GET", "/runs", None, "run_list").await;
    assert_eq!(runs["runs"].as_array().unwrap().len(), 1);

    let (_, report) = api.call("GET", &format!("/runs/{run_id}/report/semantic"), None, "report").await;
    let stored = api.service.get_report(&run_id, "semantic").unwrap();
    assert_eq!(report, serde_json::to_value(&stored).unwrap());
    let (_, by_id) = api
        .call("GET", &format!("/runs/{run_id}/report/{}", entry.dataset_id), None, "report")
        .await;
    assert_eq!(by_id, report);

    let (_, page) = api
        .call("GET", &format!("/runs/{run_id}/sentences?subset=synNeg&page=2"), None, "sentence_page")
        .await;
    assert_eq!(page["total"], 187);
    assert_eq!(page["items"].as_array().unwrap().len(), 50);
    let (_, last) = api
        .call("GET", &format!("/runs/{run_id}/sentences?subset=synNeg&page=4"), None, "sentence_page")
        .await;
    assert_eq!(last["items"].as_array().unwrap().len(), 37);

    let sid = "synneg-01-family.0000";
    let (_, lazy) = api.call("GET", &format!("/runs/{run_id}/sentences/{sid}"), None, "sentence_view").await;
    assert_eq!(lazy["profiles"], json!([]));
    let (_, profiles) = api
        .call("POST", &format!("/runs/{run_id}/sentences/{sid}/profiles"), None, "profile_list")
        .await;
    assert_eq!(profiles["profiles"].as_array().unwrap().len(), 10);
    let (status, view) = api.call("GET", &format!("/runs/{run_id}/sentences/{sid}"), None, "sentence_view").await;
    assert_eq!(status, StatusCode::OK);
    let golden: Value = serde_json::from_str(
        &std::fs::read_to_string(root().join("fixtures/service/golden-view-synneg-01-family.0000.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(view, golden);
}

#[tokio::test]
async fn errors_use_the_error_schema() {
    let api = Api::new();
    let (status, _) = api.call("GET", "/runs/run-0042", None, "error").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = api.call("GET", "/nowhere", None, "error").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, body) = api.call("POST", "/runs", Some(json!({ "datasets": ["missing"] })), "error").await;
    assert_eq!(status, StatusCode::NOT_FOUND, "{body}");
    let (status, _) = api.call("POST", "/runs", Some(json!({ "datasets": [], "bogus": 1 })), "error").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = api.call("POST", "/runs", Some(json!({ "inline": "not a dataset" })), "error").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = api.call("GET", "/runs/run-0001/sentences?subset=bogus", None, "error").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

fn one_sentence(text: &str) -> String {
    serialize_dataset(&Dataset::from_sentences(
        "adhoc",
        "adhoc",
        vec![SemanticSentence {
            sentence_id: "adhoc.0000".into(),
            subset: Subset::LexNeg,
            text: text.into(),
            forbidden: vec!["wings".into()],
            template_id: "adhoc".into(),
        }],
    ))
}

#[tokio::test]
async fn ad_hoc_sentence_and_unreachable_backend() {
    let api = Api::new();
    let inline = one_sentence("A bird flies without [MASK].");
    let (status, started) = api
        .call("POST", "/runs", Some(json!({ "inline": inline, "profiles": "eager" })), "start_run")
        .await;
    assert_eq!(status, StatusCode::CREATED);
    let id = started["run"]["run_id"].as_str().unwrap().to_string();
    api.wait(&id).await;
    let (_, view) = api.call("GET", &format!("/runs/{id}/sentences/adhoc.0000"), None, "sentence_view").await;
    assert_eq!(view["profiles"].as_array().unwrap().len(), 10);
    let (_, report) = api.call("GET", &format!("/runs/{id}/report/semantic"), None, "report").await;
    assert_eq!(report["report"]["rows"].as_array().unwrap().len(), 6);
    let (status, _) = api.call("GET", &format!("/runs/{id}/report/inconsistent"), None, "error").await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let ids: Vec<String> = api.service.list_datasets().into_iter().map(|d| d.dataset_id).collect();
    let (status, failed) = api
        .call(
            "POST",
            "/runs",
            Some(json!({ "datasets": ids, "endpoint": "http://127.0.0.1:9" })),
            "start_run",
        )
        .await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(failed["run"]["status"], "failed");
    assert!(failed["run"]["cause"].as_str().unwrap().contains("info"));
    let (status, _) = api.call("POST", "/runs", Some(json!({ "datasets": ids, "k": 5 })), "error").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[test]
fn schemas_reject_wrong_shapes() {
    let golden: Value = serde_json::from_str(
        &std::fs::read_to_string(root().join("fixtures/service/golden-view-synneg-01-family.0000.json")).unwrap(),
    )
    .unwrap();
    let view = schema("sentence_view");
    assert!(view.is_valid(&golden));
    let mut bad = golden.clone();
    bad["predictions"][0]["prob"] = json!(1.5);
    assert!(!view.is_valid(&bad));
    let mut bad = golden.clone();
    bad["subset"] = json!("negation-ish");
    assert!(!view.is_valid(&bad));
    let mut bad = golden;
    bad.as_object_mut().unwrap().remove("predictions");
    assert!(!view.is_valid(&bad));
    assert!(!schema("run_list").is_valid(&json!({ "runs": [{ "run_id": "x" }] })));
}
