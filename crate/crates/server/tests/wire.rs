use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use fwprobe_core::forge::ProbeSentence;
use fwprobe_core::gateway::{Gateway, GatewayOptions, HttpTransport, Method, MockBackend, Transport, MOCK_ENDPOINT};
use fwprobe_server::wire_router;
use jsonschema::JSONSchema;
use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Serves the seed-0 mock on an ephemeral port from a background runtime.
fn spawn_mock() -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, wire_router(Arc::new(MockBackend::default()))).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn golden_names() -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(root().join("fixtures/wire/golden"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter_map(|n| n.strip_suffix(".request.json").map(str::to_string))
        .collect();
    names.sort();
    names
}

fn method_of(name: &str) -> Method {
    match name.split('-').next().unwrap() {
        "info" => Method::Info,
        "predict" => Method::Predict,
        _ => Method::Encode,
    }
}

#[test]
fn golden_exchanges_over_http_are_byte_identical() {
    let transport = HttpTransport::new(&spawn_mock(), Duration::from_secs(10)).unwrap();
    let names = golden_names();
    assert_eq!(names.len(), 9);
    for name in names {
        let dir = root().join("fixtures/wire/golden");
        let request = std::fs::read_to_string(dir.join(format!("{name}.request.json"))).unwrap();
        let response = std::fs::read_to_string(dir.join(format!("{name}.response.json"))).unwrap();
        assert_eq!(transport.exchange(method_of(&name), &request).unwrap(), response, "{name}");
    }
}

#[test]
fn golden_files_match_the_wire_schemas() {
    let compile = |name: &str| {
        let text = std::fs::read_to_string(root().join(format!("schemas/wire/{name}.json"))).unwrap();
        JSONSchema::compile(&serde_json::from_str::<Value>(&text).unwrap()).unwrap()
    };
    for name in golden_names() {
        let method = name.split('-').next().unwrap();
        for part in ["request", "response"] {
            let text =
                std::fs::read_to_string(root().join(format!("fixtures/wire/golden/{name}.{part}.json"))).unwrap();
            let value: Value = serde_json::from_str(&text).unwrap();
            let schema_name = if value.get("error").is_some() { "error".to_string() } else { format!("{method}.{part}") };
            assert!(compile(&schema_name).is_valid(&value), "{name}.{part} vs {schema_name}");
        }
    }
}

#[test]
fn http_backend_matches_the_in_process_mock() {
    let url = spawn_mock();
    let remote = Gateway::connect(
        Arc::new(HttpTransport::new(&url, Duration::from_secs(10)).unwrap()),
        &url,
        GatewayOptions::default(),
    )
    .unwrap();
    let local = Gateway::connect(Arc::new(MockBackend::default()), MOCK_ENDPOINT, GatewayOptions::default()).unwrap();
    assert_eq!(remote.descriptor().endpoint, url);
    let s = ProbeSentence::new("s", "A bird flies without [MASK].");
    let (a, b) = (remote.predict_masked(&s, 10).unwrap(), local.predict_masked(&s, 10).unwrap());
    assert_eq!(a, b);
    assert_eq!(
        remote.encode_with_focus("A guitarist plays without strings.", 1, 11).unwrap(),
        local.encode_with_focus("A guitarist plays without strings.", 1, 11).unwrap()
    );
    let err = remote.predict_masked(&ProbeSentence::new("s", "A bird flies without [MASK]."), 99).unwrap_err();
    assert!(err.to_string().contains("top_k_exceeds_vocabulary"), "{err}");
}

#[test]
fn unreachable_backend_is_a_transport_error() {
    let t = HttpTransport::new("http://127.0.0.1:9", Duration::from_secs(2)).unwrap();
    assert!(t.exchange(Method::Info, "{}").is_err());
}
