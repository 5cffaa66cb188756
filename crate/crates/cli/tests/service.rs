use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use trackstar::config::RunConfig;
use trackstar::facttrace::PassageLabel;
use trackstar_cli::artifacts::Store;
use trackstar_cli::service::{router, AppState};
use trackstar_cli::session::Session;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn tiny() -> RunConfig {
    trackstar_cli::load_config(Some(&repo_root().join("configs/tiny.toml")), &[], None).unwrap()
}

fn session() -> Arc<Session> {
    static S: OnceLock<Arc<Session>> = OnceLock::new();
    S.get_or_init(|| {
        let store = Store::new(tempfile::tempdir().unwrap().keep());
        let cfg = tiny();
        trackstar_cli::commands::run_all(&store, &cfg, false).unwrap();
        Arc::new(Session::load(&store, &cfg, &cfg.serve.presets).unwrap())
    })
    .clone()
}

fn app() -> Router {
    let s = session();
    let state = AppState::loading(2);
    // Sessions are cheap to share; the router only needs a handle.
    state.set_ready_shared(s.clone());
    router(state, &s.config)
}

async fn call(app: Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn post(uri: &str, body: Value) -> (StatusCode, Value) {
    call(app(), Method::POST, uri, Some(body)).await
}

async fn get(uri: &str) -> (StatusCode, Value) {
    call(app(), Method::GET, uri, None).await
}

fn schema() -> Value {
    serde_json::from_str(&std::fs::read_to_string(repo_root().join("docs/api-schema.json")).unwrap()).unwrap()
}

fn assert_schema(def: &str, instance: &Value) {
    let mut root = schema();
    root["$ref"] = json!(format!("#/$defs/{def}"));
    let validator = jsonschema::validator_for(&root).unwrap();
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{def} violates schema: {errors:?}\n{instance:#}");
}

/// Fact with the most entailing passages, and one of those passages.
fn entailed_fact() -> (String, String, u64) {
    let s = session();
    let (fact, passage) = s
        .bench
        .facts
        .iter()
        .filter_map(|f| {
            let ps: Vec<_> = s.bench.passages.iter().filter(|p| p.entails(f.id)).collect();
            ps.first().map(|p| (f, p.id.0, ps.len()))
        })
        .max_by_key(|(_, _, n)| *n)
        .map(|(f, p, _)| (f, p))
        .unwrap();
    (fact.prompt.clone(), fact.target.clone(), passage)
}

#[tokio::test]
async fn query_without_target_uses_the_prediction() {
    let (prompt, _, _) = entailed_fact();
    let (status, body) = post("/api/query", json!({ "prompt": prompt, "k": 5 })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_schema("QueryResponse", &body);
    assert_eq!(body["target_source"], "prediction");
    assert_eq!(body["target"], body["prediction"]);
    assert_eq!(body["proponents"].as_array().unwrap().len(), 5);
    assert!(body["fact"].is_object());
    assert!(body["correct"].is_boolean());
}

#[tokio::test]
async fn query_with_target_ranks_and_categorizes() {
    let (prompt, target, _) = entailed_fact();
    let (status, body) = post("/api/query", json!({ "prompt": prompt, "target": target, "k": 10 })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_schema("QueryResponse", &body);
    assert_eq!(body["target_source"], "request");
    assert_eq!(body["preset"], "trackstar");
    let props = body["proponents"].as_array().unwrap();
    let ranks: Vec<u64> = props.iter().map(|p| p["rank"].as_u64().unwrap()).collect();
    assert_eq!(ranks, (1..=10).collect::<Vec<_>>());
    let scores: Vec<f64> = props.iter().map(|p| p["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(scores.iter().all(|s| (-1.0 - 1e-4..=1.0 + 1e-4).contains(s)));
    assert!(props.iter().all(|p| p["category"].is_string()));
}

#[tokio::test]
async fn k_of_one_returns_exactly_one_proponent() {
    let (prompt, target, _) = entailed_fact();
    let (status, body) = post("/api/query", json!({ "prompt": prompt, "target": target, "k": 1 })).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["proponents"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn unknown_prompt_has_no_fact_or_categories() {
    let (status, body) = post("/api/query", json!({ "prompt": "something unrelated entirely:", "target": "nothing", "k": 3 })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_schema("QueryResponse", &body);
    assert!(body["fact"].is_null());
    assert!(body["correct"].is_null());
    assert!(body["proponents"].as_array().unwrap().iter().all(|p| p["category"].is_null()));
}

#[tokio::test]
async fn invalid_queries_are_rejected_with_400() {
    for body in [
        json!({ "prompt": "a b c:", "k": 0 }),
        json!({ "prompt": "a b c:", "k": 101 }),
        json!({ "prompt": "", "k": 5 }),
        json!({ "prompt": "   ", "target": "x" }),
        json!({ "prompt": "a b c:", "preset": "exp4" }),
        json!({ "prompt": "a b c:", "preset": "nonsense" }),
        json!({ "prompt": "a b c:", "unexpected": 1 }),
        json!({ "k": 3 }),
    ] {
        let (status, resp) = post("/api/query", body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body} -> {resp}");
        assert_schema("Error", &resp);
    }
    let req = Request::post("/api/query").header(header::CONTENT_TYPE, "application/json").body(Body::from("{not json")).unwrap();
    assert_eq!(app().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn fingerprint_mismatch_is_a_conflict() {
    let (status, body) = post("/api/query", json!({ "prompt": "a b c:", "target": "x", "fingerprint": "fn=other" })).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_schema("Error", &body);
    let (_, stats) = get("/api/stats").await;
    let fp = stats["presets"].as_array().unwrap().iter().find(|p| p["preset"] == "trackstar").unwrap()["fingerprint"].clone();
    let (status, _) = post("/api/query", json!({ "prompt": "a b c:", "target": "x", "fingerprint": fp })).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn identical_requests_give_identical_bodies() {
    let (prompt, target, _) = entailed_fact();
    let req = json!({ "prompt": prompt, "target": target, "k": 7, "preset": "trak" });
    let a = post("/api/query", req.clone()).await;
    let b = post("/api/query", req).await;
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a.1.to_string(), b.1.to_string());
}

#[tokio::test]
async fn service_answers_503_while_loading() {
    let state = AppState::loading(2);
    let app = router(state.clone(), &tiny());
    let (status, body) = call(app.clone(), Method::POST, "/api/query", Some(json!({ "prompt": "a:" }))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_schema("Error", &body);
    assert_eq!(call(app.clone(), Method::GET, "/api/stats", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    state.set_ready_shared(session());
    assert_eq!(call(app, Method::GET, "/api/stats", None).await.0, StatusCode::OK);
}

#[tokio::test]
async fn tailpatch_on_an_entailing_passage_raises_the_target() {
    let (prompt, target, passage) = entailed_fact();
    let (status, body) =
        post("/api/tailpatch", json!({ "query": { "prompt": prompt, "target": target }, "example_id": passage })).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_schema("TailPatchResponse", &body);
    let delta = body["delta_probability"].as_f64().unwrap();
    assert!(delta > 0.0, "{body}");
    let (before, after) = (body["before"].as_f64().unwrap(), body["after"].as_f64().unwrap());
    assert!((after - before - delta).abs() < 1e-12);
}

#[tokio::test]
async fn tailpatch_with_zero_learning_rate_changes_nothing() {
    let (prompt, target, passage) = entailed_fact();
    let (status, body) = post(
        "/api/tailpatch",
        json!({ "query": { "prompt": prompt, "target": target }, "example_id": passage, "learning_rate": 0.0 }),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["delta_probability"].as_f64().unwrap().abs() <= 1e-9, "{body}");
}

#[tokio::test]
async fn tailpatch_unknown_example_is_404() {
    let (status, body) = post("/api/tailpatch", json!({ "query": { "prompt": "a:", "target": "b" }, "example_id": 10_000_000 })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_schema("Error", &body);
    let (status, _) = post("/api/tailpatch", json!({ "query": { "prompt": "a:", "target": "b" }, "example_id": 0, "learning_rate": -1 })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn tailpatch_never_changes_later_queries() {
    let (prompt, target, passage) = entailed_fact();
    let query = json!({ "prompt": prompt, "target": target, "k": 10 });
    let before = post("/api/query", query.clone()).await.1;
    let patches: Vec<_> = (0..4)
        .map(|_| {
            let body = json!({ "query": { "prompt": prompt, "target": target }, "example_id": passage, "learning_rate": 1.0 });
            tokio::spawn(async move { post("/api/tailpatch", body).await })
        })
        .collect();
    let mut deltas = Vec::new();
    for p in patches {
        let (status, body) = p.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        deltas.push(body["delta_probability"].as_f64().unwrap());
    }
    assert!(deltas.iter().all(|d| *d == deltas[0]), "concurrent tail-patches disagree: {deltas:?}");
    let after = post("/api/query", query).await.1;
    assert_eq!(before, after);
}

#[tokio::test]
async fn examples_round_trip() {
    let s = session();
    let p = &s.bench.passages[3];
    let (status, body) = get(&format!("/api/examples/{}", p.id.0)).await;
    assert_eq!(status, StatusCode::OK);
    assert_schema("ExampleView", &body);
    assert_eq!(body["text"], p.text);
    let label: PassageLabel = serde_json::from_value(body["label"].clone()).unwrap();
    assert_eq!(label, p.label);

    let (status, body) = get("/api/examples/999999999").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_schema("Error", &body);
    assert_eq!(get("/api/examples/abc").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn stats_match_the_corpus() {
    let s = session();
    let (status, body) = get("/api/stats").await;
    assert_eq!(status, StatusCode::OK);
    assert_schema("Stats", &body);
    assert_eq!(body["passages"].as_u64().unwrap() as usize, s.bench.passages.len());
    assert_eq!(body["facts"].as_u64().unwrap() as usize, s.bench.facts.len());
    assert_eq!(body["dim"], 1024);
    let presets: Vec<&str> = body["presets"].as_array().unwrap().iter().map(|p| p["preset"].as_str().unwrap()).collect();
    assert_eq!(presets.len(), 3);
    assert!(body["presets"].as_array().unwrap().iter().all(|p| p["rows"].as_u64().unwrap() as usize == s.bench.passages.len()));
    let eval = body["eval"].as_array().expect("report is current");
    assert!(eval.iter().any(|r| r["method"] == "bm25"));
}

#[tokio::test]
async fn cors_allows_browser_origins() {
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/api/query")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app().oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
}

#[test]
fn recorded_fixtures_match_the_schema() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_stem().unwrap().to_str().unwrap().to_string();
        // File names are `<Definition>` or `<Definition>.<variant>`.
        let def = name.split('.').next().unwrap();
        let value: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_schema(def, &value);
        seen += 1;
    }
    assert!(seen >= 6, "expected recorded fixtures in {}", dir.display());
}

/// Rewrites `tests/fixtures` from live responses when
/// `TRACKSTAR_RECORD_FIXTURES=1` is set; otherwise does nothing.
#[tokio::test]
async fn record_fixtures() {
    if std::env::var("TRACKSTAR_RECORD_FIXTURES").as_deref() != Ok("1") {
        return;
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    std::fs::create_dir_all(&dir).unwrap();
    let (prompt, target, passage) = entailed_fact();
    let write = |name: &str, v: &Value| std::fs::write(dir.join(format!("{name}.json")), serde_json::to_string_pretty(v).unwrap() + "\n").unwrap();
    write("QueryRequest", &json!({ "prompt": prompt, "target": target, "preset": "trackstar", "k": 5 }));
    write("QueryResponse", &post("/api/query", json!({ "prompt": prompt, "target": target, "k": 5 })).await.1);
    write("QueryResponse.prediction", &post("/api/query", json!({ "prompt": prompt, "k": 3, "preset": "exp2" })).await.1);
    let tp = json!({ "query": { "prompt": prompt, "target": target }, "example_id": passage });
    write("TailPatchRequest", &tp);
    write("TailPatchResponse", &post("/api/tailpatch", tp).await.1);
    write("ExampleView", &get(&format!("/api/examples/{passage}")).await.1);
    write("Stats", &get("/api/stats").await.1);
    write("Error", &get("/api/examples/999999999").await.1);
}
