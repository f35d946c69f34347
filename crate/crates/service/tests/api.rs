use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use itemforge_core::markov::NGramModel;
use itemforge_core::tokenizer::Vocabulary;
use itemforge_core::transformer::{ModelConfig, ModelState};
use itemforge_service::{router, AppState, Backend, DraftStore, LoadedModel};
use serde_json::{json, Value};
use tower::ServiceExt;

fn transformer() -> LoadedModel {
    let config = ModelConfig {
        vocab_size: 257,
        context_len: 96,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        d_ff: 32,
        dropout: 0.0,
        seed: 3,
    };
    let state = ModelState::init(config).unwrap();
    LoadedModel::new(Backend::Transformer(state), Vocabulary::byte_level(), "abc123".into()).unwrap()
}

fn markov(text: &[u8], k: f64) -> LoadedModel {
    let vocab = Vocabulary::byte_level();
    let model = NGramModel::fit(&vocab.encode(text), 1, vocab.size(), k).unwrap();
    LoadedModel::new(Backend::Markov(model), vocab, "def456".into()).unwrap()
}

struct Harness {
    _dir: tempfile::TempDir,
    path: std::path::PathBuf,
    state: Arc<AppState>,
}

impl Harness {
    fn new(model: Option<LoadedModel>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("drafts.ndjson");
        let state = Arc::new(AppState::new(DraftStore::open(&path).unwrap()));
        if let Some(m) = model {
            state.set_model(m);
        }
        Self { _dir: dir, path, state }
    }

    fn restart(&mut self, model: LoadedModel) {
        self.state = Arc::new(AppState::new(DraftStore::open(&self.path).unwrap()));
        self.state.set_model(model);
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let body = body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty);
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body)
            .unwrap();
        let resp = router(self.state.clone()).oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap()
        };
        (status, value)
    }
}

const STATINS: &str = "What are the most common side effects of statins?";

fn qa(n: usize, seed: u64) -> Value {
    json!({
        "template": "qa",
        "question": STATINS,
        "params": {"n_samples": n, "seed": seed, "max_tokens": 24},
    })
}

#[tokio::test]
async fn health_and_model_before_and_after_load() {
    let h = Harness::new(None);
    let (s, v) = h.call("GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["status"], "loading");
    assert_eq!(h.call("GET", "/api/model", None).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(h.call("POST", "/api/generate", Some(qa(1, 0))).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(h.call("GET", "/api/drafts", None).await, (StatusCode::OK, json!([])));

    h.state.set_model(transformer());
    let (s, v) = h.call("GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok", "checkpoint_hash": "abc123"}));
    let (s, v) = h.call("GET", "/api/model", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["model"]["kind"], "transformer");
    assert_eq!(v["model"]["context_len"], 96);
    assert_eq!(v["vocab_hash"], Vocabulary::byte_level().digest());
}

#[tokio::test]
async fn generate_persists_proposed_samples() {
    let h = Harness::new(Some(transformer()));
    let (s, v) = h.call("POST", "/api/generate", Some(qa(5, 7))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["samples"].as_array().unwrap().len(), 5);
    assert_eq!(v["seed"], 7);
    assert_eq!(v["prompt_text"], format!("Q: {STATINS} A:"));

    let (_, again) = h.call("POST", "/api/generate", Some(qa(5, 7))).await;
    assert_eq!(again["samples"], v["samples"]);
    assert_ne!(again["draft_id"], v["draft_id"]);

    let (s, list) = h.call("GET", "/api/drafts", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(list.as_array().unwrap().len(), 2);
    let draft = &list[0];
    assert_eq!(draft["id"], v["draft_id"]);
    assert_eq!(draft["template_kind"], "qa");
    assert_eq!(draft["params"]["n_samples"], 5);
    assert!(draft["samples"].as_array().unwrap().iter().all(|s| s["status"] == "proposed"));

    let (_, unseeded) = h
        .call("POST", "/api/generate", Some(json!({"template": "raw", "prompt": "A 52-year-old", "params": {"max_tokens": 4}})))
        .await;
    assert!(unseeded["seed"].is_u64());
}

#[tokio::test]
async fn generate_rejects_bad_requests() {
    let h = Harness::new(Some(transformer()));
    let cases = [
        json!({"template": "qa", "question": STATINS, "params": {"n_samples": 0}}),
        json!({"template": "qa", "question": STATINS, "params": {"n_samples": 17}}),
        json!({"template": "qa", "question": STATINS, "params": {"max_tokens": 1025}}),
        json!({"template": "qa", "question": STATINS, "params": {"temperature": -1.0}}),
        json!({"template": "qa"}),
        json!({"template": "vignette", "prompt": ""}),
        json!({"template": "raw"}),
        json!({"template": "essay", "prompt": "x"}),
        json!({"template": "raw", "prompt": "x".repeat(96)}),
        json!({"template": "raw", "prompt": "x", "parent_draft_id": uuid::Uuid::nil()}),
    ];
    let expected = [400, 400, 400, 400, 400, 400, 400, 400, 400, 404];
    for (case, code) in cases.into_iter().zip(expected) {
        let (s, v) = h.call("POST", "/api/generate", Some(case.clone())).await;
        assert_eq!(s.as_u16(), code, "{case} -> {v}");
        assert!(v["error"].is_string());
    }
    assert_eq!(h.call("GET", "/api/drafts", None).await.1, json!([]));
}

#[tokio::test]
async fn curation_workflow_and_restart() {
    let mut h = Harness::new(Some(transformer()));
    let (_, gen) = h.call("POST", "/api/generate", Some(qa(3, 1))).await;
    let id = gen["draft_id"].as_str().unwrap().to_string();
    let url = |k: usize| format!("/api/drafts/{id}/samples/{k}");

    let (s, d) = h.call("POST", &url(0), Some(json!({"action": "accept"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(d["samples"][0]["status"], "accepted");
    assert_eq!(d["revision"], 1);

    let (s, d) = h.call("POST", &url(1), Some(json!({"action": "edit", "edited_text": "Myalgia"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(d["samples"][1]["status"], "edited");
    let (_, d) = h.call("POST", &url(1), Some(json!({"action": "accept"}))).await;
    assert_eq!(d["samples"][1]["status"], "accepted");
    assert_eq!(d["samples"][1]["edited_text"], "Myalgia");

    let (s, _) = h.call("POST", &url(2), Some(json!({"action": "reject"}))).await;
    assert_eq!(s, StatusCode::OK);
    let (s, v) = h.call("POST", &url(2), Some(json!({"action": "edit", "edited_text": "x"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "IllegalTransition");
    assert_eq!(h.call("POST", &url(0), Some(json!({"action": "edit", "edited_text": "x"}))).await.0, StatusCode::CONFLICT);
    assert_eq!(h.call("POST", &url(9), Some(json!({"action": "accept"}))).await.0, StatusCode::NOT_FOUND);
    let missing = format!("/api/drafts/{}/samples/0", uuid::Uuid::new_v4());
    assert_eq!(h.call("POST", &missing, Some(json!({"action": "accept"}))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(h.call("POST", "/api/drafts/nope/samples/0", Some(json!({"action": "accept"}))).await.0, StatusCode::NOT_FOUND);
    assert_eq!(h.call("POST", &url(0), Some(json!({"action": "approve"}))).await.0, StatusCode::BAD_REQUEST);

    let mut regen = qa(2, 2);
    regen["parent_draft_id"] = json!(id);
    let (s, child) = h.call("POST", "/api/generate", Some(regen)).await;
    assert_eq!(s, StatusCode::CREATED);

    let (_, before) = h.call("GET", "/api/drafts", None).await;
    h.restart(transformer());
    let (_, after) = h.call("GET", "/api/drafts", None).await;
    assert_eq!(before, after);

    let (_, accepted) = h.call("GET", "/api/drafts?status=accepted", None).await;
    assert_eq!(accepted.as_array().unwrap().len(), 1);
    assert_eq!(accepted[0]["id"], json!(id));
    let (_, rejected) = h.call("GET", "/api/drafts?status=rejected", None).await;
    assert_eq!(rejected.as_array().unwrap().len(), 1);
    let (_, proposed) = h.call("GET", "/api/drafts?status=proposed", None).await;
    assert_eq!(proposed.as_array().unwrap().len(), 1);
    assert_eq!(h.call("GET", "/api/drafts?status=bogus", None).await.0, StatusCode::BAD_REQUEST);

    let child_url = format!("/api/drafts/{}", child["draft_id"].as_str().unwrap());
    let (s, c) = h.call("GET", &child_url, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(c["parent_draft_id"], json!(id));
}

#[tokio::test]
async fn score_matches_analytic_cases() {
    // Every scored context is unseen, so each token has probability 1/257.
    let h = Harness::new(Some(markov(b"zz", 1.0)));
    let (s, v) = h.call("POST", "/api/score", Some(json!({"text": "abcde"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["tokens_scored"], 4);
    assert!((v["cross_entropy_nats"].as_f64().unwrap() - 257f64.ln()).abs() < 1e-9);
    assert!((v["perplexity"].as_f64().unwrap() - 257.0).abs() < 1e-6);

    let h = Harness::new(Some(markov(b"abababab", 0.0)));
    let (_, v) = h.call("POST", "/api/score", Some(json!({"text": "abababab"}))).await;
    assert_eq!(v["cross_entropy_nats"], 0.0);
    assert_eq!(v["perplexity"], 1.0);

    assert_eq!(h.call("POST", "/api/score", Some(json!({"text": ""}))).await.0, StatusCode::BAD_REQUEST);
    let (s, v) = h.call("POST", "/api/score", Some(json!({"text": "abba"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "InfiniteLoss");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_generation_is_deterministic_per_request() {
    let h = Arc::new(Harness::new(Some(transformer())));
    let mut tasks = Vec::new();
    for seed in 0..8u64 {
        let h = h.clone();
        tasks.push(tokio::spawn(async move {
            let (_, v) = h.call("POST", "/api/generate", Some(qa(2, seed % 2))).await;
            (seed % 2, v["samples"].clone())
        }));
    }
    let mut by_seed: [Option<Value>; 2] = [None, None];
    for t in tasks {
        let (seed, samples) = t.await.unwrap();
        match &by_seed[seed as usize] {
            Some(prev) => assert_eq!(prev, &samples),
            None => by_seed[seed as usize] = Some(samples),
        }
    }
    assert_eq!(h.call("GET", "/api/drafts", None).await.1.as_array().unwrap().len(), 8);
}
