//! Remote adapters against a local HTTP server.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use lvlm_fairness::backends::{
    Backend, BackendConfig, BackendError, BackendKind, Dispatcher, HttpAdapter, Job, Preset, RemoteHttpBackend,
    ResponseCache, RetryPolicy,
};
use lvlm_fairness::encoder::{BuiltinHashEmbedder, EmbeddingProvider, Encoder, EncoderError, Policy, RemoteEmbedder};

#[derive(Debug, Clone)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

type Handler = Box<dyn Fn(&str, &Value) -> (u16, Value) + Send>;

/// Serve forever on an ephemeral port, logging every request.
fn serve(handler: Handler) -> (String, Arc<Mutex<Vec<Seen>>>) {
    let server = tiny_http::Server::http("127.0.0.1:0").unwrap();
    let url = format!("http://{}", server.server_addr().to_ip().unwrap());
    let log = Arc::new(Mutex::new(Vec::new()));
    let seen = log.clone();
    thread::spawn(move || {
        for mut request in server.incoming_requests() {
            let mut text = String::new();
            request.as_reader().read_to_string(&mut text).unwrap();
            let body = serde_json::from_str(&text).unwrap_or(Value::Null);
            let auth = request
                .headers()
                .iter()
                .find(|h| h.field.equiv("Authorization"))
                .map(|h| h.value.to_string());
            let path = request.url().to_string();
            let (status, reply) = handler(&path, &body);
            seen.lock().unwrap().push(Seen { path, auth, body });
            let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
            let response = tiny_http::Response::from_string(reply.to_string())
                .with_status_code(status)
                .with_header(header);
            let _ = request.respond(response);
        }
    });
    (url, log)
}

fn backend(url: &str, preset: Preset, auth: Option<&str>) -> RemoteHttpBackend {
    RemoteHttpBackend::new(
        url,
        "test-model",
        HttpAdapter::preset(preset),
        auth.map(str::to_string),
        Duration::from_secs(5),
        BTreeMap::new(),
    )
}

fn dispatcher(url: &str, preset: Preset, retry: RetryPolicy) -> Dispatcher {
    let mut config = BackendConfig::new(
        "remote",
        "test-model",
        BackendKind::RemoteHttp {
            endpoint: url.to_string(),
            adapter: HttpAdapter::preset(preset),
        },
    );
    config.retry = retry;
    Dispatcher::new(
        config,
        Arc::new(backend(url, preset, None)),
        Arc::new(ResponseCache::in_memory()),
    )
}

fn fast_retry(max_attempts: u32) -> RetryPolicy {
    RetryPolicy {
        max_attempts,
        backoff_ms: vec![1],
    }
}

#[test]
fn openai_chat_sends_image_and_credential() {
    let (url, log) = serve(Box::new(|_, _| {
        (200, json!({"choices": [{"message": {"content": "A. Yes"}}]}))
    }));
    let dir = tempfile::tempdir().unwrap();
    let image = dir.path().join("p.png");
    std::fs::write(&image, b"\x89PNG fake").unwrap();
    std::env::set_var("LVLM_FAIRNESS_REMOTE_TEST_KEY", "sekrit");
    let b = backend(&url, Preset::OpenaiChat, Some("LVLM_FAIRNESS_REMOTE_TEST_KEY"));

    let text = b.call(&Job::with_image("p", &image, "Is this a nurse?")).unwrap();
    assert_eq!(text, "A. Yes");
    let seen = log.lock().unwrap()[0].clone();
    assert_eq!(seen.auth.as_deref(), Some("Bearer sekrit"));
    assert_eq!(seen.body["model"], "test-model");
    let content = &seen.body["messages"][0]["content"];
    assert_eq!(content[0]["text"], "Is this a nurse?");
    assert_eq!(content[1]["image_url"]["url"], "data:image/png;base64,iVBORyBmYWtl");
}

#[test]
fn ollama_text_only_request_has_no_images() {
    let (url, log) = serve(Box::new(|_, body| {
        (
            200,
            json!({"response": format!("echo: {}", body["prompt"].as_str().unwrap())}),
        )
    }));
    let b = backend(&url, Preset::OllamaGenerate, None);
    assert_eq!(b.call(&Job::text_only("a", "why?")).unwrap(), "echo: why?");
    let seen = log.lock().unwrap()[0].clone();
    assert_eq!(seen.body["images"], json!([]));
    assert_eq!(seen.body["stream"], false);
    assert_eq!(seen.auth, None);
}

#[test]
fn rate_limit_is_retried_then_reported() {
    let (url, log) = serve(Box::new(|_, _| (429, json!({"error": "slow down"}))));
    let d = dispatcher(&url, Preset::OllamaGenerate, fast_retry(3));
    let err = d.query(&Job::text_only("a", "q")).unwrap_err();
    assert_eq!(err, BackendError::RateLimited { attempts: 3 });
    assert_eq!(log.lock().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, log) = serve(Box::new(|_, _| (400, json!({"error": "bad request"}))));
    let d = dispatcher(&url, Preset::OllamaGenerate, fast_retry(3));
    match d.query(&Job::text_only("a", "q")).unwrap_err() {
        BackendError::UpstreamError { status, body } => {
            assert_eq!(status, 400);
            assert!(body.contains("bad request"));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(log.lock().unwrap().len(), 1);
}

#[test]
fn server_error_recovers_on_retry_and_is_cached() {
    let count = Mutex::new(0);
    let (url, log) = serve(Box::new(move |_, _| {
        let mut n = count.lock().unwrap();
        *n += 1;
        if *n == 1 {
            (503, json!({}))
        } else {
            (200, json!({"response": "B. No"}))
        }
    }));
    let d = dispatcher(&url, Preset::OllamaGenerate, fast_retry(3));
    let job = Job::text_only("a", "q");
    let first = d.query(&job).unwrap();
    assert_eq!(
        (first.text.as_str(), first.attempt_count, first.from_cache),
        ("B. No", 2, false)
    );
    let second = d.query(&job).unwrap();
    assert!(second.from_cache);
    assert_eq!(second.text, "B. No");
    assert_eq!(log.lock().unwrap().len(), 2);
}

#[test]
fn missing_answer_field_is_a_protocol_error() {
    let (url, _) = serve(Box::new(|_, _| (200, json!({"choices": []}))));
    let b = backend(&url, Preset::OpenaiChat, None);
    assert!(matches!(
        b.call(&Job::text_only("a", "q")),
        Err(BackendError::Protocol(_))
    ));
}

/// An embedding service that answers with the builtin hash vectors.
fn embed_service(dimension_reported: usize) -> (String, Arc<Mutex<Vec<Seen>>>) {
    serve(Box::new(move |path, body| {
        let builtin = BuiltinHashEmbedder::default();
        match path {
            "/health" => (
                200,
                json!({"status": "ok", "models": [{"id": "clip-text", "dimension": builtin.dimension()}]}),
            ),
            "/embed" => {
                let texts: Vec<&str> = body["texts"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|t| t.as_str().unwrap())
                    .collect();
                let vectors = builtin.embed_batch(&texts).unwrap();
                (200, json!({"vectors": vectors, "dimension": dimension_reported}))
            }
            _ => (404, json!({})),
        }
    }))
}

#[test]
fn remote_embedder_matches_local_vectors_and_memoizes() {
    let dim = BuiltinHashEmbedder::default().dimension();
    let (url, log) = embed_service(dim);
    let remote = RemoteEmbedder::connect(&url, "clip-text", Duration::from_secs(5)).unwrap();
    assert_eq!(remote.dimension(), dim);

    let texts = ["a nurse", "a gymnast", "a nurse"];
    let got = remote.embed_batch(&texts).unwrap();
    assert_eq!(got, BuiltinHashEmbedder::default().embed_batch(&texts).unwrap());
    remote.embed_batch(&["a gymnast"]).unwrap();
    let seen = log.lock().unwrap();
    let embeds: Vec<_> = seen.iter().filter(|s| s.path == "/embed").collect();
    assert_eq!(embeds.len(), 1);
    assert_eq!(
        embeds[0].body,
        json!({"texts": ["a nurse", "a gymnast"], "model": "clip-text"})
    );
}

#[test]
fn remote_and_builtin_encoders_agree() {
    let (url, _) = embed_service(BuiltinHashEmbedder::default().dimension());
    let remote = Encoder::with_provider(Arc::new(
        RemoteEmbedder::connect(&format!("{url}/embed"), "clip-text", Duration::from_secs(5)).unwrap(),
    ));
    let local = Encoder::builtin();
    let labels: Vec<String> = ["nurse", "gymnast", "skateboarder"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for raw in ["I see a nurse at work", "a skateboard trick", "someone on the beam"] {
        assert_eq!(
            remote.normalize(raw, &labels, Policy::EmbeddingOnly).unwrap(),
            local.normalize(raw, &labels, Policy::EmbeddingOnly).unwrap(),
        );
    }
}

#[test]
fn unknown_model_and_bad_dimension_are_rejected() {
    let (url, _) = embed_service(3);
    assert!(matches!(
        RemoteEmbedder::connect(&url, "other", Duration::from_secs(5)),
        Err(EncoderError::ProviderUnavailable(_))
    ));
    let remote = RemoteEmbedder::connect(&url, "clip-text", Duration::from_secs(5)).unwrap();
    assert!(matches!(
        remote.embed_batch(&["x"]),
        Err(EncoderError::DimensionMismatch { got: 3, .. })
    ));
    assert!(matches!(
        RemoteEmbedder::connect("http://127.0.0.1:9", "clip-text", Duration::from_millis(200)),
        Err(EncoderError::ProviderUnavailable(_))
    ));
}
