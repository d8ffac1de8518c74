//! Remote client against a throwaway HTTP server on localhost.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use propinfer::endpoint::EndpointSpec;
use propinfer::remote::{RemoteModel, RemoteSpec, RetryPolicy};
use propinfer_core::rng::derive_seed;
use propinfer_core::{Error, TextModel};
use serde_json::{json, Value};

#[derive(Clone, Debug)]
struct Seen {
    path: String,
    auth: Option<String>,
    body: Value,
}

type Handler = dyn Fn(usize, &Value) -> (u16, String) + Send + Sync;

struct Mock {
    url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
}

impl Mock {
    fn start(handler: impl Fn(usize, &Value) -> (u16, String) + Send + Sync + 'static) -> Mock {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let log = seen.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let (log, handler) = (log.clone(), handler.clone());
                thread::spawn(move || serve(stream, &log, &*handler));
            }
        });
        Mock { url, seen }
    }

    fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, log: &Mutex<Vec<Seen>>, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let path = line.split_whitespace().nth(1).unwrap_or_default().to_string();
    let (mut len, mut auth) = (0usize, None);
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (k, v) = h.split_once(':').unwrap();
        match k.to_ascii_lowercase().as_str() {
            "content-length" => len = v.trim().parse().unwrap(),
            "authorization" => auth = Some(v.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    let body: Value = serde_json::from_slice(&body).unwrap();
    let index = {
        let mut log = log.lock().unwrap();
        log.push(Seen {
            path,
            auth,
            body: body.clone(),
        });
        log.len() - 1
    };
    let (status, text) = handler(index, &body);
    let mut out = stream;
    let _ = write!(
        out,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
}

fn spec(url: &str) -> RemoteSpec {
    RemoteSpec {
        retry: RetryPolicy {
            max_retries: 2,
            initial_backoff_ms: 1,
            multiplier: 2.0,
        },
        ..RemoteSpec::new(url, "m")
    }
}

fn choices(texts: &[String]) -> String {
    let c: Vec<Value> = texts.iter().enumerate().map(|(i, t)| json!({"text": t, "index": i})).collect();
    json!({ "choices": c }).to_string()
}

#[test]
fn single_completion_passes_through() {
    let mock = Mock::start(|_, _| (200, choices(&["hello".into()])));
    let model = RemoteModel::with_api_key(spec(&mock.url), None).unwrap();
    let set = model.generate_batch("hi there", 1, 7).unwrap();
    assert_eq!(set.texts, vec!["hello"]);
    assert_eq!(set.prompt, "hi there");
    let reqs = mock.requests();
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].path, "/v1/completions");
    let b = &reqs[0].body;
    assert_eq!(b["model"], "m");
    assert_eq!(b["prompt"], "hi there");
    assert_eq!(b["n"], 1);
    assert_eq!(b["temperature"], 1.0);
    assert_eq!(b["seed"], derive_seed(7, &[0]));
    assert_eq!(reqs[0].auth, None);
}

#[test]
fn chunks_come_back_in_slot_order() {
    // late chunks answer first and each chunk lists its choices in reverse
    let mock = Mock::start(|_, body| {
        let n = body["n"].as_u64().unwrap() as usize;
        let seed = body["seed"].as_u64().unwrap();
        let k = (0..4).find(|&k| derive_seed(11, &[k]) == seed).unwrap();
        thread::sleep(Duration::from_millis(40 * (3 - k)));
        let c: Vec<Value> = (0..n)
            .rev()
            .map(|i| json!({"text": format!("{k}.{i}"), "index": i}))
            .collect();
        (200, json!({ "choices": c }).to_string())
    });
    let s = RemoteSpec {
        max_batch: 3,
        max_in_flight: 4,
        ..spec(&mock.url)
    };
    let model = RemoteModel::with_api_key(s, None).unwrap();
    let set = model.generate_batch("p", 10, 11).unwrap();
    let want: Vec<String> = (0..10).map(|j| format!("{}.{}", j / 3, j % 3)).collect();
    assert_eq!(set.texts, want);
    let mut sizes: Vec<u64> = mock.requests().iter().map(|r| r.body["n"].as_u64().unwrap()).collect();
    sizes.sort();
    assert_eq!(sizes, vec![1, 3, 3, 3]);
}

#[test]
fn server_errors_are_retried_then_reported() {
    let mock = Mock::start(|_, _| (503, "{}".into()));
    let model = RemoteModel::with_api_key(spec(&mock.url), None).unwrap();
    let err = model.generate_batch("p", 2, 0).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
    assert_eq!(mock.requests().len(), 3);
}

#[test]
fn rate_limit_recovers() {
    let mock = Mock::start(|i, _| if i == 0 { (429, "{}".into()) } else { (200, choices(&["ok".into()])) });
    let model = RemoteModel::with_api_key(spec(&mock.url), None).unwrap();
    assert_eq!(model.generate_batch("p", 1, 0).unwrap().texts, vec!["ok"]);
    assert_eq!(mock.requests().len(), 2);
}

#[test]
fn client_errors_are_not_retried() {
    let mock = Mock::start(|_, _| (400, r#"{"error":"bad"}"#.into()));
    let model = RemoteModel::with_api_key(spec(&mock.url), None).unwrap();
    let err = model.generate_batch("p", 1, 0).unwrap_err();
    assert!(matches!(err, Error::Transport(ref m) if m.contains("400")), "{err}");
    assert_eq!(mock.requests().len(), 1);
}

#[test]
fn short_responses_are_rejected() {
    let mock = Mock::start(|_, _| (200, choices(&["one".into()])));
    let model = RemoteModel::with_api_key(spec(&mock.url), None).unwrap();
    assert!(matches!(model.generate_batch("p", 2, 0), Err(Error::Transport(_))));
}

#[test]
fn scoring_uses_echoed_logprobs() {
    let mock = Mock::start(|_, _| {
        (
            200,
            json!({"choices": [{"text": "a b c", "logprobs": {"token_logprobs": [null, -1.5, -0.25]}}]}).to_string(),
        )
    });
    let model = RemoteModel::with_api_key(spec(&mock.url), None).unwrap();
    assert_eq!(model.score_logprobs("a b c").unwrap(), vec![-1.5, -0.25]);
    let b = &mock.requests()[0].body;
    assert_eq!(b["echo"], true);
    assert_eq!(b["max_tokens"], 0);
    assert_eq!(b["logprobs"], 0);
    assert_eq!(model.score_logprobs("").unwrap(), Vec::<f64>::new());
    assert_eq!(mock.requests().len(), 1);
}

#[test]
fn missing_logprobs_means_scoring_unsupported() {
    let mock = Mock::start(|_, _| (200, choices(&["x".into()])));
    let model = RemoteModel::with_api_key(spec(&mock.url), None).unwrap();
    assert!(matches!(model.score_logprobs("x"), Err(Error::ScoringUnsupported(_))));
}

#[test]
fn api_key_goes_in_bearer_header() {
    let mock = Mock::start(|_, _| (200, choices(&["x".into()])));
    let model = RemoteModel::with_api_key(spec(&format!("{}/completions", mock.url)), Some("sekrit".into())).unwrap();
    model.generate_batch("p", 1, 0).unwrap();
    let r = &mock.requests()[0];
    assert_eq!(r.auth.as_deref(), Some("Bearer sekrit"));
    assert_eq!(r.path, "/v1/completions");
}

#[test]
fn endpoint_handle_opens_a_remote_model() {
    let mock = Mock::start(|_, _| (200, choices(&["via handle".into()])));
    let handle = EndpointSpec::Remote(spec(&mock.url));
    let text = serde_json::to_string(&handle).unwrap();
    let back: EndpointSpec = serde_json::from_str(&text).unwrap();
    assert_eq!(back, handle);
    let model = back.open().unwrap();
    assert_eq!(model.model_id(), format!("remote:{}:m", mock.url));
    assert_eq!(model.generate_batch("p", 1, 0).unwrap().texts, vec!["via handle"]);
}
