use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

use persona_ecosystem::completion::{ChatMessage, CompletionProvider, CompletionRequest, RemoteCompletion, Task};
use persona_ecosystem::embedding::{Embedder, EmbeddingError, RemoteEmbedder};
use persona_ecosystem::provider::{HttpSettings, ProviderError};

type Handler = Box<dyn Fn(usize, &Value) -> (u16, String) + Send>;

/// Minimal HTTP/1.1 server answering each POST with `handler(n, body)`.
/// Returns the endpoint URL and the list of received bodies.
fn serve(handler: Handler) -> (String, Arc<Mutex<Vec<Value>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    thread::spawn(move || {
        for (n, stream) in listener.incoming().enumerate() {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut length = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; length];
            reader.read_exact(&mut body).unwrap();
            let body: Value = serde_json::from_slice(&body).unwrap();
            let (status, reply) = handler(n, &body);
            log.lock().unwrap().push(body);
            let response = format!(
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            stream.write_all(response.as_bytes()).unwrap();
        }
    });
    (url, seen)
}

fn settings(endpoint: String) -> HttpSettings {
    HttpSettings {
        endpoint,
        model: "mock-model".into(),
        api_key_env: "PERSONA_ECO_TEST_NO_SUCH_KEY".into(),
        backoff_ms: 1,
        ..HttpSettings::default()
    }
}

fn embeddings_reply(body: &Value) -> String {
    // Reply in reverse order with explicit indices; vector i is e_{len(text) % 3}.
    let inputs = body["input"].as_array().unwrap();
    let mut data: Vec<Value> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut v = vec![0.0; 3];
            v[t.as_str().unwrap().len() % 3] = 2.0;
            json!({"index": i, "embedding": v})
        })
        .collect();
    data.reverse();
    json!({ "data": data }).to_string()
}

#[test]
fn remote_embedder_batches_and_reorders() {
    let (url, seen) = serve(Box::new(|_, body| (200, embeddings_reply(body))));
    let embedder = RemoteEmbedder::new(settings(url), 3, 2).unwrap();
    let out = embedder.embed(&["abc", "a", "ab", "abcd", "abcde"]).unwrap();
    let argmax: Vec<usize> = out
        .iter()
        .map(|e| e.values().iter().position(|v| (*v - 1.0).abs() < 1e-12).unwrap())
        .collect();
    assert_eq!(argmax, [0, 1, 2, 1, 2]);
    let bodies = seen.lock().unwrap();
    assert_eq!(bodies.len(), 3);
    assert_eq!(bodies[0]["model"], "mock-model");
    assert_eq!(bodies[2]["input"], json!(["abcde"]));
}

#[test]
fn remote_embedder_retries_throttling() {
    let (url, seen) = serve(Box::new(|n, body| {
        if n == 0 {
            (429, "{}".into())
        } else {
            (200, embeddings_reply(body))
        }
    }));
    let embedder = RemoteEmbedder::new(settings(url), 3, 8).unwrap();
    assert_eq!(embedder.embed(&["x"]).unwrap().len(), 1);
    assert_eq!(seen.lock().unwrap().len(), 2);
}

#[test]
fn remote_embedder_rejects_wrong_dimension() {
    let (url, _) = serve(Box::new(|_, _| (200, json!({"data": [{"embedding": [1.0, 0.0]}]}).to_string())));
    let embedder = RemoteEmbedder::new(settings(url), 3, 8).unwrap();
    assert!(matches!(
        embedder.embed(&["x"]),
        Err(EmbeddingError::DimensionMismatch { expected: 3, actual: 2 })
    ));
}

#[test]
fn remote_completion_round_trip_and_client_errors() {
    let (url, seen) = serve(Box::new(|n, body| {
        if n == 0 {
            let last = body["messages"].as_array().unwrap().last().unwrap()["content"].as_str().unwrap().to_uppercase();
            (200, json!({"choices": [{"message": {"role": "assistant", "content": last}}]}).to_string())
        } else {
            (400, r#"{"error": "bad request"}"#.into())
        }
    }));
    let provider = RemoteCompletion::new(settings(url));
    let request = CompletionRequest::new(
        Task::Other,
        vec![ChatMessage::system("be brief"), ChatMessage::user("hello there")],
        0.3,
    );
    assert_eq!(provider.complete(&request).unwrap(), "HELLO THERE");
    match provider.complete(&request) {
        Err(ProviderError::Status { status: 400, attempts: 1, .. }) => {}
        other => panic!("{other:?}"),
    }
    let bodies = seen.lock().unwrap();
    assert_eq!(bodies.len(), 2);
    assert_eq!(bodies[0]["temperature"], 0.3);
    assert_eq!(bodies[0]["messages"][0]["role"], "system");
}
