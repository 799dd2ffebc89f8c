//! Exercises the HTTP clients against a throwaway server on localhost.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;

use sbs_core::embed::{EmbedError, EmbeddingProvider, RemoteEmbedder};
use sbs_core::llm::{DecodingParams, HttpLlm, LlmClient, LlmError};

struct Captured {
    headers: Vec<String>,
    body: serde_json::Value,
}

/// Serves `responses` in order, one per connection, and reports what each
/// request carried.
fn serve(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<Captured>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/endpoint", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut headers = Vec::new();
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end().to_string();
                if line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                headers.push(line);
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let body_json = serde_json::from_slice(&buf).unwrap_or(serde_json::Value::Null);
            tx.send(Captured { headers, body: body_json }).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, rx)
}

#[test]
fn remote_embedder_round_trip() {
    let (url, rx) = serve(vec![(200, r#"{"vectors": [[1.0, 2.0], [3.0, 4.0]]}"#.into())]);
    let e = RemoteEmbedder::new(url.clone(), Some("secret".into()));
    let vs = e.embed_batch(&["a", "b"]).unwrap();
    assert_eq!(vs[1].values(), &[3.0, 4.0]);
    let req = rx.recv().unwrap();
    assert_eq!(req.body, serde_json::json!({"texts": ["a", "b"]}));
    assert!(req.headers.iter().any(|h| h == "Authorization: Bearer secret" || h == "authorization: Bearer secret"));
    assert_eq!(e.identity(), format!("remote:{url}"));
}

#[test]
fn remote_embedder_errors() {
    let (url, _rx) = serve(vec![
        (500, r#"{"error": "boom"}"#.into()),
        (200, r#"{"vectors": [[1.0]]}"#.into()),
        (200, r#"{"vectors": [[]]}"#.into()),
    ]);
    let e = RemoteEmbedder::new(url, None);
    let err = e.embed_text("x").unwrap_err();
    assert!(err.is_retriable(), "{err}");
    assert!(matches!(e.embed_batch(&["x", "y"]), Err(EmbedError::Provider { .. })));
    assert!(matches!(e.embed_text("x"), Err(EmbedError::InvalidVector { .. })));
}

#[test]
fn chat_client_round_trip() {
    let reply = r#"{"choices": [{"message": {"role": "assistant", "content": "Chosen Item: Item A"}}]}"#;
    let (url, rx) = serve(vec![(200, reply.into()), (200, r#"{"choices": []}"#.into())]);
    let llm = HttpLlm::new(url, "test-model", DecodingParams { temperature: 0.0, top_p: Some(0.9), max_tokens: None })
        .with_api_key(Some("k".into()));
    assert_eq!(llm.complete("pick one").unwrap(), "Chosen Item: Item A");
    let req = rx.recv().unwrap();
    assert_eq!(req.body["model"], "test-model");
    assert_eq!(req.body["messages"][0]["content"], "pick one");
    assert_eq!(req.body["temperature"], 0.0);
    assert_eq!(req.body["top_p"], 0.9);
    assert!(req.body.get("max_tokens").is_none());
    assert!(matches!(llm.complete("again"), Err(LlmError::BadResponse(_))));
}

#[test]
fn chat_client_transport_error_is_retriable() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    drop(listener);
    let err = HttpLlm::new(url, "m", DecodingParams::default()).complete("hi").unwrap_err();
    assert!(err.is_retriable(), "{err}");
}
