//! Transcript tests for the JSON wire protocol against a loopback mock server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use hice::backends::{Backend, Encoder, WireClient};
use hice::Error;
use serde_json::{json, Value};

struct Recorded {
    method: String,
    path: String,
    body: Value,
}

/// Serves one canned `(status, body)` reply per incoming connection, in order.
fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<Recorded>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for (status, body) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let mut parts = line.split_whitespace();
            let method = parts.next().unwrap_or_default().to_string();
            let path = parts.next().unwrap_or_default().to_string();
            let mut length = 0usize;
            let mut chunked = false;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let lower = h.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    length = v.trim().parse().unwrap();
                }
                if lower.starts_with("transfer-encoding:") && lower.contains("chunked") {
                    chunked = true;
                }
            }
            let raw = if chunked {
                let mut out = Vec::new();
                loop {
                    let mut size = String::new();
                    reader.read_line(&mut size).unwrap();
                    let n = usize::from_str_radix(size.trim(), 16).unwrap();
                    let mut chunk = vec![0u8; n + 2];
                    reader.read_exact(&mut chunk).unwrap();
                    if n == 0 {
                        break;
                    }
                    out.extend_from_slice(&chunk[..n]);
                }
                out
            } else {
                let mut buf = vec![0u8; length];
                reader.read_exact(&mut buf).unwrap();
                buf
            };
            let body_json = serde_json::from_slice(&raw).unwrap_or(Value::Null);
            tx.send(Recorded {
                method,
                path,
                body: body_json,
            })
            .unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
    });
    (url, rx)
}

fn client(url: &str) -> WireClient {
    WireClient::new(url, 2, Duration::from_secs(10))
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

#[test]
fn answer_request_and_reply_shapes() {
    let (url, rx) = serve(vec![(200, r#"{"answer": "paris"}"#.into())]);
    let a = client(&url).answer("images/a.jpg", "what is the capital of france?").unwrap();
    assert_eq!(a, "paris");
    let r = rx.recv().unwrap();
    assert_eq!(r.method, "POST");
    assert_eq!(r.path, "/v1/answer");
    assert_eq!(
        r.body,
        json!({"image": "images/a.jpg", "prompt": "what is the capital of france?"})
    );
}

#[test]
fn embed_text_request_and_reply_shapes() {
    let (url, rx) = serve(vec![(
        200,
        r#"{"dim": 3, "vectors": [[1.0, 0.0, 0.5], [0.25, -1.0, 2.0]]}"#.into(),
    )]);
    let v = client(&url).embed_texts(&strings(&["a", "b"])).unwrap();
    assert_eq!(v, vec![vec![1.0, 0.0, 0.5], vec![0.25, -1.0, 2.0]]);
    let r = rx.recv().unwrap();
    assert_eq!(r.path, "/v1/embed_text");
    assert_eq!(r.body, json!({"texts": ["a", "b"]}));
}

#[test]
fn embed_image_request_and_reply_shapes() {
    let (url, rx) = serve(vec![(200, r#"{"dim": 2, "vectors": [[0.5, 0.5]]}"#.into())]);
    let v = client(&url).embed_images(&strings(&["images/x.png"])).unwrap();
    assert_eq!(v, vec![vec![0.5, 0.5]]);
    let r = rx.recv().unwrap();
    assert_eq!(r.path, "/v1/embed_image");
    assert_eq!(r.body, json!({"images": ["images/x.png"]}));
}

#[test]
fn non_200_is_a_backend_error_with_message() {
    let (url, _rx) = serve(vec![
        (500, r#"{"error": "model not loaded"}"#.into()),
        (503, "overloaded".into()),
        (404, r#"{"error": "no such route"}"#.into()),
    ]);
    let c = client(&url);
    match c.answer("", "q").unwrap_err() {
        Error::Backend { status, message } => {
            assert_eq!(status, 500);
            assert_eq!(message, "model not loaded");
        }
        e => panic!("{e}"),
    }
    match c.embed_texts(&strings(&["a"])).unwrap_err() {
        Error::Backend { status, message } => {
            assert_eq!(status, 503);
            assert_eq!(message, "overloaded");
        }
        e => panic!("{e}"),
    }
    assert!(matches!(
        c.embed_images(&strings(&["i"])).unwrap_err(),
        Error::Backend { status: 404, .. }
    ));
}

#[test]
fn malformed_replies_are_transport_errors() {
    let (url, _rx) = serve(vec![
        (200, r#"{"text": "paris"}"#.into()),
        (200, "not json".into()),
        (200, r#"{"dim": 2, "vectors": [[1.0, 2.0]]}"#.into()),
    ]);
    let c = client(&url);
    assert!(matches!(c.answer("", "q").unwrap_err(), Error::Transport(_)));
    assert!(matches!(c.embed_texts(&strings(&["a"])).unwrap_err(), Error::Transport(_)));
    // Two inputs, one vector back.
    assert!(matches!(
        c.embed_images(&strings(&["a", "b"])).unwrap_err(),
        Error::Transport(_)
    ));
}

#[test]
fn embed_reply_dimension_must_match_vectors() {
    let (url, _rx) = serve(vec![(200, r#"{"dim": 3, "vectors": [[1.0, 2.0]]}"#.into())]);
    assert!(matches!(
        client(&url).embed_texts(&strings(&["a"])).unwrap_err(),
        Error::DimMismatch { expected: 3, actual: 2 }
    ));
}

#[test]
fn unreachable_server_is_a_transport_error() {
    let port = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let c = client(&format!("http://127.0.0.1:{port}"));
    assert!(matches!(c.answer("", "q").unwrap_err(), Error::Transport(_)));
}

#[test]
fn batch_answers_keep_request_order() {
    let (url, rx) = serve(vec![
        (200, r#"{"answer": "x"}"#.into()),
        (200, r#"{"answer": "x"}"#.into()),
        (200, r#"{"answer": "x"}"#.into()),
    ]);
    let c = WireClient::new(&url, 1, Duration::from_secs(10));
    let reqs: Vec<_> = ["p0", "p1", "p2"]
        .iter()
        .map(|p| hice::backends::BackendRequest {
            image_ref: String::new(),
            prompt: p.to_string(),
        })
        .collect();
    let out = c.batch_answer(&reqs);
    assert_eq!(out.len(), 3);
    assert!(out.iter().all(|r| r.as_ref().unwrap().answer == "x"));
    let prompts: Vec<_> = (0..3).map(|_| rx.recv().unwrap().body["prompt"].clone()).collect();
    assert_eq!(prompts, vec![json!("p0"), json!("p1"), json!("p2")]);
}
