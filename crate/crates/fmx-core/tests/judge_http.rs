//! End-to-end tests of the HTTP judge backend against a minimal local
//! chat-completions server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::thread::JoinHandle;

use fmx_core::error::Error;
use fmx_core::judge::{
    judge_latents, ChatBackend, HttpBackend, JudgeConfig, JudgeCounts, LatentEvidence,
    TokenEvidence,
};

const TOKEN_VAR: &str = "FMX_JUDGE_TEST_TOKEN";
const TOKEN_VALUE: &str = "test-secret-token";

struct Recorded {
    auth: String,
    body: String,
}

/// Serve `responses` one connection at a time, recording each request.
fn spawn_server(responses: Vec<(u16, String)>) -> (String, JoinHandle<Vec<Recorded>>) {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind local listener");
    let addr = listener.local_addr().unwrap();
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in responses {
            let (mut stream, _) = listener.accept().expect("accept");
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            let mut content_len = 0usize;
            let mut auth = String::new();
            loop {
                line.clear();
                if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    content_len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.splitn(2, ':').nth(1).unwrap().trim().to_string();
                }
            }
            let mut raw = vec![0u8; content_len];
            reader.read_exact(&mut raw).unwrap();
            seen.push(Recorded { auth, body: String::from_utf8_lossy(&raw).into_owned() });
            let reply = format!(
                "HTTP/1.1 {status} REPLY\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                body.len()
            );
            stream.write_all(reply.as_bytes()).unwrap();
            stream.flush().unwrap();
        }
        seen
    });
    (format!("http://{addr}/v1/chat/completions"), handle)
}

fn completion_body(content: &str) -> String {
    serde_json::json!({
        "choices": [{"message": {"role": "assistant", "content": content}}]
    })
    .to_string()
}

fn backend_for(url: &str, max_retries: usize) -> HttpBackend {
    std::env::set_var(TOKEN_VAR, TOKEN_VALUE);
    HttpBackend::new(JudgeConfig {
        base_url: url.to_string(),
        model: "judge-model".into(),
        auth_env: TOKEN_VAR.into(),
        max_retries,
        backoff_base_ms: 5,
        requests_per_second: 1000.0,
        timeout_secs: 10,
        ..JudgeConfig::default()
    })
    .expect("backend construction")
}

fn evidence(id: usize) -> LatentEvidence {
    LatentEvidence::new(id, vec![TokenEvidence::new(format!("tok{id}"), vec![]).unwrap()]).unwrap()
}

#[test]
fn completes_against_local_server_with_bearer_auth() {
    let verdict = r#"{"semantic_score": 0.9, "surface_score": 0.1}"#;
    let (url, handle) = spawn_server(vec![(200, completion_body(verdict))]);
    let mut backend = backend_for(&url, 0);
    let text = backend.complete("system says", "user asks").unwrap();
    assert_eq!(text, verdict);
    let seen = handle.join().unwrap();
    assert_eq!(seen.len(), 1);
    assert_eq!(seen[0].auth, format!("Bearer {TOKEN_VALUE}"));
    let body: serde_json::Value = serde_json::from_str(&seen[0].body).unwrap();
    assert_eq!(body["model"], "judge-model");
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][0]["content"], "system says");
    assert_eq!(body["messages"][1]["content"], "user asks");
}

#[test]
fn retries_transient_failures_with_backoff() {
    let verdict = r#"{"semantic_score": 0.8, "surface_score": 0.2}"#;
    let (url, handle) = spawn_server(vec![
        (500, "{}".to_string()),
        (429, "{}".to_string()),
        (200, completion_body(verdict)),
    ]);
    let mut backend = backend_for(&url, 3);
    let text = backend.complete("sys", "user").unwrap();
    assert_eq!(text, verdict);
    assert_eq!(handle.join().unwrap().len(), 3);
}

#[test]
fn persistent_failure_is_recorded_per_latent_and_run_continues() {
    let verdict = r#"{"semantic_score": 0.95, "surface_score": 0.0}"#;
    // Latent 0: two failures then give up (max_retries = 1). Latent 1: fine.
    let (url, handle) = spawn_server(vec![
        (500, "{}".to_string()),
        (500, "{}".to_string()),
        (200, completion_body(verdict)),
    ]);
    let mut backend = backend_for(&url, 1);
    let evs = vec![evidence(0), evidence(1)];
    let (outcomes, counts) = judge_latents(&evs, &mut backend, "sys");
    assert_eq!(counts, JudgeCounts { semantic: 1, surface: 0, unlabeled: 0, errored: 1 });
    assert!(outcomes[0].error.as_ref().unwrap().contains("500"));
    assert_eq!(outcomes[1].verdict.as_ref().unwrap().semantic_score, 0.95);
    assert_eq!(handle.join().unwrap().len(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let (url, _handle) = spawn_server(vec![(403, "forbidden".to_string())]);
    let mut backend = backend_for(&url, 5);
    // A single server response is queued; a retry would hang on accept, so
    // completing here proves no retry was attempted.
    match backend.complete("sys", "user") {
        Err(Error::Http(msg)) => assert!(msg.contains("403"), "{msg}"),
        other => panic!("expected http error, got {other:?}"),
    }
}
