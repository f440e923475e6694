//! Live backend against a local stub HTTP server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use forumint_core::backend::{
    BackendError, CompletionBackend, CompletionRequest, LiveBackend, LiveConfig, RetryPolicy,
};

struct Stub {
    base: String,
    attempts: Arc<AtomicUsize>,
    peak: Arc<AtomicUsize>,
    auth: Arc<Mutex<Vec<String>>>,
}

fn read_request(stream: &mut TcpStream) -> (String, String) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut auth = String::new();
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
            break;
        }
        let lower = line.to_ascii_lowercase();
        if let Some(v) = lower.strip_prefix("content-length:") {
            len = v.trim().parse().unwrap();
        }
        if lower.starts_with("authorization:") {
            auth = line["authorization:".len()..].trim().to_string();
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    (auth, String::from_utf8(body).unwrap())
}

/// Serves `statuses` in order (repeating the last), one request per
/// connection, each held for `hold`.
fn stub(statuses: Vec<u16>, hold: Duration) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let attempts = Arc::new(AtomicUsize::new(0));
    let live = Arc::new(AtomicUsize::new(0));
    let peak = Arc::new(AtomicUsize::new(0));
    let auth = Arc::new(Mutex::new(Vec::new()));
    let (a, l, p, au) = (attempts.clone(), live.clone(), peak.clone(), auth.clone());
    thread::spawn(move || {
        for stream in listener.incoming() {
            let mut stream = stream.unwrap();
            let n = a.fetch_add(1, Ordering::SeqCst);
            let status = *statuses.get(n).or(statuses.last()).unwrap();
            let (l, p, au) = (l.clone(), p.clone(), au.clone());
            thread::spawn(move || {
                let now = l.fetch_add(1, Ordering::SeqCst) + 1;
                p.fetch_max(now, Ordering::SeqCst);
                let (auth, _body) = read_request(&mut stream);
                au.lock().unwrap().push(auth);
                thread::sleep(hold);
                let body = if status == 200 {
                    r#"{"choices":[{"message":{"role":"assistant","content":"{\"summary\":\"ok\"}"}}],"usage":{"prompt_tokens":3,"completion_tokens":2,"total_tokens":5}}"#.to_string()
                } else {
                    format!(r#"{{"error":"status {status}"}}"#)
                };
                let resp = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                l.fetch_sub(1, Ordering::SeqCst);
                let _ = stream.write_all(resp.as_bytes());
            });
        }
    });
    Stub {
        base,
        attempts,
        peak,
        auth,
    }
}

fn backend(base: &str, max_retries: u32, max_in_flight: usize) -> LiveBackend {
    LiveBackend::new(LiveConfig {
        api_base: base.to_string(),
        api_key: "test-key".into(),
        timeout: Duration::from_secs(10),
        retry: RetryPolicy {
            max_retries,
            initial_delay: Duration::from_millis(5),
            factor: 2.0,
            max_delay: Duration::from_millis(20),
        },
        max_in_flight,
    })
}

fn request() -> CompletionRequest {
    CompletionRequest {
        model_id: "gpt-3.5-turbo-16k-0613".into(),
        system_text: Some("persona".into()),
        user_text: "conversation".into(),
        temperature: 0.0,
        max_output: 64,
    }
}

#[test]
fn rate_limit_then_success_reports_one_retry() {
    let s = stub(vec![429, 200], Duration::ZERO);
    let result = backend(&s.base, 5, 4).complete(&request()).unwrap();
    assert_eq!(result.retries, 1);
    assert_eq!(result.raw_text, r#"{"summary":"ok"}"#);
    assert_eq!(result.usage.unwrap().total_tokens, 5);
    assert_eq!(s.attempts.load(Ordering::SeqCst), 2);
    assert!(s.auth.lock().unwrap().iter().all(|a| a == "Bearer test-key"));
}

#[test]
fn persistent_rate_limit_stops_after_retry_budget() {
    let s = stub(vec![429], Duration::ZERO);
    let err = backend(&s.base, 2, 4).complete(&request()).unwrap_err();
    assert!(matches!(err, BackendError::RateLimited { attempts: 3 }), "{err:?}");
    assert_eq!(s.attempts.load(Ordering::SeqCst), 3);
}

#[test]
fn server_errors_are_retried_client_errors_are_not() {
    let s = stub(vec![503, 502, 200], Duration::ZERO);
    assert_eq!(backend(&s.base, 5, 4).complete(&request()).unwrap().retries, 2);

    let s = stub(vec![400], Duration::ZERO);
    let err = backend(&s.base, 5, 4).complete(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Provider { status: 400, .. }), "{err:?}");
    assert_eq!(s.attempts.load(Ordering::SeqCst), 1);
}

#[test]
fn in_flight_cap_bounds_concurrency() {
    let s = stub(vec![200], Duration::from_millis(60));
    let b = Arc::new(backend(&s.base, 0, 2));
    let handles: Vec<_> = (0..6)
        .map(|_| {
            let b = b.clone();
            thread::spawn(move || b.complete(&request()).unwrap())
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(s.attempts.load(Ordering::SeqCst), 6);
    assert!(s.peak.load(Ordering::SeqCst) <= 2, "peak {}", s.peak.load(Ordering::SeqCst));
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let err = backend(&base, 1, 1).complete(&request()).unwrap_err();
    assert!(matches!(err, BackendError::Transport(_)), "{err:?}");
}
