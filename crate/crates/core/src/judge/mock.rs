//! Scriptable in-process judge backend implementing the same wire protocol
//! as a real deployment. Tests (and bindings in other languages) point a
//! client at [`MockJudgeServer::endpoint`] and script replies per request.
//!
//! The server also exposes the probes the client contract is verified
//! against: a total-request counter and a high-water mark of concurrently
//! outstanding requests.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

type Handler = Box<dyn Fn(&serde_json::Value) -> MockReply + Send + Sync>;

/// What the scripted backend returns for one request.
#[derive(Debug, Clone)]
pub enum MockReply {
    /// 200 with `{"text": ..., "model_id": <echoed from the request>}`.
    Text(String),
    /// Arbitrary status and raw body.
    Raw { status: u16, body: String },
}

impl MockReply {
    pub fn text(t: impl Into<String>) -> Self {
        MockReply::Text(t.into())
    }

    pub fn status(status: u16, body: impl Into<String>) -> Self {
        MockReply::Raw { status, body: body.into() }
    }
}

struct MockState {
    handler: RwLock<Handler>,
    total: AtomicUsize,
    current: AtomicUsize,
    max_concurrent: AtomicUsize,
    fail_remaining: AtomicUsize,
    shutdown: AtomicBool,
}

pub struct MockJudgeServer {
    addr: SocketAddr,
    state: Arc<MockState>,
    accept_thread: Option<JoinHandle<()>>,
}

impl MockJudgeServer {
    /// Start a server whose every reply comes from `handler`. The handler
    /// receives the parsed request body `{task, model_id, prompt, images,
    /// params}`.
    pub fn start_with<F>(handler: F) -> Self
    where
        F: Fn(&serde_json::Value) -> MockReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let addr = listener.local_addr().expect("local addr");
        let state = Arc::new(MockState {
            handler: RwLock::new(Box::new(handler) as Handler),
            total: AtomicUsize::new(0),
            current: AtomicUsize::new(0),
            max_concurrent: AtomicUsize::new(0),
            fail_remaining: AtomicUsize::new(0),
            shutdown: AtomicBool::new(false),
        });
        let accept_state = state.clone();
        let accept_thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_state.shutdown.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let conn_state = accept_state.clone();
                std::thread::spawn(move || {
                    let _ = handle_connection(stream, &conn_state);
                });
            }
        });
        MockJudgeServer { addr, state, accept_thread: Some(accept_thread) }
    }

    /// Convenience: every reply is the same text.
    pub fn start_scripted(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::start_with(move |_| MockReply::Text(text.clone()))
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Make the next `n` requests fail with HTTP 500 before the handler runs.
    pub fn fail_next(&self, n: usize) {
        self.state.fail_remaining.store(n, Ordering::SeqCst);
    }

    pub fn set_handler<F>(&self, handler: F)
    where
        F: Fn(&serde_json::Value) -> MockReply + Send + Sync + 'static,
    {
        *self.state.handler.write().expect("handler lock") = Box::new(handler);
    }

    /// Requests that reached the judge route since startup.
    pub fn total_requests(&self) -> usize {
        self.state.total.load(Ordering::SeqCst)
    }

    /// High-water mark of concurrently outstanding requests.
    pub fn max_concurrent(&self) -> usize {
        self.state.max_concurrent.load(Ordering::SeqCst)
    }
}

impl Drop for MockJudgeServer {
    fn drop(&mut self) {
        self.state.shutdown.store(true, Ordering::SeqCst);
        // Nudge the accept loop awake.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(stream: TcpStream, state: &MockState) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut content_length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some(value) = line.to_ascii_lowercase().strip_prefix("content-length:") {
            content_length = value.trim().parse().unwrap_or(0);
        }
    }
    let mut body = vec![0u8; content_length];
    reader.read_exact(&mut body)?;

    let mut parts = request_line.split_whitespace();
    let method = parts.next().unwrap_or("");
    let path = parts.next().unwrap_or("");
    if method != "POST" || path != "/v1/judge" {
        return write_response(stream, 404, r#"{"error":"not found"}"#);
    }

    state.total.fetch_add(1, Ordering::SeqCst);
    let now = state.current.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_concurrent.fetch_max(now, Ordering::SeqCst);

    let result = (|| {
        // Scripted failures burn down before the handler sees anything.
        let should_fail = state
            .fail_remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if should_fail {
            return (500, r#"{"error":"scripted failure"}"#.to_string());
        }
        let parsed: serde_json::Value = match serde_json::from_slice(&body) {
            Ok(v) => v,
            Err(e) => return (400, format!(r#"{{"error":"bad json: {e}"}}"#)),
        };
        let reply = (state.handler.read().expect("handler lock"))(&parsed);
        match reply {
            MockReply::Text(text) => {
                let model_id = parsed["model_id"].as_str().unwrap_or("mock");
                let body = serde_json::json!({ "text": text, "model_id": model_id });
                (200, body.to_string())
            }
            MockReply::Raw { status, body } => (status, body),
        }
    })();

    state.current.fetch_sub(1, Ordering::SeqCst);
    write_response(stream, result.0, &result.1)
}

fn write_response(mut stream: TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        _ => "Error",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()
}
