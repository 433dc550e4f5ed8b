//! In-process mock of a chat-completions endpoint.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};

pub enum Reply {
    Content(String),
    Status(u16),
}

type Handler = dyn Fn(&str) -> Reply + Send + Sync;

pub struct MockServer {
    pub url: String,
    prompts: Arc<Mutex<Vec<String>>>,
}

impl MockServer {
    /// Serves `handler(prompt)` for every POST until the process exits.
    pub fn start(handler: impl Fn(&str) -> Reply + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let prompts = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let log = Arc::clone(&prompts);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (handler, log) = (Arc::clone(&handler), Arc::clone(&log));
                std::thread::spawn(move || serve(stream, &*handler, &log));
            }
        });
        MockServer { url, prompts }
    }

    /// Every prompt received so far, in arrival order.
    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }

    pub fn request_count(&self) -> usize {
        self.prompts.lock().unwrap().len()
    }
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<String>>) {
    let mut writer = stream.try_clone().expect("clone stream");
    let mut reader = BufReader::new(stream);
    loop {
        let Some(body) = read_request(&mut reader) else { return };
        let prompt = serde_json::from_slice::<Value>(&body)
            .ok()
            .and_then(|v| v.pointer("/messages/0/content").and_then(Value::as_str).map(str::to_string))
            .unwrap_or_default();
        log.lock().unwrap().push(prompt.clone());
        let (status, payload) = match handler(&prompt) {
            Reply::Content(content) => (
                200,
                json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}).to_string(),
            ),
            Reply::Status(code) => (code, json!({"error": {"message": "mock failure"}}).to_string()),
        };
        let head = format!(
            "HTTP/1.1 {status} Mock\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            payload.len()
        );
        if writer.write_all(head.as_bytes()).and_then(|_| writer.write_all(payload.as_bytes())).is_err() {
            return;
        }
    }
}

fn read_request(reader: &mut BufReader<TcpStream>) -> Option<Vec<u8>> {
    let mut content_length = 0;
    let mut chunked = false;
    let mut first = true;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).ok()? == 0 {
            return None;
        }
        let line = line.trim_end();
        if first {
            first = false;
            continue;
        }
        if line.is_empty() {
            break;
        }
        let (name, value) = line.split_once(':')?;
        let (name, value) = (name.trim().to_ascii_lowercase(), value.trim());
        if name == "content-length" {
            content_length = value.parse().ok()?;
        } else if name == "transfer-encoding" && value.eq_ignore_ascii_case("chunked") {
            chunked = true;
        }
    }
    let mut body = Vec::new();
    if chunked {
        loop {
            let mut size = String::new();
            reader.read_line(&mut size).ok()?;
            let n = usize::from_str_radix(size.trim(), 16).ok()?;
            let mut chunk = vec![0; n + 2];
            reader.read_exact(&mut chunk).ok()?;
            if n == 0 {
                break;
            }
            body.extend_from_slice(&chunk[..n]);
        }
    } else {
        body.resize(content_length, 0);
        reader.read_exact(&mut body).ok()?;
    }
    Some(body)
}

/// Wraps code in a chatty reply with one fenced block.
pub fn fenced(code: &str) -> String {
    format!("Here is the variant you asked for.\n\n```python\n{code}\n```\n\nIt differs subtly.")
}
