//! Minimal text-generation client for plain-HTTP endpoints (point it
//! at a local inference shim). Sends POST {"prompt": ...} and accepts
//! either {"text": ...} or a raw text body back. Deliberately HTTP/1.0
//! with Connection: close so the reply is just read-to-EOF.

use std::io::{Read, Write};
use std::net::TcpStream;

use intentive::datagen::llm::TextGenClient;
use intentive::error::{Error, Result};

pub struct HttpTextGenClient {
    host: String,
    authority: String,
    path: String,
}

impl HttpTextGenClient {
    pub fn new(endpoint: &str) -> Result<Self> {
        let rest = endpoint.strip_prefix("http://").ok_or_else(|| {
            Error::Usage(format!(
                "endpoint must be a plain http:// URL, got {endpoint:?}"
            ))
        })?;
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, "/"),
        };
        if authority.is_empty() {
            return Err(Error::Usage(format!("endpoint {endpoint:?} has no host")));
        }
        let host = authority.split(':').next().expect("split yields one piece");
        Ok(Self {
            host: host.to_string(),
            authority: if authority.contains(':') {
                authority.to_string()
            } else {
                format!("{authority}:80")
            },
            path: path.to_string(),
        })
    }
}

impl TextGenClient for HttpTextGenClient {
    fn complete(&mut self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({ "prompt": prompt }).to_string();
        let request = format!(
            "POST {} HTTP/1.0\r\nHost: {}\r\nContent-Type: application/json\r\n\
             Content-Length: {}\r\nConnection: close\r\n\r\n{}",
            self.path,
            self.host,
            body.len(),
            body
        );
        let mut stream = TcpStream::connect(&self.authority)
            .map_err(|e| Error::Transport(format!("connect {}: {e}", self.authority)))?;
        stream
            .write_all(request.as_bytes())
            .map_err(|e| Error::Transport(format!("send: {e}")))?;
        let mut response = String::new();
        stream
            .read_to_string(&mut response)
            .map_err(|e| Error::Transport(format!("receive: {e}")))?;
        let (head, reply_body) = response
            .split_once("\r\n\r\n")
            .ok_or_else(|| Error::Transport("malformed HTTP response".into()))?;
        let status = head.lines().next().unwrap_or_default();
        if !status.contains(" 200") {
            return Err(Error::Transport(format!("endpoint returned {status:?}")));
        }
        match serde_json::from_str::<serde_json::Value>(reply_body) {
            Ok(v) => v
                .get("text")
                .and_then(|t| t.as_str())
                .map(str::to_string)
                .ok_or_else(|| {
                    Error::Transport("JSON reply lacks a string \"text\" field".into())
                }),
            Err(_) => Ok(reply_body.to_string()),
        }
    }
}
