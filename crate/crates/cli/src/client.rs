//! Blocking HTTP access to the manager.

use std::io::{BufRead, BufReader};
use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::StatusCode;
use serde_json::Value;

use crate::sse::{SseEvent, SseParser};

const REQUEST_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    /// The manager answered with a non-success status; `body` is kept verbatim.
    #[error("manager returned {status}")]
    Server { status: StatusCode, body: String },
    #[error("cannot reach manager: {0}")]
    Transport(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Server { .. } => 2,
            CliError::Transport(_) => 3,
        }
    }
}

impl From<reqwest::Error> for CliError {
    fn from(e: reqwest::Error) -> Self {
        CliError::Transport(e.to_string())
    }
}

/// Accepts `http://host:port`, `host:port` or `:port`.
pub fn base_url(manager: &str) -> String {
    let m = manager.trim_end_matches('/');
    if m.contains("://") {
        m.to_owned()
    } else if let Some(port) = m.strip_prefix(':') {
        format!("http://127.0.0.1:{port}")
    } else {
        format!("http://{m}")
    }
}

pub struct Api {
    base: String,
    http: Client,
}

/// A successful reply: status plus JSON body (`Null` when empty).
pub struct Reply {
    pub status: StatusCode,
    pub body: Value,
}

impl Api {
    pub fn new(manager: &str) -> Result<Self, CliError> {
        // No client-wide timeout: `watch` holds its stream open indefinitely.
        let http = Client::builder().timeout(None::<Duration>).build()?;
        Ok(Self { base: base_url(manager), http })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    fn send(req: RequestBuilder) -> Result<Reply, CliError> {
        let res = req.timeout(REQUEST_TIMEOUT).send()?;
        let status = res.status();
        let text = res.text()?;
        if !status.is_success() {
            return Err(CliError::Server { status, body: text });
        }
        let body = if text.trim().is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).map_err(|e| CliError::Transport(format!("unreadable reply: {e}")))?
        };
        Ok(Reply { status, body })
    }

    pub fn get(&self, path: &str) -> Result<Reply, CliError> {
        Self::send(self.http.get(self.url(path)))
    }

    pub fn post(&self, path: &str, body: &Value) -> Result<Reply, CliError> {
        Self::send(self.http.post(self.url(path)).json(body))
    }

    pub fn delete(&self, path: &str, if_match: Option<u64>) -> Result<Reply, CliError> {
        let mut req = self.http.delete(self.url(path));
        if let Some(rev) = if_match {
            req = req.header("If-Match", format!("\"{rev}\""));
        }
        Self::send(req)
    }

    /// Opens an event stream and hands each event to `on_event` until it
    /// returns false or the server closes the stream.
    pub fn stream(&self, path: &str, mut on_event: impl FnMut(SseEvent) -> bool) -> Result<(), CliError> {
        let res: Response = self.http.get(self.url(path)).header("Accept", "text/event-stream").send()?;
        let status = res.status();
        if !status.is_success() {
            return Err(CliError::Server { status, body: res.text().unwrap_or_default() });
        }
        let mut parser = SseParser::default();
        let mut reader = BufReader::new(res);
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| CliError::Transport(e.to_string()))?;
            if n == 0 {
                return Ok(());
            }
            if let Some(ev) = parser.line(&line) {
                if !on_event(ev) {
                    return Ok(());
                }
            }
        }
    }
}
