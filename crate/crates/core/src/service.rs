//! Optional external caption service.
//!
//! When configured, caption rewrites are requested from an HTTP endpoint
//! instead of the built-in templates: `POST` with a JSON body
//!
//! ```text
//! {"mode": "transform" | "compose", "base_captions": [...], "description": "..."}
//! ```
//!
//! expecting `{"caption": "..."}` back. Any failure (connect, timeout,
//! non-200, malformed body) logs a warning and falls back to the template
//! engine, so training never blocks on the network. Plain `http://` only;
//! the client speaks just enough HTTP/1.1 for this exchange
//! (`Connection: close`, identity encoding).

use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::augment::{AudioTransformSpec, CaptionEngine};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionServiceConfig {
    /// Endpoint, e.g. `http://127.0.0.1:8090/caption`.
    pub url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Extra attempts after the first failure.
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout_ms() -> u64 {
    2_000
}

fn default_retries() -> u32 {
    1
}

#[derive(Debug, Clone)]
pub struct CaptionClient {
    host: String,
    port: u16,
    path: String,
    timeout: Duration,
    retries: u32,
}

impl CaptionClient {
    pub fn new(config: &CaptionServiceConfig) -> Result<Self> {
        let rest = config.url.strip_prefix("http://").ok_or_else(|| {
            Error::Config(format!(
                "caption service url must start with http:// (got {:?})",
                config.url
            ))
        })?;
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], rest[i..].to_string()),
            None => (rest, "/".to_string()),
        };
        let (host, port) = match authority.rsplit_once(':') {
            Some((h, p)) => {
                let port: u16 = p.parse().map_err(|_| {
                    Error::Config(format!("bad port in caption service url: {p:?}"))
                })?;
                (h.to_string(), port)
            }
            None => (authority.to_string(), 80),
        };
        if host.is_empty() {
            return Err(Error::Config("caption service url has no host".into()));
        }
        if config.timeout_ms == 0 {
            return Err(Error::Config("caption service timeout must be positive".into()));
        }
        Ok(CaptionClient {
            host,
            port,
            path,
            timeout: Duration::from_millis(config.timeout_ms),
            retries: config.retries,
        })
    }

    pub fn transform(&self, base_caption: &str, description: &str) -> Result<String> {
        self.request(&json!({
            "mode": "transform",
            "base_captions": [base_caption],
            "description": description,
        }))
    }

    pub fn compose(&self, a: &str, b: &str, description: &str) -> Result<String> {
        self.request(&json!({
            "mode": "compose",
            "base_captions": [a, b],
            "description": description,
        }))
    }

    fn request(&self, body: &serde_json::Value) -> Result<String> {
        let payload = body.to_string();
        let mut last_err = Error::Service("caption service not attempted".into());
        for _ in 0..=self.retries {
            match self.attempt(&payload) {
                Ok(caption) => return Ok(caption),
                Err(e) => last_err = e,
            }
        }
        Err(last_err)
    }

    fn attempt(&self, payload: &str) -> Result<String> {
        let addr = (self.host.as_str(), self.port)
            .to_socket_addrs()
            .map_err(|e| Error::Service(format!("cannot resolve {}: {e}", self.host)))?
            .next()
            .ok_or_else(|| Error::Service(format!("no address for {}", self.host)))?;
        let mut stream = TcpStream::connect_timeout(&addr, self.timeout)
            .map_err(|e| Error::Service(format!("connect to {addr} failed: {e}")))?;
        stream.set_read_timeout(Some(self.timeout)).ok();
        stream.set_write_timeout(Some(self.timeout)).ok();

        let request = format!(
            "POST {} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\n\
             Content-Length: {}\r\nConnection: close\r\n\r\n{}",
            self.path,
            self.host,
            payload.len(),
            payload
        );
        stream
            .write_all(request.as_bytes())
            .map_err(|e| Error::Service(format!("request write failed: {e}")))?;

        let mut raw = Vec::new();
        stream
            .read_to_end(&mut raw)
            .map_err(|e| Error::Service(format!("response read failed: {e}")))?;
        let text = String::from_utf8_lossy(&raw);
        let (head, body) = text
            .split_once("\r\n\r\n")
            .ok_or_else(|| Error::Service("malformed response: no header terminator".into()))?;
        let status_line = head.lines().next().unwrap_or("");
        let status: u16 = status_line
            .split_whitespace()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Service(format!("malformed status line {status_line:?}")))?;
        if status != 200 {
            return Err(Error::Service(format!("caption service returned status {status}")));
        }
        if head.to_ascii_lowercase().contains("transfer-encoding: chunked") {
            return Err(Error::Service("chunked responses are not supported".into()));
        }
        let value: serde_json::Value = serde_json::from_str(body.trim())
            .map_err(|e| Error::Service(format!("response is not valid JSON: {e}")))?;
        let caption = value
            .get("caption")
            .and_then(|c| c.as_str())
            .ok_or_else(|| Error::Service("response JSON has no string \"caption\" field".into()))?;
        let caption = caption.split_whitespace().collect::<Vec<_>>().join(" ");
        if caption.is_empty() {
            return Err(Error::Service("caption service returned an empty caption".into()));
        }
        Ok(caption)
    }
}

/// Caption rewriting with an optional service in front of the templates.
#[derive(Debug, Clone)]
pub struct CaptionSource {
    engine: CaptionEngine,
    client: Option<CaptionClient>,
}

impl CaptionSource {
    pub fn templates_only(engine: CaptionEngine) -> Self {
        CaptionSource { engine, client: None }
    }

    pub fn with_service(engine: CaptionEngine, client: CaptionClient) -> Self {
        CaptionSource { engine, client: Some(client) }
    }

    pub fn engine(&self) -> &CaptionEngine {
        &self.engine
    }

    pub fn transform_caption(
        &self,
        caption: &str,
        spec: &AudioTransformSpec,
        seed: u64,
    ) -> Result<String> {
        spec.validate()?;
        if let Some(client) = &self.client {
            match client.transform(caption, &spec.description()) {
                Ok(c) => return Ok(c),
                Err(e) => log::warn!("caption service failed ({e}); using templates"),
            }
        }
        self.engine.transform_caption(caption, spec, seed)
    }

    pub fn compose_captions(&self, a: &str, b: &str, seed: u64) -> Result<String> {
        // identical captions are a contract violation regardless of backend;
        // let the template engine's check run first
        let template_result = self.engine.compose_captions(a, b, seed);
        if let Some(client) = &self.client {
            if template_result.is_ok() {
                match client.compose(a, b, "two sounds in the same scene") {
                    Ok(c) => return Ok(c),
                    Err(e) => log::warn!("caption service failed ({e}); using templates"),
                }
            }
        }
        template_result
    }
}
