//! HTTP generation client.
//!
//! Protocol: `POST <endpoint>` with JSON body
//! `{"prompt", "max_new_units", "temperature", "stop_markers"}` and an optional
//! `Authorization: Bearer <token>` header; the reply is `{"text": "..."}`.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{truncate_at_stop, GenerationRequest, ModelBackendConfig, TextGenerator};
use crate::error::{Error, Result};

/// Blocking JSON POST client with bounded retries.
#[derive(Debug, Clone)]
pub struct JsonEndpoint {
    client: reqwest::blocking::Client,
    endpoint: String,
    token: Option<String>,
    retry_limit: u32,
}

impl JsonEndpoint {
    pub fn new(
        endpoint: impl Into<String>,
        token: Option<String>,
        retry_limit: u32,
        timeout: Duration,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(JsonEndpoint {
            client,
            endpoint: endpoint.into(),
            token,
            retry_limit,
        })
    }

    /// Reads the bearer token from the named environment variable, if any.
    pub fn token_from_env(var: Option<&str>) -> Result<Option<String>> {
        match var {
            None => Ok(None),
            Some(name) => std::env::var(name)
                .map(Some)
                .map_err(|_| Error::Config(format!("environment variable {name} is not set"))),
        }
    }

    fn attempt<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> std::result::Result<R, String> {
        let mut req = self.client.post(&self.endpoint).json(body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(format!("HTTP {status}: {text}"));
        }
        resp.json::<R>().map_err(|e| format!("malformed response body: {e}"))
    }

    /// At most `retry_limit + 1` attempts; the last failure is returned verbatim.
    pub fn post<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R> {
        let attempts = self.retry_limit + 1;
        let mut last = String::new();
        for i in 1..=attempts {
            match self.attempt(body) {
                Ok(r) => return Ok(r),
                Err(e) => {
                    log::warn!("{} attempt {i}/{attempts} failed: {e}", self.endpoint);
                    last = e;
                }
            }
        }
        Err(Error::TransientBackend(format!(
            "{} failed after {attempts} attempts: {last}",
            self.endpoint
        )))
    }
}

#[derive(Deserialize)]
struct GenerationReply {
    text: String,
}

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    endpoint: JsonEndpoint,
}

impl RemoteBackend {
    pub fn new(endpoint: JsonEndpoint) -> Self {
        RemoteBackend { endpoint }
    }

    pub fn from_config(cfg: &ModelBackendConfig) -> Result<Self> {
        cfg.validate()?;
        let url = cfg
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config("remote backend requires an endpoint".into()))?;
        let token = JsonEndpoint::token_from_env(cfg.auth_env_var.as_deref())?;
        Ok(RemoteBackend::new(JsonEndpoint::new(
            url,
            token,
            cfg.retry_limit,
            cfg.timeout(),
        )?))
    }
}

impl TextGenerator for RemoteBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<String> {
        request.validate()?;
        let reply: GenerationReply = self.endpoint.post(request)?;
        Ok(truncate_at_stop(&reply.text, &request.stop_markers))
    }
}

#[cfg(test)]
pub(crate) mod test_server {
    //! Minimal HTTP/1.1 server answering a fixed sequence of responses.

    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};
    use std::thread;

    pub struct Served {
        pub url: String,
        pub requests: Arc<Mutex<Vec<(String, String)>>>,
    }

    /// Each element is (status, body). Requests are recorded as (auth header, body).
    pub fn serve(responses: Vec<(u16, String)>) -> Served {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/generate", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        thread::spawn(move || {
            for (status, body) in responses {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut auth = String::new();
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    let lower = l.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    if lower.starts_with("authorization:") {
                        auth = l["authorization:".len()..].trim().to_string();
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                log.lock().unwrap().push((auth, String::from_utf8(buf).unwrap()));
                let mut stream = stream;
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
        });
        Served { url, requests }
    }
}
