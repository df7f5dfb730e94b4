//! Wire transports: real HTTP and the in-process mock.

use std::time::Duration;

use serde_json::Value;

use super::{BackendEndpoint, Role};

/// One JSON POST to a backend.
#[derive(Debug, Clone)]
pub struct WireRequest {
    pub role: Role,
    /// Path appended to the endpoint's base URL.
    pub path: &'static str,
    pub body: Value,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireResponse {
    pub status: u16,
    pub body: String,
}

impl WireResponse {
    pub fn ok(body: impl Into<String>) -> Self {
        Self { status: 200, body: body.into() }
    }

    pub fn status(status: u16, body: impl Into<String>) -> Self {
        Self { status, body: body.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Connect(String),
}

impl std::fmt::Display for TransportError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransportError::Timeout => f.write_str("request timed out"),
            TransportError::Connect(e) => write!(f, "connection failed: {e}"),
        }
    }
}

pub trait Transport: Send + Sync {
    fn send(&self, endpoint: &BackendEndpoint, request: &WireRequest) -> Result<WireResponse, TransportError>;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl Default for HttpTransport {
    fn default() -> Self {
        let config = ureq::Agent::config_builder().http_status_as_error(false).build();
        Self { agent: ureq::Agent::new_with_config(config) }
    }
}

impl Transport for HttpTransport {
    fn send(&self, endpoint: &BackendEndpoint, request: &WireRequest) -> Result<WireResponse, TransportError> {
        let url = format!("{}{}", endpoint.base_url.trim_end_matches('/'), request.path);
        let mut builder = self.agent.post(&url).header("content-type", "application/json");
        if let Some(token) = endpoint.auth_token() {
            builder = builder.header("authorization", format!("Bearer {token}"));
        }
        let builder = builder
            .config()
            .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_secs)))
            .build();
        let body = serde_json::to_vec(&request.body).map_err(|e| TransportError::Connect(e.to_string()))?;
        match builder.send(&body[..]) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let body = resp.body_mut().read_to_string().map_err(map_err)?;
                Ok(WireResponse { status, body })
            }
            Err(e) => Err(map_err(e)),
        }
    }
}

fn map_err(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => TransportError::Timeout,
        other => TransportError::Connect(other.to_string()),
    }
}
