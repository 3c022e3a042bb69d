//! HTTP adapter: one POST endpoint per request kind, JSON envelopes.

use std::time::Duration;

use ureq::Agent;

use super::{ClientError, ClientRequest, ClientResponse, ModelClient, RequestEnvelope, ResponseEnvelope};

/// Environment variable holding the base URL of the model service.
pub const ENDPOINT_ENV: &str = "CAUSELOC_ENDPOINT";

pub struct HttpClient {
    base_url: String,
    agent: Agent,
}

impl HttpClient {
    pub fn new(base_url: impl Into<String>, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn from_env(timeout: Duration) -> Option<Self> {
        std::env::var(ENDPOINT_ENV).ok().map(|url| HttpClient::new(url, timeout))
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }
}

fn transport_error(e: ureq::Error) -> ClientError {
    match e {
        ureq::Error::Timeout(t) => ClientError::Timeout(t.to_string()),
        ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
            ClientError::Retryable(e.to_string())
        }
        other => ClientError::Fatal(other.to_string()),
    }
}

impl ModelClient for HttpClient {
    fn call(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        let envelope = RequestEnvelope::new(request.clone());
        let url = format!("{}{}", self.base_url, request.kind().endpoint());
        let mut resp = self
            .agent
            .post(&url)
            .header("Idempotency-Key", &envelope.idempotency_key)
            .send_json(&envelope)
            .map_err(transport_error)?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(ClientError::Retryable(format!("HTTP {status} from {url}")));
        }
        if status >= 400 {
            return Err(ClientError::Fatal(format!("HTTP {status} from {url}")));
        }
        let body: ResponseEnvelope = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Protocol(format!("bad response body from {url}: {e}")))?;
        body.into_result()
    }
}
