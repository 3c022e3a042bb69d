//! Wire contract for external models and the operations built on it.
//!
//! Every model the pipeline uses (prompt proposer, image generator, image
//! editor, verifier, image-to-response encoder, embedder) sits behind
//! [`ModelClient`]. Requests and responses are plain serde types; the HTTP
//! adapter posts them as versioned JSON envelopes to one endpoint per kind.
//! Images never cross this boundary, only opaque image refs.

mod http;
mod loopback;
mod stub;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::matrix::{l2_norm, UNIT_NORM_TOLERANCE};
use crate::stimulus::Role;

pub use http::{HttpClient, ENDPOINT_ENV};
pub use loopback::{LoopbackServer, ServerStats};
pub use stub::{slug, Answer, Fault, FaultMode, StubClient, VerifyPolicy};

pub const WIRE_VERSION: u32 = 1;

/// Refill rounds for prompt proposals after filtering.
pub const MAX_PROPOSAL_ROUNDS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    ProposePrompts,
    GenerateImage,
    EditImage,
    Verify,
    Encode,
    Embed,
}

impl RequestKind {
    pub fn endpoint(self) -> &'static str {
        match self {
            RequestKind::ProposePrompts => "/v1/propose",
            RequestKind::GenerateImage => "/v1/generate",
            RequestKind::EditImage => "/v1/edit",
            RequestKind::Verify => "/v1/verify",
            RequestKind::Encode => "/v1/encode",
            RequestKind::Embed => "/v1/embed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// Prompts depicting the target concept.
    Positive,
    /// Names of related concepts that do not require the target.
    CounterConcept,
    /// Edit instructions removing the target from an image.
    EditInstruction,
    /// Prompts depicting a counter concept without the target.
    NegativeScene,
}

impl PromptKind {
    /// Kinds whose outputs must not mention the target concept.
    pub fn excludes_target(self) -> bool {
        !matches!(self, PromptKind::Positive)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientRequest {
    ProposePrompts {
        concept: String,
        prompt_kind: PromptKind,
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        counter_concept: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image_ref: Option<String>,
        #[serde(default)]
        round: u32,
    },
    GenerateImage {
        concept: String,
        role: Role,
        prompt: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        counter_concept: Option<String>,
    },
    EditImage {
        image_ref: String,
        concept: String,
        instruction: String,
    },
    Verify {
        image_ref: String,
        concept: String,
    },
    Encode {
        image_ref: String,
        expected_dim: usize,
    },
    Embed {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        image_ref: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        expected_dim: Option<usize>,
    },
}

impl ClientRequest {
    pub fn kind(&self) -> RequestKind {
        match self {
            ClientRequest::ProposePrompts { .. } => RequestKind::ProposePrompts,
            ClientRequest::GenerateImage { .. } => RequestKind::GenerateImage,
            ClientRequest::EditImage { .. } => RequestKind::EditImage,
            ClientRequest::Verify { .. } => RequestKind::Verify,
            ClientRequest::Encode { .. } => RequestKind::Encode,
            ClientRequest::Embed { .. } => RequestKind::Embed,
        }
    }

    /// Deterministic key derived from the request body. Retries of the same
    /// request carry the same key, so a server can execute it at most once.
    pub fn idempotency_key(&self) -> String {
        let body = serde_json::to_vec(self).expect("requests always serialize");
        hex::encode(&Sha256::digest(&body)[..16])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientResponse {
    Prompts { prompts: Vec<String> },
    Image { image_ref: String },
    Answer { answer: String },
    Vector { values: Vec<f32> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireStatus {
    Ok,
    Retryable,
    Fatal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestEnvelope {
    pub version: u32,
    pub idempotency_key: String,
    #[serde(flatten)]
    pub request: ClientRequest,
}

impl RequestEnvelope {
    pub fn new(request: ClientRequest) -> Self {
        RequestEnvelope {
            version: WIRE_VERSION,
            idempotency_key: request.idempotency_key(),
            request,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseEnvelope {
    pub version: u32,
    pub status: WireStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<ClientResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ResponseEnvelope {
    pub fn from_result(result: &Result<ClientResponse, ClientError>) -> Self {
        match result {
            Ok(body) => ResponseEnvelope {
                version: WIRE_VERSION,
                status: WireStatus::Ok,
                body: Some(body.clone()),
                error: None,
            },
            Err(e) => ResponseEnvelope {
                version: WIRE_VERSION,
                status: if e.is_retryable() {
                    WireStatus::Retryable
                } else {
                    WireStatus::Fatal
                },
                body: None,
                error: Some(e.to_string()),
            },
        }
    }

    pub fn into_result(self) -> Result<ClientResponse, ClientError> {
        if self.version != WIRE_VERSION {
            return Err(ClientError::Protocol(format!("unsupported wire version {}", self.version)));
        }
        match self.status {
            WireStatus::Ok => self
                .body
                .ok_or_else(|| ClientError::Protocol("ok response without body".into())),
            WireStatus::Retryable => Err(ClientError::Retryable(self.error.unwrap_or_default())),
            WireStatus::Fatal => Err(ClientError::Fatal(self.error.unwrap_or_default())),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClientError {
    #[error("retryable client failure: {0}")]
    Retryable(String),
    #[error("client timed out: {0}")]
    Timeout(String),
    #[error("fatal client failure: {0}")]
    Fatal(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClientError::Retryable(_) | ClientError::Timeout(_))
    }
}

/// A model endpoint. Implementations must be safe for concurrent use.
pub trait ModelClient: Send + Sync {
    fn call(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError>;
}

impl<T: ModelClient + ?Sized> ModelClient for Arc<T> {
    fn call(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        (**self).call(request)
    }
}

impl<T: ModelClient + ?Sized> ModelClient for &T {
    fn call(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        (**self).call(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            initial_backoff: Duration::from_millis(50),
            multiplier: 2.0,
            max_backoff: Duration::from_secs(2),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            initial_backoff: Duration::ZERO,
            ..Default::default()
        }
    }

    pub fn backoff(&self, retry: u32) -> Duration {
        let scale = self.multiplier.powi(retry as i32);
        self.initial_backoff.mul_f64(scale).min(self.max_backoff)
    }
}

/// Retries retryable failures with exponential backoff. Fatal failures are
/// returned immediately.
pub struct Retrying<C> {
    inner: C,
    policy: RetryPolicy,
}

impl<C: ModelClient> Retrying<C> {
    pub fn new(inner: C, policy: RetryPolicy) -> Self {
        Retrying { inner, policy }
    }
}

impl<C: ModelClient> ModelClient for Retrying<C> {
    fn call(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        let mut attempt = 0;
        loop {
            match self.inner.call(request) {
                Err(e) if e.is_retryable() => {
                    if attempt >= self.policy.max_retries {
                        return Err(ClientError::Exhausted {
                            attempts: attempt + 1,
                            last: e.to_string(),
                        });
                    }
                    std::thread::sleep(self.policy.backoff(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Caps the number of concurrent calls into the wrapped client, however many
/// threads share it.
pub struct Throttled<C> {
    inner: C,
    max_in_flight: usize,
    live: Mutex<usize>,
    freed: Condvar,
}

impl<C: ModelClient> Throttled<C> {
    pub fn new(inner: C, max_in_flight: usize) -> Self {
        Throttled {
            inner,
            max_in_flight: max_in_flight.max(1),
            live: Mutex::new(0),
            freed: Condvar::new(),
        }
    }
}

impl<C: ModelClient> ModelClient for Throttled<C> {
    fn call(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        {
            let mut live = self.live.lock().expect("throttle poisoned");
            while *live >= self.max_in_flight {
                live = self.freed.wait(live).expect("throttle poisoned");
            }
            *live += 1;
        }
        let out = self.inner.call(request);
        *self.live.lock().expect("throttle poisoned") -= 1;
        self.freed.notify_one();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerifyOutcome {
    Present,
    Absent,
    Unverified,
}

/// Prompt proposals after dropping outputs that mention the target.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptProposal {
    pub prompts: Vec<String>,
    pub dropped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec<'a> {
    pub concept: &'a str,
    pub kind: PromptKind,
    pub n: usize,
    pub counter_concept: Option<&'a str>,
    pub image_ref: Option<&'a str>,
}

impl<'a> PromptSpec<'a> {
    pub fn new(concept: &'a str, kind: PromptKind, n: usize) -> Self {
        PromptSpec {
            concept,
            kind,
            n,
            counter_concept: None,
            image_ref: None,
        }
    }
}

fn mentions(text: &str, concept: &str) -> bool {
    text.to_lowercase().contains(&concept.to_lowercase())
}

/// Requests `n` prompts. For kinds that exclude the target, outputs
/// containing the target (case-insensitive) are dropped and the shortfall is
/// re-requested for up to [`MAX_PROPOSAL_ROUNDS`] rounds. Fails if `n`
/// prompts cannot be collected.
pub fn propose_prompts(client: &dyn ModelClient, spec: &PromptSpec<'_>) -> Result<PromptProposal, ClientError> {
    if spec.n == 0 {
        return Err(ClientError::Fatal("prompt count must be at least 1".into()));
    }
    let mut out = PromptProposal::default();
    for round in 0..MAX_PROPOSAL_ROUNDS {
        let want = spec.n - out.prompts.len();
        let request = ClientRequest::ProposePrompts {
            concept: spec.concept.to_string(),
            prompt_kind: spec.kind,
            n: want,
            counter_concept: spec.counter_concept.map(str::to_string),
            image_ref: spec.image_ref.map(str::to_string),
            round,
        };
        let prompts = match client.call(&request)? {
            ClientResponse::Prompts { prompts } => prompts,
            other => return Err(unexpected("prompts", &other)),
        };
        for p in prompts {
            if out.prompts.len() == spec.n {
                break;
            }
            if p.trim().is_empty() || (spec.kind.excludes_target() && mentions(&p, spec.concept)) {
                out.dropped.push(p);
            } else {
                out.prompts.push(p);
            }
        }
        if out.prompts.len() == spec.n {
            return Ok(out);
        }
    }
    Err(ClientError::Fatal(format!(
        "only {} of {} usable prompts after {} rounds",
        out.prompts.len(),
        spec.n,
        MAX_PROPOSAL_ROUNDS
    )))
}

fn unexpected(expected: &str, got: &ClientResponse) -> ClientError {
    ClientError::Protocol(format!("expected {expected} response, got {got:?}"))
}

pub fn generate_image(
    client: &dyn ModelClient,
    concept: &str,
    role: Role,
    prompt: &str,
    counter_concept: Option<&str>,
) -> Result<String, ClientError> {
    let request = ClientRequest::GenerateImage {
        concept: concept.to_string(),
        role,
        prompt: prompt.to_string(),
        counter_concept: counter_concept.map(str::to_string),
    };
    match client.call(&request)? {
        ClientResponse::Image { image_ref } => Ok(image_ref),
        other => Err(unexpected("image", &other)),
    }
}

pub fn edit_image(client: &dyn ModelClient, image_ref: &str, concept: &str, instruction: &str) -> Result<String, ClientError> {
    let request = ClientRequest::EditImage {
        image_ref: image_ref.to_string(),
        concept: concept.to_string(),
        instruction: instruction.to_string(),
    };
    match client.call(&request)? {
        ClientResponse::Image { image_ref } => Ok(image_ref),
        other => Err(unexpected("image", &other)),
    }
}

/// Asks whether `concept` is present in the image. Anything other than an
/// exact `yes` or `no`, including client failures, maps to `Unverified`.
pub fn verify(client: &dyn ModelClient, image_ref: &str, concept: &str) -> VerifyOutcome {
    let request = ClientRequest::Verify {
        image_ref: image_ref.to_string(),
        concept: concept.to_string(),
    };
    match client.call(&request) {
        Ok(ClientResponse::Answer { answer }) if answer == "yes" => VerifyOutcome::Present,
        Ok(ClientResponse::Answer { answer }) if answer == "no" => VerifyOutcome::Absent,
        Ok(other) => {
            log::warn!("verifier returned {other:?} for {image_ref}");
            VerifyOutcome::Unverified
        }
        Err(e) => {
            log::warn!("verification of {image_ref} failed: {e}");
            VerifyOutcome::Unverified
        }
    }
}

/// Predicted responses for one image; a vector of the wrong length is a protocol error.
pub fn encode(client: &dyn ModelClient, image_ref: &str, voxel_dim: usize) -> Result<Vec<f32>, ClientError> {
    let request = ClientRequest::Encode {
        image_ref: image_ref.to_string(),
        expected_dim: voxel_dim,
    };
    match client.call(&request)? {
        ClientResponse::Vector { values } if values.len() == voxel_dim => {
            if values.iter().all(|v| v.is_finite()) {
                Ok(values)
            } else {
                Err(ClientError::Protocol("encoder returned non-finite values".into()))
            }
        }
        ClientResponse::Vector { values } => Err(ClientError::Protocol(format!(
            "encoder returned {} values, expected {voxel_dim}",
            values.len()
        ))),
        other => Err(unexpected("vector", &other)),
    }
}

fn embed(client: &dyn ModelClient, request: ClientRequest, dim: Option<usize>) -> Result<Vec<f32>, ClientError> {
    match client.call(&request)? {
        ClientResponse::Vector { values } => {
            if let Some(d) = dim {
                if values.len() != d {
                    return Err(ClientError::Protocol(format!(
                        "embedder returned {} values, expected {d}",
                        values.len()
                    )));
                }
            }
            let norm = l2_norm(&values);
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(ClientError::Protocol(format!("embedding has norm {norm}")));
            }
            Ok(values)
        }
        other => Err(unexpected("vector", &other)),
    }
}

pub fn embed_text(client: &dyn ModelClient, text: &str, dim: Option<usize>) -> Result<Vec<f32>, ClientError> {
    let request = ClientRequest::Embed {
        text: Some(text.to_string()),
        image_ref: None,
        expected_dim: dim,
    };
    embed(client, request, dim)
}

pub fn embed_image(client: &dyn ModelClient, image_ref: &str, dim: Option<usize>) -> Result<Vec<f32>, ClientError> {
    let request = ClientRequest::Embed {
        text: None,
        image_ref: Some(image_ref.to_string()),
        expected_dim: dim,
    };
    embed(client, request, dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    #[test]
    fn envelope_json_shape() {
        let env = RequestEnvelope::new(ClientRequest::Verify {
            image_ref: "img://1".into(),
            concept: "dog".into(),
        });
        let v = serde_json::to_value(&env).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["kind"], "verify");
        assert_eq!(v["concept"], "dog");
        let back: RequestEnvelope = serde_json::from_value(v).unwrap();
        assert_eq!(back, env);
        assert_eq!(back.idempotency_key.len(), 32);
    }

    #[test]
    fn key_depends_on_body() {
        let a = ClientRequest::Verify { image_ref: "a".into(), concept: "dog".into() };
        let b = ClientRequest::Verify { image_ref: "b".into(), concept: "dog".into() };
        assert_eq!(a.idempotency_key(), a.clone().idempotency_key());
        assert_ne!(a.idempotency_key(), b.idempotency_key());
    }

    struct Flaky {
        failures: u32,
        calls: AtomicU32,
        error: ClientError,
    }

    impl ModelClient for Flaky {
        fn call(&self, _: &ClientRequest) -> Result<ClientResponse, ClientError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(self.error.clone())
            } else {
                Ok(ClientResponse::Answer { answer: "yes".into() })
            }
        }
    }

    fn req() -> ClientRequest {
        ClientRequest::Verify { image_ref: "x".into(), concept: "dog".into() }
    }

    #[test]
    fn retries_are_bounded() {
        let flaky = Flaky { failures: 3, calls: AtomicU32::new(0), error: ClientError::Retryable("busy".into()) };
        let c = Retrying::new(&flaky, RetryPolicy::no_delay(3));
        assert!(c.call(&req()).is_ok());
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 4);

        let flaky = Flaky { failures: 10, calls: AtomicU32::new(0), error: ClientError::Timeout("slow".into()) };
        let c = Retrying::new(&flaky, RetryPolicy::no_delay(3));
        assert!(matches!(c.call(&req()), Err(ClientError::Exhausted { attempts: 4, .. })));

        let flaky = Flaky { failures: 10, calls: AtomicU32::new(0), error: ClientError::Fatal("no".into()) };
        let c = Retrying::new(&flaky, RetryPolicy::no_delay(3));
        assert!(matches!(c.call(&req()), Err(ClientError::Fatal(_))));
        assert_eq!(flaky.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff(0), Duration::from_millis(50));
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(20), p.max_backoff);
    }

    #[test]
    fn verify_maps_answers() {
        struct Says(&'static str);
        impl ModelClient for Says {
            fn call(&self, _: &ClientRequest) -> Result<ClientResponse, ClientError> {
                Ok(ClientResponse::Answer { answer: self.0.into() })
            }
        }
        assert_eq!(verify(&Says("yes"), "i", "dog"), VerifyOutcome::Present);
        assert_eq!(verify(&Says("no"), "i", "dog"), VerifyOutcome::Absent);
        assert_eq!(verify(&Says("Yes."), "i", "dog"), VerifyOutcome::Unverified);
    }
}
