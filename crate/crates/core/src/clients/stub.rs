//! Deterministic in-process client.
//!
//! Outputs are pure functions of `(seed, request)`. Templates are synthetic
//! and make no attempt to resemble real model outputs.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand_distr::{Distribution, StandardNormal};

use super::{ClientError, ClientRequest, ClientResponse, ModelClient, PromptKind, RequestKind};
use crate::rng;
use crate::stimulus::Role;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Answer {
    Yes,
    No,
    /// Anything that is not exactly `yes` or `no`.
    Malformed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VerifyPolicy {
    AlwaysYes,
    AlwaysNo,
    /// `yes` iff a path segment of the image ref equals the concept slug.
    RefMentionsConcept,
    /// Answers keyed by `(image_ref, concept)`; missing keys fall back to
    /// `RefMentionsConcept`.
    Table(BTreeMap<(String, String), Answer>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultMode {
    /// The first `n` calls of each distinct request fail as retryable.
    RetryableTimes(u32),
    Fatal,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    /// `None` applies to every kind.
    pub kind: Option<RequestKind>,
    pub mode: FaultMode,
}

pub struct StubClient {
    seed: u64,
    embed_dim: usize,
    verify: VerifyPolicy,
    leak_counter_prompts: bool,
    encode_len: Option<usize>,
    faults: Vec<Fault>,
    attempts: Mutex<HashMap<String, u32>>,
    calls: AtomicUsize,
}

pub fn slug(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    out.trim_matches('-').to_string()
}

fn role_slug(role: Role) -> &'static str {
    match role {
        Role::Positive => "positive",
        Role::SemanticNegative => "negative",
        Role::CounterfactualEdit => "edit",
    }
}

impl StubClient {
    pub fn new(seed: u64) -> Self {
        StubClient {
            seed,
            embed_dim: 16,
            verify: VerifyPolicy::RefMentionsConcept,
            leak_counter_prompts: false,
            encode_len: None,
            faults: Vec::new(),
            attempts: Mutex::new(HashMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_verify_policy(mut self, policy: VerifyPolicy) -> Self {
        self.verify = policy;
        self
    }

    /// Every third first-round prompt for target-excluding kinds mentions the target.
    pub fn leaking_counter_prompts(mut self) -> Self {
        self.leak_counter_prompts = true;
        self
    }

    /// Forces encode responses to this length regardless of the request.
    pub fn with_encode_len(mut self, len: usize) -> Self {
        self.encode_len = Some(len);
        self
    }

    pub fn with_embed_dim(mut self, dim: usize) -> Self {
        self.embed_dim = dim;
        self
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.faults.push(fault);
        self
    }

    /// Total calls received, including failed ones.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn inject(&self, request: &ClientRequest) -> Result<(), ClientError> {
        let kind = request.kind();
        for f in &self.faults {
            if f.kind.is_some_and(|k| k != kind) {
                continue;
            }
            match f.mode {
                FaultMode::Fatal => return Err(ClientError::Fatal("injected fatal fault".into())),
                FaultMode::Timeout => return Err(ClientError::Timeout("injected timeout".into())),
                FaultMode::RetryableTimes(n) => {
                    let mut seen = self.attempts.lock().expect("attempt table poisoned");
                    let count = seen.entry(request.idempotency_key()).or_insert(0);
                    *count += 1;
                    if *count <= n {
                        return Err(ClientError::Retryable(format!("injected failure {count} of {n}")));
                    }
                }
            }
        }
        Ok(())
    }

    fn prompts(&self, concept: &str, kind: PromptKind, n: usize, counter: Option<&str>, round: u32) -> Vec<String> {
        let tag = rng::short_hash(self.seed, "prompt", &format!("{concept}|{kind:?}|{counter:?}"));
        (0..n)
            .map(|i| {
                let j = round as usize * 1000 + i;
                match kind {
                    PromptKind::Positive => format!("a photo of {concept}, variation {j} [{tag}]"),
                    _ if self.leak_counter_prompts && round == 0 && i % 3 == 0 => {
                        format!("something like {concept}, variation {j}")
                    }
                    PromptKind::CounterConcept => format!("related-{tag}-{j}"),
                    PromptKind::EditInstruction => format!("replace the main subject with plain background, variant {j}"),
                    PromptKind::NegativeScene => {
                        format!("a photo of {}, scene {j}", counter.unwrap_or("something else"))
                    }
                }
            })
            .collect()
    }

    fn answer(&self, image_ref: &str, concept: &str) -> Answer {
        let by_ref = || {
            let s = slug(concept);
            let path = image_ref.split('?').next().unwrap_or(image_ref);
            if !s.is_empty() && path.split('/').any(|seg| seg == s) {
                Answer::Yes
            } else {
                Answer::No
            }
        };
        match &self.verify {
            VerifyPolicy::AlwaysYes => Answer::Yes,
            VerifyPolicy::AlwaysNo => Answer::No,
            VerifyPolicy::RefMentionsConcept => by_ref(),
            VerifyPolicy::Table(t) => t
                .get(&(image_ref.to_string(), concept.to_string()))
                .copied()
                .unwrap_or_else(by_ref),
        }
    }

    fn vector(&self, domain: &str, key: &str, len: usize) -> Vec<f32> {
        let mut r = rng::stream(self.seed, domain, key);
        (0..len)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut r);
                x as f32
            })
            .collect()
    }
}

impl ModelClient for StubClient {
    fn call(&self, request: &ClientRequest) -> Result<ClientResponse, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inject(request)?;
        let key = request.idempotency_key();
        Ok(match request {
            ClientRequest::ProposePrompts { concept, prompt_kind, n, counter_concept, round, .. } => {
                ClientResponse::Prompts {
                    prompts: self.prompts(concept, *prompt_kind, *n, counter_concept.as_deref(), *round),
                }
            }
            ClientRequest::GenerateImage { concept, role, counter_concept, .. } => {
                let depicted = match role {
                    Role::SemanticNegative => counter_concept.as_deref().unwrap_or("other"),
                    _ => concept,
                };
                let h = rng::short_hash(self.seed, "generate", &key);
                ClientResponse::Image {
                    image_ref: format!("stub://{}/{}/{h}", role_slug(*role), slug(depicted)),
                }
            }
            ClientRequest::EditImage { .. } => ClientResponse::Image {
                image_ref: format!("stub://edit/{}", rng::short_hash(self.seed, "edit", &key)),
            },
            ClientRequest::Verify { image_ref, concept } => ClientResponse::Answer {
                answer: match self.answer(image_ref, concept) {
                    Answer::Yes => "yes".into(),
                    Answer::No => "no".into(),
                    Answer::Malformed => "maybe".into(),
                },
            },
            ClientRequest::Encode { image_ref, expected_dim } => ClientResponse::Vector {
                values: self.vector("encode", image_ref, self.encode_len.unwrap_or(*expected_dim)),
            },
            ClientRequest::Embed { text, image_ref, expected_dim } => {
                let subject = match (text, image_ref) {
                    (Some(t), _) => format!("text:{t}"),
                    (None, Some(r)) => format!("image:{r}"),
                    (None, None) => return Err(ClientError::Fatal("embed needs text or an image ref".into())),
                };
                let mut v = self.vector("embed", &subject, expected_dim.unwrap_or(self.embed_dim));
                crate::matrix::normalize_in_place(&mut v).map_err(|e| ClientError::Fatal(e.to_string()))?;
                ClientResponse::Vector { values: v }
            }
        })
    }
}
