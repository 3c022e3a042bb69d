mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use causeloc::clients::{
    embed_text, encode, verify, ClientError, ClientRequest, ClientResponse, Fault, FaultMode, HttpClient,
    LoopbackServer, ModelClient, PromptKind, RequestKind, RetryPolicy, Retrying, StubClient, Throttled, VerifyOutcome,
};
use causeloc::pipeline::{run_pipeline, PipelineConfig};
use common::tree;

fn http(server: &LoopbackServer, retries: u32) -> Retrying<HttpClient> {
    Retrying::new(HttpClient::new(server.url(), Duration::from_secs(10)), RetryPolicy::no_delay(retries))
}

fn encode_request(r: &str) -> ClientRequest {
    ClientRequest::Encode {
        image_ref: r.into(),
        expected_dim: 8,
    }
}

#[test]
fn http_round_trip_matches_in_process() {
    let stub = Arc::new(StubClient::new(3));
    let server = LoopbackServer::start(stub.clone()).unwrap();
    let client = http(&server, 0);
    let over_http = encode(&client, "img://a", 8).unwrap();
    assert_eq!(over_http, encode(stub.as_ref(), "img://a", 8).unwrap());
    assert_eq!(embed_text(&client, "a horse", Some(16)).unwrap().len(), 16);
    assert_eq!(verify(&client, "img://gen/horse/1", "horse"), VerifyOutcome::Present);
    assert_eq!(verify(&client, "img://gen/cat/1", "horse"), VerifyOutcome::Absent);
}

#[test]
fn lost_responses_are_retried_and_executed_once() {
    let stub = Arc::new(StubClient::new(3));
    let server = LoopbackServer::start(stub.clone()).unwrap();
    server.lose_next_responses(2);
    let client = http(&server, 3);
    let got = client.call(&encode_request("img://lost")).unwrap();
    let stats = server.stats();
    assert_eq!(stats.requests, 3);
    assert_eq!(stats.executions, 1);
    assert_eq!(stub.calls(), 1);
    assert_eq!(got, stub.call(&encode_request("img://lost")).unwrap());
}

#[test]
fn retry_budget_is_bounded() {
    let server = LoopbackServer::start(Arc::new(StubClient::new(3))).unwrap();
    server.lose_next_responses(10);
    let err = http(&server, 2).call(&encode_request("img://x")).unwrap_err();
    assert!(matches!(err, ClientError::Exhausted { attempts: 3, .. }), "{err:?}");
    assert_eq!(server.stats().requests, 3);
    assert_eq!(server.stats().executions, 1);
}

#[test]
fn backend_retryable_failures_are_not_cached() {
    let stub = StubClient::new(3).with_fault(Fault {
        kind: Some(RequestKind::Encode),
        mode: FaultMode::RetryableTimes(2),
    });
    let server = LoopbackServer::start(Arc::new(stub)).unwrap();
    assert!(http(&server, 3).call(&encode_request("img://flaky")).is_ok());
    assert_eq!(server.stats().executions, 3);
}

#[test]
fn fatal_failures_are_not_retried() {
    let stub = StubClient::new(3).with_fault(Fault {
        kind: None,
        mode: FaultMode::Fatal,
    });
    let server = LoopbackServer::start(Arc::new(stub)).unwrap();
    let err = http(&server, 5).call(&encode_request("img://x")).unwrap_err();
    assert!(matches!(err, ClientError::Fatal(_)), "{err:?}");
    assert_eq!(server.stats().requests, 1);
}

#[test]
fn unreachable_endpoint_is_retryable() {
    let addr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let client = HttpClient::new(format!("http://{addr}"), Duration::from_secs(2));
    let err = client.call(&encode_request("img://x")).unwrap_err();
    assert!(err.is_retryable(), "{err:?}");
}

#[test]
fn idempotency_key_ignores_nothing_in_the_body() {
    let a = ClientRequest::ProposePrompts {
        concept: "horse".into(),
        prompt_kind: PromptKind::Positive,
        n: 5,
        counter_concept: None,
        image_ref: None,
        round: 0,
    };
    let mut b = a.clone();
    if let ClientRequest::ProposePrompts { round, .. } = &mut b {
        *round = 1;
    }
    assert_eq!(a.idempotency_key(), a.clone().idempotency_key());
    assert_ne!(a.idempotency_key(), b.idempotency_key());
}

struct Slow {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl ModelClient for Slow {
    fn call(&self, _: &ClientRequest) -> Result<ClientResponse, ClientError> {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(5));
        self.live.fetch_sub(1, Ordering::SeqCst);
        Ok(ClientResponse::Answer { answer: "yes".into() })
    }
}

#[test]
fn throttle_caps_concurrent_calls() {
    let slow = Arc::new(Slow {
        live: AtomicUsize::new(0),
        peak: AtomicUsize::new(0),
    });
    let client = Arc::new(Throttled::new(slow.clone(), 3));
    std::thread::scope(|s| {
        for t in 0..12 {
            let client = Arc::clone(&client);
            s.spawn(move || {
                for i in 0..5 {
                    client.call(&encode_request(&format!("img://{t}/{i}"))).unwrap();
                }
            });
        }
    });
    let peak = slow.peak.load(Ordering::SeqCst);
    assert!((1..=3).contains(&peak), "peak {peak}");
}

fn stub_config(out: &std::path::Path, backend: &str) -> PipelineConfig {
    PipelineConfig::from_toml(&format!(
        r#"
concepts = ["lighthouse", "red barn"]
seed = 11
output_dir = "{}"

[plan]
n_pos_train = 10
n_pos_eval = 5
n_counter_concepts = 2
n_prompts_per_counter = 3
n_edit_parents_train = 3
n_edit_parents_eval = 2
n_edits_per_parent = 2

[region]
k = 4

[backend]
{backend}
"#,
        out.display()
    ))
    .unwrap()
}

/// Drops hash stamps, which differ because the backend
/// section of the two configs differs.
fn without_stamps(t: Vec<(std::path::PathBuf, Vec<u8>)>) -> Vec<(std::path::PathBuf, String)> {
    t.into_iter()
        .filter(|(p, _)| !p.ends_with("config_echo.toml"))
        .map(|(p, b)| {
            let s = String::from_utf8(b).unwrap();
            let s: String = s
                .lines()
                .filter(|l| !l.contains("_hash") && !l.contains("config hash:"))
                .collect::<Vec<_>>()
                .join("\n");
            (p, s)
        })
        .collect()
}

#[test]
fn pipeline_over_http_matches_in_process_stub() {
    let tmp = tempfile::tempdir().unwrap();
    let local = stub_config(&tmp.path().join("local"), "kind = \"stub\"\nvoxel_dim = 16");
    run_pipeline(&local).unwrap();

    let stub = StubClient::new(11);
    let server = LoopbackServer::start(Arc::new(stub)).unwrap();
    server.lose_next_responses(3);
    let remote = stub_config(
        &tmp.path().join("remote"),
        &format!("kind = \"http\"\nendpoint = \"{}\"\nvoxel_dim = 16", server.url()),
    );
    let mut remote = remote;
    remote.retry.initial_backoff_ms = 0;
    let report = run_pipeline(&remote).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    let (a, b) = (without_stamps(tree(&tmp.path().join("local"))), without_stamps(tree(&tmp.path().join("remote"))));
    assert_eq!(a.len(), b.len());
    for ((pa, ca), (pb, cb)) in a.iter().zip(&b) {
        assert_eq!(pa, pb);
        assert!(ca == cb, "{} differs:\n{ca}\n---\n{cb}", pa.display());
    }
    let stats = server.stats();
    assert!(stats.requests >= stats.executions + 3, "{stats:?}");
}
