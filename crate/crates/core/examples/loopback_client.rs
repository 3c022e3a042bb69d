//! The HTTP model-client contract end to end: a loopback server fronting the
//! deterministic stub, an HTTP client with retries, and a few lost responses.
//!
//! ```text
//! cargo run --example loopback_client
//! ```

use std::sync::Arc;
use std::time::Duration;

use causeloc::clients::{
    embed_text, encode, generate_image, propose_prompts, verify, HttpClient, LoopbackServer, PromptKind, PromptSpec,
    RetryPolicy, Retrying, StubClient,
};
use causeloc::Role;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = LoopbackServer::start(Arc::new(StubClient::new(7)))?;
    println!("serving on {}", server.url());
    let client = Retrying::new(HttpClient::new(server.url(), Duration::from_secs(5)), RetryPolicy::no_delay(3));

    let prompts = propose_prompts(&client, &PromptSpec::new("lighthouse", PromptKind::Positive, 3))?;
    for p in &prompts.prompts {
        println!("prompt: {p}");
    }

    // The server executes the next request, then drops two responses; the
    // retries replay the cached result instead of generating again.
    server.lose_next_responses(2);
    let image = generate_image(&client, "lighthouse", Role::Positive, &prompts.prompts[0], None)?;
    println!("image: {image}");
    let stats = server.stats();
    println!("requests {} / executions {}", stats.requests, stats.executions);

    println!("verify: {:?}", verify(&client, &image, "lighthouse"));
    println!("encode: {} voxels", encode(&client, &image, 12)?.len());
    println!("embed: {} dims", embed_text(&client, "lighthouse", None)?.len());
    Ok(())
}
