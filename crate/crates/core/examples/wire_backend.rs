//! Talking to an inference server over the JSON protocol.
//!
//! `cargo run --example wire_backend -- http://127.0.0.1:8000`

use std::time::Duration;

use hice::backends::{Backend, Encoder, WireClient};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let Some(url) = std::env::args().nth(1) else {
        eprintln!("usage: wire_backend <server-url>");
        return Ok(());
    };
    let client = WireClient::new(&url, 4, Duration::from_secs(60));
    let texts = vec!["What is shown in the picture?".to_string()];
    let vectors = client.embed_texts(&texts)?;
    println!("text embedding dim {}", vectors[0].len());
    let answer = client.answer("images/example.jpg", &texts[0])?;
    println!("answer: {answer}");
    Ok(())
}
