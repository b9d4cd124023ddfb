//! Scripted chat backend, transcript capture and replay.

use memtune::gateway::{ChatRequest, Gateway, StubRule, StubScript};

fn main() -> anyhow::Result<()> {
    let script = StubScript::new(vec![
        StubRule::text(
            "capital",
            &[r#"{"answer": "Paris"}"#, r#"{"answer": "still Paris"}"#],
        ),
        StubRule::text("", &["I don't know"]),
    ]);
    let gateway = Gateway::stub(script);
    for question in [
        "What is the capital of France?",
        "And the capital again?",
        "Who won?",
    ] {
        let reply = gateway.chat(&ChatRequest::new(Some("Answer in JSON."), question))?;
        println!("{question} -> {}", reply.text);
    }

    let transcript = gateway.transcript();
    let replay = Gateway::stub(StubScript::from_transcript(&transcript));
    for entry in &transcript {
        let again = replay.chat(&entry.request)?;
        assert_eq!(Some(&again.text), entry.response.as_ref());
    }
    println!("replayed {} calls identically", transcript.len());
    Ok(())
}
