//! Retrieve, answer, and verify a low-confidence answer.

use memtune::answering::{Answerer, Ask};
use memtune::embedding::HashEmbedder;
use memtune::evaluation::dataset::parse_dataset;
use memtune::extraction::{ingest_conversation, ExtractionConfig, Extractor};
use memtune::gateway::{Gateway, StubRule, StubScript};
use memtune::prompts::PromptLibrary;
use memtune::retrieval::{RetrievalConfig, RetrievalIndex, Retriever};
use memtune::store::{MemoryStore, Scope};

fn main() -> anyhow::Result<()> {
    let dataset = parse_dataset(&serde_json::from_str(include_str!(
        "data/toy_conversation.json"
    ))?)?;
    let mut script = StubScript::from_json(include_str!("data/toy_stub.json"))?;
    script.rules.insert(
        0,
        StubRule::text(
            "Candidate answer:",
            &[r#"{"answer": "Sweden", "confidence": 0.95}"#],
        ),
    );
    script.rules.insert(
        1,
        StubRule::text(
            "Where does Caroline",
            &[r#"{"reasoning": "she mentioned moving", "answer": "Sweden", "confidence": 0.4}"#],
        ),
    );
    let gateway = Gateway::stub(script);
    let prompts = PromptLibrary::builtin();
    let embedder = HashEmbedder::default();
    let mut store = MemoryStore::with_seed(1);
    let conversation = &dataset.conversations[0];
    let scope = Scope::new("user", &conversation.sample_id)?;
    let extractor = Extractor::new(&gateway, &prompts, ExtractionConfig::default());
    ingest_conversation(
        &conversation.sessions,
        &scope,
        &extractor,
        &embedder,
        &mut store,
    )?;

    let index = RetrievalIndex::build(&store, &scope);
    let retriever =
        Retriever::new(&index, &embedder, &prompts, store.clock().now()).with_gateway(&gateway);
    let cfg = RetrievalConfig {
        semantic_top_k: 5,
        enable_answer_verification: true,
        ..RetrievalConfig::default()
    };
    let answerer = Answerer::new(&gateway, &prompts);
    let (answer, retrieval) = answerer.answer_question(
        &Ask::new("Where does Caroline want to move?"),
        &retriever,
        &cfg,
    )?;
    println!(
        "answer: {} (confidence {:.2}, verified {})",
        answer.answer, answer.confidence, answer.verified
    );
    for u in &retrieval.units {
        println!("  source: {}", u.content);
    }
    println!("{} model calls in total", gateway.transcript().len());
    Ok(())
}
