//! One evaluation round over the toy question set.

use memtune::answering::Answerer;
use memtune::embedding::HashEmbedder;
use memtune::evaluation::dataset::parse_dataset;
use memtune::evaluation::{evaluate_round, Benchmark};
use memtune::extraction::{ingest_conversation, ExtractionConfig, Extractor};
use memtune::gateway::{Gateway, StubScript};
use memtune::prompts::PromptLibrary;
use memtune::retrieval::{RetrievalConfig, RetrievalIndex, Retriever};
use memtune::store::{MemoryStore, Scope};

fn main() -> anyhow::Result<()> {
    let dataset = parse_dataset(&serde_json::from_str(include_str!(
        "data/toy_conversation.json"
    ))?)?;
    let gateway = Gateway::stub(StubScript::from_json(include_str!("data/toy_stub.json"))?);
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
    let answerer = Answerer::new(&gateway, &prompts);
    let (summary, records) = evaluate_round(
        0,
        &conversation.qa,
        Benchmark::FreeText,
        &answerer,
        &retriever,
        &RetrievalConfig::default(),
        None,
    )?;
    for r in &records {
        println!(
            "{:<8} {:<12} f1 {:.2}  {:?}",
            r.question_id, r.category, r.score, r.prediction
        );
    }
    println!("overall {:.4}", summary.overall);
    for (cat, score) in &summary.per_category {
        println!("  {cat}: {score:.4}");
    }
    Ok(())
}
