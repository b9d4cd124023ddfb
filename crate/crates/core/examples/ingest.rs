//! Sliding-window extraction of a conversation into the store, driven by a
//! scripted model.

use memtune::embedding::HashEmbedder;
use memtune::evaluation::dataset::parse_dataset;
use memtune::extraction::{ingest_conversation, ExtractionConfig, Extractor};
use memtune::gateway::{Gateway, StubScript};
use memtune::prompts::PromptLibrary;
use memtune::store::{MemoryStore, Scope};

fn main() -> anyhow::Result<()> {
    let dataset = parse_dataset(&serde_json::from_str(include_str!(
        "data/toy_conversation.json"
    ))?)?;
    let gateway = Gateway::stub(StubScript::from_json(include_str!("data/toy_stub.json"))?);
    let prompts = PromptLibrary::builtin();
    let extractor = Extractor::new(&gateway, &prompts, ExtractionConfig::default());
    let mut store = MemoryStore::with_seed(1);

    let conversation = &dataset.conversations[0];
    let scope = Scope::new("user", &conversation.sample_id)?;
    let report = ingest_conversation(
        &conversation.sessions,
        &scope,
        &extractor,
        &HashEmbedder::default(),
        &mut store,
    )?;
    println!("{}", serde_json::to_string_pretty(&report.summary)?);
    for u in store.units().take(5) {
        println!("[{}] {}", u.memory_type.as_str(), u.content);
    }
    println!("... {} memories in total", store.len());
    Ok(())
}
