//! Keyword, semantic and structured views fused three ways.

use chrono::{TimeZone, Utc};
use memtune::embedding::{hash_embed, HashEmbedder};
use memtune::prompts::PromptLibrary;
use memtune::retrieval::{FusionMode, RetrievalConfig, RetrievalIndex, Retriever};
use memtune::store::{MemoryStore, MemoryType, MemoryUnit, Scope};

fn main() -> anyhow::Result<()> {
    let mut store = MemoryStore::with_seed(5);
    let scope = Scope::new("caroline", "chat")?;
    let now = Utc.with_ymd_and_hms(2023, 6, 1, 0, 0, 0).unwrap();
    let facts = [
        (
            "Caroline went to an LGBTQ support group on 7 May 2023",
            &["Caroline"][..],
            &[][..],
        ),
        (
            "Melanie took her kids camping at the beach",
            &["Melanie"],
            &["the beach"],
        ),
        (
            "Caroline wants to move to Sweden",
            &["Caroline"],
            &["Sweden"],
        ),
        ("Melanie signed up for a pottery class", &["Melanie"], &[]),
    ];
    for (text, persons, locations) in facts {
        let id = store.next_id();
        let mut u = MemoryUnit::new(id, scope.clone(), MemoryType::Episodic, text, now);
        u.embedding = Some(hash_embed(text));
        u.persons = persons.iter().map(|s| s.to_string()).collect();
        u.locations = locations.iter().map(|s| s.to_string()).collect();
        store.put_memory(u)?;
    }

    let index = RetrievalIndex::build(&store, &scope);
    let embedder = HashEmbedder::default();
    let prompts = PromptLibrary::builtin();
    let retriever = Retriever::new(&index, &embedder, &prompts, now);
    let query = "Where does Caroline want to move?";
    for mode in [FusionMode::Sum, FusionMode::Rrf, FusionMode::WeightedSum] {
        let cfg = RetrievalConfig {
            semantic_top_k: 5,
            structured_top_k: 5,
            fusion_mode: mode,
            ..RetrievalConfig::default()
        };
        let r = retriever.retrieve(query, None, &cfg)?;
        println!("{mode:?}:");
        for (c, u) in r.candidates.iter().zip(&r.units) {
            println!("  {:.4} {:?} {}", c.s, c.provenance, u.content);
        }
    }
    Ok(())
}
