//! The guarded tuning loop on the toy conversation, fully scripted.

use memtune::embedding::HashEmbedder;
use memtune::evaluation::dataset::parse_dataset;
use memtune::evolution::{ConversationInput, Evolver, GuardConfig};
use memtune::gateway::{Gateway, StubScript};
use memtune::prompts::PromptLibrary;
use memtune::retrieval::RetrievalConfig;
use memtune::store::{MemoryStore, Scope};

fn main() -> anyhow::Result<()> {
    let dataset = parse_dataset(&serde_json::from_str(include_str!(
        "data/toy_conversation.json"
    ))?)?;
    let guards: GuardConfig = serde_json::from_str(include_str!("data/toy_guards.json"))?;
    let gateway = Gateway::stub(StubScript::from_json(include_str!("data/toy_stub.json"))?);
    let prompts = PromptLibrary::builtin();
    let embedder = HashEmbedder::default();
    let inputs: Vec<ConversationInput> = dataset
        .conversations
        .iter()
        .map(|c| {
            Ok(ConversationInput {
                scope: Scope::new("user", &c.sample_id)?,
                sessions: c.sessions.clone(),
                qa: c.qa.clone(),
            })
        })
        .collect::<anyhow::Result<_>>()?;

    let run_dir = std::env::temp_dir().join("memtune-evolution-example");
    let evolver = Evolver::new(&gateway, &prompts, &embedder, guards).with_run_dir(&run_dir);
    let mut store = MemoryStore::with_seed(7);
    let outcome = evolver.run(&inputs, &RetrievalConfig::default(), &mut store)?;
    for r in &outcome.rounds {
        let branch = r.branch.map_or("stop", |b| b.as_str());
        println!("R{} {:<7} {:.4}", r.round, branch, r.score);
    }
    println!(
        "best {:.4} at round {:?}, stopped by {:?}",
        outcome.state.best_score, outcome.state.best_round, outcome.state.reason
    );
    println!("artifacts in {}", run_dir.display());
    Ok(())
}
