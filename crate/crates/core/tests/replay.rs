use memtune::embedding::HashEmbedder;
use memtune::evaluation::dataset::parse_dataset;
use memtune::evolution::{ConversationInput, EvolutionOutcome, Evolver, GuardConfig};
use memtune::gateway::{read_transcript, Gateway, StubScript};
use memtune::prompts::PromptLibrary;
use memtune::retrieval::RetrievalConfig;
use memtune::store::{MemoryStore, Scope};

fn toy_run(gateway: &Gateway, dir: &std::path::Path) -> EvolutionOutcome {
    let dataset = parse_dataset(
        &serde_json::from_str(include_str!("../examples/data/toy_conversation.json")).unwrap(),
    )
    .unwrap();
    let guards: GuardConfig =
        serde_json::from_str(include_str!("../examples/data/toy_guards.json")).unwrap();
    let c = &dataset.conversations[0];
    let inputs = [ConversationInput {
        scope: Scope::new("user", &c.sample_id).unwrap(),
        sessions: c.sessions.clone(),
        qa: c.qa.clone(),
    }];
    let prompts = PromptLibrary::builtin();
    let embedder = HashEmbedder::default();
    Evolver::new(gateway, &prompts, &embedder, guards)
        .with_run_dir(dir)
        .run(
            &inputs,
            &RetrievalConfig::default(),
            &mut MemoryStore::with_seed(7),
        )
        .unwrap()
}

#[test]
fn recorded_transcript_replays_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let transcript = tmp.path().join("transcript.jsonl");
    let script = StubScript::from_json(include_str!("../examples/data/toy_stub.json")).unwrap();
    let live = Gateway::stub(script)
        .with_transcript_file(&transcript)
        .unwrap();
    let first = toy_run(&live, &tmp.path().join("a"));

    let entries = read_transcript(&transcript).unwrap();
    assert_eq!(entries.len(), live.transcript().len());
    let replay = Gateway::stub(StubScript::from_transcript(&entries));
    let second = toy_run(&replay, &tmp.path().join("b"));

    assert_eq!(first.best_config, second.best_config);
    assert_eq!(first.state.branches(), second.state.branches());
    let scores = |o: &EvolutionOutcome| o.rounds.iter().map(|r| r.score).collect::<Vec<_>>();
    assert_eq!(scores(&first), scores(&second));
    let texts = |g: &Gateway| {
        g.transcript()
            .into_iter()
            .map(|e| e.response)
            .collect::<Vec<_>>()
    };
    assert_eq!(texts(&live), texts(&replay));
}
