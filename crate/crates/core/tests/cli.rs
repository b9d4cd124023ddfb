use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::{TimeZone, Utc};
use memtune::embedding::hash_embed;
use memtune::retrieval::RetrievalConfig;
use memtune::store::{save_snapshot, MemoryStore, MemoryType, MemoryUnit, Scope};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_memtune"));
    c.env_remove("MEMTUNE_API_KEY").env("RUST_LOG", "error");
    c
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("examples/data")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json_lines(s: &str) -> Vec<Value> {
    s.lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const STUB: [&str; 4] = ["--backend", "stub", "--stub-script", ""];

fn stub_args() -> Vec<String> {
    let mut v: Vec<String> = STUB.iter().map(|s| s.to_string()).collect();
    v[3] = data("toy_stub.json").display().to_string();
    v
}

fn with_stub<'a>(args: &[&'a str], stub: &'a [String]) -> Vec<&'a str> {
    args.iter()
        .copied()
        .chain(stub.iter().map(String::as_str))
        .collect()
}

fn ingest_toy(store: &Path) -> Value {
    let stub = stub_args();
    let dataset = data("toy_conversation.json");
    let out = ok(&with_stub(
        &["ingest", "--dataset", p(&dataset), "--store", p(store)],
        &stub,
    ));
    serde_json::from_str(out.trim()).unwrap()
}

#[test]
fn ingest_counts_match_script_and_reingest_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.db");
    let first = ingest_toy(&store);
    let summary = &first["conversations"][0]["summary"];
    assert_eq!(summary["windows"], 2);
    assert_eq!(summary["units_extracted"], 12);
    assert_eq!(summary["units_stored"], 12);
    assert_eq!(first["active_memories"], 12);

    let second = ingest_toy(&store);
    assert_eq!(second["active_memories"], 12);
    assert_eq!(second["total_memories"], 12);
    assert_eq!(second["conversations"][0]["summary"]["units_stored"], 0);
}

#[test]
fn malformed_dataset_fails_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"conversations": [{"sample_id": "x", "sessions": [], "qa": [{"answer": "a"}]}]}"#,
    )
    .unwrap();
    let store = dir.path().join("s.db");
    let stub = stub_args();
    let out = run(&with_stub(
        &["ingest", "--dataset", p(&bad), "--store", p(&store)],
        &stub,
    ));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("conversations[0].qa[0].question"), "{err}");

    std::fs::write(&bad, "{\n  \"conversations\": [\n").unwrap();
    let out = run(&with_stub(
        &["ingest", "--dataset", p(&bad), "--store", p(&store)],
        &stub,
    ));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
    assert!(!store.exists());
}

fn fusion_fixture(path: &Path) {
    let mut store = MemoryStore::with_seed(3);
    let t = Utc.with_ymd_and_hms(2023, 5, 1, 0, 0, 0).unwrap();
    let scope = Scope::new("u", "w").unwrap();
    for text in [
        "the ferry followed seagulls past the harbor",
        "beach beach",
        "beach sand",
        "beach towel",
        "a beach day with friends and sun",
        "a beach house",
        "the beach at dawn",
        "beach volleyball",
        "beach umbrella",
        "a beach cafe",
        "a long beach walk",
        "Caroline painted a lake sunrise",
        "pottery class on Tuesday",
        "counseling as a career",
        "moved from Sweden",
        "reading to the kids",
        "a charity race for mental health",
    ] {
        let id = store.next_id();
        let mut unit = MemoryUnit::new(id, scope.clone(), MemoryType::Episodic, text, t);
        unit.embedding = Some(hash_embed(text));
        store.put_memory(unit).unwrap();
    }
    save_snapshot(&store, path).unwrap();
}

fn contents(out: &str) -> Vec<String> {
    json_lines(out)
        .iter()
        .map(|v| v["content"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn query_is_stable_and_fusion_mode_matters() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("fixture.json");
    fusion_fixture(&store);
    let base = RetrievalConfig {
        semantic_top_k: 10,
        keyword_top_k: 10,
        ..RetrievalConfig::default()
    };
    let sum = dir.path().join("sum.json");
    std::fs::write(&sum, base.to_json_pretty()).unwrap();
    let rrf = dir.path().join("rrf.json");
    let mut rrf_cfg = base.clone();
    rrf_cfg.fusion_mode = memtune::retrieval::FusionMode::Rrf;
    std::fs::write(&rrf, rrf_cfg.to_json_pretty()).unwrap();

    let q = |cfg: &Path| {
        ok(&[
            "query",
            "--store",
            p(&store),
            "--config",
            p(cfg),
            "ferry beach",
        ])
    };
    let a = q(&sum);
    assert_eq!(a, q(&sum));
    let by_sum = contents(&a);
    let by_rrf = contents(&q(&rrf));
    assert!(by_sum[0].contains("ferry"), "{by_sum:?}");
    assert_eq!(by_rrf[0], "beach beach", "{by_rrf:?}");
    let first = &json_lines(&a)[0];
    for key in [
        "s_kw",
        "s_sem",
        "s_str",
        "s_fuse",
        "s",
        "provenance",
        "memory_id",
    ] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn empty_and_missing_stores() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.db");
    save_snapshot(&MemoryStore::with_seed(0), &empty).unwrap();
    assert_eq!(ok(&["query", "--store", p(&empty), "anything"]), "");
    let missing = dir.path().join("nope.db");
    let out = run(&["query", "--store", p(&missing), "anything"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn answer_and_evaluate_on_toy_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.db");
    ingest_toy(&store);
    let stub = stub_args();
    let out = ok(&with_stub(
        &[
            "answer",
            "--store",
            p(&store),
            "What is the name of Melanie's dog?",
        ],
        &stub,
    ));
    let v: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v["answer"]["answer"], "Oliver");
    assert!(!v["sources"].as_array().unwrap().is_empty());

    let dataset = data("toy_conversation.json");
    let eval_dir = dir.path().join("eval");
    let out = ok(&with_stub(
        &[
            "evaluate",
            "--store",
            p(&store),
            "--dataset",
            p(&dataset),
            "--out",
            p(&eval_dir),
        ],
        &stub,
    ));
    let summary: Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(summary["total_questions"], 12);
    let raw = std::fs::read_to_string(eval_dir.join("raw_results.jsonl")).unwrap();
    assert_eq!(raw.lines().count(), 12);
}

#[test]
fn consolidate_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store.db");
    ingest_toy(&store);
    let report: Value = serde_json::from_str(
        ok(&["consolidate", "--store", p(&store), "--now", "2023-06-01"]).trim(),
    )
    .unwrap();
    assert_eq!(report["exact_duplicates"], 0);
    let stats: Value = serde_json::from_str(ok(&["inspect", "--store", p(&store)]).trim()).unwrap();
    assert_eq!(stats["total"], 12);
    let units = ok(&[
        "inspect",
        "--store",
        p(&store),
        "--what",
        "units",
        "--scope",
        "user/toy-1",
    ]);
    assert_eq!(units.lines().count(), 12);
    let events = ok(&["inspect", "--store", p(&store), "--what", "events"]);
    assert!(events.lines().count() >= 12);
}

fn evolve(out: &Path, extra: &[&str]) -> Output {
    let stub = stub_args();
    let dataset = data("toy_conversation.json");
    let guards = data("toy_guards.json");
    let mut args = vec![
        "evolve",
        "--dataset",
        p(&dataset),
        "--guards",
        p(&guards),
        "--out",
        p(out),
    ];
    args.extend_from_slice(extra);
    bin().args(with_stub(&args, &stub)).output().unwrap()
}

#[test]
fn evolve_one_round_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let out = evolve(&run_dir, &["--max-rounds", "1"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["rounds"].as_array().unwrap().len(), 1);
    let table = String::from_utf8_lossy(&out.stderr);
    assert_eq!(table.lines().filter(|l| l.starts_with('R')).count(), 1);
    assert!(run_dir.join("manifest.json").exists());

    let exported = ok(&["export", "--run", p(&run_dir), "--what", "best-config"]);
    let path: Value = serde_json::from_str(exported.trim()).unwrap();
    let cfg = RetrievalConfig::load(Path::new(path["path"].as_str().unwrap())).unwrap();
    assert_eq!(memtune::evolution::clamp_config(&cfg), cfg);

    let csv_out = dir.path().join("t.csv");
    ok(&[
        "export",
        "--run",
        p(&run_dir),
        "--what",
        "trajectory",
        "--out",
        p(&csv_out),
    ]);
    let csv = std::fs::read_to_string(&csv_out).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let out = run(&[
        "export",
        "--run",
        p(&dir.path().join("missing")),
        "--what",
        "trajectory",
    ]);
    assert!(!out.status.success());
}

#[test]
fn exported_config_seeds_a_new_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    assert!(evolve(&first, &["--max-rounds", "2"]).status.success());
    let theta = dir.path().join("theta.json");
    ok(&[
        "export",
        "--run",
        p(&first),
        "--what",
        "best-config",
        "--out",
        p(&theta),
    ]);
    let second = dir.path().join("second");
    let out = evolve(&second, &["--max-rounds", "1", "--config", p(&theta)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let round0 = RetrievalConfig::load(&second.join("round_0/config.json")).unwrap();
    assert_eq!(round0, RetrievalConfig::load(&theta).unwrap());
}

#[test]
fn evolve_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = evolve(&a, &["--seed", "11"]);
    let ob = evolve(&b, &["--seed", "11"]);
    assert!(oa.status.success());
    let strip = |o: &Output, d: &Path| String::from_utf8_lossy(&o.stdout).replace(p(d), "RUN");
    assert_eq!(strip(&oa, &a), strip(&ob, &b));
    for entry in walk(&a) {
        let rel = entry.strip_prefix(&a).unwrap();
        let left = std::fs::read(&entry).unwrap();
        let right = std::fs::read(b.join(rel)).unwrap();
        if rel == Path::new("manifest.json") {
            let l = String::from_utf8(left).unwrap().replace(p(&a), "RUN");
            let r = String::from_utf8(right).unwrap().replace(p(&b), "RUN");
            assert_eq!(l, r);
        } else {
            assert!(left == right, "{} differs", rel.display());
        }
    }
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

#[test]
fn evolve_setup_failures() {
    let dir = tempfile::tempdir().unwrap();
    let stub = stub_args();
    let missing = dir.path().join("nope.json");
    let out = run(&with_stub(
        &[
            "evolve",
            "--qa",
            p(&missing),
            "--out",
            p(&dir.path().join("r")),
        ],
        &stub,
    ));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));

    let out = run(&[
        "evolve",
        "--dataset",
        p(&data("toy_conversation.json")),
        "--max-rounds",
        "0",
    ]);
    assert!(!out.status.success());
}
