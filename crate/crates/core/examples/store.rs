//! Typed, scoped memory units with an audit log and snapshot round trip.

use chrono::{TimeZone, Utc};
use memtune::embedding::hash_embed;
use memtune::store::{load_snapshot, save_snapshot, MemoryStore, MemoryType, MemoryUnit, Scope};

fn main() -> anyhow::Result<()> {
    let mut store = MemoryStore::with_seed(42);
    let scope = Scope::new("caroline", "chat")?.with_session("s1")?;
    let at = Utc.with_ymd_and_hms(2023, 5, 8, 13, 56, 0).unwrap();

    let old_id = store.next_id();
    let mut old = MemoryUnit::new(
        old_id,
        scope.clone(),
        MemoryType::ProjectState,
        "Caroline is researching adoption agencies",
        at,
    );
    old.embedding = Some(hash_embed(&old.content));
    store.put_memory(old)?;

    let new_id = store.next_id();
    let mut new = MemoryUnit::new(
        new_id,
        scope.clone(),
        MemoryType::ProjectState,
        "Caroline has applied to an adoption agency",
        at,
    )
    .with_importance(0.8);
    new.embedding = Some(hash_embed(&new.content));
    store.put_memory(new)?;
    store.supersede(old_id, new_id)?;

    for u in store.query_scope(&scope.base(), true, None) {
        println!(
            "{:?} {:<10} {}",
            u.status,
            u.memory_type.as_str(),
            u.content
        );
    }
    println!("{} audit events", store.events().len());

    let dir = std::env::temp_dir().join("memtune-store-example");
    std::fs::create_dir_all(&dir)?;
    for name in ["store.db", "store.json"] {
        let path = dir.join(name);
        save_snapshot(&store, &path)?;
        println!(
            "{name}: round trip equal = {}",
            load_snapshot(&path)?.same_contents(&store)
        );
    }
    Ok(())
}
