//! Dedup, near-duplicate merging, importance decay and entity reinforcement.

use chrono::{Duration, TimeZone, Utc};
use memtune::consolidation::{consolidate, ConsolidationConfig};
use memtune::store::{MemoryStore, MemoryType, MemoryUnit, Scope};

fn main() -> anyhow::Result<()> {
    let mut store = MemoryStore::with_seed(3);
    let scope = Scope::new("melanie", "chat")?;
    let now = Utc.with_ymd_and_hms(2023, 6, 1, 0, 0, 0).unwrap();
    let contents = [
        ("Melanie painted a lake sunrise", 40),
        ("melanie painted a lake sunrise", 10),
        ("Melanie painted a lovely lake sunrise", 5),
        ("Melanie ran a charity race for mental health", 90),
    ];
    for (text, age_days) in contents {
        let id = store.next_id();
        let mut u = MemoryUnit::new(
            id,
            scope.clone(),
            MemoryType::Episodic,
            text,
            now - Duration::days(age_days),
        )
        .with_importance(0.7);
        u.persons.insert("Melanie".into());
        store.put_memory(u)?;
    }
    let report = consolidate(&mut store, None, now, &ConsolidationConfig::default())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    for u in store.units() {
        println!(
            "{:?} importance {:.3} reinforcement {:.2} {}",
            u.status, u.importance, u.reinforcement, u.content
        );
    }
    Ok(())
}
