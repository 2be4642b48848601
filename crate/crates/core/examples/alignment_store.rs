//! Link knowledge items to worked applications and query the links.
//!
//! ```bash
//! cargo run --example alignment_store
//! ```

use ragplus::alignment::{coverage, AlignmentStore, LinkMethod};
use ragplus::corpus::{ApplicationCorpus, ApplicationItem, KnowledgeCorpus, KnowledgeItem};

fn main() -> ragplus::Result<()> {
    let knowledge = KnowledgeCorpus::from_items([
        KnowledgeItem::new("ohm", "Current equals voltage divided by resistance."),
        KnowledgeItem::new("power", "Electrical power equals voltage times current."),
        KnowledgeItem::new("kirchhoff", "Currents into a node sum to zero."),
    ])?;
    let apps = ApplicationCorpus::from_items([
        ApplicationItem::generated("a1", "A 12 V source across 4 ohms drives 3 A."),
        ApplicationItem::generated("a2", "A 12 V, 3 A heater dissipates 36 W."),
        ApplicationItem::generated("a3", "A 9 V battery across 3 ohms drives 3 A."),
    ])?;
    let mut store = AlignmentStore::new(knowledge, apps);
    store.link("ohm", "a1", LinkMethod::Generated, Some(1.0))?;
    store.link("ohm", "a3", LinkMethod::Generated, Some(0.8))?;
    // One application can serve several knowledge items.
    store.link("power", "a2", LinkMethod::Matched, Some(0.67))?;
    store.link("ohm", "a2", LinkMethod::Matched, Some(0.6))?;

    for app in store.applications_for("ohm", 2)? {
        println!("ohm -> {}: {}", app.id, app.text);
    }
    println!("a2 serves {:?}", store.knowledge_for("a2"));

    // Links to unknown ids are refused; the store never dangles.
    if let Err(e) = store.link("ohm", "a9", LinkMethod::Generated, None) {
        println!("refused: {e}");
    }

    let cov = coverage(store.knowledge(), &store);
    println!(
        "coverage {:.2}, unmatched {:?}",
        cov.fraction, cov.unmatched
    );

    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("alignment.jsonl");
    store.save(&path)?;
    let reloaded = AlignmentStore::load(
        &path,
        store.knowledge().clone(),
        store.applications().clone(),
    )?;
    println!("reloaded {} links", reloaded.link_count());
    Ok(())
}
