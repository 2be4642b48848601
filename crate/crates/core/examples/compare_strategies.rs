//! Render the same question under plain, application-only and plus modes
//! and show that the knowledge slots do not change between them.
//!
//! ```bash
//! cargo run --example compare_strategies
//! ```

use ragplus::alignment::{AlignmentStore, LinkMethod};
use ragplus::corpus::{
    chunk_corpus, ApplicationCorpus, ApplicationItem, KnowledgeCorpus, KnowledgeItem,
    WhitespaceTokenizer,
};
use ragplus::retrieval::Index;
use ragplus::strategies::{
    execute, Augmentation, BaseStrategy, Question, StrategyConfig, StrategyContext,
};
use ragplus::template::TemplateSet;

fn main() -> ragplus::Result<()> {
    let knowledge = KnowledgeCorpus::from_items([
        KnowledgeItem::new("newton2", "Net force equals mass times acceleration."),
        KnowledgeItem::new("ohm", "Current equals voltage divided by resistance."),
    ])?;
    let apps = ApplicationCorpus::from_items([ApplicationItem::generated(
        "a1",
        "A 2 kg cart pushed with 6 N of net force accelerates at 3 m/s^2.",
    )])?;
    let index = Index::build(&chunk_corpus(&knowledge, 800, &WhitespaceTokenizer))?;
    let mut store = AlignmentStore::new(knowledge, apps);
    store.link("newton2", "a1", LinkMethod::Generated, Some(1.0))?;
    let templates = TemplateSet::builtin();
    let ctx = StrategyContext {
        retriever: &index,
        store: Some(&store),
        templates: &templates,
        llm: None,
    };

    let question = Question::lettered(
        "A 4 kg box is pushed with a net force of 8 N. What is its acceleration?",
        &["0.5 m/s^2", "2 m/s^2", "32 m/s^2", "4 m/s^2"],
    );
    let mut knowledge_slots = None;
    for aug in Augmentation::ALL {
        let mut config = StrategyConfig::new(BaseStrategy::Rag, aug);
        config.k_retrieve = 1;
        let run = execute(&question, None, &config, &ctx)?;
        println!(
            "===== {} ({}) =====\n{}\n",
            config.name(),
            config.fingerprint(),
            run.bundle.rendered
        );
        if aug != Augmentation::ApplicationOnly {
            let slots = run.bundle.knowledge_slots.clone();
            assert!(knowledge_slots.get_or_insert(slots.clone()) == &slots);
        }
    }
    println!("plain and plus prompts carry identical knowledge slots");
    Ok(())
}
