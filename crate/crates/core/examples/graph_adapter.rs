//! Wrap context produced by an external graph retriever and attach the
//! applications of whichever corpus items the blocks match.
//!
//! ```bash
//! cargo run --example graph_adapter
//! ```

use ragplus::alignment::{AlignmentStore, LinkMethod};
use ragplus::corpus::{
    chunk_corpus, ApplicationCorpus, ApplicationItem, KnowledgeCorpus, KnowledgeItem,
    WhitespaceTokenizer,
};
use ragplus::retrieval::Index;
use ragplus::strategies::{
    adapt_graph_output, Augmentation, BaseStrategy, Question, StrategyConfig, StrategyContext,
};
use ragplus::template::TemplateSet;

fn main() -> ragplus::Result<()> {
    let knowledge = KnowledgeCorpus::from_items([
        KnowledgeItem::new("ohm", "Current equals voltage divided by resistance."),
        KnowledgeItem::new("power", "Electrical power equals voltage times current."),
    ])?;
    let apps = ApplicationCorpus::from_items([ApplicationItem::generated(
        "a1",
        "A 12 V source across 4 ohms drives 3 A.",
    )])?;
    let index = Index::build(&chunk_corpus(&knowledge, 800, &WhitespaceTokenizer))?;
    let mut store = AlignmentStore::new(knowledge, apps);
    store.link("ohm", "a1", LinkMethod::Generated, None)?;
    let templates = TemplateSet::builtin();
    let ctx = StrategyContext {
        retriever: &index,
        store: Some(&store),
        templates: &templates,
        llm: None,
    };

    let blocks = vec![
        "(entity) Ohm's law: current equals voltage divided by resistance".to_string(),
        "(relation) resistor --limits--> current".to_string(),
    ];
    let question = Question::lettered(
        "A 6 V source drives a 2 ohm resistor. What current flows?",
        &["3 A", "12 A"],
    );
    let config = StrategyConfig::new(BaseStrategy::GraphAdapter, Augmentation::Plus);
    let run = adapt_graph_output(&question, &blocks, &config, &ctx)?;
    for hit in &run.bundle.retrieved {
        println!(
            "block matched {} (cosine {:.3})",
            hit.knowledge_id, hit.score
        );
    }
    println!("\n{}", run.bundle.rendered);
    Ok(())
}
