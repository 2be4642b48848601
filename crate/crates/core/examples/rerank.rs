//! Rerank a retrieval pool with a model, including the fallback path when
//! the model never returns a parseable ranking.
//!
//! ```bash
//! cargo run --example rerank
//! ```

use std::sync::Arc;

use ragplus::corpus::{chunk_corpus, KnowledgeCorpus, KnowledgeItem, WhitespaceTokenizer};
use ragplus::llm::{BackendError, ChatRequest, Gateway, ModelConfig, ProfileClass, RetryPolicy};
use ragplus::retrieval::Index;
use ragplus::strategies::{
    parse_rerank, run_rerank, Augmentation, BaseStrategy, LlmHandle, Question, StrategyConfig,
    StrategyContext,
};
use ragplus::template::TemplateSet;

fn main() -> ragplus::Result<()> {
    println!(
        "parse \"[3] > [1] > [3] > [9]\" over 5 -> {:?}",
        parse_rerank("[3] > [1] > [3] > [9]", 5)
    );

    let knowledge = KnowledgeCorpus::from_items((1..=6).map(|i| {
        KnowledgeItem::new(
            format!("k{i}"),
            format!("Fact {i} about acceleration and force, variant {i}."),
        )
    }))?;
    let index = Index::build(&chunk_corpus(&knowledge, 800, &WhitespaceTokenizer))?;
    let templates = TemplateSet::builtin();
    let question = Question::lettered(
        "How does force relate to acceleration?",
        &["linearly", "not at all"],
    );
    let mut config = StrategyConfig::new(BaseStrategy::Rerank, Augmentation::Plain);
    config.k_retrieve = 2;
    config.k_rerank_pool = 5;

    type Reply = fn(&ChatRequest) -> Result<String, BackendError>;
    let replies: [(&str, Reply); 2] = [
        ("cooperative", |_| Ok("4, 2".into())),
        (
            "unparseable",
            |_| Ok("They all look relevant to me.".into()),
        ),
    ];
    for (name, reply) in replies {
        let gateway = Gateway::new(Arc::new(reply))
            .with_model("ranker", ModelConfig::new(ProfileClass::Deterministic))
            .with_retry(RetryPolicy::immediate(1));
        let ctx = StrategyContext {
            retriever: &index,
            store: None,
            templates: &templates,
            llm: Some(LlmHandle {
                gateway: &gateway,
                model: "ranker",
            }),
        };
        let run = run_rerank(&question, &config, &ctx)?;
        let ids: Vec<&str> = run
            .bundle
            .retrieved
            .iter()
            .map(|h| h.knowledge_id.as_str())
            .collect();
        println!(
            "{name:<12} kept {ids:?} after {} prompt(s); degradations {:?}",
            run.rerank_attempts, run.degradations
        );
    }
    Ok(())
}
