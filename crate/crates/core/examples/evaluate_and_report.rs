//! Evaluate RAG and RAG+ on a small multiple-choice set over repeated runs,
//! log every record, and print the comparison table.
//!
//! ```bash
//! cargo run --example evaluate_and_report
//! ```

use std::sync::Arc;

use ragplus::alignment::{AlignmentStore, LinkMethod};
use ragplus::corpus::{
    chunk_corpus, ApplicationCorpus, ApplicationItem, KnowledgeCorpus, KnowledgeItem,
    WhitespaceTokenizer,
};
use ragplus::evaluation::{self, evaluate, EvalJob};
use ragplus::llm::{BackendError, ChatRequest, Gateway, ModelConfig, ProfileClass, RetryPolicy};
use ragplus::retrieval::Index;
use ragplus::strategies::{Augmentation, BaseStrategy, LlmHandle, StrategyConfig, StrategyContext};
use ragplus::template::TemplateSet;

const DATASET: &str = r#"{"id":"q1","question":"A 4 kg box is pushed with a net force of 8 N. What is its acceleration?","options":["0.5 m/s^2","2 m/s^2","32 m/s^2"],"answer":"B"}
{"id":"q2","question":"A 12 V source drives a 4 ohm resistor. What current flows?","options":{"A":"48 A","B":"0.33 A","C":"3 A"},"answer":"C"}
"#;

/// Gets a question right only when a worked example is in the prompt.
fn student(request: &ChatRequest) -> Result<String, BackendError> {
    let prompt = &request.messages[0].content;
    let answer = match (prompt.contains("Worked example"), prompt.contains("kg box")) {
        (true, true) => "B",
        (true, false) => "C",
        (false, _) => "A",
    };
    Ok(format!("Let me think.\nAnswer: {answer}"))
}

fn main() -> ragplus::Result<()> {
    let dataset = evaluation::read_dataset(DATASET.as_bytes(), "inline")?;
    let knowledge = KnowledgeCorpus::from_items([
        KnowledgeItem::new("newton2", "Net force equals mass times acceleration."),
        KnowledgeItem::new("ohm", "Current equals voltage divided by resistance."),
    ])?;
    let apps = ApplicationCorpus::from_items([
        ApplicationItem::generated("a1", "Worked example: 6 N on a 2 kg cart gives 3 m/s^2."),
        ApplicationItem::generated("a2", "Worked example: 9 V across 3 ohms drives 3 A."),
    ])?;
    let index = Index::build(&chunk_corpus(&knowledge, 800, &WhitespaceTokenizer))?;
    let mut store = AlignmentStore::new(knowledge, apps);
    store.link("newton2", "a1", LinkMethod::Generated, None)?;
    store.link("ohm", "a2", LinkMethod::Generated, None)?;

    let gateway = Gateway::new(Arc::new(student))
        .with_model("student", ModelConfig::new(ProfileClass::Deterministic))
        .with_retry(RetryPolicy::immediate(1));
    let templates = TemplateSet::builtin();
    let ctx = StrategyContext {
        retriever: &index,
        store: Some(&store),
        templates: &templates,
        llm: Some(LlmHandle {
            gateway: &gateway,
            model: "student",
        }),
    };

    let logs = tempfile::tempdir().expect("tempdir");
    let mut summaries = Vec::new();
    for aug in [Augmentation::Plain, Augmentation::Plus] {
        let mut config = StrategyConfig::new(BaseStrategy::Rag, aug);
        config.k_retrieve = 1;
        let log = logs.path().join(aug.id()).join(evaluation::RECORDS_FILE);
        let mut job = EvalJob::new(&dataset, &config);
        job.records = Some(&log);
        let result = evaluate(&job, &ctx)?;
        println!("{}: {} records logged", config.name(), result.records.len());
        summaries.push(result.summary);
    }

    let report = evaluation::report(&summaries)?;
    println!("\n{}\n{}", report.grid, report.csv);
    Ok(())
}
