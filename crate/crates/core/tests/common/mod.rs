#![allow(dead_code)]

use std::sync::{Arc, Mutex};

use ragplus::alignment::{AlignmentStore, LinkMethod};
use ragplus::corpus::{
    chunk_corpus, ApplicationCorpus, ApplicationItem, KnowledgeCorpus, KnowledgeItem,
    WhitespaceTokenizer,
};
use ragplus::evaluation::McqItem;
use ragplus::llm::{
    BackendError, ChatBackend, ChatRequest, Gateway, ModelConfig, ProfileClass, RetryPolicy,
};
use ragplus::retrieval::Index;
use ragplus::strategies::{option_label, AnswerOption};
use ragplus::template::TemplateSet;

pub const TOPICS: [&str; 20] = [
    "zorblat", "quenfel", "marvick", "tessaly", "brongle", "wimbrel", "caskett", "dorvane",
    "elspire", "fennock", "glimmora", "hestrel", "ivolant", "jasprin", "kelvane", "lorrick",
    "mundane", "norvish", "ostrake", "pellion",
];

pub const OPTIONS: [&str; 4] = ["it halves", "it doubles", "it vanishes", "it triples"];

/// Twenty knowledge items, each with one generated application, and a
/// question per item that only that item's topic word identifies.
pub struct Toy {
    pub store: AlignmentStore,
    pub index: Index,
    pub dataset: Vec<McqItem>,
    pub templates: TemplateSet,
}

pub fn knowledge_text(i: usize) -> String {
    let t = TOPICS[i];
    format!(
        "The {t} principle: every {t} quantity changes in a fixed way when its base is squared."
    )
}

pub fn application_text(i: usize) -> String {
    let t = TOPICS[i];
    format!("Worked {t} case: a {t} quantity with base 3 is squared and the outcome is checked against the {t} principle.")
}

pub fn question_text(i: usize) -> String {
    format!(
        "A {} quantity has base 3 and its base is squared. What happens to it?",
        TOPICS[i]
    )
}

pub fn gold(i: usize) -> String {
    option_label(i % 4)
}

pub fn wrong(i: usize) -> String {
    option_label((i + 1) % 4)
}

pub fn toy() -> Toy {
    let knowledge = KnowledgeCorpus::from_items(
        (0..20).map(|i| KnowledgeItem::new(format!("k{i:02}"), knowledge_text(i))),
    )
    .unwrap();
    let apps = ApplicationCorpus::from_items(
        (0..20).map(|i| ApplicationItem::generated(format!("a{i:02}"), application_text(i))),
    )
    .unwrap();
    let index = Index::build(&chunk_corpus(&knowledge, 800, &WhitespaceTokenizer)).unwrap();
    let mut store = AlignmentStore::new(knowledge, apps);
    for i in 0..20 {
        store
            .link(
                &format!("k{i:02}"),
                &format!("a{i:02}"),
                LinkMethod::Generated,
                Some(1.0),
            )
            .unwrap();
    }
    let dataset = (0..20)
        .map(|i| McqItem {
            id: format!("q{i:02}"),
            question: question_text(i),
            options: OPTIONS
                .iter()
                .enumerate()
                .map(|(j, t)| AnswerOption {
                    label: option_label(j),
                    text: t.to_string(),
                })
                .collect(),
            answer: gold(i),
        })
        .collect();
    Toy {
        store,
        index,
        dataset,
        templates: TemplateSet::builtin(),
    }
}

/// Answers item `i` correctly iff the prompt contains item `i`'s aligned
/// application text; otherwise a fixed wrong label. Preliminary (AFRAG)
/// and rerank prompts get plausible replies.
pub fn oracle_reply(request: &ChatRequest) -> Result<String, BackendError> {
    let prompt = &request.messages[0].content;
    let Some(i) = (0..20).find(|&i| prompt.contains(&question_text(i))) else {
        return Err(BackendError::Rejected(
            "prompt names no toy question".into(),
        ));
    };
    if prompt.starts_with("Give a short preliminary answer") {
        return Ok(format!("It depends on the {} principle.", TOPICS[i]));
    }
    if prompt.contains("Candidate passages:") {
        return Ok("1, 2, 3".into());
    }
    let label = if prompt.contains(&application_text(i)) {
        gold(i)
    } else {
        wrong(i)
    };
    Ok(format!(
        "Reasoning about the {} quantity.\nAnswer: {label}",
        TOPICS[i]
    ))
}

/// Records every request it sees before delegating.
pub struct Recorder<F> {
    pub seen: Arc<Mutex<Vec<ChatRequest>>>,
    inner: F,
}

impl<F> Recorder<F> {
    pub fn new(inner: F) -> (Self, Arc<Mutex<Vec<ChatRequest>>>) {
        let seen = Arc::new(Mutex::new(Vec::new()));
        (
            Recorder {
                seen: seen.clone(),
                inner,
            },
            seen,
        )
    }
}

impl<F> ChatBackend for Recorder<F>
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn send(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.seen.lock().unwrap().push(request.clone());
        (self.inner)(request)
    }
}

pub fn gateway(backend: impl ChatBackend + 'static, class: ProfileClass) -> Gateway {
    Gateway::new(Arc::new(backend))
        .with_model("m", ModelConfig::new(class))
        .with_retry(RetryPolicy::immediate(1))
}
