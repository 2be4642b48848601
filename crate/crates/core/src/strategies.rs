//! Inference-time strategies and prompt assembly.
//!
//! Every strategy produces a [`PromptBundle`]: what was retrieved, which
//! knowledge texts and aligned applications go into the prompt, and the
//! rendered prompt itself. The augmentation overlay only decides what is
//! attached to the retrieved items; it never changes what is retrieved.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentStore, DEFAULT_APP_CAP};
use crate::error::{Error, Result};
use crate::llm::{Gateway, Message};
use crate::retrieval::{fuzzy_match, Hit, Retriever, DEFAULT_MATCH_THRESHOLD, DEFAULT_TOP_K};
use crate::template::{Scope, TemplateSet};

pub const DEFAULT_RERANK_POOL: usize = 10;
pub const DEFAULT_RERANK_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseStrategy {
    Rag,
    Afrag,
    Rerank,
    GraphAdapter,
}

impl BaseStrategy {
    pub const ALL: [BaseStrategy; 4] = [
        BaseStrategy::Rag,
        BaseStrategy::Afrag,
        BaseStrategy::Rerank,
        BaseStrategy::GraphAdapter,
    ];

    pub fn id(self) -> &'static str {
        match self {
            BaseStrategy::Rag => "rag",
            BaseStrategy::Afrag => "afrag",
            BaseStrategy::Rerank => "rerank",
            BaseStrategy::GraphAdapter => "graph",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            BaseStrategy::Rag => "RAG",
            BaseStrategy::Afrag => "AFRAG",
            BaseStrategy::Rerank => "Rerank RAG",
            BaseStrategy::GraphAdapter => "GraphRAG",
        }
    }
}

impl FromStr for BaseStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rag" => Ok(BaseStrategy::Rag),
            "afrag" => Ok(BaseStrategy::Afrag),
            "rerank" => Ok(BaseStrategy::Rerank),
            "graph" | "graph_adapter" => Ok(BaseStrategy::GraphAdapter),
            other => Err(Error::Invalid(format!(
                "unknown strategy `{other}` (valid: rag, afrag, rerank, graph)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    Plain,
    /// Applications of the retrieved items, without the knowledge texts.
    ApplicationOnly,
    /// Knowledge plus its aligned applications.
    Plus,
}

impl Augmentation {
    pub const ALL: [Augmentation; 3] = [
        Augmentation::Plain,
        Augmentation::ApplicationOnly,
        Augmentation::Plus,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Augmentation::Plain => "plain",
            Augmentation::ApplicationOnly => "app-only",
            Augmentation::Plus => "plus",
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Augmentation::Plain => "",
            Augmentation::ApplicationOnly => "-",
            Augmentation::Plus => "+",
        }
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Augmentation::Plain),
            "app-only" | "app_only" | "application_only" => Ok(Augmentation::ApplicationOnly),
            "plus" => Ok(Augmentation::Plus),
            other => Err(Error::Invalid(format!(
                "unknown augmentation `{other}` (valid: plain, app-only, plus)"
            ))),
        }
    }
}

/// How plus-mode prompts lay out knowledge and applications.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlusLayout {
    /// Each knowledge item directly followed by its applications.
    #[default]
    Interleaved,
    /// All knowledge first, then all applications.
    Grouped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub base: BaseStrategy,
    pub augmentation: Augmentation,
    pub k_retrieve: usize,
    pub k_rerank_pool: usize,
    pub app_cap: usize,
    pub max_rerank_attempts: u32,
    pub match_threshold: f64,
    pub layout: PlusLayout,
}

impl StrategyConfig {
    pub fn new(base: BaseStrategy, augmentation: Augmentation) -> Self {
        StrategyConfig {
            base,
            augmentation,
            k_retrieve: DEFAULT_TOP_K,
            k_rerank_pool: DEFAULT_RERANK_POOL,
            app_cap: DEFAULT_APP_CAP,
            max_rerank_attempts: DEFAULT_RERANK_ATTEMPTS,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            layout: PlusLayout::Interleaved,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_retrieve < 1 {
            return Err(Error::Invalid("k_retrieve must be at least 1".into()));
        }
        if self.base == BaseStrategy::Rerank && self.k_rerank_pool < self.k_retrieve {
            return Err(Error::Invalid(format!(
                "rerank pool {} is smaller than k_retrieve {}",
                self.k_rerank_pool, self.k_retrieve
            )));
        }
        if self.base == BaseStrategy::Rerank && self.max_rerank_attempts < 1 {
            return Err(Error::Invalid(
                "max_rerank_attempts must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Table label, e.g. `Rerank RAG+`.
    pub fn name(&self) -> String {
        format!("{}{}", self.base.display_name(), self.augmentation.suffix())
    }

    /// Stable identifier covering every setting that changes behavior.
    pub fn fingerprint(&self) -> String {
        let layout = match self.layout {
            PlusLayout::Interleaved => "il",
            PlusLayout::Grouped => "gr",
        };
        format!(
            "{}.{}.k{}.p{}.c{}.r{}.t{}.{}",
            self.base.id(),
            self.augmentation.id(),
            self.k_retrieve,
            self.k_rerank_pool,
            self.app_cap,
            self.max_rerank_attempts,
            self.match_threshold,
            layout
        )
    }

    pub fn template_id(&self) -> &'static str {
        match (self.base, self.augmentation, self.layout) {
            (BaseStrategy::GraphAdapter, Augmentation::Plain, _) => "graph",
            (BaseStrategy::GraphAdapter, Augmentation::ApplicationOnly, _) => "graph_app_only",
            (BaseStrategy::GraphAdapter, Augmentation::Plus, _) => "graph_plus",
            (_, Augmentation::Plain, _) => "rag",
            (_, Augmentation::ApplicationOnly, _) => "rag_app_only",
            (_, Augmentation::Plus, PlusLayout::Interleaved) => "rag_plus",
            (_, Augmentation::Plus, PlusLayout::Grouped) => "rag_plus_grouped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub options: Vec<AnswerOption>,
}

impl Question {
    /// Options labelled A, B, C, ... in order.
    pub fn lettered(text: impl Into<String>, options: &[&str]) -> Self {
        Question {
            text: text.into(),
            options: options
                .iter()
                .enumerate()
                .map(|(i, o)| AnswerOption {
                    label: option_label(i),
                    text: o.to_string(),
                })
                .collect(),
        }
    }

    pub fn options_text(&self) -> String {
        self.options
            .iter()
            .map(|o| format!("{}. {}", o.label, o.text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// The question followed by its options; what plain retrieval matches on.
    pub fn retrieval_query(&self) -> String {
        if self.options.is_empty() {
            self.text.clone()
        } else {
            format!("{}\n{}", self.text, self.options_text())
        }
    }
}

pub fn option_label(i: usize) -> String {
    let mut n = i;
    let mut label = String::new();
    loop {
        label.insert(0, (b'A' + (n % 26) as u8) as char);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    label
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttachedApplication {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub question: String,
    pub options: Vec<AnswerOption>,
    /// The query the final retrieval step ran with.
    pub retrieval_query: String,
    /// Retrieved (or fuzzy-matched) items in slot order.
    pub retrieved: Vec<Hit>,
    /// Knowledge texts in slot order; empty in application-only mode.
    pub knowledge_slots: Vec<String>,
    /// `application_slots[i]` holds the applications aligned to
    /// `retrieved[i]`; empty in plain mode.
    pub application_slots: Vec<Vec<AttachedApplication>>,
    /// Verbatim external context (graph adapter only).
    pub external_blocks: Vec<String>,
    pub template_id: String,
    pub rendered: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    /// Reranker output never parsed; similarity order was used instead.
    RerankFallback { attempts: u32, reason: String },
    /// Preliminary answer failed; plain question retrieval was used instead.
    AfragFallback { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRun {
    pub bundle: PromptBundle,
    pub degradations: Vec<Degradation>,
    /// Reranker prompts sent, including re-prompts.
    pub rerank_attempts: u32,
}

#[derive(Clone, Copy)]
pub struct LlmHandle<'a> {
    pub gateway: &'a Gateway,
    pub model: &'a str,
}

/// Everything a strategy reads.
#[derive(Clone, Copy)]
pub struct StrategyContext<'a> {
    pub retriever: &'a dyn Retriever,
    pub store: Option<&'a AlignmentStore>,
    pub templates: &'a TemplateSet,
    pub llm: Option<LlmHandle<'a>>,
}

impl<'a> StrategyContext<'a> {
    fn llm(&self) -> Result<LlmHandle<'a>> {
        self.llm
            .ok_or_else(|| Error::Precondition("strategy needs a language model".into()))
    }
}

/// Applications aligned to each retrieved knowledge id.
pub fn attach_applications(
    knowledge_ids: &[&str],
    store: Option<&AlignmentStore>,
    augmentation: Augmentation,
    app_cap: usize,
) -> Result<Vec<Vec<AttachedApplication>>> {
    if augmentation == Augmentation::Plain {
        return Ok(Vec::new());
    }
    let store = store.ok_or_else(|| {
        Error::Precondition(format!(
            "{} mode needs an alignment store",
            augmentation.id()
        ))
    })?;
    knowledge_ids
        .iter()
        .map(|id| {
            Ok(store
                .applications_for(id, app_cap)?
                .into_iter()
                .map(|a| AttachedApplication {
                    id: a.id.clone(),
                    text: a.text.clone(),
                })
                .collect())
        })
        .collect()
}

/// Slot contents handed to a template.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptInputs<'a> {
    pub question: &'a str,
    pub options: &'a [AnswerOption],
    pub knowledge_slots: &'a [String],
    pub application_slots: &'a [Vec<AttachedApplication>],
    pub external_blocks: &'a [String],
}

/// Render a template. The scope exposes `question`, `options`, and the
/// lists `knowledge`, `applications` (flattened, first occurrence of each
/// id), `pairs` (`knowledge` + nested `applications`) and `external`.
pub fn assemble_prompt(
    templates: &TemplateSet,
    template_id: &str,
    inputs: &PromptInputs,
) -> Result<String> {
    let options = inputs
        .options
        .iter()
        .map(|o| format!("{}. {}", o.label, o.text))
        .collect::<Vec<_>>()
        .join("\n");

    let app_scopes = |apps: &[AttachedApplication]| -> Vec<Scope> {
        apps.iter()
            .map(|a| {
                Scope::new()
                    .with("text", a.text.as_str())
                    .with("id", a.id.as_str())
            })
            .collect()
    };

    let mut seen = HashSet::new();
    let flat: Vec<AttachedApplication> = inputs
        .application_slots
        .iter()
        .flatten()
        .filter(|a| seen.insert(a.id.as_str()))
        .cloned()
        .collect();

    let pairs: Vec<Scope> = inputs
        .knowledge_slots
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let apps = inputs
                .application_slots
                .get(i)
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            Scope::new()
                .with("knowledge", k.as_str())
                .with("applications", app_scopes(apps))
        })
        .collect();

    let scope = Scope::new()
        .with("question", inputs.question)
        .with("options", options)
        .with("knowledge", Scope::texts(inputs.knowledge_slots))
        .with("applications", app_scopes(&flat))
        .with("pairs", pairs)
        .with("external", Scope::texts(inputs.external_blocks));
    templates.render(template_id, &scope)
}

fn build_bundle(
    question: &Question,
    retrieval_query: String,
    hits: Vec<Hit>,
    external_blocks: Vec<String>,
    config: &StrategyConfig,
    ctx: &StrategyContext,
) -> Result<PromptBundle> {
    let ids: Vec<&str> = hits.iter().map(|h| h.knowledge_id.as_str()).collect();
    let application_slots =
        attach_applications(&ids, ctx.store, config.augmentation, config.app_cap)?;
    let knowledge_slots = match config.augmentation {
        Augmentation::ApplicationOnly => Vec::new(),
        _ => hits.iter().map(|h| h.text.clone()).collect(),
    };
    let template_id = config.template_id().to_string();
    let rendered = assemble_prompt(
        ctx.templates,
        &template_id,
        &PromptInputs {
            question: &question.text,
            options: &question.options,
            knowledge_slots: &knowledge_slots,
            application_slots: &application_slots,
            external_blocks: &external_blocks,
        },
    )?;
    Ok(PromptBundle {
        question: question.text.clone(),
        options: question.options.clone(),
        retrieval_query,
        retrieved: hits,
        knowledge_slots,
        application_slots,
        external_blocks,
        template_id,
        rendered,
    })
}

fn finished(bundle: PromptBundle) -> StrategyRun {
    StrategyRun {
        bundle,
        degradations: Vec::new(),
        rerank_attempts: 0,
    }
}

/// Retrieve with the question and its options, then attach applications.
pub fn run_rag(
    question: &Question,
    config: &StrategyConfig,
    ctx: &StrategyContext,
) -> Result<StrategyRun> {
    config.validate()?;
    let query = question.retrieval_query();
    let hits = ctx.retriever.search(&query, config.k_retrieve)?.ranked;
    Ok(finished(build_bundle(
        question,
        query,
        hits,
        Vec::new(),
        config,
        ctx,
    )?))
}

/// Ask for a preliminary answer, retrieve with it, and prompt with the
/// original question plus what was retrieved. The preliminary answer itself
/// is not part of the final prompt.
pub fn run_afrag(
    question: &Question,
    config: &StrategyConfig,
    ctx: &StrategyContext,
) -> Result<StrategyRun> {
    config.validate()?;
    let llm = ctx.llm()?;
    let prompt = ctx.templates.render(
        "afrag_preliminary",
        &Scope::new()
            .with("question", question.text.as_str())
            .with("options", question.options_text()),
    )?;
    let reason = match llm.gateway.complete(llm.model, &[Message::user(prompt)]) {
        Ok(c) if !c.text.trim().is_empty() => {
            let query = c.text.trim().to_string();
            let hits = ctx.retriever.search(&query, config.k_retrieve)?.ranked;
            return Ok(finished(build_bundle(
                question,
                query,
                hits,
                Vec::new(),
                config,
                ctx,
            )?));
        }
        Ok(_) => "empty preliminary answer".to_string(),
        Err(e) => e.to_string(),
    };
    log::warn!("answer-first stage failed ({reason}); retrieving with the question");
    let mut run = run_rag(question, config, ctx)?;
    run.degradations.push(Degradation::AfragFallback { reason });
    Ok(run)
}

/// Parse a reranker reply into 0-based candidate positions.
///
/// Scans for the first run of consecutive numeric tokens (tokens are split on
/// whitespace and commas, with surrounding brackets and punctuation
/// stripped). Within that run, out-of-range numbers and repeats are dropped.
/// Runs with no usable number are skipped.
pub fn parse_rerank(reply: &str, pool: usize) -> Vec<usize> {
    let strip: &[char] = &[
        '[', ']', '(', ')', '{', '}', '.', ';', ':', '#', '"', '\'', '*', '<', '>',
    ];
    let mut run: Vec<usize> = Vec::new();
    let mut seen = HashSet::new();
    for token in reply.split(|c: char| c.is_whitespace() || c == ',') {
        if token.is_empty() {
            continue;
        }
        let t = token.trim_matches(strip);
        if t.is_empty() {
            continue;
        }
        match t.parse::<usize>() {
            Ok(n) => {
                if (1..=pool).contains(&n) && seen.insert(n) {
                    run.push(n - 1);
                }
            }
            Err(_) if !run.is_empty() => return run,
            Err(_) => seen.clear(),
        }
    }
    run
}

/// Retrieve a candidate pool, let the model reorder it, keep the top
/// `k_retrieve`. Unparseable replies are re-prompted; after the last attempt
/// the similarity order is used and the fallback is recorded.
pub fn run_rerank(
    question: &Question,
    config: &StrategyConfig,
    ctx: &StrategyContext,
) -> Result<StrategyRun> {
    config.validate()?;
    let query = question.retrieval_query();
    let pool = ctx.retriever.search(&query, config.k_rerank_pool)?.ranked;
    let want = config.k_retrieve.min(pool.len());
    if pool.len() <= 1 {
        let hits = pool.into_iter().take(want).collect();
        return Ok(finished(build_bundle(
            question,
            query,
            hits,
            Vec::new(),
            config,
            ctx,
        )?));
    }
    let llm = ctx.llm()?;

    let candidates: Vec<Scope> = pool
        .iter()
        .map(|h| Scope::new().with("text", h.text.as_str()))
        .collect();
    let prompt = ctx.templates.render(
        "rerank",
        &Scope::new()
            .with("question", question.text.as_str())
            .with("options", question.options_text())
            .with("candidates", candidates),
    )?;
    let reminder = ctx.templates.render(
        "rerank_reminder",
        &Scope::new().with("count", pool.len().to_string()),
    )?;

    let mut messages = vec![Message::user(prompt)];
    let mut attempts = 0;
    let mut order = None;
    let mut reason = String::new();
    while attempts < config.max_rerank_attempts {
        attempts += 1;
        match llm.gateway.complete(llm.model, &messages) {
            Ok(c) => {
                let parsed = parse_rerank(&c.text, pool.len());
                if parsed.len() >= want {
                    order = Some(parsed);
                    break;
                }
                reason = format!("unparseable reranker reply: {:?}", truncate(&c.text, 80));
                messages.push(Message::assistant(c.text));
                messages.push(Message::user(reminder.clone()));
            }
            Err(e) => {
                reason = e.to_string();
                break;
            }
        }
    }

    let mut degradations = Vec::new();
    let chosen: Vec<Hit> = match order {
        Some(order) => order
            .into_iter()
            .take(want)
            .map(|i| pool[i].clone())
            .collect(),
        None => {
            log::warn!(
                "reranking fell back to similarity order after {attempts} attempt(s): {reason}"
            );
            degradations.push(Degradation::RerankFallback { attempts, reason });
            pool.into_iter().take(want).collect()
        }
    };
    Ok(StrategyRun {
        bundle: build_bundle(question, query, chosen, Vec::new(), config, ctx)?,
        degradations,
        rerank_attempts: attempts,
    })
}

fn truncate(s: &str, max: usize) -> String {
    s.chars().take(max).collect()
}

/// Wrap externally retrieved context (e.g. graph search output). Each block
/// is fuzzy-matched to a corpus item; matched items act as the retrieved
/// knowledge and carry their aligned applications. The blocks themselves are
/// always kept verbatim.
pub fn adapt_graph_output(
    question: &Question,
    external_blocks: &[String],
    config: &StrategyConfig,
    ctx: &StrategyContext,
) -> Result<StrategyRun> {
    config.validate()?;
    if external_blocks.is_empty() {
        return Err(Error::Precondition(
            "graph adapter needs at least one context block".into(),
        ));
    }
    let mut seen = HashSet::new();
    let mut hits = Vec::new();
    for block in external_blocks {
        if let Some(m) = fuzzy_match(ctx.retriever, block, config.match_threshold)? {
            if seen.insert(m.knowledge_id.clone()) {
                hits.push(Hit {
                    knowledge_id: m.knowledge_id,
                    chunk_id: m.chunk_id,
                    score: m.score,
                    text: m.text,
                });
            }
        }
    }
    let query = external_blocks.join("\n");
    Ok(finished(build_bundle(
        question,
        query,
        hits,
        external_blocks.to_vec(),
        config,
        ctx,
    )?))
}

/// Dispatch on `config.base`. `external` is only read by the graph adapter.
pub fn execute(
    question: &Question,
    external: Option<&[String]>,
    config: &StrategyConfig,
    ctx: &StrategyContext,
) -> Result<StrategyRun> {
    match config.base {
        BaseStrategy::Rag => run_rag(question, config, ctx),
        BaseStrategy::Afrag => run_afrag(question, config, ctx),
        BaseStrategy::Rerank => run_rerank(question, config, ctx),
        BaseStrategy::GraphAdapter => {
            adapt_graph_output(question, external.unwrap_or(&[]), config, ctx)
        }
    }
}

impl fmt::Display for StrategyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}
