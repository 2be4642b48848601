//! Building the application corpus.
//!
//! Three modes:
//!
//! * `generate`: classify every knowledge item as conceptual or procedural,
//!   then ask the generator model for an application using the template for
//!   that kind.
//! * `match`: assign problems and knowledge items to categories by sampled
//!   majority vote, then within each category ask the model which knowledge
//!   entries each problem needs. Problems that select at least one entry
//!   become matched applications.
//! * `hybrid`: `match`, then `generate` for every knowledge item left without
//!   an application, so coverage ends at 1.0.
//!
//! Work is checkpointed per knowledge item and per problem; a run interrupted
//! by a provider outage resumes from the checkpoint file.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::alignment::{coverage, AlignmentStore, Coverage, LinkMethod};
use crate::corpus::{
    self, ApplicationCorpus, ApplicationItem, KnowledgeCorpus, KnowledgeItem, KnowledgeKind,
};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::llm::{DecodingProfile, Gateway, Message};
use crate::template::{Scope, TemplateSet};

pub const DEFAULT_SAMPLES: usize = 5;
pub const DEFAULT_VOTE_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_RELEVANCE_THRESHOLD: f64 = 0.5;
pub const ABSTAIN: &str = "abstain";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

pub fn load_problems(path: &Path) -> Result<Vec<ProblemInstance>> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (line, p) in jsonl::read_file::<ProblemInstance>(path)? {
        if p.text.trim().is_empty() {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                line,
                message: format!("problem `{}` has empty text", p.id),
            });
        }
        if let Some(first) = seen.insert(p.id.clone(), line) {
            return Err(Error::DuplicateId {
                id: p.id,
                first: format!("{}:{first}", path.display()),
                second: format!("{}:{line}", path.display()),
            });
        }
        out.push(p);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildMode {
    Generate,
    Match,
    Hybrid,
}

impl FromStr for BuildMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generate" => Ok(BuildMode::Generate),
            "match" => Ok(BuildMode::Match),
            "hybrid" => Ok(BuildMode::Hybrid),
            other => Err(Error::Invalid(format!(
                "unknown mode `{other}` (valid: generate, match, hybrid)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionConfig {
    /// Generator / judge model, as registered with the gateway.
    pub model: String,
    /// Category inventory used for alignment.
    pub categories: Vec<String>,
    pub n_samples: usize,
    pub temperature: f64,
    pub relevance_threshold: f64,
    /// Relevance decisions whose share lies within this distance of the
    /// threshold are exported for review.
    pub review_margin: f64,
    /// Prompts per item before a parse failure is reported.
    pub max_attempts: u32,
    /// Re-classify items that already carry a kind.
    pub reclassify: bool,
}

impl ConstructionConfig {
    pub fn new(model: impl Into<String>) -> Self {
        ConstructionConfig {
            model: model.into(),
            categories: Vec::new(),
            n_samples: DEFAULT_SAMPLES,
            temperature: DEFAULT_VOTE_TEMPERATURE,
            relevance_threshold: DEFAULT_RELEVANCE_THRESHOLD,
            review_margin: 0.2,
            max_attempts: 3,
            reclassify: false,
        }
    }

    fn sampling_profile(&self, gateway: &Gateway) -> Result<DecodingProfile> {
        let max = gateway.model(&self.model)?.max_output_tokens;
        DecodingProfile::sampling(self.temperature, 1.0, max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteResult {
    /// Winning category; `None` when every sample abstained.
    pub label: Option<String>,
    /// Counts per category, plus `abstain` when any sample mapped to none.
    pub tally: BTreeMap<String, usize>,
    pub total: usize,
    /// The maximum count was shared by more than one category.
    pub tie: bool,
}

/// Majority label over already-mapped samples. Ties go to the
/// lexicographically smallest label; abstentions never win.
pub fn tally_votes<S: AsRef<str>>(samples: &[Option<S>]) -> VoteResult {
    let mut tally: BTreeMap<String, usize> = BTreeMap::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut abstain = 0;
    for s in samples {
        match s {
            Some(label) => *counts.entry(label.as_ref()).or_insert(0) += 1,
            None => abstain += 1,
        }
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let leaders: Vec<&str> = counts
        .iter()
        .filter(|(_, &c)| c == best && best > 0)
        .map(|(l, _)| *l)
        .collect();
    for (l, c) in &counts {
        tally.insert(l.to_string(), *c);
    }
    if abstain > 0 {
        tally.insert(ABSTAIN.to_string(), abstain);
    }
    VoteResult {
        label: leaders.first().map(|l| l.to_string()),
        tally,
        total: samples.len(),
        tie: leaders.len() > 1,
    }
}

fn normalize_label(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn contains_phrase(haystack: &str, phrase: &str) -> bool {
    let words: Vec<&str> = haystack
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let target: Vec<&str> = phrase
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    !target.is_empty() && words.windows(target.len()).any(|w| w == target.as_slice())
}

/// Map a free-text reply to one of `categories`: an exact label match after
/// normalization, else the single category named as a whole phrase in the
/// reply. Anything else abstains.
pub fn map_to_category<'a>(reply: &str, categories: &'a [String]) -> Option<&'a str> {
    let norm = normalize_label(reply);
    if let Some(c) = categories.iter().find(|c| normalize_label(c) == norm) {
        return Some(c.as_str());
    }
    let mentioned: Vec<&String> = categories
        .iter()
        .filter(|c| contains_phrase(&norm, &normalize_label(c)))
        .collect();
    match mentioned.as_slice() {
        [only] => Some(only.as_str()),
        _ => None,
    }
}

/// `conceptual` or `procedural`, whichever the reply names (but not both).
pub fn parse_kind(reply: &str) -> Option<KnowledgeKind> {
    let lower = reply.to_lowercase();
    let c = contains_phrase(&lower, "conceptual");
    let p = contains_phrase(&lower, "procedural");
    match (c, p) {
        (true, false) => Some(KnowledgeKind::Conceptual),
        (false, true) => Some(KnowledgeKind::Procedural),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceResult {
    /// Vote share of every valid id mentioned at least once, highest first.
    pub shares: Vec<(String, f64)>,
    /// Shares at or above the threshold.
    pub selected: Vec<(String, f64)>,
    /// Mentioned ids that are not among the candidates, in order of mention.
    pub invalid: Vec<String>,
}

fn split_ids(reply: &str) -> impl Iterator<Item = &str> {
    reply
        .split([',', '\n', ';'])
        .map(|t| {
            t.trim()
                .trim_matches(|c: char| "[](){}\"'`.*".contains(c))
                .trim()
        })
        .filter(|t| !t.is_empty())
}

/// Vote shares from `samples` replies over `candidates`.
pub fn tally_relevance(samples: &[String], candidates: &[&str], threshold: f64) -> RelevanceResult {
    let valid: BTreeSet<&str> = candidates.iter().copied().collect();
    let mut mentions: BTreeMap<String, usize> = BTreeMap::new();
    let mut invalid = Vec::new();
    for reply in samples {
        let mut this: BTreeSet<&str> = BTreeSet::new();
        for id in split_ids(reply) {
            if valid.contains(id) {
                this.insert(id);
            } else if !invalid.iter().any(|x| x == id) {
                invalid.push(id.to_string());
            }
        }
        for id in this {
            *mentions.entry(id.to_string()).or_insert(0) += 1;
        }
    }
    let n = samples.len().max(1) as f64;
    let mut shares: Vec<(String, f64)> = mentions
        .into_iter()
        .map(|(id, m)| (id, m as f64 / n))
        .collect();
    shares.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let selected = shares
        .iter()
        .filter(|(_, s)| *s >= threshold)
        .cloned()
        .collect();
    RelevanceResult {
        shares,
        selected,
        invalid,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Unclassified,
    GenerationSkipped,
    InvalidId,
    NoCategory,
    NoCandidates,
    UnmatchedProblem,
    UnmatchedKnowledge,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReportEntry {
    pub kind: ReportKind,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub entries: Vec<ReportEntry>,
}

impl BuildReport {
    fn push(&mut self, kind: ReportKind, id: &str, reason: impl Into<String>) {
        self.entries.push(ReportEntry {
            kind,
            id: id.to_string(),
            reason: reason.into(),
        });
    }

    pub fn count(&self, kind: ReportKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    pub fn ids(&self, kind: ReportKind) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.id.as_str())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewFlag {
    /// Category vote with a shared maximum.
    Tie,
    /// Every category sample abstained.
    NoMajority,
    /// Relevance share close to the threshold.
    LowShare,
}

/// One line of the manual-review file. Category decisions name either a
/// problem or a knowledge item; relevance decisions name both, with
/// `decided_label` set to `keep` or `drop`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReviewRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_id: Option<String>,
    pub decided_label: String,
    pub flag: ReviewFlag,
}

/// Human decisions read back from an edited review file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReviewOverrides {
    problem_category: HashMap<String, String>,
    knowledge_category: HashMap<String, String>,
    relevance: HashMap<(String, String), bool>,
}

impl ReviewOverrides {
    pub fn from_records(records: &[ReviewRecord]) -> Result<Self> {
        let mut o = ReviewOverrides::default();
        for r in records {
            match (&r.problem_id, &r.knowledge_id) {
                (Some(p), Some(k)) => {
                    let keep = match r.decided_label.as_str() {
                        "keep" => true,
                        "drop" => false,
                        other => {
                            return Err(Error::Invalid(format!(
                            "relevance decision for ({p}, {k}) must be keep or drop, got `{other}`"
                        )))
                        }
                    };
                    o.relevance.insert((p.clone(), k.clone()), keep);
                }
                (Some(p), None) => {
                    o.problem_category
                        .insert(p.clone(), r.decided_label.clone());
                }
                (None, Some(k)) => {
                    o.knowledge_category
                        .insert(k.clone(), r.decided_label.clone());
                }
                (None, None) => {
                    return Err(Error::Invalid(
                        "review record names neither a problem nor a knowledge item".into(),
                    ))
                }
            }
        }
        Ok(o)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records: Vec<ReviewRecord> = jsonl::read_file(path)?
            .into_iter()
            .map(|(_, r)| r)
            .collect();
        Self::from_records(&records)
    }

    pub fn is_empty(&self) -> bool {
        self.problem_category.is_empty()
            && self.knowledge_category.is_empty()
            && self.relevance.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Subject {
    Problem,
    Knowledge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "unit", rename_all = "snake_case")]
enum CheckpointEntry {
    Kind {
        id: String,
        kind: Option<KnowledgeKind>,
    },
    Category {
        subject: Subject,
        id: String,
        vote: VoteResult,
    },
    Relevance {
        problem_id: String,
        result: RelevanceResult,
    },
    Application {
        knowledge_id: String,
        text: Option<String>,
    },
}

#[derive(Default)]
struct CheckpointState {
    kinds: HashMap<String, Option<KnowledgeKind>>,
    categories: HashMap<(Subject, String), VoteResult>,
    relevance: HashMap<String, RelevanceResult>,
    applications: HashMap<String, Option<String>>,
}

impl CheckpointState {
    fn absorb(&mut self, e: CheckpointEntry) {
        match e {
            CheckpointEntry::Kind { id, kind } => {
                self.kinds.insert(id, kind);
            }
            CheckpointEntry::Category { subject, id, vote } => {
                self.categories.insert((subject, id), vote);
            }
            CheckpointEntry::Relevance { problem_id, result } => {
                self.relevance.insert(problem_id, result);
            }
            CheckpointEntry::Application { knowledge_id, text } => {
                self.applications.insert(knowledge_id, text);
            }
        }
    }
}

struct Checkpoint {
    path: Option<PathBuf>,
    state: CheckpointState,
}

impl Checkpoint {
    fn open(path: Option<&Path>) -> Result<Self> {
        let mut state = CheckpointState::default();
        if let Some(p) = path {
            for (_, entry) in jsonl::read_log(p)? {
                state.absorb(entry);
            }
        }
        Ok(Checkpoint {
            path: path.map(Path::to_path_buf),
            state,
        })
    }

    fn record(&mut self, entries: Vec<CheckpointEntry>) -> Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        if let Some(p) = &self.path {
            jsonl::append(&mut jsonl::open_append(p)?, &entries)?;
        }
        for e in entries {
            self.state.absorb(e);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BuildOutput {
    pub store: AlignmentStore,
    pub report: BuildReport,
    pub review: Vec<ReviewRecord>,
    /// Coverage once matching finished, before any supplementation.
    pub matched_coverage: Option<Coverage>,
    pub coverage: Coverage,
    /// False when a provider outage stopped the run early.
    pub complete: bool,
}

impl BuildOutput {
    /// Write `knowledge.jsonl`, `applications.jsonl`, `alignment.jsonl`,
    /// `report.jsonl` and `review.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        corpus::save_knowledge(self.store.knowledge(), &dir.join("knowledge.jsonl"))?;
        corpus::save_applications(self.store.applications(), &dir.join("applications.jsonl"))?;
        self.store.save(&dir.join("alignment.jsonl"))?;
        jsonl::write_file(&dir.join("report.jsonl"), &self.report.entries)?;
        jsonl::write_file(&dir.join("review.jsonl"), &self.review)?;
        Ok(())
    }
}

pub fn generated_application_id(knowledge_id: &str) -> String {
    format!("gen-{knowledge_id}")
}

pub fn matched_application_id(problem_id: &str) -> String {
    format!("match-{problem_id}")
}

/// Runs construction steps against one model.
pub struct Constructor<'a> {
    gateway: &'a Gateway,
    templates: &'a TemplateSet,
    config: &'a ConstructionConfig,
}

/// Result of work on one unit: the checkpoint entry to record, or an outage.
type UnitResult = Result<CheckpointEntry>;

impl<'a> Constructor<'a> {
    pub fn new(
        gateway: &'a Gateway,
        templates: &'a TemplateSet,
        config: &'a ConstructionConfig,
    ) -> Self {
        Constructor {
            gateway,
            templates,
            config,
        }
    }

    /// Send `first`; while `parse` rejects the reply, continue the
    /// conversation with `reminder`. Returns the parsed value (if any) and
    /// the number of prompts sent.
    fn prompt_until<T>(
        &self,
        first: String,
        reminder: &str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<(Option<T>, u32)> {
        let mut messages = vec![Message::user(first)];
        let max = self.config.max_attempts.max(1);
        for attempt in 1..=max {
            let reply = self.gateway.complete(&self.config.model, &messages)?.text;
            if let Some(v) = parse(&reply) {
                return Ok((Some(v), attempt));
            }
            messages.push(Message::assistant(reply));
            messages.push(Message::user(reminder.to_string()));
        }
        Ok((None, max))
    }

    /// Conceptual or procedural; `None` when no reply parsed.
    pub fn classify_kind(&self, item: &KnowledgeItem) -> Result<Option<KnowledgeKind>> {
        let prompt = self.templates.render(
            "classify_kind",
            &Scope::new().with("text", item.text.as_str()),
        )?;
        let reminder = self.templates.render("classify_reminder", &Scope::new())?;
        Ok(self.prompt_until(prompt, &reminder, parse_kind)?.0)
    }

    pub fn generation_prompt(&self, item: &KnowledgeItem) -> Result<String> {
        let template = match item.kind {
            KnowledgeKind::Conceptual => "generate_conceptual",
            KnowledgeKind::Procedural => "generate_procedural",
            KnowledgeKind::Unclassified => {
                return Err(Error::Precondition(format!(
                    "knowledge item `{}` must be classified before generation",
                    item.id
                )))
            }
        };
        self.templates
            .render(template, &Scope::new().with("text", item.text.as_str()))
    }

    /// Generated application text, or `None` if every reply was empty.
    pub fn generate_application(&self, item: &KnowledgeItem) -> Result<Option<ApplicationItem>> {
        let prompt = self.generation_prompt(item)?;
        let reminder = self.templates.render("generate_reminder", &Scope::new())?;
        let (text, _) = self.prompt_until(prompt, &reminder, |r| {
            let t = r.trim();
            (!t.is_empty()).then(|| t.to_string())
        })?;
        Ok(text.map(|t| ApplicationItem::generated(generated_application_id(&item.id), t)))
    }

    pub fn vote_category(&self, text: &str, categories: &[String]) -> Result<VoteResult> {
        if categories.is_empty() {
            return Err(Error::Precondition("category inventory is empty".into()));
        }
        if self.config.n_samples < 1 {
            return Err(Error::Precondition("n_samples must be at least 1".into()));
        }
        let scope = Scope::new().with("text", text).with(
            "categories",
            categories
                .iter()
                .map(|c| Scope::new().with("name", c.as_str()))
                .collect::<Vec<_>>(),
        );
        let prompt = self.templates.render("vote_category", &scope)?;
        let profile = self.config.sampling_profile(self.gateway)?;
        let replies = self.gateway.sample_n(
            &self.config.model,
            &[Message::user(prompt)],
            self.config.n_samples,
            &profile,
        )?;
        let mapped: Vec<Option<&str>> = replies
            .iter()
            .map(|c| map_to_category(&c.text, categories))
            .collect();
        Ok(tally_votes(&mapped))
    }

    pub fn select_relevant(
        &self,
        problem: &ProblemInstance,
        category: &str,
        candidates: &[&KnowledgeItem],
    ) -> Result<RelevanceResult> {
        if candidates.is_empty() {
            log::warn!(
                "problem `{}` has no candidate knowledge in `{category}`",
                problem.id
            );
            return Ok(RelevanceResult {
                shares: Vec::new(),
                selected: Vec::new(),
                invalid: Vec::new(),
            });
        }
        let example = candidates
            .iter()
            .take(2)
            .map(|k| k.id.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        let scope = Scope::new()
            .with("problem", problem.text.as_str())
            .with("category", category)
            .with("example", example)
            .with(
                "candidates",
                candidates
                    .iter()
                    .map(|k| {
                        Scope::new()
                            .with("id", k.id.as_str())
                            .with("text", k.text.as_str())
                    })
                    .collect::<Vec<_>>(),
            );
        let prompt = self.templates.render("select_relevant", &scope)?;
        let profile = self.config.sampling_profile(self.gateway)?;
        let replies: Vec<String> = self
            .gateway
            .sample_n(
                &self.config.model,
                &[Message::user(prompt)],
                self.config.n_samples,
                &profile,
            )?
            .into_iter()
            .map(|c| c.text)
            .collect();
        let ids: Vec<&str> = candidates.iter().map(|k| k.id.as_str()).collect();
        Ok(tally_relevance(
            &replies,
            &ids,
            self.config.relevance_threshold,
        ))
    }

    /// Process `units` in parallel batches, recording each finished unit.
    /// Stops at the first provider outage and returns the ids left undone.
    fn run_units<T: Sync>(
        &self,
        units: &[T],
        id_of: impl Fn(&T) -> String,
        work: impl Fn(&T) -> UnitResult + Sync,
        checkpoint: &mut Checkpoint,
    ) -> Result<Option<(Vec<String>, Error)>> {
        let width = self.gateway.parallelism();
        for (b, batch) in units.chunks(width).enumerate() {
            let results = self.gateway.map_parallel(batch, &work);
            let mut done = Vec::new();
            let mut failed = Vec::new();
            let mut failure = None;
            for (unit, r) in batch.iter().zip(results) {
                match r {
                    Ok(entry) => done.push(entry),
                    Err(e) if e.is_provider_outage() => {
                        failed.push(id_of(unit));
                        failure.get_or_insert(e);
                    }
                    Err(e) => return Err(e),
                }
            }
            checkpoint.record(done)?;
            if let Some(err) = failure {
                failed.extend(units.iter().skip((b + 1) * width).map(&id_of));
                return Ok(Some((failed, err)));
            }
        }
        Ok(None)
    }

    /// Build the application corpus. Pass `checkpoint` to make the run
    /// resumable and `overrides` to apply reviewed decisions.
    pub fn build(
        &self,
        knowledge: &KnowledgeCorpus,
        problems: Option<&[ProblemInstance]>,
        mode: BuildMode,
        checkpoint: Option<&Path>,
        overrides: &ReviewOverrides,
    ) -> Result<BuildOutput> {
        let problems = match (mode, problems) {
            (BuildMode::Generate, _) => &[][..],
            (_, Some(p)) => p,
            (_, None) => {
                return Err(Error::Precondition(format!(
                    "{mode:?} mode needs a problem set"
                )))
            }
        };
        let mut cp = Checkpoint::open(checkpoint)?;
        let mut knowledge = knowledge.clone();
        let mut report = BuildReport::default();
        let mut review = Vec::new();
        let mut applications = ApplicationCorpus::new();
        let mut links: Vec<(String, String, LinkMethod, f64)> = Vec::new();
        let mut outage: Option<(Vec<String>, Error)> = None;
        let mut matched_coverage = None;

        if matches!(mode, BuildMode::Match | BuildMode::Hybrid) {
            if self.config.categories.is_empty() {
                return Err(Error::Precondition(
                    "matching needs a category inventory".into(),
                ));
            }
            outage = self.match_problems(
                &mut knowledge,
                problems,
                overrides,
                &mut cp,
                &mut report,
                &mut review,
                &mut applications,
                &mut links,
            )?;
            let linked: BTreeSet<&str> = links.iter().map(|l| l.0.as_str()).collect();
            let mut unmatched: Vec<&str> =
                knowledge.ids().filter(|id| !linked.contains(id)).collect();
            unmatched.sort();
            let fraction = if knowledge.is_empty() {
                1.0
            } else {
                (knowledge.len() - unmatched.len()) as f64 / knowledge.len() as f64
            };
            matched_coverage = Some(Coverage {
                fraction,
                unmatched: unmatched.iter().map(|s| s.to_string()).collect(),
            });
        }

        let targets: Vec<String> = match mode {
            BuildMode::Generate => knowledge.ids().map(str::to_string).collect(),
            BuildMode::Hybrid => matched_coverage
                .as_ref()
                .map(|c| c.unmatched.clone())
                .unwrap_or_default(),
            BuildMode::Match => Vec::new(),
        };
        if outage.is_none() && !targets.is_empty() {
            outage = self.supplement(
                &mut knowledge,
                &targets,
                &mut cp,
                &mut report,
                &mut applications,
                &mut links,
            )?;
        }

        let mut store = AlignmentStore::new(knowledge, applications);
        for (k, a, method, confidence) in &links {
            store.link(k, a, *method, Some(*confidence))?;
        }
        let cov = coverage(store.knowledge(), &store);
        if mode == BuildMode::Match {
            for id in &cov.unmatched {
                report.push(
                    ReportKind::UnmatchedKnowledge,
                    id,
                    "no problem selected this item",
                );
            }
        }
        let complete = outage.is_none();
        if let Some((pending, err)) = outage {
            for id in pending {
                report.push(ReportKind::Incomplete, &id, format!("not processed: {err}"));
            }
        }
        report.entries.sort();
        report.entries.dedup();
        review.sort();
        Ok(BuildOutput {
            store,
            report,
            review,
            matched_coverage,
            coverage: cov,
            complete,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn match_problems(
        &self,
        knowledge: &mut KnowledgeCorpus,
        problems: &[ProblemInstance],
        overrides: &ReviewOverrides,
        cp: &mut Checkpoint,
        report: &mut BuildReport,
        review: &mut Vec<ReviewRecord>,
        applications: &mut ApplicationCorpus,
        links: &mut Vec<(String, String, LinkMethod, f64)>,
    ) -> Result<Option<(Vec<String>, Error)>> {
        let categories = &self.config.categories;

        // Category alignment: knowledge items, then problems.
        let k_units: Vec<KnowledgeItem> = knowledge
            .iter()
            .filter(|k| k.category.is_none() && !overrides.knowledge_category.contains_key(&k.id))
            .filter(|k| {
                !cp.state
                    .categories
                    .contains_key(&(Subject::Knowledge, k.id.clone()))
            })
            .cloned()
            .collect();
        if let Some(o) = self.run_units(
            &k_units,
            |k| k.id.clone(),
            |k| {
                Ok(CheckpointEntry::Category {
                    subject: Subject::Knowledge,
                    id: k.id.clone(),
                    vote: self.vote_category(&k.text, categories)?,
                })
            },
            cp,
        )? {
            return Ok(Some(o));
        }
        let p_units: Vec<&ProblemInstance> = problems
            .iter()
            .filter(|p| p.category.is_none() && !overrides.problem_category.contains_key(&p.id))
            .filter(|p| {
                !cp.state
                    .categories
                    .contains_key(&(Subject::Problem, p.id.clone()))
            })
            .collect();
        if let Some(o) = self.run_units(
            &p_units,
            |p| p.id.clone(),
            |p| {
                Ok(CheckpointEntry::Category {
                    subject: Subject::Problem,
                    id: p.id.clone(),
                    vote: self.vote_category(&p.text, categories)?,
                })
            },
            cp,
        )? {
            return Ok(Some(o));
        }

        let resolve = |subject: Subject,
                       id: &str,
                       preset: &Option<String>,
                       review: &mut Vec<ReviewRecord>|
         -> Option<String> {
            let manual = match subject {
                Subject::Knowledge => overrides.knowledge_category.get(id),
                Subject::Problem => overrides.problem_category.get(id),
            };
            if let Some(m) = manual {
                return Some(m.clone());
            }
            if preset.is_some() {
                return preset.clone();
            }
            let vote = cp.state.categories.get(&(subject, id.to_string()))?;
            let flag = if vote.label.is_none() {
                Some(ReviewFlag::NoMajority)
            } else if vote.tie {
                Some(ReviewFlag::Tie)
            } else {
                None
            };
            if let Some(flag) = flag {
                let (problem_id, knowledge_id) = match subject {
                    Subject::Problem => (Some(id.to_string()), None),
                    Subject::Knowledge => (None, Some(id.to_string())),
                };
                review.push(ReviewRecord {
                    problem_id,
                    knowledge_id,
                    decided_label: vote.label.clone().unwrap_or_else(|| ABSTAIN.to_string()),
                    flag,
                });
            }
            vote.label.clone()
        };

        let ids: Vec<String> = knowledge.ids().map(str::to_string).collect();
        for id in ids {
            let preset = knowledge.get(&id).and_then(|k| k.category.clone());
            let label = resolve(Subject::Knowledge, &id, &preset, review);
            if let Some(item) = knowledge.get_mut(&id) {
                item.category = label;
            }
        }
        let mut problem_labels: Vec<(&ProblemInstance, Option<String>)> = Vec::new();
        for p in problems {
            let label = resolve(Subject::Problem, &p.id, &p.category, review);
            problem_labels.push((p, label));
        }

        // Relevance selection within each category.
        let mut by_category: BTreeMap<&str, Vec<&KnowledgeItem>> = BTreeMap::new();
        for k in knowledge.iter() {
            if let Some(c) = &k.category {
                by_category.entry(c.as_str()).or_default().push(k);
            }
        }
        let mut r_units: Vec<(&ProblemInstance, String)> = Vec::new();
        for (p, label) in &problem_labels {
            match label {
                None => report.push(ReportKind::NoCategory, &p.id, "category vote abstained"),
                Some(c) if !by_category.contains_key(c.as_str()) => report.push(
                    ReportKind::NoCandidates,
                    &p.id,
                    format!("no knowledge in category `{c}`"),
                ),
                Some(c) => {
                    if !cp.state.relevance.contains_key(&p.id) {
                        r_units.push((p, c.clone()));
                    }
                }
            }
        }
        if let Some(o) = self.run_units(
            &r_units,
            |(p, _)| p.id.clone(),
            |(p, c)| {
                Ok(CheckpointEntry::Relevance {
                    problem_id: p.id.clone(),
                    result: self.select_relevant(p, c, &by_category[c.as_str()])?,
                })
            },
            cp,
        )? {
            return Ok(Some(o));
        }

        let threshold = self.config.relevance_threshold;
        for (p, label) in &problem_labels {
            let Some(c) = label else { continue };
            let Some(result) = cp.state.relevance.get(&p.id) else {
                continue;
            };
            for bad in &result.invalid {
                report.push(
                    ReportKind::InvalidId,
                    &p.id,
                    format!("model listed `{bad}`, not a `{c}` candidate"),
                );
            }
            let mut chosen: BTreeMap<String, f64> = result.selected.iter().cloned().collect();
            for (k, share) in &result.shares {
                if (share - threshold).abs() < self.config.review_margin {
                    review.push(ReviewRecord {
                        problem_id: Some(p.id.clone()),
                        knowledge_id: Some(k.clone()),
                        decided_label: if *share >= threshold { "keep" } else { "drop" }
                            .to_string(),
                        flag: ReviewFlag::LowShare,
                    });
                }
            }
            for ((pid, kid), keep) in &overrides.relevance {
                if pid != &p.id || !knowledge.contains(kid) {
                    continue;
                }
                if *keep {
                    let share = result
                        .shares
                        .iter()
                        .find(|(k, _)| k == kid)
                        .map_or(1.0, |(_, s)| *s);
                    chosen.insert(kid.clone(), share);
                } else {
                    chosen.remove(kid);
                }
            }
            if chosen.is_empty() {
                report.push(
                    ReportKind::UnmatchedProblem,
                    &p.id,
                    "no knowledge entry reached the threshold",
                );
                continue;
            }
            let app_id = matched_application_id(&p.id);
            applications.insert(ApplicationItem::matched(
                app_id.clone(),
                p.text.clone(),
                p.id.clone(),
            ))?;
            for (kid, share) in chosen {
                links.push((kid, app_id.clone(), LinkMethod::Matched, share));
            }
        }
        Ok(None)
    }

    fn supplement(
        &self,
        knowledge: &mut KnowledgeCorpus,
        targets: &[String],
        cp: &mut Checkpoint,
        report: &mut BuildReport,
        applications: &mut ApplicationCorpus,
        links: &mut Vec<(String, String, LinkMethod, f64)>,
    ) -> Result<Option<(Vec<String>, Error)>> {
        let needs_kind: Vec<KnowledgeItem> = targets
            .iter()
            .filter_map(|id| knowledge.get(id))
            .filter(|k| self.config.reclassify || !k.kind.is_classified())
            .filter(|k| !cp.state.kinds.contains_key(&k.id))
            .cloned()
            .collect();
        let outage = self.run_units(
            &needs_kind,
            |k| k.id.clone(),
            |k| {
                Ok(CheckpointEntry::Kind {
                    id: k.id.clone(),
                    kind: self.classify_kind(k)?,
                })
            },
            cp,
        )?;
        for id in targets {
            if let (Some(kind), Some(item)) = (cp.state.kinds.get(id), knowledge.get_mut(id)) {
                match kind {
                    Some(k) => item.kind = *k,
                    None if !item.kind.is_classified() => report.push(
                        ReportKind::Unclassified,
                        id,
                        "no parseable kind after all attempts",
                    ),
                    None => {}
                }
            }
        }
        if outage.is_some() {
            return Ok(outage);
        }

        let gen_units: Vec<KnowledgeItem> = targets
            .iter()
            .filter_map(|id| knowledge.get(id))
            .filter(|k| k.kind.is_classified())
            .filter(|k| !cp.state.applications.contains_key(&k.id))
            .cloned()
            .collect();
        let outage = self.run_units(
            &gen_units,
            |k| k.id.clone(),
            |k| {
                Ok(CheckpointEntry::Application {
                    knowledge_id: k.id.clone(),
                    text: self.generate_application(k)?.map(|a| a.text),
                })
            },
            cp,
        )?;
        for id in targets {
            match cp.state.applications.get(id) {
                Some(Some(text)) => {
                    let app =
                        ApplicationItem::generated(generated_application_id(id), text.clone());
                    links.push((id.clone(), app.id.clone(), LinkMethod::Generated, 1.0));
                    applications.insert(app)?;
                }
                Some(None) => report.push(
                    ReportKind::GenerationSkipped,
                    id,
                    "empty reply on every attempt",
                ),
                None => {}
            }
        }
        Ok(outage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{BackendError, ChatRequest, ModelConfig, ProfileClass, RetryPolicy};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};

    fn gateway(backend: impl crate::llm::ChatBackend + 'static) -> Gateway {
        Gateway::new(Arc::new(backend))
            .with_model("gen", ModelConfig::new(ProfileClass::Deterministic))
            .with_retry(RetryPolicy::immediate(1))
    }

    fn last_user(r: &ChatRequest) -> &str {
        &r.messages.last().unwrap().content
    }

    fn first_user(r: &ChatRequest) -> &str {
        &r.messages[0].content
    }

    fn cats(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn kind_parsing() {
        assert_eq!(parse_kind("procedural"), Some(KnowledgeKind::Procedural));
        assert_eq!(parse_kind("Procedural."), Some(KnowledgeKind::Procedural));
        assert_eq!(
            parse_kind("  CONCEPTUAL\n"),
            Some(KnowledgeKind::Conceptual)
        );
        assert_eq!(parse_kind("conceptual or procedural"), None);
        assert_eq!(parse_kind("banana"), None);
    }

    #[test]
    fn classify_retries_then_reports() {
        let calls = Arc::new(AtomicUsize::new(0));
        let seen = calls.clone();
        let g = gateway(move |_: &ChatRequest| {
            seen.fetch_add(1, Ordering::SeqCst);
            Ok("zxqv".to_string())
        });
        let t = TemplateSet::builtin();
        let cfg = ConstructionConfig::new("gen");
        let c = Constructor::new(&g, &t, &cfg);
        assert_eq!(
            c.classify_kind(&KnowledgeItem::new("k", "x")).unwrap(),
            None
        );
        assert_eq!(calls.load(Ordering::SeqCst), 3);

        let g = gateway(|_: &ChatRequest| Ok("Procedural.".to_string()));
        let c = Constructor::new(&g, &t, &cfg);
        assert_eq!(
            c.classify_kind(&KnowledgeItem::new("k", "x")).unwrap(),
            Some(KnowledgeKind::Procedural)
        );
    }

    #[test]
    fn generation_routes_by_kind() {
        let prompts = Arc::new(Mutex::new(Vec::new()));
        let log = prompts.clone();
        let g = gateway(move |r: &ChatRequest| {
            log.lock().unwrap().push(first_user(r).to_string());
            Ok("worked example".to_string())
        });
        let t = TemplateSet::builtin();
        let cfg = ConstructionConfig::new("gen");
        let c = Constructor::new(&g, &t, &cfg);
        let item = KnowledgeItem::new("k", "Newton iteration").with_kind(KnowledgeKind::Procedural);
        let app = c.generate_application(&item).unwrap().unwrap();
        assert_eq!(app.text, "worked example");
        assert_eq!(app.id, "gen-k");
        let sent = prompts.lock().unwrap()[0].clone();
        assert!(sent.starts_with("## Application for procedural knowledge"));
        assert!(!sent.contains("conceptual knowledge"));

        let unclassified = KnowledgeItem::new("u", "x");
        assert!(matches!(
            c.generate_application(&unclassified),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn category_mapping() {
        let c = cats(&["math", "geometry", "number theory"]);
        assert_eq!(map_to_category("Math", &c), Some("math"));
        assert_eq!(map_to_category("**geometry**.", &c), Some("geometry"));
        assert_eq!(
            map_to_category("It belongs to number theory", &c),
            Some("number theory")
        );
        assert_eq!(map_to_category("math or geometry", &c), None);
        assert_eq!(map_to_category("junk", &c), None);
    }

    fn scripted(replies: &'static [&'static str]) -> Gateway {
        gateway(move |r: &ChatRequest| Ok(replies[r.sample_index as usize].to_string()))
    }

    #[test]
    fn vote_examples() {
        let t = TemplateSet::builtin();
        let categories = cats(&["geometry", "math"]);
        let mut cfg = ConstructionConfig::new("gen");

        cfg.n_samples = 3;
        let g = scripted(&["math", "math", "geometry"]);
        let v = Constructor::new(&g, &t, &cfg)
            .vote_category("q", &categories)
            .unwrap();
        assert_eq!((v.label.as_deref(), v.tie), (Some("math"), false));

        cfg.n_samples = 2;
        let g = scripted(&["math", "geometry"]);
        let v = Constructor::new(&g, &t, &cfg)
            .vote_category("q", &categories)
            .unwrap();
        assert_eq!((v.label.as_deref(), v.tie), (Some("geometry"), true));

        cfg.n_samples = 3;
        let g = scripted(&["junk", "math", "math"]);
        let v = Constructor::new(&g, &t, &cfg)
            .vote_category("q", &categories)
            .unwrap();
        assert_eq!(v.label.as_deref(), Some("math"));
        assert_eq!(
            v.tally,
            BTreeMap::from([("math".to_string(), 2), (ABSTAIN.to_string(), 1)])
        );
        assert_eq!(v.total, 3);
    }

    #[test]
    fn vote_samples_at_configured_temperature() {
        let temps = Arc::new(Mutex::new(Vec::new()));
        let log = temps.clone();
        let g = gateway(move |r: &ChatRequest| {
            log.lock().unwrap().push((r.temperature, r.sample_index));
            Ok("math".to_string())
        });
        let t = TemplateSet::builtin();
        let cfg = ConstructionConfig::new("gen");
        Constructor::new(&g, &t, &cfg)
            .vote_category("q", &cats(&["math"]))
            .unwrap();
        let mut seen = temps.lock().unwrap().clone();
        seen.sort_by_key(|x| x.1);
        assert_eq!(seen, (0..5).map(|i| (1.0, i)).collect::<Vec<_>>());
    }

    #[test]
    fn relevance_examples() {
        let r = tally_relevance(&["k1".into(), "k1".into(), "k1".into()], &["k1", "k2"], 0.5);
        assert_eq!(r.selected, vec![("k1".to_string(), 1.0)]);

        let r = tally_relevance(
            &["k1".into(), "k1, k2".into(), "k3-invalid".into()],
            &["k1", "k2"],
            0.5,
        );
        assert_eq!(
            r.shares,
            vec![("k1".to_string(), 2.0 / 3.0), ("k2".to_string(), 1.0 / 3.0)]
        );
        assert_eq!(r.selected, vec![("k1".to_string(), 2.0 / 3.0)]);
        assert_eq!(r.invalid, vec!["k3-invalid"]);
    }

    #[test]
    fn relevance_with_no_candidates() {
        let g = gateway(
            |_: &ChatRequest| -> std::result::Result<String, BackendError> {
                panic!("no call expected")
            },
        );
        let t = TemplateSet::builtin();
        let cfg = ConstructionConfig::new("gen");
        let p = ProblemInstance {
            id: "p".into(),
            text: "t".into(),
            category: None,
        };
        let r = Constructor::new(&g, &t, &cfg)
            .select_relevant(&p, "math", &[])
            .unwrap();
        assert!(r.shares.is_empty() && r.selected.is_empty());
    }

    fn corpus(n: usize, kind: KnowledgeKind) -> KnowledgeCorpus {
        KnowledgeCorpus::from_items((0..n).map(|i| {
            KnowledgeItem::new(format!("k{i}"), format!("fact number {i}")).with_kind(kind)
        }))
        .unwrap()
    }

    #[test]
    fn generate_with_one_failing_item() {
        let g = gateway(|r: &ChatRequest| {
            Ok(if first_user(r).contains("fact number 7") {
                String::new()
            } else {
                format!("application for {}", first_user(r).len())
            })
        });
        let t = TemplateSet::builtin();
        let cfg = ConstructionConfig::new("gen");
        let out = Constructor::new(&g, &t, &cfg)
            .build(
                &corpus(10, KnowledgeKind::Conceptual),
                None,
                BuildMode::Generate,
                None,
                &ReviewOverrides::default(),
            )
            .unwrap();
        assert_eq!(out.store.applications().len(), 9);
        assert_eq!(out.report.entries.len(), 1);
        assert_eq!(out.report.ids(ReportKind::GenerationSkipped), vec!["k7"]);
        assert!(out.complete);
        for r in out.store.records() {
            assert_eq!(r.confidence, Some(1.0));
        }
    }

    #[test]
    fn generate_on_empty_corpus() {
        let g = gateway(|_: &ChatRequest| Ok(String::new()));
        let t = TemplateSet::builtin();
        let cfg = ConstructionConfig::new("gen");
        let out = Constructor::new(&g, &t, &cfg)
            .build(
                &KnowledgeCorpus::new(),
                None,
                BuildMode::Generate,
                None,
                &ReviewOverrides::default(),
            )
            .unwrap();
        assert!(out.store.applications().is_empty());
        assert!(out.report.is_empty());
        assert_eq!(out.coverage.fraction, 1.0);
    }

    #[test]
    fn match_requires_problems() {
        let g = gateway(|_: &ChatRequest| Ok(String::new()));
        let t = TemplateSet::builtin();
        let cfg = ConstructionConfig::new("gen");
        let r = Constructor::new(&g, &t, &cfg).build(
            &corpus(1, KnowledgeKind::Conceptual),
            None,
            BuildMode::Match,
            None,
            &ReviewOverrides::default(),
        );
        assert!(matches!(r, Err(Error::Precondition(_))));
    }

    #[test]
    fn match_into_empty_category_links_nothing() {
        let g = gateway(|_: &ChatRequest| Ok("geometry".to_string()));
        let t = TemplateSet::builtin();
        let mut cfg = ConstructionConfig::new("gen");
        cfg.categories = cats(&["algebra", "geometry"]);
        let knowledge = KnowledgeCorpus::from_items(
            (0..3).map(|i| KnowledgeItem::new(format!("k{i}"), "x").with_category("algebra")),
        )
        .unwrap();
        let problems: Vec<ProblemInstance> = (0..2)
            .map(|i| ProblemInstance {
                id: format!("p{i}"),
                text: format!("problem {i}"),
                category: None,
            })
            .collect();
        let out = Constructor::new(&g, &t, &cfg)
            .build(
                &knowledge,
                Some(&problems),
                BuildMode::Match,
                None,
                &ReviewOverrides::default(),
            )
            .unwrap();
        assert_eq!(out.store.link_count(), 0);
        assert_eq!(
            out.report.ids(ReportKind::UnmatchedKnowledge),
            vec!["k0", "k1", "k2"]
        );
        assert_eq!(out.report.ids(ReportKind::NoCandidates), vec!["p0", "p1"]);
    }

    /// Knowledge k0..k9 in category `calc`; problem p_i selects k_i for
    /// i < 9, so matching covers nine items.
    fn hybrid_mock(
    ) -> impl Fn(&ChatRequest) -> std::result::Result<String, BackendError> + Send + Sync {
        |r: &ChatRequest| {
            let prompt = first_user(r);
            if prompt.starts_with("Problem:") {
                let id = prompt
                    .lines()
                    .nth(1)
                    .unwrap()
                    .trim_start_matches("problem ");
                Ok(format!("k{id}"))
            } else if prompt.starts_with("Assign") {
                Ok("calc".to_string())
            } else if prompt.starts_with("Decide") {
                Ok("procedural".to_string())
            } else if prompt.starts_with("## Application") {
                Ok(format!(
                    "generated for: {}",
                    last_user(r).lines().nth(3).unwrap_or("")
                ))
            } else {
                Err(BackendError::Rejected(format!(
                    "unexpected prompt: {prompt}"
                )))
            }
        }
    }

    fn hybrid_inputs() -> (KnowledgeCorpus, Vec<ProblemInstance>, ConstructionConfig) {
        let knowledge = KnowledgeCorpus::from_items((0..10).map(|i| {
            KnowledgeItem::new(format!("k{i}"), format!("rule {i}")).with_category("calc")
        }))
        .unwrap();
        let problems = (0..9)
            .map(|i| ProblemInstance {
                id: format!("p{i}"),
                text: format!("problem {i}"),
                category: None,
            })
            .collect();
        let mut cfg = ConstructionConfig::new("gen");
        cfg.categories = cats(&["calc", "stats"]);
        (knowledge, problems, cfg)
    }

    #[test]
    fn hybrid_supplements_to_full_coverage() {
        let (knowledge, problems, cfg) = hybrid_inputs();
        let g = gateway(hybrid_mock());
        let t = TemplateSet::builtin();
        let out = Constructor::new(&g, &t, &cfg)
            .build(
                &knowledge,
                Some(&problems),
                BuildMode::Hybrid,
                None,
                &ReviewOverrides::default(),
            )
            .unwrap();
        let matched = out.matched_coverage.unwrap();
        assert_eq!(matched.fraction, 0.9);
        assert_eq!(matched.unmatched, vec!["k9"]);
        assert_eq!(out.coverage.fraction, 1.0);
        assert_eq!(out.store.applications().len(), 10);
        assert_eq!(
            out.store.link_meta("k9", "gen-k9").unwrap().confidence,
            Some(1.0)
        );
        assert_eq!(
            out.store.link_meta("k3", "match-p3").unwrap().confidence,
            Some(1.0)
        );
        assert_eq!(
            out.store.knowledge().get("k9").unwrap().kind,
            KnowledgeKind::Procedural
        );
    }

    #[test]
    fn outage_checkpoints_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let cp = dir.path().join("checkpoint.jsonl");
        let (knowledge, problems, cfg) = hybrid_inputs();
        let t = TemplateSet::builtin();

        // Fails every relevance call for problems 5..9.
        let flaky = {
            let inner = hybrid_mock();
            move |r: &ChatRequest| {
                let p = first_user(r);
                if p.starts_with("Problem:") && p.lines().nth(1).unwrap() >= "problem 5" {
                    Err(BackendError::Transient("503".into()))
                } else {
                    inner(r)
                }
            }
        };
        let g = gateway(flaky);
        let partial = Constructor::new(&g, &t, &cfg)
            .build(
                &knowledge,
                Some(&problems),
                BuildMode::Hybrid,
                Some(&cp),
                &ReviewOverrides::default(),
            )
            .unwrap();
        assert!(!partial.complete);
        assert_eq!(
            partial.report.ids(ReportKind::Incomplete),
            vec!["p5", "p6", "p7", "p8"]
        );

        let g = gateway(hybrid_mock());
        let resumed = Constructor::new(&g, &t, &cfg)
            .build(
                &knowledge,
                Some(&problems),
                BuildMode::Hybrid,
                Some(&cp),
                &ReviewOverrides::default(),
            )
            .unwrap();
        let fresh = Constructor::new(&g, &t, &cfg)
            .build(
                &knowledge,
                Some(&problems),
                BuildMode::Hybrid,
                None,
                &ReviewOverrides::default(),
            )
            .unwrap();
        assert!(resumed.complete);
        assert_eq!(
            resumed.store.records().collect::<Vec<_>>(),
            fresh.store.records().collect::<Vec<_>>()
        );
        assert_eq!(resumed.report, fresh.report);
    }

    #[test]
    fn review_cycle_overrides_votes() {
        let t = TemplateSet::builtin();
        let mut cfg = ConstructionConfig::new("gen");
        cfg.categories = cats(&["algebra", "geometry"]);
        cfg.n_samples = 2;
        // Problem votes split evenly: a tie, broken toward "algebra".
        let g = gateway(|r: &ChatRequest| {
            let p = first_user(r);
            if p.starts_with("Assign") {
                Ok(if r.sample_index == 0 {
                    "geometry"
                } else {
                    "algebra"
                }
                .to_string())
            } else {
                Ok("g1".to_string())
            }
        });
        let knowledge = KnowledgeCorpus::from_items([
            KnowledgeItem::new("a1", "x").with_category("algebra"),
            KnowledgeItem::new("g1", "y").with_category("geometry"),
        ])
        .unwrap();
        let problems = vec![ProblemInstance {
            id: "p".into(),
            text: "t".into(),
            category: None,
        }];
        let c = Constructor::new(&g, &t, &cfg);
        let out = c
            .build(
                &knowledge,
                Some(&problems),
                BuildMode::Match,
                None,
                &ReviewOverrides::default(),
            )
            .unwrap();
        assert_eq!(
            out.review,
            vec![ReviewRecord {
                problem_id: Some("p".into()),
                knowledge_id: None,
                decided_label: "algebra".into(),
                flag: ReviewFlag::Tie
            }]
        );
        assert_eq!(out.store.link_count(), 0);

        let mut edited = out.review.clone();
        edited[0].decided_label = "geometry".into();
        let overrides = ReviewOverrides::from_records(&edited).unwrap();
        let out = c
            .build(
                &knowledge,
                Some(&problems),
                BuildMode::Match,
                None,
                &overrides,
            )
            .unwrap();
        assert!(out.store.contains_link("g1", "match-p"));
        assert!(out.review.is_empty());
    }

    #[test]
    fn tally_examples() {
        let v = tally_votes(&[Some("b"), Some("a"), Some("b")]);
        assert_eq!((v.label.as_deref(), v.tie, v.total), (Some("b"), false, 3));
        let v = tally_votes::<&str>(&[None, None]);
        assert_eq!(v.label, None);
        assert_eq!(v.tally[ABSTAIN], 2);
    }
}
