//! The `ragplus` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or precondition
//! failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::AlignmentStore;
use crate::construction::{
    load_problems, BuildMode, ConstructionConfig, Constructor, ReviewOverrides,
};
use crate::corpus::{self, WhitespaceTokenizer, DEFAULT_MAX_TOKENS};
use crate::error::Error;
use crate::evaluation::{self, EvalJob, RECORDS_FILE};
use crate::llm::{
    ChatBackend, EndpointConfig, Gateway, HttpBackend, HttpEmbedder, ModelConfig, ProfileClass,
    RecordingBackend, ReplayBackend,
};
use crate::retrieval::{DenseRetriever, Embedder, Index, Retriever};
use crate::strategies::{
    Augmentation, BaseStrategy, LlmHandle, PlusLayout, StrategyConfig, StrategyContext,
};
use crate::template::TemplateSet;

pub const KNOWLEDGE_FILE: &str = "knowledge.jsonl";
pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const INDEX_FILE: &str = "index.jsonl";
pub const APPLICATIONS_FILE: &str = "applications.jsonl";
pub const ALIGNMENT_FILE: &str = "alignment.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "ragplus",
    version,
    about = "Knowledge/application retrieval-augmented generation"
)]
pub struct Cli {
    /// TOML file with defaults for any flag; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest a knowledge file and chunk it.
    Ingest(IngestArgs),
    /// Build the application corpus and its alignment.
    BuildApps(BuildArgs),
    /// Build a retrieval index over ingested chunks.
    Index(IndexArgs),
    /// Evaluate one strategy on a multiple-choice dataset.
    Eval(EvalArgs),
    /// Merge evaluation records into an accuracy table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub knowledge: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct LlmArgs {
    /// Endpoint configuration (TOML).
    #[arg(long)]
    pub endpoints: Option<PathBuf>,
    /// Serve every request from fixtures in this directory.
    #[arg(long, conflicts_with = "record")]
    pub replay: Option<PathBuf>,
    /// Call the live endpoints and store fixtures in this directory.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Decoding class for a model absent from the endpoint file.
    #[arg(long, value_parser = parse_profile)]
    pub profile: Option<ProfileClass>,
    /// Requests in flight at once.
    #[arg(long)]
    pub parallel: Option<usize>,
    /// Prompt template overrides (`<id>.tmpl` files).
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<BuildMode>,
    /// Directory produced by `ingest`.
    #[arg(long)]
    pub knowledge: Option<PathBuf>,
    #[arg(long)]
    pub problems: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    /// Comma-separated category inventory.
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<String>>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Reviewed decisions to apply (edited `review.jsonl`).
    #[arg(long)]
    pub review: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub llm: LlmArgs,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// Directory produced by `ingest`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Defaults to the corpus directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Embedder from the endpoint file; TF-IDF when absent.
    #[arg(long)]
    pub embedder: Option<String>,
    #[arg(long)]
    pub endpoints: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<BaseStrategy>,
    #[arg(long, value_parser = parse_aug)]
    pub aug: Option<Augmentation>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub runs: Option<u32>,
    /// Directory with `index.jsonl` (from `ingest` + `index`).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Directory with `applications.jsonl` and `alignment.jsonl`.
    #[arg(long)]
    pub apps: Option<PathBuf>,
    /// Graph retrieval output, one `{id, blocks}` record per item.
    #[arg(long)]
    pub graph_context: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub pool: Option<usize>,
    #[arg(long)]
    pub app_cap: Option<usize>,
    #[arg(long, value_parser = parse_layout)]
    pub layout: Option<PlusLayout>,
    /// Re-run items whose earlier record failed at the provider.
    #[arg(long)]
    pub retry_errored: bool,
    #[command(flatten)]
    pub llm: LlmArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation output directories.
    #[arg(long, num_args = 1.., required = true)]
    pub records: Vec<PathBuf>,
    /// Grid file; the delimited table goes next to it with a `.csv`
    /// extension. Both go to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Defaults read from `--config`. Every key mirrors a flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub endpoints: Option<PathBuf>,
    pub replay: Option<PathBuf>,
    pub record: Option<PathBuf>,
    pub profile: Option<String>,
    pub parallel: Option<usize>,
    pub templates: Option<PathBuf>,
    pub model: Option<String>,
    pub mode: Option<String>,
    pub knowledge: Option<PathBuf>,
    pub problems: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub categories: Option<Vec<String>>,
    pub samples: Option<usize>,
    pub temperature: Option<f64>,
    pub threshold: Option<f64>,
    pub dataset: Option<PathBuf>,
    pub strategy: Option<String>,
    pub aug: Option<String>,
    pub runs: Option<u32>,
    pub corpus: Option<PathBuf>,
    pub apps: Option<PathBuf>,
    pub graph_context: Option<PathBuf>,
    pub k: Option<usize>,
    pub pool: Option<usize>,
    pub app_cap: Option<usize>,
    pub layout: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }
}

/// Written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Hash over every input that affects the outputs.
    pub config_hash: String,
    pub inputs: BTreeMap<String, PathBuf>,
    pub strategies: Vec<String>,
    pub models: BTreeMap<String, ModelConfig>,
    pub replay: bool,
    pub timestamp: u64,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Precondition(_) | Error::UnknownModel(_) => 2,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn parse_profile(s: &str) -> Result<ProfileClass, String> {
    match s {
        "deterministic" => Ok(ProfileClass::Deterministic),
        "long-form" | "long_form" => Ok(ProfileClass::LongForm),
        other => Err(format!(
            "unknown profile `{other}` (valid: deterministic, long-form)"
        )),
    }
}

fn bare_message(e: Error) -> String {
    match e {
        Error::Invalid(m) => m,
        other => other.to_string(),
    }
}

fn parse_mode(s: &str) -> Result<BuildMode, String> {
    s.parse().map_err(bare_message)
}

fn parse_strategy(s: &str) -> Result<BaseStrategy, String> {
    s.parse().map_err(bare_message)
}

fn parse_aug(s: &str) -> Result<Augmentation, String> {
    s.parse().map_err(bare_message)
}

fn parse_layout(s: &str) -> Result<PlusLayout, String> {
    match s {
        "interleaved" => Ok(PlusLayout::Interleaved),
        "grouped" => Ok(PlusLayout::Grouped),
        other => Err(format!(
            "unknown layout `{other}` (valid: interleaved, grouped)"
        )),
    }
}

fn from_file<T>(
    value: Option<&String>,
    parse: fn(&str) -> Result<T, String>,
) -> CliResult<Option<T>> {
    value.map(|v| parse(v)).transpose().map_err(CliError::usage)
}

fn require<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::usage(format!("missing --{flag}")))
}

fn existing(path: PathBuf, what: &str) -> CliResult<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::usage(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

fn file_hash(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hash_inputs(parts: &BTreeMap<String, String>) -> String {
    let canonical = serde_json::to_string(parts).expect("string map serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> CliResult {
    let text = serde_json::to_string_pretty(manifest).map_err(Error::from)? + "\n";
    crate::jsonl::write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(())
}

/// Model registry and backend for the LLM-facing commands.
struct LlmSetup {
    gateway: Gateway,
    models: BTreeMap<String, ModelConfig>,
    replay: bool,
    templates: TemplateSet,
}

fn setup_llm(args: &LlmArgs, file: &FileConfig, model: &str) -> CliResult<LlmSetup> {
    let endpoints = args.endpoints.clone().or_else(|| file.endpoints.clone());
    let replay = args.replay.clone().or_else(|| file.replay.clone());
    let record = args.record.clone().or_else(|| file.record.clone());
    if replay.is_some() && record.is_some() {
        return Err(CliError::usage("--replay and --record are exclusive"));
    }
    let profile = match args.profile {
        Some(p) => Some(p),
        None => from_file(file.profile.as_ref(), parse_profile)?,
    };
    let mut models = match &endpoints {
        Some(p) => EndpointConfig::load(&existing(p.clone(), "endpoint file")?)?.models,
        None => BTreeMap::new(),
    };
    if !models.contains_key(model) {
        if replay.is_none() {
            return Err(CliError::usage(format!(
                "model `{model}` has no endpoint; pass --endpoints or --replay"
            )));
        }
        models.insert(
            model.to_string(),
            ModelConfig::new(profile.unwrap_or(ProfileClass::Deterministic)),
        );
    } else if let Some(p) = profile {
        models.get_mut(model).expect("checked above").profile = p;
    }
    let backend: Arc<dyn ChatBackend> = match (&replay, &record) {
        (Some(dir), _) => Arc::new(ReplayBackend::new(existing(
            dir.clone(),
            "replay directory",
        )?)),
        (None, Some(dir)) => Arc::new(RecordingBackend::new(
            HttpBackend::new(models.clone(), Duration::from_secs(300))?,
            dir.clone(),
        )),
        (None, None) => Arc::new(HttpBackend::new(models.clone(), Duration::from_secs(300))?),
    };
    let mut gateway = Gateway::new(backend).with_models(models.clone());
    if let Some(w) = args.parallel.or(file.parallel) {
        gateway = gateway.with_parallelism(w);
    }
    let templates = match args.templates.clone().or_else(|| file.templates.clone()) {
        Some(dir) => {
            TemplateSet::builtin().with_overrides(&existing(dir, "template directory")?)?
        }
        None => TemplateSet::builtin(),
    };
    Ok(LlmSetup {
        gateway,
        models,
        replay: replay.is_some(),
        templates,
    })
}

fn ingest(args: IngestArgs, out: &mut dyn std::io::Write) -> CliResult {
    let path = existing(args.knowledge, "knowledge file")?;
    let knowledge = corpus::load_knowledge(&path)?;
    let max_tokens = args.max_tokens.unwrap_or(DEFAULT_MAX_TOKENS);
    let chunks = corpus::chunk_corpus(&knowledge, max_tokens, &WhitespaceTokenizer);
    let oversized = chunks.iter().filter(|c| c.oversized).count();
    corpus::save_knowledge(&knowledge, &args.out.join(KNOWLEDGE_FILE))?;
    corpus::save_chunks(&chunks, &args.out.join(CHUNKS_FILE))?;
    let mut parts = BTreeMap::new();
    parts.insert("knowledge".to_string(), file_hash(&path)?);
    parts.insert("max_tokens".to_string(), max_tokens.to_string());
    write_manifest(
        &args.out,
        &RunManifest {
            command: "ingest".into(),
            config_hash: hash_inputs(&parts),
            inputs: BTreeMap::from([("knowledge".to_string(), path)]),
            strategies: Vec::new(),
            models: BTreeMap::new(),
            replay: false,
            timestamp: now(),
        },
    )?;
    writeln!(
        out,
        "ingested {} knowledge items into {} chunks ({oversized} oversized)",
        knowledge.len(),
        chunks.len()
    )
    .ok();
    Ok(())
}

fn build_apps(args: BuildArgs, file: &FileConfig, out: &mut dyn std::io::Write) -> CliResult {
    let mode = match args.mode {
        Some(m) => m,
        None => require(from_file(file.mode.as_ref(), parse_mode)?, "mode")?,
    };
    let kdir = existing(
        require(args.knowledge.or(file.knowledge.clone()), "knowledge")?,
        "knowledge directory",
    )?;
    let problems_path = args.problems.or(file.problems.clone());
    if mode != BuildMode::Generate && problems_path.is_none() {
        return Err(CliError::usage(format!(
            "--mode {} needs --problems",
            mode_name(mode)
        )));
    }
    let out_dir = require(args.out.or(file.out.clone()), "out")?;
    let model = require(args.model.or(file.model.clone()), "model")?;
    let kpath = existing(kdir.join(KNOWLEDGE_FILE), "knowledge corpus")?;
    let knowledge = corpus::load_knowledge(&kpath)?;
    let problems = match &problems_path {
        Some(p) => Some(load_problems(&existing(p.clone(), "problem file")?)?),
        None => None,
    };
    let llm = setup_llm(&args.llm, file, &model)?;

    let mut config = ConstructionConfig::new(model.clone());
    if let Some(c) = args.categories.or(file.categories.clone()) {
        config.categories = c
            .into_iter()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
    }
    if let Some(n) = args.samples.or(file.samples) {
        config.n_samples = n;
    }
    if let Some(t) = args.temperature.or(file.temperature) {
        config.temperature = t;
    }
    if let Some(t) = args.threshold.or(file.threshold) {
        config.relevance_threshold = t;
    }
    let overrides = match &args.review {
        Some(p) => ReviewOverrides::load(&existing(p.clone(), "review file")?)?,
        None => ReviewOverrides::default(),
    };
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    if !args.resume && checkpoint.exists() {
        std::fs::remove_file(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
    }

    let constructor = Constructor::new(&llm.gateway, &llm.templates, &config);
    let built = constructor.build(
        &knowledge,
        problems.as_deref(),
        mode,
        Some(&checkpoint),
        &overrides,
    )?;
    built.write(&out_dir)?;
    for w in llm.gateway.take_warnings() {
        log::warn!("{w}");
    }

    let mut parts = BTreeMap::new();
    parts.insert("knowledge".to_string(), file_hash(&kpath)?);
    if let Some(p) = &problems_path {
        parts.insert("problems".to_string(), file_hash(p)?);
    }
    if let Some(p) = &args.review {
        parts.insert("review".to_string(), file_hash(p)?);
    }
    parts.insert("mode".to_string(), mode_name(mode).to_string());
    parts.insert(
        "construction".to_string(),
        serde_json::to_string(&config).map_err(Error::from)?,
    );
    parts.insert(
        "models".to_string(),
        serde_json::to_string(&llm.models).map_err(Error::from)?,
    );
    let mut inputs = BTreeMap::from([("knowledge".to_string(), kpath)]);
    if let Some(p) = problems_path {
        inputs.insert("problems".to_string(), p);
    }
    write_manifest(
        &out_dir,
        &RunManifest {
            command: "build-apps".into(),
            config_hash: hash_inputs(&parts),
            inputs,
            strategies: Vec::new(),
            models: llm.models,
            replay: llm.replay,
            timestamp: now(),
        },
    )?;

    let before = built.matched_coverage.as_ref().map_or(0.0, |c| c.fraction);
    writeln!(
        out,
        "applications: {}  links: {}  report entries: {}  review items: {}",
        built.store.applications().len(),
        built.store.link_count(),
        built.report.entries.len(),
        built.review.len()
    )
    .ok();
    writeln!(
        out,
        "coverage: {before:.2} → {:.2}",
        built.coverage.fraction
    )
    .ok();
    if !built.complete {
        return Err(CliError {
            code: 1,
            message: format!(
                "build incomplete: {} units pending; rerun with --resume",
                built
                    .report
                    .count(crate::construction::ReportKind::Incomplete)
            ),
        });
    }
    Ok(())
}

fn mode_name(mode: BuildMode) -> &'static str {
    match mode {
        BuildMode::Generate => "generate",
        BuildMode::Match => "match",
        BuildMode::Hybrid => "hybrid",
    }
}

fn embedder_for(name: &str, endpoints: Option<&Path>) -> CliResult<HttpEmbedder> {
    let path = endpoints.ok_or_else(|| CliError::usage("an embedder needs --endpoints"))?;
    let cfg = EndpointConfig::load(&existing(path.to_path_buf(), "endpoint file")?)?;
    let e =
        cfg.embedders.get(name).cloned().ok_or_else(|| {
            CliError::usage(format!("embedder `{name}` not in {}", path.display()))
        })?;
    Ok(HttpEmbedder::new(name, e, Duration::from_secs(300))?)
}

fn index(args: IndexArgs, out: &mut dyn std::io::Write) -> CliResult {
    let cpath = existing(args.corpus.join(CHUNKS_FILE), "chunk file")?;
    let chunks = corpus::load_chunks(&cpath)?;
    let index = match &args.embedder {
        Some(name) => Index::build_with(&chunks, &embedder_for(name, args.endpoints.as_deref())?)?,
        None => Index::build(&chunks)?,
    };
    let out_dir = args.out.unwrap_or(args.corpus);
    index.save(&out_dir.join(INDEX_FILE))?;
    writeln!(
        out,
        "indexed {} chunks ({})",
        index.doc_count(),
        index.provider_tag()
    )
    .ok();
    Ok(())
}

fn eval(args: EvalArgs, file: &FileConfig, out: &mut dyn std::io::Write) -> CliResult {
    let base = match args.strategy {
        Some(s) => s,
        None => require(
            from_file(file.strategy.as_ref(), parse_strategy)?,
            "strategy",
        )?,
    };
    let aug = match args.aug {
        Some(a) => a,
        None => from_file(file.aug.as_ref(), parse_aug)?.unwrap_or(Augmentation::Plain),
    };
    let mut config = StrategyConfig::new(base, aug);
    if let Some(k) = args.k.or(file.k) {
        config.k_retrieve = k;
    }
    if let Some(p) = args.pool.or(file.pool) {
        config.k_rerank_pool = p;
    }
    if let Some(c) = args.app_cap.or(file.app_cap) {
        config.app_cap = c;
    }
    match args.layout {
        Some(l) => config.layout = l,
        None => {
            if let Some(l) = from_file(file.layout.as_ref(), parse_layout)? {
                config.layout = l;
            }
        }
    }
    config
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;

    let dataset_path = existing(
        require(args.dataset.or(file.dataset.clone()), "dataset")?,
        "dataset",
    )?;
    let model = require(args.model.or(file.model.clone()), "model")?;
    let runs = args.runs.or(file.runs).unwrap_or(evaluation::DEFAULT_RUNS);
    let out_dir = require(args.out.or(file.out.clone()), "out")?;
    let corpus_dir = existing(
        require(args.corpus.or(file.corpus.clone()), "corpus")?,
        "corpus directory",
    )?;
    let apps_dir = args.apps.or(file.apps.clone());
    let graph_path = args.graph_context.or(file.graph_context.clone());
    if aug != Augmentation::Plain && apps_dir.is_none() {
        return Err(CliError::usage(format!("--aug {} needs --apps", aug.id())));
    }
    if base == BaseStrategy::GraphAdapter && graph_path.is_none() {
        return Err(CliError::usage("--strategy graph needs --graph-context"));
    }

    let dataset = evaluation::load_dataset(&dataset_path)?;
    let index_path = existing(corpus_dir.join(INDEX_FILE), "index")?;
    let index = Index::load(&index_path)?;
    let endpoints = args
        .llm
        .endpoints
        .clone()
        .or_else(|| file.endpoints.clone());
    let retriever: Box<dyn Retriever> = if index.is_tfidf() {
        Box::new(index)
    } else {
        let name = index
            .provider_tag()
            .strip_prefix("embed:")
            .ok_or_else(|| {
                CliError::usage(format!("unknown index provider `{}`", index.provider_tag()))
            })?
            .to_string();
        let embedder: Arc<dyn Embedder> = Arc::new(embedder_for(&name, endpoints.as_deref())?);
        Box::new(DenseRetriever::new(index, embedder)?)
    };
    let knowledge_path = corpus_dir.join(KNOWLEDGE_FILE);
    let store = match &apps_dir {
        Some(dir) => {
            let knowledge =
                corpus::load_knowledge(&existing(knowledge_path.clone(), "knowledge corpus")?)?;
            let apps = corpus::load_applications(&existing(
                dir.join(APPLICATIONS_FILE),
                "application corpus",
            )?)?;
            Some(AlignmentStore::load(
                &existing(dir.join(ALIGNMENT_FILE), "alignment")?,
                knowledge,
                apps,
            )?)
        }
        None => None,
    };
    let graph = match &graph_path {
        Some(p) => Some(evaluation::load_graph_context(&existing(
            p.clone(),
            "graph context",
        )?)?),
        None => None,
    };
    let llm = setup_llm(&args.llm, file, &model)?;
    let ctx = StrategyContext {
        retriever: retriever.as_ref(),
        store: store.as_ref(),
        templates: &llm.templates,
        llm: Some(LlmHandle {
            gateway: &llm.gateway,
            model: &model,
        }),
    };
    let records_path = out_dir.join(RECORDS_FILE);
    let job = EvalJob {
        dataset: &dataset,
        config: &config,
        runs,
        records: Some(&records_path),
        retry_errored: args.retry_errored,
        graph_context: graph.as_ref(),
    };
    let result = evaluation::evaluate(&job, &ctx)?;
    for w in llm.gateway.take_warnings() {
        log::warn!("{w}");
    }

    let mut parts = BTreeMap::new();
    parts.insert("dataset".to_string(), file_hash(&dataset_path)?);
    parts.insert("index".to_string(), file_hash(&index_path)?);
    parts.insert("strategy".to_string(), config.fingerprint());
    parts.insert("runs".to_string(), runs.to_string());
    parts.insert("model".to_string(), model.clone());
    parts.insert(
        "models".to_string(),
        serde_json::to_string(&llm.models).map_err(Error::from)?,
    );
    let mut inputs = BTreeMap::from([
        ("dataset".to_string(), dataset_path),
        ("index".to_string(), index_path),
    ]);
    if let Some(dir) = &apps_dir {
        parts.insert("knowledge".to_string(), file_hash(&knowledge_path)?);
        parts.insert(
            "applications".to_string(),
            file_hash(&dir.join(APPLICATIONS_FILE))?,
        );
        parts.insert(
            "alignment".to_string(),
            file_hash(&dir.join(ALIGNMENT_FILE))?,
        );
        inputs.insert("store".to_string(), dir.clone());
    }
    if let Some(p) = graph_path {
        parts.insert("graph_context".to_string(), file_hash(&p)?);
        inputs.insert("graph_context".to_string(), p);
    }
    if let Some(dir) = args
        .llm
        .templates
        .clone()
        .or_else(|| file.templates.clone())
    {
        let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        names.sort();
        for p in names {
            parts.insert(format!("template:{}", p.display()), file_hash(&p)?);
        }
    }
    write_manifest(
        &out_dir,
        &RunManifest {
            command: "eval".into(),
            config_hash: hash_inputs(&parts),
            inputs,
            strategies: vec![config.fingerprint()],
            models: llm.models,
            replay: llm.replay,
            timestamp: now(),
        },
    )?;

    let s = &result.summary;
    let mut line = format!(
        "{}  {}  {}  runs: {}",
        s.strategy_name,
        s.model,
        evaluation::format_accuracy(s.mean, s.std),
        s.per_run.len()
    );
    for (k, v) in [
        ("unparsed", s.unparsed),
        ("degraded", s.degraded),
        ("errored", s.errored),
    ] {
        if v > 0 {
            write!(line, "  {k}: {v}").unwrap();
        }
    }
    writeln!(out, "{line}").ok();
    if let Some(failed) = result.records.iter().find(|r| r.errored) {
        return Err(CliError {
            code: 1,
            message: format!(
                "{} of {} records failed at the provider (first: item `{}`: {}); rerun with --retry-errored",
                s.errored,
                result.records.len(),
                failed.item_id,
                failed.error.as_deref().unwrap_or("unknown error")
            ),
        });
    }
    Ok(())
}

fn report(args: ReportArgs, out: &mut dyn std::io::Write) -> CliResult {
    let mut records = Vec::new();
    for dir in &args.records {
        let found = evaluation::load_records(dir).map_err(|e| CliError {
            code: 1,
            message: e.to_string(),
        })?;
        if found.is_empty() {
            return Err(CliError {
                code: 1,
                message: format!("{}: no records", dir.display()),
            });
        }
        records.extend(found);
    }
    let table = evaluation::report(&evaluation::summarize(&records)?)?;
    match args.out {
        Some(path) => {
            crate::jsonl::write_atomic(&path, table.grid.as_bytes())?;
            crate::jsonl::write_atomic(&path.with_extension("csv"), table.csv.as_bytes())?;
        }
        None => {
            write!(out, "{}\n{}", table.grid, table.csv).ok();
        }
    }
    Ok(())
}

/// Run with the given arguments, writing normal output to `out`. Returns
/// the process exit code.
pub fn run_with<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                write!(out, "{e}").ok();
            } else {
                write!(err, "{e}").ok();
            }
            return code;
        }
    };
    let result = (|| {
        let file = match &cli.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        match cli.command {
            Command::Ingest(a) => ingest(a, out),
            Command::BuildApps(a) => build_apps(a, &file, out),
            Command::Index(a) => index(a, out),
            Command::Eval(a) => eval(a, &file, out),
            Command::Report(a) => report(a, out),
        }
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            writeln!(err, "error: {}", e.message).ok();
            if e.code == 2 {
                writeln!(err, "run `ragplus --help` for usage").ok();
            }
            e.code
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    run_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}
