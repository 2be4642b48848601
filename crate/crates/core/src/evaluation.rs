//! Multiple-choice evaluation: datasets, answer extraction, repeated runs
//! with an append-only record log, and accuracy tables.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::llm::Message;
use crate::strategies::{
    execute, option_label, AnswerOption, Degradation, Question, StrategyConfig, StrategyContext,
};

pub const DEFAULT_RUNS: u32 = 3;
pub const UNPARSED: &str = "unparsed";
pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub id: String,
    pub question: String,
    pub options: Vec<AnswerOption>,
    pub answer: String,
}

/// Accepted spellings of `options` in a dataset file.
#[derive(Deserialize)]
#[serde(untagged)]
enum RawOptions {
    Labeled(Vec<AnswerOption>),
    Plain(Vec<String>),
    Keyed(BTreeMap<String, String>),
}

#[derive(Deserialize)]
struct RawItem {
    id: String,
    question: String,
    options: RawOptions,
    answer: String,
}

impl McqItem {
    pub fn as_question(&self) -> Question {
        Question {
            text: self.question.clone(),
            options: self.options.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::Invalid(format!(
                "item `{}` has fewer than 2 options",
                self.id
            )));
        }
        let mut labels = BTreeSet::new();
        for o in &self.options {
            if !labels.insert(o.label.as_str()) {
                return Err(Error::Invalid(format!(
                    "item `{}` repeats option label `{}`",
                    self.id, o.label
                )));
            }
        }
        if !labels.contains(self.answer.as_str()) {
            return Err(Error::Invalid(format!(
                "item `{}`: gold label `{}` is not among the options",
                self.id, self.answer
            )));
        }
        Ok(())
    }
}

/// Parse a dataset: one `{id, question, options, answer}` record per line.
/// `options` may be a list of `{label, text}`, a list of strings (lettered
/// A, B, ...) or a label-to-text map.
pub fn read_dataset(reader: impl std::io::Read, origin: &str) -> Result<Vec<McqItem>> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut items = Vec::new();
    for (line, raw) in jsonl::read_records::<RawItem>(reader, origin)? {
        let options = match raw.options {
            RawOptions::Labeled(o) => o,
            RawOptions::Plain(texts) => texts
                .into_iter()
                .enumerate()
                .map(|(i, text)| AnswerOption {
                    label: option_label(i),
                    text,
                })
                .collect(),
            RawOptions::Keyed(map) => map
                .into_iter()
                .map(|(label, text)| AnswerOption { label, text })
                .collect(),
        };
        let item = McqItem {
            id: raw.id,
            question: raw.question,
            options,
            answer: raw.answer.trim().to_string(),
        };
        item.validate().map_err(|e| Error::Malformed {
            path: origin.to_string(),
            line,
            message: e.to_string(),
        })?;
        if let Some(first) = seen.insert(item.id.clone(), line) {
            return Err(Error::DuplicateId {
                id: item.id,
                first: format!("{origin}:{first}"),
                second: format!("{origin}:{line}"),
            });
        }
        items.push(item);
    }
    if items.is_empty() {
        log::warn!("{origin}: dataset is empty");
    }
    Ok(items)
}

pub fn load_dataset(path: &Path) -> Result<Vec<McqItem>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, &path.display().to_string())
}

/// Graph retrieval output per item id, one `{id, blocks}` record per line.
pub fn load_graph_context(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        blocks: Vec<String>,
    }
    Ok(jsonl::read_file::<Row>(path)?
        .into_iter()
        .map(|(_, r)| (r.id, r.blocks))
        .collect())
}

fn find_label<'a>(token: &str, options: &'a [AnswerOption]) -> Option<&'a str> {
    options
        .iter()
        .find(|o| o.label.eq_ignore_ascii_case(token))
        .map(|o| o.label.as_str())
}

/// The first `Answer: X` marker naming a valid label.
fn answer_marker<'a>(raw: &str, options: &'a [AnswerOption]) -> Option<&'a str> {
    const MARKER: &str = "answer";
    let bytes = raw.as_bytes();
    let mut from = 0;
    while from + MARKER.len() <= raw.len() {
        let pos = raw[from..]
            .char_indices()
            .map(|(i, _)| from + i)
            .find(|&i| {
                raw.len() >= i + MARKER.len()
                    && raw.is_char_boundary(i + MARKER.len())
                    && raw[i..i + MARKER.len()].eq_ignore_ascii_case(MARKER)
            })?;
        from = pos + MARKER.len();
        let preceded_by_word = pos > 0 && (bytes[pos - 1] as char).is_ascii_alphanumeric();
        if preceded_by_word {
            continue;
        }
        let rest = raw[from..].trim_start_matches(['*', ' ']);
        let Some(rest) = rest.strip_prefix(':') else {
            continue;
        };
        let rest = rest.trim_start_matches(|c: char| c.is_whitespace() || "*([".contains(c));
        let token: String = rest
            .chars()
            .take_while(|c| c.is_ascii_alphabetic())
            .collect();
        if token.is_empty() {
            continue;
        }
        if let Some(l) = find_label(&token, options) {
            return Some(l);
        }
    }
    None
}

/// A single option letter standing alone on `line`: uppercase, or wrapped
/// as `(b)`, `[b]` or `b)`. Only an unambiguous line counts.
fn standalone_letter<'a>(line: &str, options: &'a [AnswerOption]) -> Option<&'a str> {
    let chars: Vec<char> = line.chars().collect();
    let mut found: BTreeSet<&str> = BTreeSet::new();
    let mut i = 0;
    while i < chars.len() {
        if !chars[i].is_alphanumeric() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && chars[i].is_alphanumeric() {
            i += 1;
        }
        if i - start != 1 {
            continue;
        }
        let c = chars[start];
        let before = start.checked_sub(1).map(|j| chars[j]);
        let after = chars.get(i).copied();
        let wrapped =
            matches!(before, Some('(') | Some('[')) || matches!(after, Some(')') | Some(']'));
        if c.is_ascii_uppercase() || (c.is_ascii_lowercase() && wrapped) {
            if let Some(l) = find_label(&c.to_string(), options) {
                found.insert(l);
            }
        }
    }
    match found.len() {
        1 => found.into_iter().next(),
        _ => None,
    }
}

/// The option whose full text appears in `line`. A hit contained in a
/// longer hit ("blue" inside "dark blue") yields to it; two unrelated hits
/// are ambiguous.
fn option_text_in<'a>(line: &str, options: &'a [AnswerOption]) -> Option<&'a str> {
    let hits: Vec<(&str, &str)> = options
        .iter()
        .map(|o| (o.label.as_str(), o.text.trim()))
        .filter(|(_, t)| !t.is_empty() && line.contains(t))
        .collect();
    let maximal: BTreeSet<&str> = hits
        .iter()
        .filter(|(_, t)| !hits.iter().any(|(_, u)| u.len() > t.len() && u.contains(t)))
        .map(|(l, _)| *l)
        .collect();
    match maximal.len() {
        1 => maximal.into_iter().next(),
        _ => None,
    }
}

/// Extract the chosen option label from a model reply. Rules, in order:
/// an `Answer: X` marker anywhere (case-insensitive); a standalone option
/// letter on the final non-empty line; an option's full text on the final
/// line. `None` means unparsed.
pub fn extract_answer(raw: &str, options: &[AnswerOption]) -> Option<String> {
    if let Some(l) = answer_marker(raw, options) {
        return Some(l.to_string());
    }
    let last = raw.lines().rev().map(str::trim).find(|l| !l.is_empty())?;
    standalone_letter(last, options)
        .or_else(|| option_text_in(last, options))
        .map(str::to_string)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub item_id: String,
    /// Strategy fingerprint.
    pub strategy: String,
    /// Display name, e.g. `Rerank RAG+`.
    pub strategy_name: String,
    pub model: String,
    /// 1-based run index.
    pub run: u32,
    pub raw_output: String,
    /// Extracted label, or `unparsed`.
    pub extracted: String,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degradations: Vec<Degradation>,
    /// The gateway failed for this item; counted as incorrect.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub errored: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    pub fn is_unparsed(&self) -> bool {
        !self.errored && self.extracted == UNPARSED
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub strategy: String,
    pub strategy_name: String,
    pub model: String,
    pub items: usize,
    pub mean: f64,
    pub per_run: Vec<f64>,
    /// Population standard deviation of `per_run`.
    pub std: f64,
    pub unparsed: usize,
    pub degraded: usize,
    pub errored: usize,
}

pub fn population_std(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// One summary per (strategy, model) found in `records`. When a
/// (run, item) pair was recorded twice, the later record counts.
pub fn summarize(records: &[EvalRecord]) -> Result<Vec<EvalSummary>> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    type Key = (String, String);
    let mut groups: BTreeMap<Key, BTreeMap<(u32, String), &EvalRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.strategy.clone(), r.model.clone()))
            .or_default()
            .insert((r.run, r.item_id.clone()), r);
    }
    let mut out = Vec::new();
    for ((strategy, model), cells) in groups {
        let items: BTreeSet<&str> = cells.keys().map(|(_, id)| id.as_str()).collect();
        let mut per_run_correct: BTreeMap<u32, usize> = BTreeMap::new();
        let (mut unparsed, mut degraded, mut errored) = (0, 0, 0);
        let mut name = String::new();
        for ((run, _), r) in &cells {
            *per_run_correct.entry(*run).or_insert(0) += usize::from(r.correct);
            unparsed += usize::from(r.is_unparsed());
            degraded += usize::from(!r.degradations.is_empty());
            errored += usize::from(r.errored);
            name.clone_from(&r.strategy_name);
        }
        let per_run: Vec<f64> = per_run_correct
            .values()
            .map(|&c| c as f64 / items.len() as f64)
            .collect();
        let mean = per_run.iter().sum::<f64>() / per_run.len() as f64;
        out.push(EvalSummary {
            strategy,
            strategy_name: name,
            model,
            items: items.len(),
            std: population_std(&per_run),
            mean,
            per_run,
            unparsed,
            degraded,
            errored,
        });
    }
    Ok(out)
}

pub struct EvalJob<'a> {
    pub dataset: &'a [McqItem],
    pub config: &'a StrategyConfig,
    pub runs: u32,
    /// Append-only record log; existing records for this strategy and model
    /// are kept and their (run, item) pairs skipped.
    pub records: Option<&'a Path>,
    /// Re-run pairs whose earlier record is marked errored.
    pub retry_errored: bool,
    /// Graph retrieval output per item id, for the graph adapter.
    pub graph_context: Option<&'a BTreeMap<String, Vec<String>>>,
}

impl<'a> EvalJob<'a> {
    pub fn new(dataset: &'a [McqItem], config: &'a StrategyConfig) -> Self {
        EvalJob {
            dataset,
            config,
            runs: DEFAULT_RUNS,
            records: None,
            retry_errored: false,
            graph_context: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub summary: EvalSummary,
    /// Final record per (run, item), sorted by run then dataset order.
    pub records: Vec<EvalRecord>,
}

fn evaluate_item(
    item: &McqItem,
    run: u32,
    job: &EvalJob,
    ctx: &StrategyContext,
) -> Result<EvalRecord> {
    let llm = ctx
        .llm
        .ok_or_else(|| Error::Precondition("evaluation needs a model".into()))?;
    let external = job
        .graph_context
        .map(|g| g.get(&item.id).map(Vec::as_slice).unwrap_or(&[]));
    let question = item.as_question();
    let mut record = EvalRecord {
        item_id: item.id.clone(),
        strategy: job.config.fingerprint(),
        strategy_name: job.config.name(),
        model: llm.model.to_string(),
        run,
        raw_output: String::new(),
        extracted: UNPARSED.to_string(),
        correct: false,
        degradations: Vec::new(),
        errored: false,
        error: None,
    };
    let outcome = execute(&question, external, job.config, ctx).and_then(|strategy_run| {
        record.degradations = strategy_run.degradations;
        let profile = llm.gateway.profile_for(llm.model)?;
        // Sampled models get a distinct request per run; deterministic
        // ones repeat the same request.
        let sample_index = if profile.temperature() > 0.0 {
            run - 1
        } else {
            0
        };
        llm.gateway.complete_with(
            llm.model,
            &[Message::user(strategy_run.bundle.rendered)],
            &profile,
            sample_index,
        )
    });
    match outcome {
        Ok(c) => {
            if let Some(label) = extract_answer(&c.text, &item.options) {
                record.correct = label == item.answer;
                record.extracted = label;
            }
            record.raw_output = c.text;
        }
        Err(e) if e.is_provider_outage() => {
            record.errored = true;
            record.error = Some(e.to_string());
        }
        Err(e) => return Err(e),
    }
    Ok(record)
}

/// Run `job.runs` passes over the dataset. Items within a run go out in
/// batches of the gateway width; each batch is appended to the record log
/// in dataset order before the next starts.
pub fn evaluate(job: &EvalJob, ctx: &StrategyContext) -> Result<Evaluation> {
    if job.dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if job.runs == 0 {
        return Err(Error::Precondition("runs must be at least 1".into()));
    }
    job.config.validate()?;
    let llm = ctx
        .llm
        .ok_or_else(|| Error::Precondition("evaluation needs a model".into()))?;
    let fingerprint = job.config.fingerprint();
    let wanted: BTreeSet<&str> = job.dataset.iter().map(|i| i.id.as_str()).collect();

    let mut done: HashMap<(u32, String), EvalRecord> = HashMap::new();
    let mut log = match job.records {
        Some(path) => {
            for (_, r) in jsonl::read_log::<EvalRecord>(path)? {
                if r.strategy == fingerprint
                    && r.model == llm.model
                    && (1..=job.runs).contains(&r.run)
                    && wanted.contains(r.item_id.as_str())
                {
                    done.insert((r.run, r.item_id.clone()), r);
                }
            }
            if job.retry_errored {
                done.retain(|_, r| !r.errored);
            }
            Some(jsonl::open_append(path)?)
        }
        None => None,
    };

    let width = llm.gateway.parallelism();
    for run in 1..=job.runs {
        let pending: Vec<&McqItem> = job
            .dataset
            .iter()
            .filter(|i| !done.contains_key(&(run, i.id.clone())))
            .collect();
        for batch in pending.chunks(width) {
            let results = llm
                .gateway
                .map_parallel(batch, |item| evaluate_item(item, run, job, ctx));
            let records = results.into_iter().collect::<Result<Vec<_>>>()?;
            if let Some(f) = log.as_mut() {
                jsonl::append(f, &records)?;
            }
            for r in records {
                done.insert((run, r.item_id.clone()), r);
            }
        }
    }

    let mut records = Vec::with_capacity(done.len());
    for run in 1..=job.runs {
        for item in job.dataset {
            records.push(
                done.remove(&(run, item.id.clone()))
                    .expect("every pair evaluated"),
            );
        }
    }
    let summary = summarize(&records)?.remove(0);
    Ok(Evaluation { summary, records })
}

/// Every record in `dir/records.jsonl`.
pub fn load_records(dir: &Path) -> Result<Vec<EvalRecord>> {
    let path = dir.join(RECORDS_FILE);
    if !path.exists() {
        return Err(Error::Precondition(format!("{} not found", path.display())));
    }
    Ok(jsonl::read_log(&path)?
        .into_iter()
        .map(|(_, r)| r)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub csv: String,
    pub grid: String,
}

/// Accuracy as a percentage with two decimals, followed by the standard
/// deviation in the same unit: `86.50 ±0.00`.
pub fn format_accuracy(mean: f64, std: f64) -> String {
    format!("{:.2} ±{:.2}", mean * 100.0, std * 100.0)
}

fn footnote(s: &EvalSummary) -> Option<String> {
    let parts: Vec<String> = [
        ("unparsed", s.unparsed),
        ("degraded", s.degraded),
        ("errored", s.errored),
    ]
    .iter()
    .filter(|(_, n)| *n > 0)
    .map(|(k, n)| format!("{k}: {n}"))
    .collect();
    (!parts.is_empty()).then(|| parts.join(", "))
}

/// One row per (strategy, model), sorted by strategy fingerprint.
pub fn report(summaries: &[EvalSummary]) -> Result<Report> {
    if summaries.is_empty() {
        return Err(Error::Precondition(
            "report needs at least one summary".into(),
        ));
    }
    let mut rows: Vec<&EvalSummary> = summaries.iter().collect();
    rows.sort_by(|a, b| {
        a.strategy
            .cmp(&b.strategy)
            .then_with(|| a.model.cmp(&b.model))
    });

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Invalid(e.to_string());
    w.write_record([
        "strategy",
        "fingerprint",
        "model",
        "items",
        "runs",
        "accuracy",
        "std",
        "unparsed",
        "degraded",
        "errored",
    ])
    .map_err(csv_err)?;
    for s in &rows {
        w.write_record([
            s.strategy_name.clone(),
            s.strategy.clone(),
            s.model.clone(),
            s.items.to_string(),
            s.per_run.len().to_string(),
            format!("{:.2}", s.mean * 100.0),
            format!("{:.2}", s.std * 100.0),
            s.unparsed.to_string(),
            s.degraded.to_string(),
            s.errored.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let csv = String::from_utf8(w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?)
        .expect("csv output is utf-8");

    let header = ["Strategy", "Model", "Accuracy (%)", "Runs"];
    let mut notes = Vec::new();
    let body: Vec<[String; 4]> = rows
        .iter()
        .map(|s| {
            let mut acc = format_accuracy(s.mean, s.std);
            if let Some(n) = footnote(s) {
                notes.push(n);
                write!(acc, " [{}]", notes.len()).unwrap();
            }
            [
                s.strategy_name.clone(),
                s.model.clone(),
                acc,
                s.per_run.len().to_string(),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..4)
        .map(|c| {
            body.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[&str]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut grid = line(&header);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    grid.push_str(&format!("|-{}-|\n", rule.join("-|-")));
    for r in &body {
        grid.push_str(&line(&r.iter().map(String::as_str).collect::<Vec<_>>()));
    }
    for (i, n) in notes.iter().enumerate() {
        writeln!(grid, "[{}] {n}", i + 1).unwrap();
    }
    Ok(Report { csv, grid })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn abcd() -> Vec<AnswerOption> {
        Question::lettered("q", &["red", "green", "blue", "dark blue"]).options
    }

    #[test]
    fn dataset_validation() {
        let good = r#"{"id":"q1","question":"?","options":["w","x","y","z"],"answer":"B"}"#;
        let items = read_dataset(good.as_bytes(), "d").unwrap();
        assert_eq!(
            items[0].options[1],
            AnswerOption {
                label: "B".into(),
                text: "x".into()
            }
        );

        let bad = format!(
            "{good}\n{}",
            r#"{"id":"q2","question":"?","options":["w","x","y","z"],"answer":"E"}"#
        );
        match read_dataset(bad.as_bytes(), "d") {
            Err(Error::Malformed {
                line: 2, message, ..
            }) => assert!(message.contains("q2")),
            other => panic!("{other:?}"),
        }

        let one = r#"{"id":"q","question":"?","options":["w"],"answer":"A"}"#;
        assert!(read_dataset(one.as_bytes(), "d").is_err());

        let keyed = r#"{"id":"q","question":"?","options":{"A":"w","B":"x"},"answer":"A"}"#;
        assert_eq!(
            read_dataset(keyed.as_bytes(), "d").unwrap()[0]
                .options
                .len(),
            2
        );

        assert!(read_dataset("".as_bytes(), "d").unwrap().is_empty());
    }

    /// Hand-labelled replies; each expectation follows from the rule order.
    #[test]
    fn extraction_fixture() {
        let cases: [(&str, Option<&str>); 20] = [
            ("Let me think.\nAnswer: C", Some("C")),
            ("answer: b", Some("B")),
            ("ANSWER:D because of reasons", Some("D")),
            ("**Answer:** (A)", Some("A")),
            ("The result is (b).", Some("B")),
            ("Answer: Q is not an option\nFinal: C", Some("C")),
            ("Answer: C\nActually B", Some("C")),
            ("I pick B", Some("B")),
            ("It is a tricky one, b) fits", Some("B")),
            ("It is a tricky one", None),
            ("A or B, hard to say", None),
            ("The colour is green", Some("B")),
            ("The colour is dark blue", Some("D")),
            ("green or red", None),
            ("B\n\n", Some("B")),
            ("The answer is clear.\n[d]", Some("D")),
            ("Considering C earlier...\nso the colour is red", Some("A")),
            ("no idea", None),
            ("", None),
            ("My answer: a", Some("A")),
        ];
        let opts = abcd();
        for (raw, want) in cases {
            assert_eq!(extract_answer(raw, &opts).as_deref(), want, "reply {raw:?}");
        }
    }

    fn record(item: &str, run: u32, correct: bool) -> EvalRecord {
        EvalRecord {
            item_id: item.into(),
            strategy: "rag.plain".into(),
            strategy_name: "RAG".into(),
            model: "m".into(),
            run,
            raw_output: String::new(),
            extracted: if correct { "A" } else { UNPARSED }.into(),
            correct,
            degradations: Vec::new(),
            errored: false,
            error: None,
        }
    }

    #[test]
    fn summary_statistics() {
        let recs = vec![
            record("a", 1, true),
            record("b", 1, true),
            record("a", 2, true),
            record("b", 2, false),
        ];
        let s = &summarize(&recs).unwrap()[0];
        assert_eq!(s.per_run, vec![1.0, 0.5]);
        assert_eq!(s.mean, 0.75);
        assert_eq!(s.std, 0.25);
        assert_eq!(s.unparsed, 1);
        assert!(matches!(summarize(&[]), Err(Error::EmptyDataset)));
    }

    fn summary(strategy: &str, mean: f64, unparsed: usize) -> EvalSummary {
        EvalSummary {
            strategy: strategy.into(),
            strategy_name: strategy.to_uppercase(),
            model: "m".into(),
            items: 20,
            mean,
            per_run: vec![mean; 3],
            std: 0.0,
            unparsed,
            degraded: 0,
            errored: 0,
        }
    }

    #[test]
    fn report_format() {
        let r = report(&[summary("rag.plus", 0.865, 0)]).unwrap();
        assert!(r.grid.contains("| 86.50 ±0.00 "));
        assert!(r.csv.lines().nth(1).unwrap().contains(",86.50,0.00,"));

        let r = report(&[summary("z.plain", 0.5, 4), summary("a.plus", 0.25, 0)]).unwrap();
        let rows: Vec<&str> = r.csv.lines().skip(1).collect();
        assert!(rows[0].contains("a.plus") && rows[1].contains("z.plain"));
        assert!(r.grid.contains("[1] unparsed: 4"));
        assert!(report(&[]).is_err());
    }
}
