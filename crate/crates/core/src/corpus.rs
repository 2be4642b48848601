//! Knowledge and application corpora.
//!
//! Both corpora are stored as line-delimited JSON, one item per line. A
//! knowledge record looks like
//!
//! ```text
//! {"id":"k1","text":"Newton's method ...","kind":"procedural","category":"roots"}
//! ```
//!
//! and an application record like
//!
//! ```text
//! {"id":"a1","text":"Worked example ...","origin":"matched","source_problem_id":"p7"}
//! ```
//!
//! Corpora are immutable once loaded; chunking produces [`Chunk`]s that are
//! what the retrieval index actually stores.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub const DEFAULT_MAX_TOKENS: usize = 800;

/// Fraction of the chunk window, counted back from its end, in which a
/// sentence-final token is preferred as the cut point.
const SENTENCE_WINDOW: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeKind {
    Conceptual,
    Procedural,
    Unclassified,
}

impl KnowledgeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KnowledgeKind::Conceptual => "conceptual",
            KnowledgeKind::Procedural => "procedural",
            KnowledgeKind::Unclassified => "unclassified",
        }
    }

    pub fn is_classified(self) -> bool {
        self != KnowledgeKind::Unclassified
    }
}

impl fmt::Display for KnowledgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KnowledgeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conceptual" => Ok(KnowledgeKind::Conceptual),
            "procedural" => Ok(KnowledgeKind::Procedural),
            "unclassified" => Ok(KnowledgeKind::Unclassified),
            other => Err(Error::Invalid(format!("unknown knowledge kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeItem {
    pub id: String,
    pub text: String,
    pub kind: KnowledgeKind,
    pub category: Option<String>,
    /// Provenance, `file:line` for ingested items.
    pub source: String,
}

impl KnowledgeItem {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let id = id.into();
        KnowledgeItem {
            source: format!("inline:{id}"),
            id,
            text: text.into(),
            kind: KnowledgeKind::Unclassified,
            category: None,
        }
    }

    pub fn with_kind(mut self, kind: KnowledgeKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = Some(category.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Generated,
    Matched,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplicationItem {
    pub id: String,
    pub text: String,
    pub origin: Origin,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_problem_id: Option<String>,
}

impl ApplicationItem {
    pub fn generated(id: impl Into<String>, text: impl Into<String>) -> Self {
        ApplicationItem {
            id: id.into(),
            text: text.into(),
            origin: Origin::Generated,
            source_problem_id: None,
        }
    }

    pub fn matched(
        id: impl Into<String>,
        text: impl Into<String>,
        problem_id: impl Into<String>,
    ) -> Self {
        ApplicationItem {
            id: id.into(),
            text: text.into(),
            origin: Origin::Matched,
            source_problem_id: Some(problem_id.into()),
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.text.trim().is_empty() {
            return Err(format!("application `{}` has empty text", self.id));
        }
        match (self.origin, &self.source_problem_id) {
            (Origin::Matched, None) => Err(format!(
                "application `{}` is matched but has no source_problem_id",
                self.id
            )),
            (Origin::Generated, Some(_)) => Err(format!(
                "application `{}` is generated but carries a source_problem_id",
                self.id
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct KnowledgeRecord {
    id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<String>,
}

/// An id-addressable, insertion-ordered collection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus<T> {
    items: Vec<T>,
    by_id: HashMap<String, usize>,
}

pub type KnowledgeCorpus = Corpus<KnowledgeItem>;
pub type ApplicationCorpus = Corpus<ApplicationItem>;

pub trait HasId {
    fn id(&self) -> &str;
    fn origin_label(&self) -> String {
        self.id().to_string()
    }
}

impl HasId for KnowledgeItem {
    fn id(&self) -> &str {
        &self.id
    }
    fn origin_label(&self) -> String {
        self.source.clone()
    }
}

impl HasId for ApplicationItem {
    fn id(&self) -> &str {
        &self.id
    }
}

impl<T> Default for Corpus<T> {
    fn default() -> Self {
        Corpus {
            items: Vec::new(),
            by_id: HashMap::new(),
        }
    }
}

impl<T: HasId> Corpus<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_items(items: impl IntoIterator<Item = T>) -> Result<Self> {
        let mut corpus = Corpus::new();
        for item in items {
            corpus.insert(item)?;
        }
        Ok(corpus)
    }

    pub fn insert(&mut self, item: T) -> Result<()> {
        if let Some(&pos) = self.by_id.get(item.id()) {
            return Err(Error::DuplicateId {
                id: item.id().to_string(),
                first: self.items[pos].origin_label(),
                second: item.origin_label(),
            });
        }
        self.by_id.insert(item.id().to_string(), self.items.len());
        self.items.push(item);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&T> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut T> {
        self.by_id.get(id).map(|&i| &mut self.items[i])
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.items.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.id())
    }
}

impl<'a, T> IntoIterator for &'a Corpus<T> {
    type Item = &'a T;
    type IntoIter = std::slice::Iter<'a, T>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

/// Read a knowledge corpus from line-delimited records.
///
/// `origin` names the stream in error messages and provenance strings.
pub fn ingest(reader: impl Read, origin: &str) -> Result<KnowledgeCorpus> {
    let mut corpus = KnowledgeCorpus::new();
    for (line, rec) in jsonl::read_records::<KnowledgeRecord>(reader, origin)? {
        let malformed = |message: String| Error::Malformed {
            path: origin.to_string(),
            line,
            message,
        };
        let text = rec.text.trim();
        if text.is_empty() {
            return Err(malformed(format!("item `{}` has empty text", rec.id)));
        }
        if rec.id.is_empty() {
            return Err(malformed("empty id".into()));
        }
        let kind = match rec.kind.as_deref() {
            None => KnowledgeKind::Unclassified,
            Some(k) => k.parse().map_err(|e: Error| malformed(e.to_string()))?,
        };
        corpus.insert(KnowledgeItem {
            id: rec.id,
            text: text.to_string(),
            kind,
            category: rec.category,
            source: rec.source.unwrap_or_else(|| format!("{origin}:{line}")),
        })?;
    }
    Ok(corpus)
}

pub fn load_knowledge(path: &Path) -> Result<KnowledgeCorpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest(file, &path.display().to_string())
}

pub fn save_knowledge(corpus: &KnowledgeCorpus, path: &Path) -> Result<()> {
    jsonl::write_file(path, corpus.iter().map(knowledge_record))
}

fn knowledge_record(item: &KnowledgeItem) -> KnowledgeRecord {
    KnowledgeRecord {
        id: item.id.clone(),
        text: item.text.clone(),
        kind: item
            .kind
            .is_classified()
            .then(|| item.kind.as_str().to_string()),
        category: item.category.clone(),
        source: Some(item.source.clone()),
    }
}

pub fn ingest_applications(reader: impl Read, origin: &str) -> Result<ApplicationCorpus> {
    let mut corpus = ApplicationCorpus::new();
    for (line, rec) in jsonl::read_records::<ApplicationItem>(reader, origin)? {
        rec.validate().map_err(|message| Error::Malformed {
            path: origin.to_string(),
            line,
            message,
        })?;
        corpus.insert(rec)?;
    }
    Ok(corpus)
}

pub fn load_applications(path: &Path) -> Result<ApplicationCorpus> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_applications(file, &path.display().to_string())
}

/// Applications are written sorted by id so that output is independent of
/// the order in which they were produced.
pub fn save_applications(corpus: &ApplicationCorpus, path: &Path) -> Result<()> {
    let sorted: BTreeMap<&str, &ApplicationItem> =
        corpus.iter().map(|a| (a.id.as_str(), a)).collect();
    jsonl::write_file(path, sorted.values())
}

/// A token as a byte range of the source text plus its cost against the
/// chunk budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub start: usize,
    pub end: usize,
    pub cost: usize,
}

pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, text: &str) -> Vec<Token>;

    fn count(&self, text: &str) -> usize {
        self.tokenize(text).iter().map(|t| t.cost).sum()
    }
}

/// Whitespace-delimited words, each costing one token.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut tokens = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    tokens.push(Token {
                        start: s,
                        end: i,
                        cost: 1,
                    });
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            tokens.push(Token {
                start: s,
                end: text.len(),
                cost: 1,
            });
        }
        tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub parent_id: String,
    pub index: usize,
    pub text: String,
    /// Text between this chunk and the next one (or the end of the parent).
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub separator: String,
    pub token_count: usize,
    /// Set when the chunk is a single token that alone exceeds the budget.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub oversized: bool,
}

impl Chunk {
    pub fn id(&self) -> String {
        chunk_id(&self.parent_id, self.index)
    }
}

pub fn chunk_id(parent: &str, index: usize) -> String {
    format!("{parent}#{index}")
}

fn is_sentence_final(token: &str) -> bool {
    let trimmed = token.trim_end_matches(['"', '\'', ')', ']', '}', '»', '”', '’']);
    trimmed.ends_with(['.', '!', '?', '。', '！', '？'])
}

/// Split `item` into chunks of at most `max_tokens` tokens.
///
/// Cuts prefer a sentence-final token inside the last 15% of the window and
/// fall back to a hard cut at the budget.
pub fn chunk(item: &KnowledgeItem, max_tokens: usize, tokenizer: &dyn Tokenizer) -> Vec<Chunk> {
    let max_tokens = max_tokens.max(1);
    let text = item.text.as_str();
    let tokens = tokenizer.tokenize(text);
    if tokens.is_empty() {
        return Vec::new();
    }

    // Token index ranges [start, end) for each chunk.
    let mut bounds = Vec::new();
    let mut start = 0;
    while start < tokens.len() {
        if tokens[start].cost > max_tokens {
            bounds.push((start, start + 1, true));
            start += 1;
            continue;
        }
        let mut budget = 0;
        let mut end = start;
        while end < tokens.len() && budget + tokens[end].cost <= max_tokens {
            budget += tokens[end].cost;
            end += 1;
        }
        if end < tokens.len() {
            let window_floor = max_tokens - (max_tokens as f64 * SENTENCE_WINDOW).floor() as usize;
            let mut used = budget;
            let mut cut = end;
            while cut > start + 1 {
                // `used` is the cost of tokens[start..cut].
                if used < window_floor {
                    break;
                }
                let t = tokens[cut - 1];
                if is_sentence_final(&text[t.start..t.end]) {
                    end = cut;
                    break;
                }
                used -= t.cost;
                cut -= 1;
            }
        }
        bounds.push((start, end, false));
        start = end;
    }

    let n = bounds.len();
    bounds
        .iter()
        .enumerate()
        .map(|(i, &(s, e, oversized))| {
            let byte_start = if i == 0 { 0 } else { tokens[s].start };
            let byte_end = tokens[e - 1].end;
            let next_start = if i + 1 < n {
                tokens[bounds[i + 1].0].start
            } else {
                text.len()
            };
            Chunk {
                parent_id: item.id.clone(),
                index: i,
                text: text[byte_start..byte_end].to_string(),
                separator: text[byte_end..next_start].to_string(),
                token_count: tokens[s..e].iter().map(|t| t.cost).sum(),
                oversized,
            }
        })
        .collect()
}

pub fn chunk_corpus(
    corpus: &KnowledgeCorpus,
    max_tokens: usize,
    tokenizer: &dyn Tokenizer,
) -> Vec<Chunk> {
    corpus
        .iter()
        .flat_map(|item| chunk(item, max_tokens, tokenizer))
        .collect()
}

pub fn save_chunks(chunks: &[Chunk], path: &Path) -> Result<()> {
    jsonl::write_file(path, chunks)
}

pub fn load_chunks(path: &Path) -> Result<Vec<Chunk>> {
    Ok(jsonl::read_file(path)?
        .into_iter()
        .map(|(_, c)| c)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(n: usize) -> String {
        (0..n)
            .map(|i| format!("w{i}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    #[test]
    fn ingest_three_records() {
        let src = r#"{"id":"a","text":"alpha"}
{"id":"b","text":"beta","category":"x"}
{"id":"c","text":"gamma"}
"#;
        let corpus = ingest(src.as_bytes(), "k.jsonl").unwrap();
        assert_eq!(corpus.len(), 3);
        assert!(corpus.iter().all(|k| k.kind == KnowledgeKind::Unclassified));
        assert_eq!(corpus.get("b").unwrap().category.as_deref(), Some("x"));
        assert_eq!(corpus.get("c").unwrap().source, "k.jsonl:3");
    }

    #[test]
    fn ingest_empty_stream() {
        let corpus = ingest("".as_bytes(), "empty").unwrap();
        assert_eq!(corpus.len(), 0);
    }

    #[test]
    fn ingest_duplicate_id_names_both_sources() {
        let src = "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\",\"text\":\"y\"}\n{\"id\":\"a\",\"text\":\"z\"}\n";
        match ingest(src.as_bytes(), "f") {
            Err(Error::DuplicateId { id, first, second }) => {
                assert_eq!(id, "a");
                assert_eq!(first, "f:1");
                assert_eq!(second, "f:3");
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn ingest_malformed_line_reports_line_number() {
        let src = "{\"id\":\"a\",\"text\":\"x\"}\nnot json\n";
        let err = ingest(src.as_bytes(), "f").unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 2, .. }), "{err}");

        let src = "{\"id\":\"a\",\"text\":\"  \"}\n";
        assert!(matches!(
            ingest(src.as_bytes(), "f").unwrap_err(),
            Error::Malformed { line: 1, .. }
        ));

        let src = "{\"id\":\"a\",\"text\":\"x\",\"kind\":\"mystery\"}\n";
        assert!(matches!(
            ingest(src.as_bytes(), "f").unwrap_err(),
            Error::Malformed { line: 1, .. }
        ));
    }

    #[test]
    fn application_origin_invariant() {
        let bad = r#"{"id":"a1","text":"t","origin":"matched"}"#;
        assert!(ingest_applications(bad.as_bytes(), "a").is_err());
        let bad = r#"{"id":"a1","text":"t","origin":"generated","source_problem_id":"p"}"#;
        assert!(ingest_applications(bad.as_bytes(), "a").is_err());
        let ok = r#"{"id":"a1","text":"t","origin":"matched","source_problem_id":"p"}"#;
        assert_eq!(ingest_applications(ok.as_bytes(), "a").unwrap().len(), 1);
    }

    #[test]
    fn short_item_is_single_identical_chunk() {
        let item = KnowledgeItem::new("k", words(10));
        let chunks = chunk(&item, DEFAULT_MAX_TOKENS, &WhitespaceTokenizer);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, item.text);
        assert_eq!(chunks[0].token_count, 10);
    }

    #[test]
    fn blank_item_has_no_chunks() {
        let item = KnowledgeItem::new("k", "   \n ");
        assert!(chunk(&item, 800, &WhitespaceTokenizer).is_empty());
    }

    #[test]
    fn seventeen_hundred_tokens_split_800_800_100() {
        let text = words(1700);
        assert_eq!(text.split_whitespace().count(), 1700);
        let item = KnowledgeItem::new("k", text);
        let sizes: Vec<_> = chunk(&item, 800, &WhitespaceTokenizer)
            .iter()
            .map(|c| c.token_count)
            .collect();
        assert_eq!(sizes, vec![800, 800, 100]);
    }

    #[test]
    fn prefers_sentence_end_in_final_window() {
        // 20-token budget: the last 15% is tokens 18..=20. A period on token 18
        // should pull the cut there; a period on token 10 should not.
        let mut toks: Vec<String> = (1..=30).map(|i| format!("t{i}")).collect();
        toks[17] = "end.".into();
        toks[9] = "early.".into();
        let item = KnowledgeItem::new("k", toks.join(" "));
        let chunks = chunk(&item, 20, &WhitespaceTokenizer);
        assert_eq!(chunks[0].token_count, 18);
        assert!(chunks[0].text.ends_with("end."));
    }

    #[test]
    fn chunks_concatenate_to_parent() {
        let item = KnowledgeItem::new("k", "One two.  Three\nfour five. six seven eight nine");
        let chunks = chunk(&item, 3, &WhitespaceTokenizer);
        let joined: String = chunks
            .iter()
            .map(|c| format!("{}{}", c.text, c.separator))
            .collect();
        assert_eq!(joined, item.text);
    }

    struct CharCost;
    impl Tokenizer for CharCost {
        fn tokenize(&self, text: &str) -> Vec<Token> {
            WhitespaceTokenizer
                .tokenize(text)
                .into_iter()
                .map(|t| Token {
                    cost: t.end - t.start,
                    ..t
                })
                .collect()
        }
    }

    #[test]
    fn oversized_token_is_flagged_alone() {
        let item = KnowledgeItem::new("k", "ab abcdefghij cd");
        let chunks = chunk(&item, 4, &CharCost);
        let flagged: Vec<_> = chunks.iter().filter(|c| c.oversized).collect();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].text, "abcdefghij");
        assert_eq!(chunks.len(), 3);
    }

    #[test]
    fn knowledge_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let src = r#"{"id":"a","text":"alpha","kind":"conceptual"}
{"id":"b","text":"beta","category":"x"}
"#;
        let corpus = ingest(src.as_bytes(), "k").unwrap();
        let path = dir.path().join("k.jsonl");
        save_knowledge(&corpus, &path).unwrap();
        assert_eq!(load_knowledge(&path).unwrap(), corpus);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn chunking_is_lossless_and_bounded(
                words in proptest::collection::vec("[a-z]{1,6}[.!?]?", 0..120),
                seps in proptest::collection::vec(prop_oneof![Just(" "), Just("  "), Just("\n"), Just("\t ")], 120),
                max in 1usize..40,
            ) {
                let mut text = String::new();
                for (i, w) in words.iter().enumerate() {
                    if i > 0 { text.push_str(seps[i]); }
                    text.push_str(w);
                }
                let item = KnowledgeItem::new("k", text.clone());
                let chunks = chunk(&item, max, &WhitespaceTokenizer);
                let joined: String = chunks.iter().map(|c| format!("{}{}", c.text, c.separator)).collect();
                prop_assert_eq!(joined, text);
                for (i, c) in chunks.iter().enumerate() {
                    prop_assert!(c.token_count <= max);
                    prop_assert!(c.token_count >= 1);
                    prop_assert_eq!(c.index, i);
                }
                prop_assert_eq!(chunks.iter().map(|c| c.token_count).sum::<usize>(), words.len());
            }
        }
    }
}
