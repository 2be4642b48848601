//! Chunk index and exact top-k cosine search.
//!
//! The built-in scheme weights terms by `tf * ln(doc_count / df)` and
//! L2-normalizes every vector. Terms are lowercase alphanumeric runs.
//! External embedding providers plug in through [`Embedder`]; the index then
//! stores their vectors and [`DenseRetriever`] embeds queries with the same
//! provider.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::Chunk;
use crate::error::{Error, Result};
use crate::jsonl;

pub const DEFAULT_TOP_K: usize = 3;
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;
pub const TFIDF_TAG: &str = "tfidf-ln-l2";

const INDEX_FORMAT: &str = "ragplus-index";
const INDEX_VERSION: u32 = 1;

/// Sparse vector as `(dimension, weight)` pairs sorted by dimension.
pub type Vector = Vec<(u32, f64)>;

pub fn terms(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

pub fn dot(a: &[(u32, f64)], b: &[(u32, f64)]) -> f64 {
    let (mut i, mut j, mut acc) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                acc += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    acc
}

fn normalize(v: &mut Vector) {
    let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    if norm > 0.0 {
        for (_, w) in v.iter_mut() {
            *w /= norm;
        }
    }
    v.retain(|(_, w)| *w != 0.0);
}

/// Vectorizer backed by an external model (dense embeddings).
pub trait Embedder: Send + Sync {
    /// Identifies the embedding scheme; stored in the index.
    fn tag(&self) -> String;

    /// One vector per input text, all of the same dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub chunk_id: String,
    pub knowledge_id: String,
    pub text: String,
    pub vector: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    entries: Vec<IndexEntry>,
    /// term -> (dimension, document frequency). Empty for external schemes.
    vocabulary: BTreeMap<String, (u32, usize)>,
    doc_count: usize,
    provider_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub knowledge_id: String,
    pub chunk_id: String,
    pub score: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranked: Vec<Hit>,
    pub query_echo: String,
}

impl RetrievalResult {
    pub fn knowledge_ids(&self) -> Vec<&str> {
        self.ranked
            .iter()
            .map(|h| h.knowledge_id.as_str())
            .collect()
    }
}

fn check_unique(chunks: &[Chunk]) -> Result<()> {
    let mut seen = HashMap::new();
    for c in chunks {
        let id = c.id();
        if let Some(prev) = seen.insert(id.clone(), c.index) {
            return Err(Error::DuplicateId {
                id,
                first: format!("chunk {prev}"),
                second: format!("chunk {}", c.index),
            });
        }
    }
    Ok(())
}

impl Index {
    /// Build a TF-IDF index over `chunks`.
    pub fn build(chunks: &[Chunk]) -> Result<Index> {
        check_unique(chunks)?;
        let doc_terms: Vec<BTreeMap<String, usize>> = chunks
            .iter()
            .map(|c| {
                let mut tf = BTreeMap::new();
                for t in terms(&c.text) {
                    *tf.entry(t).or_insert(0) += 1;
                }
                tf
            })
            .collect();

        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for tf in &doc_terms {
            for term in tf.keys() {
                *df.entry(term.clone()).or_insert(0) += 1;
            }
        }
        let vocabulary: BTreeMap<String, (u32, usize)> = df
            .into_iter()
            .enumerate()
            .map(|(i, (term, n))| (term, (i as u32, n)))
            .collect();

        let mut index = Index {
            entries: Vec::with_capacity(chunks.len()),
            vocabulary,
            doc_count: chunks.len(),
            provider_tag: TFIDF_TAG.to_string(),
        };
        for (chunk, tf) in chunks.iter().zip(&doc_terms) {
            let vector = index.weigh(tf.iter().map(|(t, n)| (t.as_str(), *n)));
            index.entries.push(IndexEntry {
                chunk_id: chunk.id(),
                knowledge_id: chunk.parent_id.clone(),
                text: chunk.text.clone(),
                vector,
            });
        }
        index.sort_entries();
        Ok(index)
    }

    /// Build an index whose vectors come from an external embedder.
    pub fn build_with(chunks: &[Chunk], embedder: &dyn Embedder) -> Result<Index> {
        check_unique(chunks)?;
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        let vectors = if texts.is_empty() {
            Vec::new()
        } else {
            embedder.embed(&texts)?
        };
        if vectors.len() != chunks.len() {
            return Err(Error::Invalid(format!(
                "embedder returned {} vectors for {} texts",
                vectors.len(),
                chunks.len()
            )));
        }
        let mut index = Index {
            entries: Vec::with_capacity(chunks.len()),
            vocabulary: BTreeMap::new(),
            doc_count: chunks.len(),
            provider_tag: embedder.tag(),
        };
        for (chunk, dense) in chunks.iter().zip(vectors) {
            index.entries.push(IndexEntry {
                chunk_id: chunk.id(),
                knowledge_id: chunk.parent_id.clone(),
                text: chunk.text.clone(),
                vector: dense_to_sparse(&dense),
            });
        }
        index.sort_entries();
        Ok(index)
    }

    fn sort_entries(&mut self) {
        self.entries.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
    }

    pub fn is_tfidf(&self) -> bool {
        self.provider_tag == TFIDF_TAG
    }

    pub fn doc_count(&self) -> usize {
        self.doc_count
    }

    pub fn provider_tag(&self) -> &str {
        &self.provider_tag
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn entry(&self, chunk_id: &str) -> Option<&IndexEntry> {
        self.entries
            .binary_search_by(|e| e.chunk_id.as_str().cmp(chunk_id))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn document_frequency(&self, term: &str) -> Option<usize> {
        self.vocabulary.get(term).map(|&(_, df)| df)
    }

    /// `ln(doc_count / df)`, or `None` for terms outside the vocabulary.
    pub fn idf(&self, term: &str) -> Option<f64> {
        self.document_frequency(term)
            .map(|df| (self.doc_count as f64 / df as f64).ln())
    }

    fn weigh<'a>(&self, tf: impl Iterator<Item = (&'a str, usize)>) -> Vector {
        let mut v: Vector = tf
            .filter_map(|(term, n)| {
                let &(dim, df) = self.vocabulary.get(term)?;
                let idf = (self.doc_count as f64 / df as f64).ln();
                Some((dim, n as f64 * idf))
            })
            .collect();
        v.sort_by_key(|&(d, _)| d);
        normalize(&mut v);
        v
    }

    /// TF-IDF query vector. Terms outside the vocabulary are dropped.
    pub fn vectorize(&self, text: &str) -> Vector {
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for t in terms(text) {
            *tf.entry(t).or_insert(0) += 1;
        }
        self.weigh(tf.iter().map(|(t, n)| (t.as_str(), *n)))
    }

    /// Exact top-k by cosine with one hit per knowledge item, ties broken by
    /// ascending chunk id.
    pub fn search_vector(&self, query: &Vector, k: usize) -> Vec<Hit> {
        if k == 0 {
            return Vec::new();
        }
        let mut scored: Vec<(f64, &IndexEntry)> = self
            .entries
            .iter()
            .map(|e| (dot(query, &e.vector).clamp(-1.0, 1.0), e))
            .collect();
        scored.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.chunk_id.cmp(&b.1.chunk_id))
        });
        let mut seen = HashSet::new();
        scored
            .into_iter()
            .filter(|(_, e)| seen.insert(e.knowledge_id.as_str()))
            .take(k)
            .map(|(score, e)| Hit {
                knowledge_id: e.knowledge_id.clone(),
                chunk_id: e.chunk_id.clone(),
                score,
                text: e.text.clone(),
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut lines = Vec::with_capacity(1 + self.vocabulary.len() + self.entries.len());
        lines.push(IndexLine::Header {
            format: INDEX_FORMAT.to_string(),
            version: INDEX_VERSION,
            provider_tag: self.provider_tag.clone(),
            doc_count: self.doc_count,
        });
        for (term, &(dim, df)) in &self.vocabulary {
            lines.push(IndexLine::Term {
                term: term.clone(),
                dim,
                df,
            });
        }
        for e in &self.entries {
            lines.push(IndexLine::Entry(e.clone()));
        }
        jsonl::write_file(path, lines)
    }

    pub fn load(path: &Path) -> Result<Index> {
        let lines = jsonl::read_file::<IndexLine>(path)?;
        let mut iter = lines.into_iter();
        let bad = |line: usize, message: &str| Error::Malformed {
            path: path.display().to_string(),
            line,
            message: message.to_string(),
        };
        let (provider_tag, doc_count) = match iter.next() {
            Some((
                _,
                IndexLine::Header {
                    format,
                    version,
                    provider_tag,
                    doc_count,
                },
            )) if format == INDEX_FORMAT && version == INDEX_VERSION => (provider_tag, doc_count),
            Some((line, _)) => return Err(bad(line, "missing or unsupported index header")),
            None => return Err(bad(1, "empty index file")),
        };
        let mut index = Index {
            entries: Vec::new(),
            vocabulary: BTreeMap::new(),
            doc_count,
            provider_tag,
        };
        for (line, rec) in iter {
            match rec {
                IndexLine::Term { term, dim, df } => {
                    index.vocabulary.insert(term, (dim, df));
                }
                IndexLine::Entry(e) => index.entries.push(e),
                IndexLine::Header { .. } => return Err(bad(line, "repeated header")),
            }
        }
        if index.entries.len() != doc_count {
            return Err(bad(1, "doc_count does not match entry count"));
        }
        index.sort_entries();
        Ok(index)
    }
}

fn dense_to_sparse(dense: &[f64]) -> Vector {
    let mut v: Vector = dense
        .iter()
        .enumerate()
        .map(|(i, &w)| (i as u32, w))
        .collect();
    normalize(&mut v);
    v
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum IndexLine {
    Header {
        format: String,
        version: u32,
        provider_tag: String,
        doc_count: usize,
    },
    Term {
        term: String,
        dim: u32,
        df: usize,
    },
    Entry(IndexEntry),
}

/// Anything that can answer a top-k query over knowledge chunks.
pub trait Retriever: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<RetrievalResult>;
}

impl Retriever for Index {
    fn search(&self, query: &str, k: usize) -> Result<RetrievalResult> {
        if !self.is_tfidf() {
            return Err(Error::Precondition(format!(
                "index uses external scheme `{}`; search it through a DenseRetriever",
                self.provider_tag
            )));
        }
        Ok(RetrievalResult {
            ranked: self.search_vector(&self.vectorize(query), k),
            query_echo: query.to_string(),
        })
    }
}

pub struct DenseRetriever {
    index: Index,
    embedder: Arc<dyn Embedder>,
}

impl DenseRetriever {
    pub fn new(index: Index, embedder: Arc<dyn Embedder>) -> Result<Self> {
        if index.provider_tag() != embedder.tag() {
            return Err(Error::Precondition(format!(
                "index built with `{}` but embedder is `{}`",
                index.provider_tag(),
                embedder.tag()
            )));
        }
        Ok(DenseRetriever { index, embedder })
    }

    pub fn index(&self) -> &Index {
        &self.index
    }
}

impl Retriever for DenseRetriever {
    fn search(&self, query: &str, k: usize) -> Result<RetrievalResult> {
        let mut vectors = self.embedder.embed(&[query.to_string()])?;
        let dense = vectors
            .pop()
            .ok_or_else(|| Error::Invalid("embedder returned no vector".into()))?;
        Ok(RetrievalResult {
            ranked: self.index.search_vector(&dense_to_sparse(&dense), k),
            query_echo: query.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyMatch {
    pub knowledge_id: String,
    pub chunk_id: String,
    pub score: f64,
    pub text: String,
}

/// Best-matching knowledge item for free text, if its cosine reaches
/// `threshold`. A zero score never matches.
pub fn fuzzy_match(
    retriever: &dyn Retriever,
    text: &str,
    threshold: f64,
) -> Result<Option<FuzzyMatch>> {
    let result = retriever.search(text, 1)?;
    Ok(result
        .ranked
        .into_iter()
        .next()
        .filter(|h| h.score > 0.0 && h.score >= threshold)
        .map(|h| FuzzyMatch {
            knowledge_id: h.knowledge_id,
            chunk_id: h.chunk_id,
            score: h.score,
            text: h.text,
        }))
}
