//! Many-to-many links between knowledge items and application items.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ApplicationCorpus, ApplicationItem, KnowledgeCorpus};
use crate::error::{Error, Result};
use crate::jsonl;

pub const DEFAULT_APP_CAP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMethod {
    Generated,
    Matched,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkMeta {
    pub method: LinkMethod,
    pub confidence: Option<f64>,
}

impl LinkMeta {
    /// Missing confidence sorts as 1.0.
    pub fn effective_confidence(&self) -> f64 {
        self.confidence.unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub knowledge_id: String,
    pub application_id: String,
    pub method: LinkMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// Link table plus the two corpora it refers to.
///
/// Both corpora live inside the store so referential integrity can be
/// checked on every insertion.
#[derive(Debug, Clone, Default)]
pub struct AlignmentStore {
    knowledge: KnowledgeCorpus,
    applications: ApplicationCorpus,
    links: BTreeMap<(String, String), LinkMeta>,
    by_application: BTreeMap<String, BTreeSet<String>>,
}

impl AlignmentStore {
    pub fn new(knowledge: KnowledgeCorpus, applications: ApplicationCorpus) -> Self {
        AlignmentStore {
            knowledge,
            applications,
            links: BTreeMap::new(),
            by_application: BTreeMap::new(),
        }
    }

    pub fn knowledge(&self) -> &KnowledgeCorpus {
        &self.knowledge
    }

    pub fn applications(&self) -> &ApplicationCorpus {
        &self.applications
    }

    pub fn add_application(&mut self, app: ApplicationItem) -> Result<()> {
        self.applications.insert(app)
    }

    /// Record a link. Re-linking an existing pair keeps it once and
    /// overwrites its metadata.
    pub fn link(
        &mut self,
        knowledge_id: &str,
        application_id: &str,
        method: LinkMethod,
        confidence: Option<f64>,
    ) -> Result<()> {
        if !self.knowledge.contains(knowledge_id) {
            return Err(Error::UnknownKnowledge(knowledge_id.to_string()));
        }
        if !self.applications.contains(application_id) {
            return Err(Error::UnknownApplication(application_id.to_string()));
        }
        if let Some(c) = confidence {
            if !(0.0..=1.0).contains(&c) || c.is_nan() {
                return Err(Error::Invalid(format!(
                    "confidence {c} for ({knowledge_id}, {application_id}) is outside [0, 1]"
                )));
            }
        }
        self.links.insert(
            (knowledge_id.to_string(), application_id.to_string()),
            LinkMeta { method, confidence },
        );
        self.by_application
            .entry(application_id.to_string())
            .or_default()
            .insert(knowledge_id.to_string());
        Ok(())
    }

    pub fn contains_link(&self, knowledge_id: &str, application_id: &str) -> bool {
        self.links
            .contains_key(&(knowledge_id.to_string(), application_id.to_string()))
    }

    pub fn link_meta(&self, knowledge_id: &str, application_id: &str) -> Option<&LinkMeta> {
        self.links
            .get(&(knowledge_id.to_string(), application_id.to_string()))
    }

    pub fn link_count(&self) -> usize {
        self.links.len()
    }

    fn links_of<'a>(
        &'a self,
        knowledge_id: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a LinkMeta)> + 'a {
        self.links
            .range((knowledge_id.to_string(), String::new())..)
            .take_while(move |((k, _), _)| k == knowledge_id)
            .map(|((_, a), meta)| (a.as_str(), meta))
    }

    pub fn knowledge_degree(&self, knowledge_id: &str) -> usize {
        self.links_of(knowledge_id).count()
    }

    pub fn application_degree(&self, application_id: &str) -> usize {
        self.by_application
            .get(application_id)
            .map_or(0, BTreeSet::len)
    }

    /// Knowledge ids linked to an application, ascending.
    pub fn knowledge_for(&self, application_id: &str) -> Vec<&str> {
        self.by_application
            .get(application_id)
            .map(|s| s.iter().map(String::as_str).collect())
            .unwrap_or_default()
    }

    /// Up to `cap` applications for a knowledge item, ordered by confidence
    /// descending and then application id ascending.
    pub fn applications_for(
        &self,
        knowledge_id: &str,
        cap: usize,
    ) -> Result<Vec<&ApplicationItem>> {
        if !self.knowledge.contains(knowledge_id) {
            return Err(Error::UnknownKnowledge(knowledge_id.to_string()));
        }
        let mut linked: Vec<(&str, f64)> = self
            .links_of(knowledge_id)
            .map(|(a, meta)| (a, meta.effective_confidence()))
            .collect();
        linked.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(y.0)));
        Ok(linked
            .into_iter()
            .take(cap)
            .filter_map(|(a, _)| self.applications.get(a))
            .collect())
    }

    pub fn records(&self) -> impl Iterator<Item = LinkRecord> + '_ {
        self.links.iter().map(|((k, a), meta)| LinkRecord {
            knowledge_id: k.clone(),
            application_id: a.clone(),
            method: meta.method,
            confidence: meta.confidence,
        })
    }

    /// Write the link table, one link per line, sorted by (knowledge, application).
    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_file(path, self.records())
    }

    pub fn load(
        path: &Path,
        knowledge: KnowledgeCorpus,
        applications: ApplicationCorpus,
    ) -> Result<Self> {
        let mut store = AlignmentStore::new(knowledge, applications);
        for (line, rec) in jsonl::read_file::<LinkRecord>(path)? {
            store
                .link(
                    &rec.knowledge_id,
                    &rec.application_id,
                    rec.method,
                    rec.confidence,
                )
                .map_err(|e| Error::Malformed {
                    path: path.display().to_string(),
                    line,
                    message: e.to_string(),
                })?;
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coverage {
    pub fraction: f64,
    pub unmatched: Vec<String>,
}

/// Fraction of knowledge items with at least one link. An empty corpus
/// counts as fully covered.
pub fn coverage(knowledge: &KnowledgeCorpus, store: &AlignmentStore) -> Coverage {
    let mut unmatched: Vec<String> = knowledge
        .ids()
        .filter(|id| store.knowledge_degree(id) == 0)
        .map(str::to_string)
        .collect();
    unmatched.sort();
    let fraction = if knowledge.is_empty() {
        1.0
    } else {
        (knowledge.len() - unmatched.len()) as f64 / knowledge.len() as f64
    };
    Coverage {
        fraction,
        unmatched,
    }
}
