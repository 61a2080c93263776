//! Top-k document retrieval.
//!
//! Three sources produce a ranked list: an in-memory Okapi BM25 index, a
//! remote retriever speaking a small JSON protocol, and an oracle selector
//! that picks answer-bearing documents. All of them emit hits ranked 1..n by
//! descending score with ties broken by ascending document id.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::RwLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::Semaphore;
use crate::corpus::{Document, QaExample};
use crate::eval::contains_answer;

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("duplicate document id {0:?} in corpus")]
    DuplicateId(String),
    #[error("invalid BM25 parameters: {0}")]
    InvalidParams(String),
    #[error("remote retriever failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed retriever response: {0}")]
    MalformedResponse(String),
    #[error("index snapshot {path}: {message}")]
    Snapshot { path: String, message: String },
}

/// One entry of a ranked result list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub doc_id: String,
    pub rank: usize,
    pub score: f64,
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn analyze(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Sorts `(doc_id, score)` pairs by score desc, doc_id asc, truncates to `k`
/// and assigns ranks 1..n.
pub fn rank_scored(mut scored: Vec<(String, f64)>, k: usize) -> Vec<RetrievalHit> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (doc_id, score))| RetrievalHit {
            doc_id,
            rank: i + 1,
            score,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    fn validate(&self) -> Result<(), RetrievalError> {
        if !(self.k1 > 0.0 && self.k1.is_finite()) {
            return Err(RetrievalError::InvalidParams(format!(
                "k1 must be > 0, got {}",
                self.k1
            )));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(RetrievalError::InvalidParams(format!(
                "b must be in [0, 1], got {}",
                self.b
            )));
        }
        Ok(())
    }

    /// `ln((N - n + 0.5) / (n + 0.5) + 1)`; never negative.
    pub fn idf(&self, doc_count: usize, doc_freq: usize) -> f64 {
        let n = doc_count as f64;
        let df = doc_freq as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    pub fn term_weight(&self, tf: usize, doc_len: usize, avg_doc_len: f64) -> f64 {
        let tf = tf as f64;
        let norm = 1.0 - self.b + self.b * doc_len as f64 / avg_doc_len;
        tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Posting {
    pub doc_id: String,
    pub tf: usize,
}

/// Inverted index over analyzed `title + text`.
///
/// Postings are kept sorted by document id and all maps are ordered, so the
/// structure (and its snapshot bytes) does not depend on input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    pub format_version: u32,
    pub params: Bm25Params,
    pub doc_count: usize,
    pub avg_doc_length: f64,
    pub doc_lengths: BTreeMap<String, usize>,
    pub postings: BTreeMap<String, Vec<Posting>>,
}

#[derive(Deserialize)]
struct SnapshotHeader {
    format_version: u32,
}

impl Bm25Index {
    pub fn build(docs: &[Document], params: Bm25Params) -> Result<Self, RetrievalError> {
        params.validate()?;
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut doc_lengths = BTreeMap::new();
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for doc in docs {
            let terms = analyze(&format!("{} {}", doc.title, doc.text));
            if doc_lengths.insert(doc.id.clone(), terms.len()).is_some() {
                return Err(RetrievalError::DuplicateId(doc.id.clone()));
            }
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push(Posting {
                    doc_id: doc.id.clone(),
                    tf: count,
                });
            }
        }
        for list in postings.values_mut() {
            list.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        }
        let total: usize = doc_lengths.values().sum();
        Ok(Bm25Index {
            format_version: INDEX_FORMAT_VERSION,
            params,
            doc_count: doc_lengths.len(),
            avg_doc_length: total as f64 / doc_lengths.len() as f64,
            doc_lengths,
            postings,
        })
    }

    /// Scores every document sharing at least one (deduplicated) query term.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<RetrievalHit> {
        let terms: BTreeSet<String> = analyze(query).into_iter().collect();
        let mut scores: HashMap<&str, f64> = HashMap::new();
        // Terms are visited in sorted order so each document's score is
        // accumulated in a fixed sequence.
        for term in &terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.params.idf(self.doc_count, list.len());
            for p in list {
                let dl = self.doc_lengths[&p.doc_id];
                *scores.entry(p.doc_id.as_str()).or_insert(0.0) +=
                    idf * self.params.term_weight(p.tf, dl, self.avg_doc_length);
            }
        }
        rank_scored(scores.into_iter().map(|(id, s)| (id.to_string(), s)).collect(), k)
    }

    pub fn to_snapshot_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec(self).expect("index serialization cannot fail");
        bytes.push(b'\n');
        bytes
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let path = path.as_ref();
        fs::write(path, self.to_snapshot_bytes()).map_err(|e| RetrievalError::Snapshot {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        let err = |message: String| RetrievalError::Snapshot {
            path: path.display().to_string(),
            message,
        };
        let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
        let header: SnapshotHeader =
            serde_json::from_slice(&bytes).map_err(|e| err(format!("missing format header: {e}")))?;
        if header.format_version != INDEX_FORMAT_VERSION {
            return Err(err(format!(
                "unsupported format_version {} (expected {INDEX_FORMAT_VERSION})",
                header.format_version
            )));
        }
        let index: Bm25Index = serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))?;
        index.params.validate()?;
        Ok(index)
    }
}

/// Resolves hits against a corpus, tagging each document with its rank and
/// score. Hits whose id is unknown are skipped.
pub fn hydrate(hits: &[RetrievalHit], corpus: &HashMap<String, Document>) -> Vec<Document> {
    hits.iter()
        .filter_map(|h| {
            corpus
                .get(&h.doc_id)
                .map(|d| d.clone().with_provenance(h.rank, h.score))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Remote retriever
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RemoteRequest<'a> {
    query: &'a str,
    k: usize,
}

#[derive(Deserialize)]
struct RemoteEntry {
    doc_id: String,
    score: f64,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    title: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RemoteRetrieverConfig {
    pub endpoint: String,
    pub max_attempts: u32,
    pub timeout: Duration,
    pub backoff: Duration,
    pub max_connections: usize,
}

impl RemoteRetrieverConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteRetrieverConfig {
            endpoint: endpoint.into(),
            max_attempts: 3,
            timeout: Duration::from_secs(30),
            backoff: Duration::from_millis(200),
            max_connections: 8,
        }
    }
}

/// Client for an external retrieval service.
///
/// `POST {"query", "k"}` must return `[{"doc_id", "score", "text"?, "title"?}]`.
/// Documents whose text is inlined are cached for later lookup.
pub struct RemoteRetriever {
    config: RemoteRetrieverConfig,
    agent: ureq::Agent,
    cache: RwLock<HashMap<String, Document>>,
    limiter: Semaphore,
}

impl RemoteRetriever {
    pub fn new(config: RemoteRetrieverConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteRetriever {
            limiter: Semaphore::new(config.max_connections),
            config,
            agent,
            cache: RwLock::new(HashMap::new()),
        }
    }

    fn request_once(&self, query: &str, k: usize) -> Result<Vec<RemoteEntry>, AttemptError> {
        let _permit = self.limiter.acquire();
        let mut resp = self
            .agent
            .post(&self.config.endpoint)
            .send_json(RemoteRequest { query, k })
            .map_err(|e| AttemptError::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(AttemptError::Retryable(format!("HTTP status {status}")));
        }
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AttemptError::Retryable(e.to_string()))?;
        serde_json::from_str(&body).map_err(|e| AttemptError::Fatal(e.to_string()))
    }

    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievalHit>, RetrievalError> {
        let attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.request_once(query, k) {
                Ok(entries) => return self.accept(entries, k),
                Err(AttemptError::Fatal(m)) => return Err(RetrievalError::MalformedResponse(m)),
                Err(AttemptError::Retryable(m)) => {
                    log::warn!("remote retrieval attempt {attempt}/{attempts} failed: {m}");
                    last = m;
                    if attempt < attempts {
                        std::thread::sleep(self.config.backoff * attempt);
                    }
                }
            }
        }
        Err(RetrievalError::Transport {
            attempts,
            message: last,
        })
    }

    fn accept(&self, entries: Vec<RemoteEntry>, k: usize) -> Result<Vec<RetrievalHit>, RetrievalError> {
        let mut scored = Vec::with_capacity(entries.len());
        let mut seen = BTreeSet::new();
        let mut cache = self.cache.write().expect("document cache poisoned");
        for e in entries {
            if e.doc_id.is_empty() {
                return Err(RetrievalError::MalformedResponse("empty doc_id".into()));
            }
            if !e.score.is_finite() {
                return Err(RetrievalError::MalformedResponse(format!(
                    "non-finite score for {}",
                    e.doc_id
                )));
            }
            if let Some(text) = e.text.filter(|t| !t.trim().is_empty()) {
                cache.insert(
                    e.doc_id.clone(),
                    Document {
                        id: e.doc_id.clone(),
                        title: e.title.unwrap_or_default(),
                        text,
                        source_rank: None,
                        source_score: None,
                    },
                );
            }
            scored.push((e.doc_id, e.score));
        }
        // Sort first so a duplicated id keeps its best score.
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.retain(|(id, _)| seen.insert(id.clone()));
        Ok(rank_scored(scored, k))
    }

    pub fn cached_document(&self, doc_id: &str) -> Option<Document> {
        self.cache.read().expect("document cache poisoned").get(doc_id).cloned()
    }

    /// Cached documents for `hits`, tagged with rank and score; ids without
    /// inlined text are skipped.
    pub fn documents_for(&self, hits: &[RetrievalHit]) -> Vec<Document> {
        let cache = self.cache.read().expect("document cache poisoned");
        hydrate(hits, &cache)
    }
}

enum AttemptError {
    Retryable(String),
    Fatal(String),
}

// ---------------------------------------------------------------------------
// Oracle selection
// ---------------------------------------------------------------------------

pub const ORACLE_DEFAULT_DOCS: usize = 5;

/// Documents containing a gold answer, or the first `default_n` when none do.
pub fn oracle_select(example: &QaExample, corpus: &[Document], default_n: usize) -> Vec<Document> {
    let matching: Vec<Document> = corpus
        .iter()
        .filter(|d| contains_answer(&d.render(), &example.answers))
        .cloned()
        .collect();
    if matching.is_empty() {
        corpus.iter().take(default_n).cloned().collect()
    } else {
        matching
    }
}
