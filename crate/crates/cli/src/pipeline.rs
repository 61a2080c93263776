//! Shared pieces of the pipeline commands: error classes, retrieval,
//! question sampling and run manifests.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::time::Duration;

use anyhow::{Context, Result};
use ctxpress::corpus::{self, Document, QaExample};
use ctxpress::datagen::AnswerOracleTeacher;
use ctxpress::provider::Provider;
use ctxpress::retrieval::{
    hydrate, oracle_select, Bm25Index, RemoteRetriever, RemoteRetrieverConfig, RetrievalHit, ORACLE_DEFAULT_DOCS,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{build_provider, ProviderKind, ProviderSpec, RetrieverKind, RunConfig};

/// Marks an error as a usage or configuration problem (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub trait UsageContext<T> {
    /// Reclassifies any error as a usage error.
    fn usage(self) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> UsageContext<T> for std::result::Result<T, E> {
    fn usage(self) -> Result<T> {
        self.map_err(|e| anyhow::Error::new(UsageError(format!("{:#}", e.into()))))
    }
}

pub fn is_usage_error(e: &anyhow::Error) -> bool {
    e.downcast_ref::<UsageError>().is_some() || e.downcast_ref::<clap::Error>().is_some()
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

pub enum Retriever {
    Bm25 {
        index: Bm25Index,
        corpus: HashMap<String, Document>,
    },
    Remote {
        client: RemoteRetriever,
        corpus: HashMap<String, Document>,
    },
}

impl Retriever {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let corpus: HashMap<String, Document> = match &cfg.paths.corpus {
            Some(p) => corpus::load_documents(p)?
                .into_iter()
                .map(|d| (d.id.clone(), d))
                .collect(),
            None => HashMap::new(),
        };
        Ok(match cfg.retriever.kind {
            RetrieverKind::Bm25 | RetrieverKind::Oracle => {
                let index = match &cfg.paths.index {
                    Some(p) => Bm25Index::load(p)?,
                    None => {
                        let mut docs: Vec<Document> = corpus.values().cloned().collect();
                        docs.sort_by(|a, b| a.id.cmp(&b.id));
                        Bm25Index::build(&docs, cfg.retriever.bm25_params())?
                    }
                };
                Retriever::Bm25 { index, corpus }
            }
            RetrieverKind::Remote => {
                let rc = RemoteRetrieverConfig {
                    max_attempts: cfg.retriever.max_attempts,
                    timeout: Duration::from_secs_f64(cfg.retriever.timeout_secs),
                    max_connections: cfg.retriever.max_connections,
                    ..RemoteRetrieverConfig::new(cfg.retriever.endpoint.clone().unwrap_or_default())
                };
                Retriever::Remote {
                    client: RemoteRetriever::new(rc),
                    corpus,
                }
            }
        })
    }

    /// Ranked hits and their documents; hits without text are dropped from
    /// the document list.
    pub fn retrieve(&self, query: &str, k: usize) -> Result<(Vec<RetrievalHit>, Vec<Document>)> {
        match self {
            Retriever::Bm25 { index, corpus } => {
                let hits = index.retrieve(query, k);
                let docs = hydrate(&hits, corpus);
                Ok((hits, docs))
            }
            Retriever::Remote { client, corpus } => {
                let hits = client.retrieve(query, k)?;
                let mut docs = client.documents_for(&hits);
                if docs.len() < hits.len() {
                    docs = hits
                        .iter()
                        .filter_map(|h| {
                            client
                                .cached_document(&h.doc_id)
                                .or_else(|| corpus.get(&h.doc_id).cloned())
                                .map(|d| d.with_provenance(h.rank, h.score))
                        })
                        .collect();
                }
                Ok((hits, docs))
            }
        }
    }

    pub fn corpus(&self) -> &HashMap<String, Document> {
        match self {
            Retriever::Bm25 { corpus, .. } | Retriever::Remote { corpus, .. } => corpus,
        }
    }
}

/// Documents an example's reader or compressor sees, after the optional
/// oracle narrowing.
pub fn narrow(example: &QaExample, docs: Vec<Document>, oracle: bool) -> Vec<Document> {
    if oracle {
        oracle_select(example, &docs, ORACLE_DEFAULT_DOCS)
    } else {
        docs
    }
}

// ---------------------------------------------------------------------------
// Inputs
// ---------------------------------------------------------------------------

/// Loads the dataset and draws the seeded subset, kept in file order.
pub fn load_examples(cfg: &RunConfig) -> Result<(Vec<QaExample>, Vec<QaExample>)> {
    let path = cfg.paths.dataset.as_ref().context("missing dataset path")?;
    let all = corpus::load_qa_examples(path)?;
    if all.is_empty() {
        anyhow::bail!("dataset {} has no questions", path.display());
    }
    let chosen = sample(&all, cfg.limit, cfg.seed);
    Ok((all, chosen))
}

pub fn sample(all: &[QaExample], limit: Option<usize>, seed: u64) -> Vec<QaExample> {
    match limit {
        Some(n) if n < all.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, all.len(), n).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i].clone()).collect()
        }
        _ => all.to_vec(),
    }
}

/// Builds a provider, including the dataset-aware answer oracle.
pub fn provider_for(role: &str, spec: &ProviderSpec, examples: &[QaExample]) -> Result<Box<dyn Provider>> {
    if spec.kind == Some(ProviderKind::AnswerOracle) {
        let name = spec.name.clone().unwrap_or_else(|| role.to_string());
        return Ok(Box::new(AnswerOracleTeacher::new(name, examples)));
    }
    build_provider(role, spec)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub tool_version: &'static str,
    pub index_format_version: u32,
    pub seed: u64,
    pub config_sha256: String,
    pub config: &'a RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Writes `manifest.json` into `dir`, hashing the listed inputs and outputs.
pub fn write_manifest(command: &str, cfg: &RunConfig, dir: &Path, outputs: &[&str]) -> Result<()> {
    let mut inputs = BTreeMap::new();
    for (label, p) in [
        ("corpus", &cfg.paths.corpus),
        ("dataset", &cfg.paths.dataset),
        ("index", &cfg.paths.index),
        ("results", &cfg.paths.results),
        ("compressor_script", &cfg.compressor.script),
        ("reader_script", &cfg.reader.script),
        ("teacher_script", &cfg.teacher.script),
    ] {
        if let Some(p) = p.as_ref().filter(|p| p.is_file()) {
            inputs.insert(label.to_string(), file_digest(p)?);
        }
    }
    let mut out = BTreeMap::new();
    for name in outputs {
        out.insert(name.to_string(), file_digest(&dir.join(name))?);
    }
    let manifest = Manifest {
        command,
        tool_version: env!("CARGO_PKG_VERSION"),
        index_format_version: ctxpress::retrieval::INDEX_FORMAT_VERSION,
        seed: cfg.seed,
        config_sha256: sha256_hex(cfg.canonical_json().as_bytes()),
        config: cfg,
        inputs,
        outputs: out,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text).context("cannot write manifest")?;
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn examples(n: usize) -> Vec<QaExample> {
        (0..n)
            .map(|i| QaExample {
                id: format!("q{i}"),
                question: "?".into(),
                answers: vec!["a".into()],
                gold_doc_ids: None,
            })
            .collect()
    }

    #[test]
    fn sampling_is_seeded_and_ordered() {
        let all = examples(50);
        let a = sample(&all, Some(10), 3);
        assert_eq!(a, sample(&all, Some(10), 3));
        assert_ne!(a, sample(&all, Some(10), 4));
        assert_eq!(a.len(), 10);
        let ids: Vec<usize> = a.iter().map(|e| e.id[1..].parse().unwrap()).collect();
        assert!(ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample(&all, Some(80), 1).len(), 50);
        assert_eq!(sample(&all, None, 1).len(), 50);
    }

    #[test]
    fn usage_errors_are_recognized() {
        let e: Result<()> = Err(anyhow::anyhow!("bad flag"));
        assert!(is_usage_error(&e.usage().unwrap_err()));
        assert!(!is_usage_error(&anyhow::anyhow!("network down")));
    }
}
