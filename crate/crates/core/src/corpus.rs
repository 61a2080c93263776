//! Document corpora, QA datasets and token counting.
//!
//! Both file kinds are UTF-8 JSONL, one record per line. Unknown fields are
//! ignored and blank lines are skipped. Loaded collections are plain `Vec`s;
//! nothing here mutates after construction, so they can be shared freely
//! across worker threads.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate document id {id:?} (first seen on line {first_line})")]
    DuplicateId { id: String, line: usize, first_line: usize },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("document {id:?} has empty text")]
    EmptyText { id: String },
    #[error("unknown token scheme {0:?}")]
    UnknownScheme(String),
}

/// One retrievable text unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    /// 1-based position in the retrieval list this document came from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_score: Option<f64>,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, text: impl Into<String>) -> Result<Self, CorpusError> {
        let doc = Document {
            id: id.into(),
            title: title.into(),
            text: text.into(),
            source_rank: None,
            source_score: None,
        };
        if doc.text.trim().is_empty() {
            return Err(CorpusError::EmptyText { id: doc.id });
        }
        Ok(doc)
    }

    pub fn with_provenance(mut self, rank: usize, score: f64) -> Self {
        self.source_rank = Some(rank);
        self.source_score = Some(score);
        self
    }

    /// `title\ntext`, or just the text when the title is empty.
    pub fn render(&self) -> String {
        if self.title.is_empty() {
            self.text.clone()
        } else {
            format!("{}\n{}", self.title, self.text)
        }
    }
}

/// A question with its gold answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_doc_ids: Option<Vec<String>>,
}

impl QaExample {
    pub fn validate(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("question is empty".into());
        }
        if self.answers.is_empty() {
            return Err("answers must contain at least one entry".into());
        }
        if self.answers.iter().any(|a| a.trim().is_empty()) {
            return Err("answers must not contain empty strings".into());
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct RawQaRecord {
    #[serde(default)]
    id: Option<serde_json::Value>,
    question: String,
    answers: Vec<String>,
    #[serde(default)]
    gold_doc_ids: Option<Vec<String>>,
}

fn open(path: &Path) -> Result<BufReader<File>, CorpusError> {
    File::open(path).map(BufReader::new).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Iterates non-blank lines as `(1-based line number, content)`.
fn records<'a, R: BufRead + 'a>(
    reader: R,
    path: &'a Path,
) -> impl Iterator<Item = Result<(usize, String), CorpusError>> + 'a {
    reader.lines().enumerate().filter_map(move |(idx, line)| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(Ok((idx + 1, l))),
        Err(source) => Some(Err(CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })),
    })
}

pub fn read_documents<R: BufRead>(reader: R) -> Result<Vec<Document>, CorpusError> {
    read_documents_inner(reader, Path::new("<reader>"))
}

fn read_documents_inner<R: BufRead>(reader: R, path: &Path) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for rec in records(reader, path) {
        let (line, content) = rec?;
        let doc: Document = serde_json::from_str(&content).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if doc.id.is_empty() {
            return Err(CorpusError::Invalid {
                line,
                message: "document id is empty".into(),
            });
        }
        if doc.text.trim().is_empty() {
            return Err(CorpusError::Invalid {
                line,
                message: format!("document {:?} has empty text", doc.id),
            });
        }
        if let Some(&first_line) = seen.get(&doc.id) {
            return Err(CorpusError::DuplicateId {
                id: doc.id,
                line,
                first_line,
            });
        }
        seen.insert(doc.id.clone(), line);
        docs.push(doc);
    }
    Ok(docs)
}

/// Loads a JSONL corpus in file order, rejecting duplicate ids.
pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<Document>, CorpusError> {
    let path = path.as_ref();
    read_documents_inner(open(path)?, path)
}

pub fn write_documents(path: impl AsRef<Path>, docs: &[Document]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    write_jsonl(path, docs)
}

pub fn read_qa_examples<R: BufRead>(reader: R) -> Result<Vec<QaExample>, CorpusError> {
    read_qa_inner(reader, Path::new("<reader>"))
}

fn read_qa_inner<R: BufRead>(reader: R, path: &Path) -> Result<Vec<QaExample>, CorpusError> {
    let mut out = Vec::new();
    for rec in records(reader, path) {
        let (line, content) = rec?;
        let raw: RawQaRecord = serde_json::from_str(&content).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        // Datasets use both string and integer ids; records without one get their line number.
        let id = match raw.id {
            None | Some(serde_json::Value::Null) => line.to_string(),
            Some(serde_json::Value::String(s)) => s,
            Some(other) => other.to_string(),
        };
        let example = QaExample {
            id,
            question: raw.question,
            answers: raw.answers,
            gold_doc_ids: raw.gold_doc_ids,
        };
        example
            .validate()
            .map_err(|message| CorpusError::Invalid { line, message })?;
        out.push(example);
    }
    Ok(out)
}

/// Loads a JSONL QA dataset in file order.
pub fn load_qa_examples(path: impl AsRef<Path>) -> Result<Vec<QaExample>, CorpusError> {
    let path = path.as_ref();
    read_qa_inner(open(path)?, path)
}

pub fn write_qa_examples(path: impl AsRef<Path>, examples: &[QaExample]) -> Result<(), CorpusError> {
    write_jsonl(path.as_ref(), examples)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("record serialization cannot fail");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads one JSON object per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    records(open(path)?, path)
        .map(|rec| {
            let (line, content) = rec?;
            serde_json::from_str(&content).map_err(|e| CorpusError::Malformed {
                line,
                message: e.to_string(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Token counting
// ---------------------------------------------------------------------------

pub const WHITESPACE_SCHEME: &str = "whitespace";

/// A token count tagged with the scheme that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub value: usize,
    pub scheme: String,
}

pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;
    /// Must be deterministic and return 0 only for whitespace-only text.
    fn count(&self, text: &str) -> usize;
}

/// Counts maximal runs of non-whitespace characters.
#[derive(Debug, Default, Clone, Copy)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn name(&self) -> &str {
        WHITESPACE_SCHEME
    }

    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

fn registry() -> &'static RwLock<BTreeMap<String, Arc<dyn Tokenizer>>> {
    static REGISTRY: OnceLock<RwLock<BTreeMap<String, Arc<dyn Tokenizer>>>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut map: BTreeMap<String, Arc<dyn Tokenizer>> = BTreeMap::new();
        map.insert(WHITESPACE_SCHEME.to_string(), Arc::new(WhitespaceTokenizer));
        RwLock::new(map)
    })
}

/// Registers a tokenizer under its own name, replacing any previous one.
pub fn register_tokenizer(tokenizer: Arc<dyn Tokenizer>) {
    let name = tokenizer.name().to_string();
    registry()
        .write()
        .expect("tokenizer registry poisoned")
        .insert(name, tokenizer);
}

pub fn tokenizer(scheme: &str) -> Result<Arc<dyn Tokenizer>, CorpusError> {
    registry()
        .read()
        .expect("tokenizer registry poisoned")
        .get(scheme)
        .cloned()
        .ok_or_else(|| CorpusError::UnknownScheme(scheme.to_string()))
}

pub fn count_tokens(text: &str, scheme: &str) -> Result<TokenCount, CorpusError> {
    let tok = tokenizer(scheme)?;
    Ok(TokenCount {
        value: tok.count(text),
        scheme: scheme.to_string(),
    })
}
