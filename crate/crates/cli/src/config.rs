//! Run configuration: one TOML file, overridden by command-line flags.
//!
//! Relative paths in the file are resolved against the file's directory;
//! paths given as flags are used as-is.
//!
//! ```toml
//! seed = 7
//! parallelism = 4
//! limit = 100               # sample this many questions (seeded)
//! mode = "COMPRESSED_ONLY"  # reader context mode
//!
//! [paths]
//! corpus = "corpus.jsonl"
//! dataset = "qa.jsonl"
//! index = "bm25.json"       # optional; built from the corpus when absent
//! output_dir = "runs/demo"
//! results = "runs/demo/compressed.jsonl"  # reuse compress output in evaluate
//!
//! [compression]
//! segment_size = 5
//! top_k = 30
//! max_iterations = 6
//! max_generated_tokens = 700
//! token_scheme = "whitespace"
//!
//! [retriever]
//! kind = "bm25"             # bm25 | remote | oracle
//!
//! [compressor]
//! kind = "http"             # http | script | echo | answer-oracle
//! endpoint = "http://localhost:8000/generate"
//! auth_env = "COMPRESSOR_TOKEN"
//! input_per_1k = 0.0
//! output_per_1k = 0.0
//!
//! [reader]
//! kind = "script"
//! script = "reader_script.jsonl"
//!
//! [teacher]
//! kind = "answer-oracle"
//!
//! [templates]
//! compress = "templates/compress.txt"
//!
//! [datagen]
//! scenarios = ["REALISTIC", "DISTRACTOR"]
//! gold_segment = 2          # omit to draw one per question from the seed
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use ctxpress::compression::CompactConfig;
use ctxpress::datagen::Scenario;
use ctxpress::provider::{EchoReader, HttpProvider, HttpProviderConfig, Provider, ScriptedProvider};
use ctxpress::reader::ContextMode;
use ctxpress::retrieval::Bm25Params;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub parallelism: usize,
    pub limit: Option<usize>,
    pub mode: ContextMode,
    pub paths: Paths,
    pub compression: CompactConfig,
    pub retriever: RetrieverConfig,
    pub compressor: ProviderSpec,
    pub reader: ProviderSpec,
    pub teacher: ProviderSpec,
    pub templates: Templates,
    pub datagen: DatagenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            parallelism: 1,
            limit: None,
            mode: ContextMode::CompressedOnly,
            paths: Paths::default(),
            compression: CompactConfig::default(),
            retriever: RetrieverConfig::default(),
            compressor: ProviderSpec::default(),
            reader: ProviderSpec::default(),
            teacher: ProviderSpec::default(),
            templates: Templates::default(),
            datagen: DatagenConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub results: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RetrieverKind {
    #[default]
    Bm25,
    Remote,
    /// BM25 top-k narrowed to answer-bearing documents.
    Oracle,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverConfig {
    pub kind: RetrieverKind,
    pub endpoint: Option<String>,
    pub k1: f64,
    pub b: f64,
    pub max_attempts: u32,
    pub timeout_secs: f64,
    pub max_connections: usize,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        let p = Bm25Params::default();
        RetrieverConfig {
            kind: RetrieverKind::Bm25,
            endpoint: None,
            k1: p.k1,
            b: p.b,
            max_attempts: 3,
            timeout_secs: 30.0,
            max_connections: 8,
        }
    }
}

impl RetrieverConfig {
    pub fn bm25_params(&self) -> Bm25Params {
        Bm25Params { k1: self.k1, b: self.b }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    Http,
    /// JSONL script replayed in order or keyed by (question id, step).
    Script,
    /// Answers with the first quoted span of the context (reader mock).
    Echo,
    /// Teacher/compressor mock that knows the gold answers.
    AnswerOracle,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSpec {
    pub kind: Option<ProviderKind>,
    pub name: Option<String>,
    pub endpoint: Option<String>,
    pub auth_env: Option<String>,
    pub script: Option<PathBuf>,
    pub default_answer: String,
    pub timeout_secs: f64,
    pub max_attempts: u32,
    pub max_concurrency: Option<usize>,
    pub context_window: Option<usize>,
    /// Reader answer budget; compressors use `compression.max_generated_tokens`.
    pub max_tokens: usize,
    pub input_per_1k: f64,
    pub output_per_1k: f64,
}

impl Default for ProviderSpec {
    fn default() -> Self {
        ProviderSpec {
            kind: None,
            name: None,
            endpoint: None,
            auth_env: None,
            script: None,
            default_answer: "unknown".into(),
            timeout_secs: 120.0,
            max_attempts: 3,
            max_concurrency: None,
            context_window: None,
            max_tokens: ctxpress::reader::DEFAULT_ANSWER_TOKENS,
            input_per_1k: 0.0,
            output_per_1k: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Templates {
    pub compress: Option<PathBuf>,
    pub reader: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub scenarios: Vec<Scenario>,
    /// Segment the gold documents open in distractor pools.
    pub gold_segment: Option<usize>,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            scenarios: vec![Scenario::Realistic, Scenario::Distractor],
            gold_segment: None,
        }
    }
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.corpus,
            &mut cfg.paths.dataset,
            &mut cfg.paths.index,
            &mut cfg.paths.output_dir,
            &mut cfg.paths.results,
            &mut cfg.compressor.script,
            &mut cfg.reader.script,
            &mut cfg.teacher.script,
            &mut cfg.templates.compress,
            &mut cfg.templates.reader,
            &mut cfg.templates.teacher,
        ] {
            rebase(base, p);
        }
        Ok(cfg)
    }

    /// Deterministic JSON used for hashing and the dry-run plan.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.paths
            .output_dir
            .as_deref()
            .context("no output directory: set paths.output_dir or pass --out-dir")
    }

    pub fn require_existing(&self, label: &str, p: &Option<PathBuf>) -> Result<PathBuf> {
        let p = p.as_ref().with_context(|| format!("missing {label} path"))?;
        if !p.exists() {
            bail!("{label} path {} does not exist", p.display());
        }
        Ok(p.clone())
    }

    fn check_optional(label: &str, p: &Option<PathBuf>) -> Result<()> {
        if let Some(p) = p {
            if !p.exists() {
                bail!("{label} path {} does not exist", p.display());
            }
        }
        Ok(())
    }

    /// Checks the settings shared by commands that retrieve for a dataset.
    pub fn validate_common(&self) -> Result<()> {
        if self.parallelism < 1 {
            bail!("parallelism must be >= 1");
        }
        if self.limit == Some(0) {
            bail!("limit must be >= 1");
        }
        self.compression.validate().context("invalid [compression] settings")?;
        self.require_existing("dataset", &self.paths.dataset)?;
        for (label, p) in [
            ("index", &self.paths.index),
            ("results", &self.paths.results),
            ("compress template", &self.templates.compress),
            ("reader template", &self.templates.reader),
            ("teacher template", &self.templates.teacher),
        ] {
            Self::check_optional(label, p)?;
        }
        self.validate_retriever()
    }

    pub fn validate_retriever(&self) -> Result<()> {
        match self.retriever.kind {
            RetrieverKind::Remote => {
                if self.retriever.endpoint.is_none() {
                    bail!("retriever kind remote needs retriever.endpoint");
                }
                Self::check_optional("corpus", &self.paths.corpus)
            }
            RetrieverKind::Bm25 | RetrieverKind::Oracle => {
                self.require_existing("corpus", &self.paths.corpus).map(|_| ())
            }
        }
    }

    pub fn validate_provider(&self, role: &str, spec: &ProviderSpec) -> Result<()> {
        let kind = spec
            .kind
            .with_context(|| format!("no {role} provider configured: set [{role}] kind or pass --{role}"))?;
        match kind {
            ProviderKind::Http => {
                if spec.endpoint.is_none() {
                    bail!("{role} provider kind http needs an endpoint");
                }
                if let Some(var) = &spec.auth_env {
                    if std::env::var_os(var).is_none() {
                        bail!("{role} provider: environment variable {var} is not set");
                    }
                }
            }
            ProviderKind::Script => {
                self.require_existing(&format!("{role} script"), &spec.script)?;
            }
            ProviderKind::Echo | ProviderKind::AnswerOracle => {}
        }
        if spec.input_per_1k < 0.0 || spec.output_per_1k < 0.0 {
            bail!("{role} provider prices must be non-negative");
        }
        Ok(())
    }
}

/// Builds a provider from a validated spec. The answer oracle is built by
/// the caller since it needs the dataset.
pub fn build_provider(role: &str, spec: &ProviderSpec) -> Result<Box<dyn Provider>> {
    let name = spec.name.clone().unwrap_or_else(|| role.to_string());
    let kind = spec.kind.with_context(|| format!("no {role} provider configured"))?;
    Ok(match kind {
        ProviderKind::Http => {
            let cfg = HttpProviderConfig {
                auth_env: spec.auth_env.clone(),
                timeout: Duration::from_secs_f64(spec.timeout_secs),
                max_attempts: spec.max_attempts,
                max_concurrency: spec.max_concurrency,
                context_window: spec.context_window,
                ..HttpProviderConfig::new(name, spec.endpoint.clone().unwrap_or_default())
            };
            Box::new(HttpProvider::new(cfg)?)
        }
        ProviderKind::Script => {
            let path = spec
                .script
                .as_ref()
                .with_context(|| format!("{role} script path missing"))?;
            Box::new(ScriptedProvider::from_file(name, path)?)
        }
        ProviderKind::Echo => Box::new(EchoReader::new(name, spec.default_answer.clone())),
        ProviderKind::AnswerOracle => bail!("the answer-oracle provider is only available as a teacher or compressor"),
    })
}
