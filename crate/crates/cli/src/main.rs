//! `ctxpress`: retrieval, iterative context compression, reading and
//! evaluation from the command line.
//!
//! ```bash
//! ctxpress index --corpus corpus.jsonl --out bm25.json
//! ctxpress retrieve --index bm25.json --corpus corpus.jsonl --query "who founded Conspirare?"
//! ctxpress compress --config run.toml
//! ctxpress evaluate --config run.toml --mode COMPRESSED_ONLY
//! ctxpress build-dataset --config run.toml
//! ctxpress stats --instances runs/data/instances.jsonl
//! ```
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod config;
mod pipeline;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ctxpress::batch::run_ordered;
use ctxpress::compression::{effective_parallelism, CompressionResult, Compressor};
use ctxpress::corpus::{self, Document, QaExample};
use ctxpress::datagen::{
    filter_instances, plant_gold, DatagenOutcome, DatasetBuilder, DatasetStats, Scenario, ScenarioSpec,
    TrainingInstance,
};
use ctxpress::eval::{aggregate, estimate_cost, recall_at_k, CostModel, EvalRecord, EvalReport, Pricing};
use ctxpress::provider::Provider;
use ctxpress::reader::{render_context, ContextMode, ContextSource, Reader};
use ctxpress::retrieval::{Bm25Index, Bm25Params, RetrievalHit};
use ctxpress::template::{
    PromptTemplate, COMPRESS_SLOTS, COMPRESS_TEMPLATE_ID, READER_SLOTS, READER_TEMPLATE_ID, TEACHER_TEMPLATE_ID,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use config::{ProviderKind, RetrieverKind, RunConfig};
use pipeline::{
    is_usage_error, load_examples, narrow, provider_for, write_json, write_manifest, write_text, Retriever,
    UsageContext,
};

#[derive(Parser, Debug)]
#[command(
    name = "ctxpress",
    version,
    about = "Retrieval-augmented QA with iterative context compression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a BM25 index snapshot from a JSONL corpus.
    Index(IndexArgs),
    /// Retrieve top-k documents for one query or for every dataset question.
    Retrieve(RetrieveArgs),
    /// Compress retrieved documents for each question.
    Compress(RunArgs),
    /// Answer questions with a reader and score the answers.
    Evaluate(RunArgs),
    /// Build teacher-labelled training instances and SFT pairs.
    BuildDataset(RunArgs),
    /// Print group and per-step statistics for an instances file.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct IndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k1: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct RetrieveArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Single query; otherwise every (sampled) dataset question is used.
    #[arg(long)]
    query: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    /// Output JSONL path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    json: bool,
}

/// Flags shared by pipeline commands. Each one overrides the config file.
#[derive(Args, Debug, Default)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Compression output to reuse in `evaluate`.
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long)]
    segment_size: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    max_generated_tokens: Option<usize>,
    #[arg(long)]
    token_scheme: Option<String>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    limit: Option<usize>,
    /// COMPRESSED_ONLY, RATIONALE_ONLY, COMPRESSED_PLUS_RATIONALE,
    /// RAW_DOCUMENTS, ORACLE_DOCUMENTS or CLOSED_BOOK.
    #[arg(long)]
    mode: Option<ContextMode>,
    #[arg(long, value_enum)]
    retriever: Option<RetrieverKind>,
    #[arg(long)]
    retriever_endpoint: Option<String>,
    #[arg(long, value_enum)]
    compressor: Option<ProviderKind>,
    #[arg(long)]
    compressor_endpoint: Option<String>,
    #[arg(long)]
    compressor_script: Option<PathBuf>,
    #[arg(long, value_enum)]
    reader: Option<ProviderKind>,
    #[arg(long)]
    reader_endpoint: Option<String>,
    #[arg(long)]
    reader_script: Option<PathBuf>,
    #[arg(long)]
    reader_default: Option<String>,
    #[arg(long, value_enum)]
    teacher: Option<ProviderKind>,
    #[arg(long)]
    teacher_endpoint: Option<String>,
    #[arg(long)]
    teacher_script: Option<PathBuf>,
    #[arg(long)]
    gold_segment: Option<usize>,
    /// Print the resolved plan and exit without running anything.
    #[arg(long)]
    dry_run: bool,
    /// Record zero for all wall-clock timings so outputs are byte-stable.
    #[arg(long)]
    no_timings: bool,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

impl RunArgs {
    /// Loads the config file (if any) and applies flag overrides.
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        set_opt(&mut cfg.paths.corpus, self.corpus.clone());
        set_opt(&mut cfg.paths.dataset, self.dataset.clone());
        set_opt(&mut cfg.paths.index, self.index.clone());
        set_opt(&mut cfg.paths.output_dir, self.out_dir.clone());
        set_opt(&mut cfg.paths.results, self.results.clone());
        set(&mut cfg.compression.segment_size, self.segment_size);
        set(&mut cfg.compression.top_k, self.top_k);
        set_opt(&mut cfg.compression.max_iterations, self.max_iterations);
        set(&mut cfg.compression.max_generated_tokens, self.max_generated_tokens);
        set(&mut cfg.compression.token_scheme, self.token_scheme.clone());
        set(&mut cfg.parallelism, self.parallelism);
        set(&mut cfg.seed, self.seed);
        set_opt(&mut cfg.limit, self.limit);
        set(&mut cfg.mode, self.mode);
        set(&mut cfg.retriever.kind, self.retriever);
        set_opt(&mut cfg.retriever.endpoint, self.retriever_endpoint.clone());
        set_opt(&mut cfg.compressor.kind, self.compressor);
        set_opt(&mut cfg.compressor.endpoint, self.compressor_endpoint.clone());
        set_opt(&mut cfg.compressor.script, self.compressor_script.clone());
        set_opt(&mut cfg.reader.kind, self.reader);
        set_opt(&mut cfg.reader.endpoint, self.reader_endpoint.clone());
        set_opt(&mut cfg.reader.script, self.reader_script.clone());
        set(&mut cfg.reader.default_answer, self.reader_default.clone());
        set_opt(&mut cfg.teacher.kind, self.teacher);
        set_opt(&mut cfg.teacher.endpoint, self.teacher_endpoint.clone());
        set_opt(&mut cfg.teacher.script, self.teacher_script.clone());
        set_opt(&mut cfg.datagen.gold_segment, self.gold_segment);
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage_error(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Index(a) => cmd_index(&a),
        Command::Retrieve(a) => cmd_retrieve(&a),
        Command::Compress(a) => cmd_compress(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::BuildDataset(a) => cmd_build_dataset(&a),
        Command::Stats(a) => cmd_stats(&a),
    }
}

fn dry_run(command: &str, cfg: &RunConfig, steps: &[String]) {
    println!("plan for `{command}` (dry run, nothing executed)");
    for s in steps {
        println!("  - {s}");
    }
    println!("resolved config:\n{}", cfg.canonical_json());
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

// ---------------------------------------------------------------------------
// index / retrieve / stats
// ---------------------------------------------------------------------------

fn cmd_index(a: &IndexArgs) -> Result<()> {
    if !a.corpus.exists() {
        return Err(anyhow::anyhow!("corpus path {} does not exist", a.corpus.display())).usage();
    }
    let defaults = Bm25Params::default();
    let params = Bm25Params {
        k1: a.k1.unwrap_or(defaults.k1),
        b: a.b.unwrap_or(defaults.b),
    };
    if a.dry_run {
        println!(
            "plan for `index` (dry run): read {}, build BM25 (k1={}, b={}), write {}",
            a.corpus.display(),
            params.k1,
            params.b,
            a.out.display()
        );
        return Ok(());
    }
    let docs = corpus::load_documents(&a.corpus).usage()?;
    let index = Bm25Index::build(&docs, params).map_err(anyhow::Error::from).usage()?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    index.save(&a.out)?;
    println!(
        "indexed {} documents ({} terms) into {}",
        index.doc_count,
        index.postings.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RetrievalRecord {
    example_id: Option<String>,
    query: String,
    hits: Vec<RetrievalHit>,
}

fn cmd_retrieve(a: &RetrieveArgs) -> Result<()> {
    let cfg = a.run.resolve().usage()?;
    cfg.validate_retriever().usage()?;
    let k = a.k.unwrap_or(cfg.compression.top_k);
    if k == 0 {
        return Err(anyhow::anyhow!("k must be >= 1")).usage();
    }
    let queries: Vec<(Option<String>, String)> = match &a.query {
        Some(q) => vec![(None, q.clone())],
        None => {
            cfg.require_existing("dataset", &cfg.paths.dataset).usage()?;
            let (_, chosen) = load_examples(&cfg).usage()?;
            chosen.into_iter().map(|e| (Some(e.id), e.question)).collect()
        }
    };
    if a.run.dry_run {
        dry_run(
            "retrieve",
            &cfg,
            &[format!(
                "retrieve top-{k} for {} queries with {:?}",
                queries.len(),
                cfg.retriever.kind
            )],
        );
        return Ok(());
    }
    let retriever = Retriever::open(&cfg).usage()?;
    let records = run_ordered(&queries, cfg.parallelism, |_, (id, q)| {
        retriever.retrieve(q, k).map(|(hits, _)| RetrievalRecord {
            example_id: id.clone(),
            query: q.clone(),
            hits,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    match &a.out {
        Some(p) => {
            corpus::write_jsonl(p, &records)?;
            println!("wrote {} retrieval records to {}", records.len(), p.display());
        }
        None => {
            for r in &records {
                println!("{}", serde_json::to_string(r)?);
            }
        }
    }
    Ok(())
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    if !a.instances.exists() {
        return Err(anyhow::anyhow!(
            "instances path {} does not exist",
            a.instances.display()
        ))
        .usage();
    }
    let instances: Vec<TrainingInstance> = corpus::read_jsonl(&a.instances).usage()?;
    let stats = DatasetStats::from_instances(&instances);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&stats)?);
    } else {
        print!("{}", stats.to_table());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// compress
// ---------------------------------------------------------------------------

/// One line of `compressed.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CompressedRecord {
    example_id: String,
    question: String,
    hits: Vec<RetrievalHit>,
    recall_hit: Option<u8>,
    result: Option<CompressionResult>,
    error: Option<String>,
}

fn load_template(path: &Option<PathBuf>, id: &str, slots: &[&str]) -> Result<PromptTemplate> {
    Ok(match path {
        Some(p) => PromptTemplate::from_file(id, p, slots)?,
        None => PromptTemplate::builtin(id)?,
    })
}

fn compress_one(
    example: &QaExample,
    cfg: &RunConfig,
    retriever: &Retriever,
    compressor: &Compressor,
    provider: &dyn Provider,
    no_timings: bool,
) -> CompressedRecord {
    let mut rec = CompressedRecord {
        example_id: example.id.clone(),
        question: example.question.clone(),
        hits: Vec::new(),
        recall_hit: None,
        result: None,
        error: None,
    };
    let docs = match retriever.retrieve(&example.question, cfg.compression.top_k) {
        Ok((hits, docs)) => {
            rec.hits = hits;
            rec.recall_hit = Some(recall_at_k(&docs, example, cfg.compression.top_k));
            narrow(example, docs, cfg.retriever.kind == RetrieverKind::Oracle)
        }
        Err(e) => {
            rec.error = Some(format!("retrieval: {e:#}"));
            return rec;
        }
    };
    match compressor.compress(&example.id, &example.question, &docs, provider) {
        Ok(mut r) => {
            if no_timings {
                r.clear_timings();
            }
            rec.result = Some(r);
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

fn validate_compression_inputs(cfg: &RunConfig) -> Result<()> {
    cfg.validate_common()?;
    cfg.validate_provider("compressor", &cfg.compressor)?;
    load_template(&cfg.templates.compress, COMPRESS_TEMPLATE_ID, COMPRESS_SLOTS)?;
    Ok(())
}

fn cmd_compress(a: &RunArgs) -> Result<()> {
    let cfg = a.resolve().usage()?;
    validate_compression_inputs(&cfg).usage()?;
    let out_dir = cfg.output_dir().usage()?.to_path_buf();
    let (all, chosen) = load_examples(&cfg).usage()?;
    if a.dry_run {
        dry_run(
            "compress",
            &cfg,
            &[
                format!("{} of {} questions (seed {})", chosen.len(), all.len(), cfg.seed),
                format!(
                    "retrieve top-{} with {:?}, segments of {} (at most {} steps)",
                    cfg.compression.top_k,
                    cfg.retriever.kind,
                    cfg.compression.segment_size,
                    cfg.compression.effective_max_iterations()
                ),
                format!("write {}/compressed.jsonl and manifest.json", out_dir.display()),
            ],
        );
        return Ok(());
    }
    let template = load_template(&cfg.templates.compress, COMPRESS_TEMPLATE_ID, COMPRESS_SLOTS)?;
    let compressor = Compressor::with_template(cfg.compression.clone(), template)?;
    let provider = provider_for("compressor", &cfg.compressor, &all)?;
    let retriever = Retriever::open(&cfg)?;
    let workers = effective_parallelism(cfg.parallelism, provider.as_ref());
    let records = run_ordered(&chosen, workers, |_, ex| {
        compress_one(ex, &cfg, &retriever, &compressor, provider.as_ref(), a.no_timings)
    });
    ensure_dir(&out_dir)?;
    corpus::write_jsonl(&out_dir.join("compressed.jsonl"), &records)?;
    write_manifest("compress", &cfg, &out_dir, &["compressed.jsonl"])?;
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    let early = records
        .iter()
        .filter(|r| r.result.as_ref().is_some_and(|c| c.terminated_early))
        .count();
    println!(
        "compressed {} questions ({failed} failed, {early} terminated early) into {}",
        records.len(),
        out_dir.join("compressed.jsonl").display()
    );
    for r in records.iter().filter(|r| r.error.is_some()) {
        log::warn!("{}: {}", r.example_id, r.error.as_deref().unwrap_or_default());
    }
    if failed == records.len() {
        bail!("every question failed to compress");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RunReport<'a> {
    mode: ContextMode,
    evaluated: usize,
    failed: usize,
    metrics: &'a EvalReport,
}

#[derive(Serialize)]
struct Failure {
    example_id: String,
    error: String,
}

struct EvalContext<'a> {
    cfg: &'a RunConfig,
    mode: ContextMode,
    retriever: Option<&'a Retriever>,
    compressor: Option<(&'a Compressor, &'a dyn Provider)>,
    cached: &'a HashMap<String, CompressedRecord>,
    reader: &'a Reader,
    reader_provider: &'a dyn Provider,
    costs: &'a CostModel,
    no_timings: bool,
}

fn evaluate_one(ctx: &EvalContext<'_>, ex: &QaExample) -> Result<EvalRecord> {
    let cfg = ctx.cfg;
    let scheme = &cfg.compression.token_scheme;
    let mut compressed: Option<CompressionResult> = None;
    let mut docs: Vec<Document> = Vec::new();
    let mut recall_hit = None;
    if ctx.mode.needs_compression() {
        let rec = match ctx.cached.get(&ex.id) {
            Some(r) => r.clone(),
            None => {
                let (compressor, provider) = ctx.compressor.context("no compressor available")?;
                let retriever = ctx.retriever.context("no retriever available")?;
                compress_one(ex, cfg, retriever, compressor, provider, ctx.no_timings)
            }
        };
        if let Some(e) = rec.error {
            bail!("compression failed: {e}");
        }
        recall_hit = rec.recall_hit;
        compressed = Some(rec.result.context("compression record has no result")?);
    } else if ctx.mode.needs_documents() {
        let retriever = ctx.retriever.context("no retriever available")?;
        let (_, retrieved) = retriever.retrieve(&ex.question, cfg.compression.top_k)?;
        recall_hit = Some(recall_at_k(&retrieved, ex, cfg.compression.top_k));
        let oracle = ctx.mode == ContextMode::OracleDocuments || cfg.retriever.kind == RetrieverKind::Oracle;
        docs = narrow(ex, retrieved, oracle);
    }
    let source = match &compressed {
        Some(r) => ContextSource::Compression(r),
        None if ctx.mode.needs_documents() => ContextSource::Documents(&docs),
        None => ContextSource::Nothing,
    };
    let context = render_context(source, ctx.mode)?;
    let answer = ctx.reader.answer(&ex.id, &ex.question, &context, ctx.reader_provider)?;

    let mut rec = EvalRecord::scored(&ex.id, &answer.text, &ex.answers);
    rec.recall_hit = recall_hit;
    rec.reader_input_tokens = answer.input_tokens.value;
    rec.reader_output_tokens = answer.output_tokens.value;
    rec.reading_time = answer.elapsed.as_secs_f64();
    if let Some(r) = &compressed {
        rec.compression_rate = Some(r.compression_rate);
        rec.source_tokens = Some(r.source_token_total.value);
        rec.compressed_tokens = Some(r.compressed_token_total.value);
        rec.steps = r.steps.len();
        rec.step_context_tokens = r
            .steps
            .iter()
            .map(|s| corpus::count_tokens(&s.compressed_context, scheme).map(|c| c.value))
            .collect::<Result<_, _>>()?;
        rec.terminated_early = Some(r.terminated_early);
        rec.compressor_input_tokens = r.provider_input_tokens();
        rec.compressor_output_tokens = r.provider_output_tokens();
        rec.compression_time = r.total_elapsed().as_secs_f64();
    }
    rec.cost = estimate_cost(
        rec.compressor_input_tokens,
        rec.compressor_output_tokens,
        ctx.costs,
        "compressor",
    )? + estimate_cost(rec.reader_input_tokens, rec.reader_output_tokens, ctx.costs, "reader")?;
    if ctx.no_timings {
        rec.compression_time = 0.0;
        rec.reading_time = 0.0;
    }
    Ok(rec)
}

fn cmd_evaluate(a: &RunArgs) -> Result<()> {
    let cfg = a.resolve().usage()?;
    let mode = cfg.mode;
    let reuse = cfg.paths.results.is_some();
    let compress_inline = mode.needs_compression() && !reuse;
    let needs_retriever = compress_inline || mode.needs_documents();
    (|| -> Result<()> {
        if cfg.parallelism < 1 {
            bail!("parallelism must be >= 1");
        }
        cfg.compression.validate()?;
        cfg.require_existing("dataset", &cfg.paths.dataset)?;
        if needs_retriever {
            cfg.validate_common()?;
        }
        if compress_inline {
            validate_compression_inputs(&cfg)?;
        }
        if reuse && mode.needs_compression() {
            cfg.require_existing("results", &cfg.paths.results)?;
        }
        cfg.validate_provider("reader", &cfg.reader)?;
        load_template(&cfg.templates.reader, READER_TEMPLATE_ID, READER_SLOTS)?;
        cfg.output_dir()?;
        Ok(())
    })()
    .usage()?;
    let out_dir = cfg.output_dir()?.to_path_buf();
    let (all, chosen) = load_examples(&cfg).usage()?;
    if a.dry_run {
        let source = if !mode.needs_compression() {
            "no compression".to_string()
        } else if reuse {
            format!("reuse {}", cfg.paths.results.as_ref().unwrap().display())
        } else {
            "compress inline".to_string()
        };
        dry_run(
            "evaluate",
            &cfg,
            &[
                format!("{} of {} questions (seed {})", chosen.len(), all.len(), cfg.seed),
                format!("mode {mode}, {source}"),
                format!(
                    "write report.json, report.txt, records.jsonl, failures.jsonl, manifest.json to {}",
                    out_dir.display()
                ),
            ],
        );
        return Ok(());
    }

    let cached: HashMap<String, CompressedRecord> = match (&cfg.paths.results, mode.needs_compression()) {
        (Some(p), true) => corpus::read_jsonl::<CompressedRecord>(p)
            .usage()?
            .into_iter()
            .map(|r| (r.example_id.clone(), r))
            .collect(),
        _ => HashMap::new(),
    };
    let retriever = if needs_retriever {
        Some(Retriever::open(&cfg)?)
    } else {
        None
    };
    let compressor_provider = if compress_inline {
        Some(provider_for("compressor", &cfg.compressor, &all)?)
    } else {
        None
    };
    let compressor = if compress_inline {
        let t = load_template(&cfg.templates.compress, COMPRESS_TEMPLATE_ID, COMPRESS_SLOTS)?;
        Some(Compressor::with_template(cfg.compression.clone(), t)?)
    } else {
        None
    };
    let reader_provider = provider_for("reader", &cfg.reader, &all)?;
    let reader = Reader::with_template(
        load_template(&cfg.templates.reader, READER_TEMPLATE_ID, READER_SLOTS)?,
        &cfg.compression.token_scheme,
    )?
    .with_max_tokens(cfg.reader.max_tokens);
    let costs = CostModel::default()
        .with_price(
            "compressor",
            Pricing {
                input_per_1k: cfg.compressor.input_per_1k,
                output_per_1k: cfg.compressor.output_per_1k,
            },
        )
        .with_price(
            "reader",
            Pricing {
                input_per_1k: cfg.reader.input_per_1k,
                output_per_1k: cfg.reader.output_per_1k,
            },
        );
    let mut workers = effective_parallelism(cfg.parallelism, reader_provider.as_ref());
    if let Some(p) = &compressor_provider {
        workers = workers.min(effective_parallelism(cfg.parallelism, p.as_ref()));
    }
    let ctx = EvalContext {
        cfg: &cfg,
        mode,
        retriever: retriever.as_ref(),
        compressor: compressor.as_ref().zip(compressor_provider.as_deref()),
        cached: &cached,
        reader: &reader,
        reader_provider: reader_provider.as_ref(),
        costs: &costs,
        no_timings: a.no_timings,
    };
    let outcomes = run_ordered(&chosen, workers, |_, ex| evaluate_one(&ctx, ex));

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (ex, out) in chosen.iter().zip(outcomes) {
        match out {
            Ok(r) => records.push(r),
            Err(e) => failures.push(Failure {
                example_id: ex.id.clone(),
                error: format!("{e:#}"),
            }),
        }
    }
    if records.is_empty() {
        bail!("no question could be evaluated ({} failures)", failures.len());
    }
    let metrics = aggregate(&records)?;
    let report = RunReport {
        mode,
        evaluated: records.len(),
        failed: failures.len(),
        metrics: &metrics,
    };
    ensure_dir(&out_dir)?;
    write_json(&out_dir.join("report.json"), &report)?;
    let table = format!("mode: {mode}\nfailed: {}\n\n{}", failures.len(), metrics.to_table());
    write_text(&out_dir.join("report.txt"), &table)?;
    corpus::write_jsonl(&out_dir.join("records.jsonl"), &records)?;
    corpus::write_jsonl(&out_dir.join("failures.jsonl"), &failures)?;
    write_manifest(
        "evaluate",
        &cfg,
        &out_dir,
        &["report.json", "report.txt", "records.jsonl", "failures.jsonl"],
    )?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------
// build-dataset
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct Skipped {
    example_id: String,
    scenario: Scenario,
    reason: String,
}

/// Gold documents first, then retrieved non-gold documents as distractors.
fn distractor_pool(
    ex: &QaExample,
    retrieved: &[Document],
    corpus: &HashMap<String, Document>,
    segment: usize,
    segment_size: usize,
) -> Result<Vec<Document>, String> {
    let gold_ids = ex
        .gold_doc_ids
        .as_ref()
        .filter(|g| !g.is_empty())
        .ok_or("no gold_doc_ids")?;
    let gold: Vec<Document> = gold_ids
        .iter()
        .map(|id| {
            corpus
                .get(id)
                .cloned()
                .ok_or(format!("gold document {id:?} not in corpus"))
        })
        .collect::<Result<_, _>>()?;
    let distractors: Vec<Document> = retrieved
        .iter()
        .filter(|d| !gold_ids.contains(&d.id))
        .cloned()
        .collect();
    plant_gold(&gold, &distractors, segment, segment_size)
}

fn cmd_build_dataset(a: &RunArgs) -> Result<()> {
    let cfg = a.resolve().usage()?;
    (|| -> Result<()> {
        cfg.validate_common()?;
        cfg.validate_provider("teacher", &cfg.teacher)?;
        load_template(&cfg.templates.teacher, TEACHER_TEMPLATE_ID, COMPRESS_SLOTS)?;
        load_template(&cfg.templates.compress, COMPRESS_TEMPLATE_ID, COMPRESS_SLOTS)?;
        if cfg.datagen.scenarios.is_empty() {
            bail!("datagen.scenarios is empty");
        }
        if let Some(s) = cfg.datagen.gold_segment {
            let max = cfg.compression.effective_max_iterations();
            if s < 1 || s > max {
                bail!("gold_segment must be in 1..={max}, got {s}");
            }
        }
        cfg.output_dir()?;
        Ok(())
    })()
    .usage()?;
    let out_dir = cfg.output_dir()?.to_path_buf();
    let (all, chosen) = load_examples(&cfg).usage()?;
    if a.dry_run {
        dry_run(
            "build-dataset",
            &cfg,
            &[
                format!("{} of {} questions (seed {})", chosen.len(), all.len(), cfg.seed),
                format!("scenarios {:?}", cfg.datagen.scenarios),
                format!(
                    "write instances.raw.jsonl, instances.jsonl, sft.jsonl, skipped.jsonl, stats.json, stats.txt, manifest.json to {}",
                    out_dir.display()
                ),
            ],
        );
        return Ok(());
    }

    let teacher_template = load_template(&cfg.templates.teacher, TEACHER_TEMPLATE_ID, COMPRESS_SLOTS)?;
    let builder = DatasetBuilder::with_template(cfg.compression.clone(), teacher_template).usage()?;
    let teacher = provider_for("teacher", &cfg.teacher, &all)?;
    let retriever = Retriever::open(&cfg)?;
    let segment_size = cfg.compression.segment_size;

    // gold segments are drawn up front, in question order, so they do not
    // depend on scheduling
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let segments: Vec<usize> = chosen
        .iter()
        .map(|_| {
            cfg.datagen
                .gold_segment
                .unwrap_or_else(|| rng.random_range(1..=cfg.compression.effective_max_iterations()))
        })
        .collect();

    let mut jobs: Vec<(QaExample, ScenarioSpec)> = Vec::new();
    let mut skipped: Vec<Skipped> = Vec::new();
    for (ex, &segment) in chosen.iter().zip(&segments) {
        let (_, retrieved) = retriever.retrieve(&ex.question, cfg.compression.top_k)?;
        for &scenario in &cfg.datagen.scenarios {
            let spec = match scenario {
                Scenario::Realistic => Ok(ScenarioSpec::realistic(retrieved.clone())),
                Scenario::Distractor => distractor_pool(ex, &retrieved, retriever.corpus(), segment, segment_size)
                    .and_then(|pool| ScenarioSpec::distractor(ex, pool).map_err(|e| e.to_string())),
            };
            match spec {
                Ok(s) if s.documents.is_empty() => skipped.push(Skipped {
                    example_id: ex.id.clone(),
                    scenario,
                    reason: "no documents retrieved".into(),
                }),
                Ok(s) => jobs.push((ex.clone(), s)),
                Err(reason) => skipped.push(Skipped {
                    example_id: ex.id.clone(),
                    scenario,
                    reason,
                }),
            }
        }
    }

    let outcomes: Vec<DatagenOutcome> = builder
        .build_batch(&jobs, teacher.as_ref(), cfg.parallelism)
        .into_iter()
        .collect::<Result<_, _>>()?;
    let mut raw: Vec<TrainingInstance> = Vec::new();
    for o in outcomes {
        if let Some(reason) = &o.skipped {
            skipped.push(Skipped {
                example_id: o.example_id.clone(),
                scenario: o.scenario,
                reason: reason.clone(),
            });
        }
        raw.extend(o.instances);
    }
    let kept = filter_instances(&raw);
    let mut stats = DatasetStats::from_instances(&kept);
    stats.skipped_examples = skipped.len();
    stats.dropped_by_filter = raw.len() - kept.len();

    ensure_dir(&out_dir)?;
    let sft_template = load_template(&cfg.templates.compress, COMPRESS_TEMPLATE_ID, COMPRESS_SLOTS)?;
    corpus::write_jsonl(&out_dir.join("instances.raw.jsonl"), &raw)?;
    corpus::write_jsonl(&out_dir.join("instances.jsonl"), &kept)?;
    ctxpress::datagen::export_sft(&kept, &sft_template, segment_size, out_dir.join("sft.jsonl"))?;
    corpus::write_jsonl(&out_dir.join("skipped.jsonl"), &skipped)?;
    write_json(&out_dir.join("stats.json"), &stats)?;
    write_text(&out_dir.join("stats.txt"), &stats.to_table())?;
    write_manifest(
        "build-dataset",
        &cfg,
        &out_dir,
        &[
            "instances.raw.jsonl",
            "instances.jsonl",
            "sft.jsonl",
            "skipped.jsonl",
            "stats.json",
            "stats.txt",
        ],
    )?;
    print!("{}", stats.to_table());
    Ok(())
}
