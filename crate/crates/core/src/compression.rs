//! Segment-wise active compression with early termination.
//!
//! The ranked documents are split into segments of `segment_size`. Step `t`
//! sends the question, segment `t` and the compressed context from step
//! `t - 1` to the compressor, which answers with an updated context and an
//! evaluation ending in `[COMPLETE]` or `[INCOMPLETE]`. The loop stops at the
//! first `[COMPLETE]`, when segments run out, or at `max_iterations`.
//!
//! Compressor output must carry two labeled sections:
//!
//! ```text
//! Summary: <compressed context>
//! Evaluation: <rationale> [COMPLETE]
//! ```

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::run_ordered;
use crate::corpus::{self, CorpusError, Document, TokenCount, Tokenizer};
use crate::eval;
use crate::provider::{GenerationRequest, Provider, ProviderError, RequestRole, StepContext};
use crate::template::{PromptTemplate, TemplateError, COMPRESS_SLOTS, COMPRESS_TEMPLATE_ID};

pub const COMPLETE_TOKEN: &str = "[COMPLETE]";
pub const INCOMPLETE_TOKEN: &str = "[INCOMPLETE]";
/// Rendered into the previous-context slot at step 1.
pub const EMPTY_CONTEXT_MARKER: &str = "(no previous context)";

#[derive(Debug, Error)]
pub enum CompressionError {
    #[error("no documents to compress")]
    EmptyDocuments,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Tokens(#[from] CorpusError),
    #[error("step {step}: {source}")]
    Provider {
        step: usize,
        #[source]
        source: ProviderError,
    },
    #[error("step {step}: provider output could not be parsed after {attempts} attempts: {message}")]
    Format {
        step: usize,
        attempts: usize,
        message: String,
    },
    #[error("step {step}: prompt is {prompt_tokens} tokens, provider limit is {limit}")]
    TokenBudget {
        step: usize,
        prompt_tokens: usize,
        limit: usize,
    },
    #[error("compressed context has zero tokens")]
    EmptyCompression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompactConfig {
    /// Documents per segment.
    pub segment_size: usize,
    pub top_k: usize,
    /// `None` means one iteration per segment.
    pub max_iterations: Option<usize>,
    pub max_generated_tokens: usize,
    pub prompt_template_id: String,
    pub token_scheme: String,
}

impl Default for CompactConfig {
    fn default() -> Self {
        CompactConfig {
            segment_size: 5,
            top_k: 30,
            max_iterations: None,
            max_generated_tokens: 700,
            prompt_template_id: COMPRESS_TEMPLATE_ID.to_string(),
            token_scheme: corpus::WHITESPACE_SCHEME.to_string(),
        }
    }
}

impl CompactConfig {
    pub fn segment_count(&self) -> usize {
        self.top_k.div_ceil(self.segment_size.max(1))
    }

    pub fn effective_max_iterations(&self) -> usize {
        self.max_iterations.unwrap_or_else(|| self.segment_count())
    }

    pub fn validate(&self) -> Result<(), CompressionError> {
        let bad = |m: String| Err(CompressionError::InvalidConfig(m));
        if self.segment_size < 1 {
            return bad("segment_size must be >= 1".into());
        }
        if self.top_k < 1 {
            return bad("top_k must be >= 1".into());
        }
        if self.max_generated_tokens < 1 {
            return bad("max_generated_tokens must be >= 1".into());
        }
        if let Some(m) = self.max_iterations {
            if m < 1 || m > self.segment_count() {
                return bad(format!(
                    "max_iterations must be in 1..={} for top_k={} and segment_size={}, got {m}",
                    self.segment_count(),
                    self.top_k,
                    self.segment_size
                ));
            }
        }
        corpus::tokenizer(&self.token_scheme)?;
        Ok(())
    }
}

/// The `index`-th group of consecutive ranked documents (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub index: usize,
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Condition {
    Complete,
    Incomplete,
}

impl Condition {
    pub fn token(self) -> &'static str {
        match self {
            Condition::Complete => COMPLETE_TOKEN,
            Condition::Incomplete => INCOMPLETE_TOKEN,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Complete => "COMPLETE",
            Condition::Incomplete => "INCOMPLETE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminationEvaluation {
    pub rationale: String,
    pub condition: Condition,
    /// Whether a condition token literally appeared; `false` forces INCOMPLETE.
    pub token_found: bool,
}

pub(crate) mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionStep {
    pub t: usize,
    pub segment: Segment,
    pub prev_context: String,
    pub compressed_context: String,
    pub evaluation: TerminationEvaluation,
    pub raw_provider_output: String,
    /// Prompt tokens summed over all attempts of this step.
    pub input_tokens: TokenCount,
    pub output_tokens: TokenCount,
    /// Provider calls made for this step (2 when the first output was unparseable).
    pub attempts: usize,
    #[serde(with = "duration_secs")]
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionResult {
    pub question: String,
    pub steps: Vec<CompressionStep>,
    pub final_context: String,
    pub terminated_early: bool,
    pub segment_count: usize,
    pub source_token_total: TokenCount,
    pub compressed_token_total: TokenCount,
    pub compression_rate: f64,
}

impl CompressionResult {
    pub fn last_step(&self) -> &CompressionStep {
        self.steps
            .last()
            .expect("a compression result always has at least one step")
    }

    pub fn final_evaluation(&self) -> &TerminationEvaluation {
        &self.last_step().evaluation
    }

    pub fn total_elapsed(&self) -> Duration {
        self.steps.iter().map(|s| s.elapsed).sum()
    }

    pub fn provider_input_tokens(&self) -> usize {
        self.steps.iter().map(|s| s.input_tokens.value).sum()
    }

    pub fn provider_output_tokens(&self) -> usize {
        self.steps.iter().map(|s| s.output_tokens.value).sum()
    }

    /// Zeroes every wall-clock measurement, for byte-stable artifacts.
    pub fn clear_timings(&mut self) {
        for s in &mut self.steps {
            s.elapsed = Duration::ZERO;
        }
    }
}

/// Splits ranked documents into consecutive segments of `j`; the last one may
/// be shorter.
pub fn segment_documents(docs: &[Document], j: usize) -> Result<Vec<Segment>, CompressionError> {
    if docs.is_empty() {
        return Err(CompressionError::EmptyDocuments);
    }
    if j < 1 {
        return Err(CompressionError::InvalidConfig("segment size must be >= 1".into()));
    }
    Ok(docs
        .chunks(j)
        .enumerate()
        .map(|(i, chunk)| Segment {
            index: i + 1,
            documents: chunk.to_vec(),
        })
        .collect())
}

/// Numbered document blocks; numbering continues across segments.
pub fn render_segment(segment: &Segment, segment_size: usize) -> String {
    let offset = (segment.index - 1) * segment_size;
    segment
        .documents
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let n = offset + i + 1;
            if d.title.is_empty() {
                format!("[{n}] {}", d.text)
            } else {
                format!("[{n}] Title: {}\n{}", d.title, d.text)
            }
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn build_compressor_prompt(
    question: &str,
    segment: &Segment,
    prev_context: &str,
    segment_size: usize,
    template: &PromptTemplate,
) -> Result<String, TemplateError> {
    template.require(COMPRESS_SLOTS)?;
    let prev = if prev_context.trim().is_empty() {
        EMPTY_CONTEXT_MARKER
    } else {
        prev_context
    };
    template.render(&[
        ("question", question),
        ("documents", &render_segment(segment, segment_size)),
        ("previous_context", prev),
    ])
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{0}")]
pub struct ParseError(pub String);

/// Case-insensitive ASCII search returning the byte offset.
pub(crate) fn find_label(haystack: &str, label: &str, from: usize) -> Option<usize> {
    let lower = haystack.as_bytes()[from..].to_ascii_lowercase();
    let needle = label.to_ascii_lowercase();
    lower
        .windows(needle.len())
        .position(|w| w == needle.as_bytes())
        .map(|p| p + from)
}

pub(crate) fn rfind_label(haystack: &str, label: &str) -> Option<usize> {
    let lower = haystack.to_ascii_lowercase();
    lower.rfind(&label.to_ascii_lowercase())
}

/// Reads the condition from an evaluation section: the last token wins; no
/// token means INCOMPLETE with `token_found = false`.
pub fn parse_condition(section: &str) -> TerminationEvaluation {
    let complete = section.rfind(COMPLETE_TOKEN);
    let incomplete = section.rfind(INCOMPLETE_TOKEN);
    let (condition, token_found) = match (complete, incomplete) {
        (None, None) => (Condition::Incomplete, false),
        (Some(_), None) => (Condition::Complete, true),
        (None, Some(_)) => (Condition::Incomplete, true),
        (Some(c), Some(i)) => (
            if c > i {
                Condition::Complete
            } else {
                Condition::Incomplete
            },
            true,
        ),
    };
    let rationale = section
        .replace(COMPLETE_TOKEN, "")
        .replace(INCOMPLETE_TOKEN, "")
        .trim()
        .to_string();
    TerminationEvaluation {
        rationale,
        condition,
        token_found,
    }
}

/// Splits raw output into `(body, evaluation section)`. The evaluation starts
/// at the last `Evaluation:` label; without one, at the first condition token.
pub(crate) fn split_evaluation(raw: &str) -> (&str, &str) {
    if let Some(p) = rfind_label(raw, "evaluation:") {
        return (&raw[..p], &raw[p + "evaluation:".len()..]);
    }
    let first_token = [raw.find(COMPLETE_TOKEN), raw.find(INCOMPLETE_TOKEN)]
        .into_iter()
        .flatten()
        .min();
    match first_token {
        Some(q) => (&raw[..q], &raw[q..]),
        None => (raw, ""),
    }
}

/// Splits compressor output into the compressed context and its evaluation.
pub fn parse_evaluation(raw: &str) -> Result<(String, TerminationEvaluation), ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError("empty provider output".into()));
    }
    let (body, eval_section) = split_evaluation(raw);
    let summary = match find_label(body, "summary:", 0) {
        Some(p) => &body[p + "summary:".len()..],
        None => body,
    };
    let context = summary.trim();
    if context.is_empty() {
        return Err(ParseError("compressed-context section is empty".into()));
    }
    Ok((context.to_string(), parse_condition(eval_section)))
}

// ---------------------------------------------------------------------------
// Loop engine, shared with dataset construction
// ---------------------------------------------------------------------------

pub(crate) struct ParsedOutput<P> {
    pub extra: P,
    pub context: String,
    pub evaluation: TerminationEvaluation,
}

pub(crate) struct LoopStep<P> {
    pub t: usize,
    pub segment: Segment,
    pub prev_context: String,
    pub raw: String,
    pub parsed: ParsedOutput<P>,
    pub attempts: usize,
    pub input_tokens: usize,
    pub output_tokens: usize,
    pub elapsed: Duration,
}

pub(crate) struct LoopOutcome<P> {
    pub steps: Vec<LoopStep<P>>,
    pub error: Option<CompressionError>,
}

pub(crate) struct LoopInput<'a> {
    pub key: &'a str,
    pub question: &'a str,
    pub segments: &'a [Segment],
    pub max_steps: usize,
    pub segment_size: usize,
    pub max_generated_tokens: usize,
    pub template: &'a PromptTemplate,
    pub tokenizer: &'a dyn Tokenizer,
}

/// Runs steps until COMPLETE, segments run out, or `max_steps`. Steps that
/// finished before a failure are kept in the outcome.
pub(crate) fn run_loop<P>(
    input: &LoopInput<'_>,
    provider: &dyn Provider,
    parse: &dyn Fn(&str) -> Result<ParsedOutput<P>, ParseError>,
) -> LoopOutcome<P> {
    let mut steps: Vec<LoopStep<P>> = Vec::new();
    let limit = input.max_steps.min(input.segments.len());
    for segment in &input.segments[..limit] {
        let t = segment.index;
        let prev_context = steps.last().map(|s| s.parsed.context.clone()).unwrap_or_default();
        let step = run_step(input, provider, parse, segment, prev_context);
        match step {
            Ok(step) => {
                let done = step.parsed.evaluation.condition == Condition::Complete;
                steps.push(step);
                if done {
                    break;
                }
            }
            Err(e) => {
                log::warn!("query {:?} aborted at step {t}: {e}", input.key);
                return LoopOutcome { steps, error: Some(e) };
            }
        }
    }
    LoopOutcome { steps, error: None }
}

fn run_step<P>(
    input: &LoopInput<'_>,
    provider: &dyn Provider,
    parse: &dyn Fn(&str) -> Result<ParsedOutput<P>, ParseError>,
    segment: &Segment,
    prev_context: String,
) -> Result<LoopStep<P>, CompressionError> {
    let t = segment.index;
    let prompt = build_compressor_prompt(
        input.question,
        segment,
        &prev_context,
        input.segment_size,
        input.template,
    )?;
    let prompt_tokens = input.tokenizer.count(&prompt);
    if let Some(limit) = provider.context_window() {
        if prompt_tokens > limit {
            return Err(CompressionError::TokenBudget {
                step: t,
                prompt_tokens,
                limit,
            });
        }
    }
    let request = GenerationRequest {
        prompt: &prompt,
        max_tokens: input.max_generated_tokens,
        role: RequestRole::Compress(StepContext {
            key: input.key,
            step: t,
            question: input.question,
            documents: &segment.documents,
            previous_context: &prev_context,
        }),
    };
    let started = Instant::now();
    let mut input_tokens = 0;
    let mut last_error = String::new();
    // an unparseable output gets exactly one retry with the identical prompt
    for attempt in 1..=2 {
        input_tokens += prompt_tokens;
        let raw = provider
            .generate(&request)
            .map_err(|source| CompressionError::Provider { step: t, source })?;
        match parse(&raw) {
            Ok(parsed) => {
                return Ok(LoopStep {
                    t,
                    segment: segment.clone(),
                    prev_context,
                    output_tokens: input.tokenizer.count(&raw),
                    raw,
                    parsed,
                    attempts: attempt,
                    input_tokens,
                    elapsed: started.elapsed(),
                })
            }
            Err(ParseError(m)) => {
                log::warn!(
                    "query {:?} step {t} attempt {attempt}: unparseable output: {m}",
                    input.key
                );
                last_error = m;
            }
        }
    }
    Err(CompressionError::Format {
        step: t,
        attempts: 2,
        message: last_error,
    })
}

// ---------------------------------------------------------------------------
// Public entry points
// ---------------------------------------------------------------------------

/// A configured compressor: validated config, template and tokenizer.
#[derive(Clone)]
pub struct Compressor {
    config: CompactConfig,
    template: PromptTemplate,
    tokenizer: Arc<dyn Tokenizer>,
}

impl std::fmt::Debug for Compressor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Compressor")
            .field("config", &self.config)
            .field("template", &self.template.id())
            .finish()
    }
}

impl Compressor {
    /// Uses the built-in template named by `config.prompt_template_id`.
    pub fn new(config: CompactConfig) -> Result<Self, CompressionError> {
        let template = PromptTemplate::builtin(&config.prompt_template_id)?;
        Self::with_template(config, template)
    }

    pub fn with_template(config: CompactConfig, template: PromptTemplate) -> Result<Self, CompressionError> {
        config.validate()?;
        template.require(COMPRESS_SLOTS)?;
        let tokenizer = corpus::tokenizer(&config.token_scheme)?;
        Ok(Compressor {
            config,
            template,
            tokenizer,
        })
    }

    pub fn config(&self) -> &CompactConfig {
        &self.config
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    fn count(&self, text: &str) -> TokenCount {
        TokenCount {
            value: self.tokenizer.count(text),
            scheme: self.config.token_scheme.clone(),
        }
    }

    /// Compresses the first `top_k` of `docs`. `key` identifies the query to
    /// providers (rule-table mocks key on it).
    pub fn compress(
        &self,
        key: &str,
        question: &str,
        docs: &[Document],
        provider: &dyn Provider,
    ) -> Result<CompressionResult, CompressionError> {
        let docs = &docs[..docs.len().min(self.config.top_k)];
        let segments = segment_documents(docs, self.config.segment_size)?;
        let source = self.count(&render_documents(docs));
        let input = LoopInput {
            key,
            question,
            segments: &segments,
            max_steps: self.config.effective_max_iterations(),
            segment_size: self.config.segment_size,
            max_generated_tokens: self.config.max_generated_tokens,
            template: &self.template,
            tokenizer: self.tokenizer.as_ref(),
        };
        let outcome = run_loop(&input, provider, &|raw| {
            parse_evaluation(raw).map(|(context, evaluation)| ParsedOutput {
                extra: (),
                context,
                evaluation,
            })
        });
        if let Some(e) = outcome.error {
            return Err(e);
        }
        let steps: Vec<CompressionStep> = outcome
            .steps
            .into_iter()
            .map(|s| CompressionStep {
                t: s.t,
                input_tokens: TokenCount {
                    value: s.input_tokens,
                    scheme: self.config.token_scheme.clone(),
                },
                output_tokens: TokenCount {
                    value: s.output_tokens,
                    scheme: self.config.token_scheme.clone(),
                },
                segment: s.segment,
                prev_context: s.prev_context,
                compressed_context: s.parsed.context,
                evaluation: s.parsed.evaluation,
                raw_provider_output: s.raw,
                attempts: s.attempts,
                elapsed: s.elapsed,
            })
            .collect();
        let last = steps.last().expect("at least one segment yields at least one step");
        let final_context = last.compressed_context.clone();
        let terminated_early = last.evaluation.condition == Condition::Complete && steps.len() < segments.len();
        let compressed = self.count(&final_context);
        let compression_rate =
            eval::compression_rate(source.value, compressed.value).map_err(|_| CompressionError::EmptyCompression)?;
        Ok(CompressionResult {
            question: question.to_string(),
            steps,
            final_context,
            terminated_early,
            segment_count: segments.len(),
            source_token_total: source,
            compressed_token_total: compressed,
            compression_rate,
        })
    }
}

/// The raw-document rendering a reader would otherwise receive: `title\ntext`
/// blocks separated by blank lines, in rank order.
pub fn render_documents(docs: &[Document]) -> String {
    docs.iter().map(Document::render).collect::<Vec<_>>().join("\n\n")
}

/// One-shot helper using the built-in template; the question doubles as key.
pub fn compress(
    question: &str,
    docs: &[Document],
    config: &CompactConfig,
    provider: &dyn Provider,
) -> Result<CompressionResult, CompressionError> {
    Compressor::new(config.clone())?.compress(question, question, docs, provider)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub key: String,
    pub question: String,
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFailure {
    pub index: usize,
    pub key: String,
    pub error: String,
}

/// Compresses independent queries concurrently (each query stays sequential).
/// Results come back in input order; a failed query does not stop the rest.
pub fn compress_batch(
    items: &[BatchItem],
    compressor: &Compressor,
    provider: &dyn Provider,
    parallelism: usize,
) -> Vec<Result<CompressionResult, BatchFailure>> {
    let workers = effective_parallelism(parallelism, provider);
    run_ordered(items, workers, |index, item| {
        compressor
            .compress(&item.key, &item.question, &item.documents, provider)
            .map_err(|e| BatchFailure {
                index,
                key: item.key.clone(),
                error: e.to_string(),
            })
    })
}

pub fn effective_parallelism(requested: usize, provider: &dyn Provider) -> usize {
    let requested = requested.max(1);
    provider
        .max_concurrency()
        .map_or(requested, |cap| requested.min(cap.max(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{FnProvider, ScriptedProvider};

    fn docs(n: usize) -> Vec<Document> {
        (1..=n)
            .map(|i| Document::new(format!("d{i}"), format!("Title {i}"), format!("body of document {i}")).unwrap())
            .collect()
    }

    fn out(summary: &str, cond: &str) -> String {
        format!("Summary: {summary}\nEvaluation: rationale here. {cond}")
    }

    #[test]
    fn segmentation_examples() {
        let s = segment_documents(&docs(30), 5).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(
            s[0].documents.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(),
            ["d1", "d2", "d3", "d4", "d5"]
        );
        let s = segment_documents(&docs(7), 5).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(
            s[1].documents.iter().map(|d| d.id.as_str()).collect::<Vec<_>>(),
            ["d6", "d7"]
        );
        assert_eq!(segment_documents(&docs(30), 10).unwrap().len(), 3);
        assert!(matches!(
            segment_documents(&[], 5),
            Err(CompressionError::EmptyDocuments)
        ));
        assert!(segment_documents(&docs(3), 0).is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = CompactConfig::default();
        assert_eq!((c.segment_size, c.top_k, c.max_generated_tokens), (5, 30, 700));
        assert_eq!(c.effective_max_iterations(), 6);
        c.validate().unwrap();
        let ten = CompactConfig {
            segment_size: 10,
            ..c.clone()
        };
        assert_eq!(ten.effective_max_iterations(), 3);
        let too_many = CompactConfig {
            max_iterations: Some(7),
            ..c.clone()
        };
        assert!(too_many.validate().is_err());
        let zero = CompactConfig {
            max_iterations: Some(0),
            ..c.clone()
        };
        assert!(zero.validate().is_err());
        let scheme = CompactConfig {
            token_scheme: "nope".into(),
            ..c
        };
        assert!(scheme.validate().is_err());
    }

    #[test]
    fn prompt_contents() {
        let t = PromptTemplate::builtin(COMPRESS_TEMPLATE_ID).unwrap();
        let segs = segment_documents(&docs(10), 5).unwrap();
        let p1 = build_compressor_prompt("Who conducts?", &segs[0], "", 5, &t).unwrap();
        assert!(p1.contains("Who conducts?"));
        assert!(p1.contains(EMPTY_CONTEXT_MARKER));
        for i in 1..=5 {
            assert!(p1.contains(&format!("body of document {i}")));
        }
        assert!(!p1.contains("body of document 6"));
        let p2 = build_compressor_prompt("Who conducts?", &segs[1], "C1 text verbatim", 5, &t).unwrap();
        assert!(p2.contains("C1 text verbatim"));
        assert!(!p2.contains(EMPTY_CONTEXT_MARKER));
        assert!(p2.contains("[6] Title: Title 6"));

        let bad = PromptTemplate::parse("bad", "{documents} {previous_context}");
        assert!(matches!(
            build_compressor_prompt("q", &segs[0], "", 5, &bad),
            Err(TemplateError::MissingSlot { .. })
        ));
        assert!(Compressor::with_template(CompactConfig::default(), bad).is_err());
    }

    #[test]
    fn parse_examples() {
        let (c, e) = parse_evaluation(
            "Summary: Eric Whitacre wrote for Conspirare. Evaluation: the context fully identifies the conductor. [COMPLETE]",
        )
        .unwrap();
        assert_eq!(c, "Eric Whitacre wrote for Conspirare.");
        assert_eq!(e.condition, Condition::Complete);
        assert!(e.token_found);
        assert_eq!(e.rationale, "the context fully identifies the conductor.");

        let (_, e) =
            parse_evaluation("Summary: X\nEvaluation: ...missing the ensemble's founding year. [INCOMPLETE]").unwrap();
        assert_eq!(e.condition, Condition::Incomplete);
        assert!(e.token_found);

        let (_, e) = parse_evaluation("Summary: X\nEvaluation: looks fine to me").unwrap();
        assert_eq!(e.condition, Condition::Incomplete);
        assert!(!e.token_found);

        let (_, e) = parse_evaluation("Summary: X\nEvaluation: [INCOMPLETE] on reflection [COMPLETE]").unwrap();
        assert_eq!(e.condition, Condition::Complete);
        let (_, e) = parse_evaluation("Summary: X\nEvaluation: [COMPLETE] no wait [INCOMPLETE]").unwrap();
        assert_eq!(e.condition, Condition::Incomplete);

        // unlabeled output: the token starts the evaluation
        let (c, e) = parse_evaluation("just the context [COMPLETE]").unwrap();
        assert_eq!(c, "just the context");
        assert_eq!(e.condition, Condition::Complete);

        assert!(parse_evaluation("").is_err());
        assert!(parse_evaluation("Summary:   \nEvaluation: [COMPLETE]").is_err());
    }

    #[test]
    fn stops_at_first_complete() {
        let p = ScriptedProvider::sequence(
            "m",
            [
                out("C1", INCOMPLETE_TOKEN),
                out("C2", COMPLETE_TOKEN),
                out("C3", COMPLETE_TOKEN),
            ],
        );
        let r = compress("q?", &docs(30), &CompactConfig::default(), &p).unwrap();
        assert_eq!(p.call_count(), 2);
        assert_eq!(r.final_context, "C2");
        assert!(r.terminated_early);
        assert_eq!(r.steps.len(), 2);
        assert_eq!(r.steps[1].prev_context, "C1");
    }

    #[test]
    fn runs_all_segments_without_complete() {
        let p = ScriptedProvider::sequence("m", (1..=6).map(|i| out(&format!("C{i}"), INCOMPLETE_TOKEN)));
        let r = compress("q?", &docs(30), &CompactConfig::default(), &p).unwrap();
        assert_eq!(p.call_count(), 6);
        assert!(!r.terminated_early);
        assert_eq!(r.final_evaluation().condition, Condition::Incomplete);
        assert_eq!(r.final_context, "C6");
    }

    #[test]
    fn complete_on_only_segment_is_not_early() {
        let p = ScriptedProvider::sequence("m", [out("C1", COMPLETE_TOKEN)]);
        let r = compress("q?", &docs(5), &CompactConfig::default(), &p).unwrap();
        assert_eq!(p.call_count(), 1);
        assert!(!r.terminated_early);
    }

    #[test]
    fn max_iterations_caps_calls() {
        let p = ScriptedProvider::sequence("m", (1..=6).map(|i| out(&format!("C{i}"), INCOMPLETE_TOKEN)));
        let cfg = CompactConfig {
            max_iterations: Some(2),
            ..Default::default()
        };
        let r = compress("q?", &docs(30), &cfg, &p).unwrap();
        assert_eq!(p.call_count(), 2);
        assert_eq!(r.steps.len(), 2);
    }

    #[test]
    fn parse_failure_is_retried_once() {
        let p = ScriptedProvider::sequence("m", ["", &out("C1", COMPLETE_TOKEN)]);
        let r = compress("q?", &docs(5), &CompactConfig::default(), &p).unwrap();
        assert_eq!(r.steps[0].attempts, 2);
        assert_eq!(p.call_count(), 2);
        assert_eq!(p.calls()[0].prompt, p.calls()[1].prompt);

        let p = ScriptedProvider::sequence("m", ["", "Summary:\nEvaluation: [COMPLETE]", "unused"]);
        let err = compress("q?", &docs(5), &CompactConfig::default(), &p).unwrap_err();
        assert!(matches!(
            err,
            CompressionError::Format {
                step: 1,
                attempts: 2,
                ..
            }
        ));
        assert_eq!(p.call_count(), 2);
    }

    #[test]
    fn token_budget_names_the_step() {
        let p = FnProvider::new("small", |_r: &GenerationRequest<'_>| Ok(out("C", INCOMPLETE_TOKEN)))
            .with_context_window(10);
        let err = compress("q?", &docs(10), &CompactConfig::default(), &p).unwrap_err();
        assert!(
            matches!(err, CompressionError::TokenBudget { step: 1, limit: 10, .. }),
            "{err}"
        );
    }

    #[test]
    fn provider_failure_names_the_step() {
        let p = ScriptedProvider::sequence("m", [out("C1", INCOMPLETE_TOKEN)]);
        let err = compress("q?", &docs(10), &CompactConfig::default(), &p).unwrap_err();
        assert!(matches!(err, CompressionError::Provider { step: 2, .. }), "{err}");
    }

    #[test]
    fn rates_use_all_top_k_docs() {
        let p = ScriptedProvider::sequence("m", [out("two words", COMPLETE_TOKEN)]);
        let d = docs(12);
        let r = compress("q?", &d, &CompactConfig::default(), &p).unwrap();
        let expected_source = crate::corpus::count_tokens(&render_documents(&d), "whitespace")
            .unwrap()
            .value;
        assert_eq!(r.source_token_total.value, expected_source);
        assert_eq!(r.compressed_token_total.value, 2);
        assert_eq!(r.compression_rate, expected_source as f64 / 2.0);
    }

    #[test]
    fn docs_beyond_top_k_are_ignored() {
        let p = ScriptedProvider::sequence("m", (1..=2).map(|i| out(&format!("C{i}"), INCOMPLETE_TOKEN)));
        let cfg = CompactConfig {
            top_k: 10,
            ..Default::default()
        };
        let r = compress("q?", &docs(30), &cfg, &p).unwrap();
        assert_eq!(r.segment_count, 2);
        assert_eq!(p.call_count(), 2);
    }
}
