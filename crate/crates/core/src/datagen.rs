//! Training-data construction for the compressor.
//!
//! A teacher provider runs the same segment loop as [`crate::compression`]
//! but answers in three sections (selected sentences, summary, evaluation).
//! Every executed step becomes one [`TrainingInstance`]. Instances are then
//! filtered, grouped by scenario and condition, and exported as SFT pairs.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::run_ordered;
use crate::compression::{
    self, effective_parallelism, find_label, parse_condition, segment_documents, split_evaluation, CompactConfig,
    CompressionError, Condition, LoopInput, ParseError, ParsedOutput, Segment, COMPLETE_TOKEN, INCOMPLETE_TOKEN,
};
use crate::corpus::{self, CorpusError, Document, QaExample};
use crate::eval::contains_answer;
use crate::provider::{GenerationRequest, Provider, ProviderError, RequestRole};
use crate::template::{PromptTemplate, TemplateError, COMPRESS_SLOTS, TEACHER_TEMPLATE_ID};

/// Sentence every teacher template must carry verbatim.
pub const TEACHER_RESTRICTION: &str =
    "DO NOT make assumptions or attempt to answer the question; your job is to summarize only.";

/// Compressed text the oracle teacher emits before it has seen anything relevant.
pub const NOTHING_RELEVANT: &str = "No relevant information found yet.";

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("scenario for {example:?}: {message}")]
    Scenario { example: String, message: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Io(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scenario {
    Realistic,
    Distractor,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Realistic => "REALISTIC",
            Scenario::Distractor => "DISTRACTOR",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scenario kind plus the ranked documents the teacher will see.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub kind: Scenario,
    pub documents: Vec<Document>,
}

impl ScenarioSpec {
    /// Documents from an actual retriever's top-k.
    pub fn realistic(documents: Vec<Document>) -> Self {
        ScenarioSpec {
            kind: Scenario::Realistic,
            documents,
        }
    }

    /// A predefined pool that must contain every gold document of `example`.
    pub fn distractor(example: &QaExample, documents: Vec<Document>) -> Result<Self, DatagenError> {
        let bad = |message: String| DatagenError::Scenario {
            example: example.id.clone(),
            message,
        };
        let gold = example
            .gold_doc_ids
            .as_ref()
            .filter(|g| !g.is_empty())
            .ok_or_else(|| bad("distractor scenarios need gold_doc_ids".into()))?;
        if let Some(missing) = gold.iter().find(|g| !documents.iter().any(|d| &d.id == *g)) {
            return Err(bad(format!("gold document {missing:?} is not in the pool")));
        }
        Ok(ScenarioSpec {
            kind: Scenario::Distractor,
            documents,
        })
    }
}

/// Builds a ranked pool with the gold documents opening segment `segment`
/// (1-based) and distractors everywhere else, in their given order.
pub fn plant_gold(
    gold: &[Document],
    distractors: &[Document],
    segment: usize,
    segment_size: usize,
) -> Result<Vec<Document>, String> {
    if segment < 1 || segment_size < 1 {
        return Err("segment and segment_size must be >= 1".into());
    }
    if gold.is_empty() || gold.len() > segment_size {
        return Err(format!("need 1..={segment_size} gold documents, got {}", gold.len()));
    }
    let before = (segment - 1) * segment_size;
    if distractors.len() < before {
        return Err(format!(
            "segment {segment} needs {before} preceding distractors, only {} available",
            distractors.len()
        ));
    }
    let mut pool = distractors[..before].to_vec();
    pool.extend_from_slice(gold);
    pool.extend_from_slice(&distractors[before..]);
    Ok(pool)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub example_id: String,
    pub question: String,
    /// Gold answers, used by [`filter_instances`].
    pub answers: Vec<String>,
    pub step: usize,
    pub prev_context: String,
    pub segment_docs: Vec<Document>,
    pub target_selected_sentences: Vec<String>,
    pub target_compressed: String,
    pub target_rationale: String,
    pub target_condition: Condition,
    pub scenario: Scenario,
    pub group: String,
}

impl TrainingInstance {
    /// The three-part target: selected sentences, summary, evaluation.
    pub fn response(&self) -> String {
        let selected = if self.target_selected_sentences.is_empty() {
            "None".to_string()
        } else {
            self.target_selected_sentences.join("\n")
        };
        let evaluation = if self.target_rationale.is_empty() {
            self.target_condition.token().to_string()
        } else {
            format!("{} {}", self.target_rationale, self.target_condition.token())
        };
        format!(
            "Selected Sentences:\n{selected}\nSummary: {}\nEvaluation: {evaluation}",
            self.target_compressed
        )
    }
}

pub fn categorize(instance: &TrainingInstance) -> String {
    group_name(instance.scenario, instance.target_condition)
}

pub fn group_name(scenario: Scenario, condition: Condition) -> String {
    format!("{}-{}", scenario.as_str(), condition.as_str())
}

// ---------------------------------------------------------------------------
// Teacher output
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutput {
    pub selected_sentences: Vec<String>,
    pub compressed: String,
    pub rationale: String,
    pub condition: Condition,
    pub token_found: bool,
}

fn strip_tokens(s: &str) -> String {
    s.replace(COMPLETE_TOKEN, "")
        .replace(INCOMPLETE_TOKEN, "")
        .trim()
        .to_string()
}

/// Parses `Selected Sentences:` / `Summary:` / `Evaluation:` output. A missing
/// selection section yields no sentences; an empty summary is an error.
pub fn parse_teacher_output(raw: &str) -> Result<TeacherOutput, ParseError> {
    if raw.trim().is_empty() {
        return Err(ParseError("empty teacher output".into()));
    }
    let (body, eval_section) = split_evaluation(raw);
    let summary_at =
        find_label(body, "summary:", 0).ok_or_else(|| ParseError("teacher output has no Summary: section".into()))?;
    let compressed = strip_tokens(&body[summary_at + "summary:".len()..]);
    if compressed.is_empty() {
        return Err(ParseError("teacher summary is empty".into()));
    }
    let selected_sentences = match find_label(&body[..summary_at], "selected sentences:", 0) {
        Some(p) => body[p + "selected sentences:".len()..summary_at]
            .lines()
            .map(|l| strip_tokens(l.trim().trim_start_matches(['-', '*']).trim()))
            .filter(|l| !l.is_empty() && !l.eq_ignore_ascii_case("none"))
            .collect(),
        None => Vec::new(),
    };
    let eval = parse_condition(eval_section);
    Ok(TeacherOutput {
        selected_sentences,
        compressed,
        rationale: eval.rationale,
        condition: eval.condition,
        token_found: eval.token_found,
    })
}

// ---------------------------------------------------------------------------
// Instance construction
// ---------------------------------------------------------------------------

/// Checks a teacher template: compressor slots plus the restriction sentence.
pub fn validate_teacher_template(template: &PromptTemplate) -> Result<(), TemplateError> {
    template.require(COMPRESS_SLOTS)?;
    if !template.literal_text().contains(TEACHER_RESTRICTION) {
        return Err(TemplateError::MissingText {
            id: template.id().to_string(),
            text: TEACHER_RESTRICTION.to_string(),
        });
    }
    Ok(())
}

/// Instances from one example. A teacher failure ends the example early;
/// instances from the steps before it are kept and the failure is recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatagenOutcome {
    pub example_id: String,
    pub scenario: Scenario,
    pub instances: Vec<TrainingInstance>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone)]
pub struct DatasetBuilder {
    config: CompactConfig,
    template: PromptTemplate,
}

impl DatasetBuilder {
    /// Uses the built-in teacher template.
    pub fn new(config: CompactConfig) -> Result<Self, DatagenError> {
        Self::with_template(config, PromptTemplate::builtin(TEACHER_TEMPLATE_ID)?)
    }

    pub fn with_template(config: CompactConfig, template: PromptTemplate) -> Result<Self, DatagenError> {
        config.validate()?;
        validate_teacher_template(&template)?;
        Ok(DatasetBuilder { config, template })
    }

    pub fn config(&self) -> &CompactConfig {
        &self.config
    }

    pub fn build_instances(
        &self,
        example: &QaExample,
        scenario: &ScenarioSpec,
        teacher: &dyn Provider,
    ) -> Result<DatagenOutcome, DatagenError> {
        let docs = &scenario.documents[..scenario.documents.len().min(self.config.top_k)];
        let segments = segment_documents(docs, self.config.segment_size)?;
        let tokenizer = corpus::tokenizer(&self.config.token_scheme)?;
        let input = LoopInput {
            key: &example.id,
            question: &example.question,
            segments: &segments,
            max_steps: self.config.effective_max_iterations(),
            segment_size: self.config.segment_size,
            max_generated_tokens: self.config.max_generated_tokens,
            template: &self.template,
            tokenizer: tokenizer.as_ref(),
        };
        let outcome = compression::run_loop(&input, teacher, &|raw| {
            parse_teacher_output(raw).map(|o| ParsedOutput {
                context: o.compressed.clone(),
                evaluation: compression::TerminationEvaluation {
                    rationale: o.rationale.clone(),
                    condition: o.condition,
                    token_found: o.token_found,
                },
                extra: o.selected_sentences,
            })
        });
        let instances = outcome
            .steps
            .into_iter()
            .map(|s| {
                let mut inst = TrainingInstance {
                    example_id: example.id.clone(),
                    question: example.question.clone(),
                    answers: example.answers.clone(),
                    step: s.t,
                    prev_context: s.prev_context,
                    segment_docs: s.segment.documents,
                    target_selected_sentences: s.parsed.extra,
                    target_compressed: s.parsed.context,
                    target_rationale: s.parsed.evaluation.rationale,
                    target_condition: s.parsed.evaluation.condition,
                    scenario: scenario.kind,
                    group: String::new(),
                };
                inst.group = categorize(&inst);
                inst
            })
            .collect();
        let skipped = outcome.error.map(|e| {
            log::warn!("example {:?}: teacher failed, keeping earlier steps: {e}", example.id);
            e.to_string()
        });
        Ok(DatagenOutcome {
            example_id: example.id.clone(),
            scenario: scenario.kind,
            instances,
            skipped,
        })
    }

    /// Runs examples concurrently; outcomes come back in input order.
    pub fn build_batch(
        &self,
        jobs: &[(QaExample, ScenarioSpec)],
        teacher: &dyn Provider,
        parallelism: usize,
    ) -> Vec<Result<DatagenOutcome, DatagenError>> {
        let workers = effective_parallelism(parallelism, teacher);
        run_ordered(jobs, workers, |_, (example, scenario)| {
            self.build_instances(example, scenario, teacher)
        })
    }
}

/// One-shot helper with the built-in teacher template.
pub fn build_instances(
    example: &QaExample,
    scenario: &ScenarioSpec,
    config: &CompactConfig,
    teacher: &dyn Provider,
) -> Result<DatagenOutcome, DatagenError> {
    DatasetBuilder::new(config.clone())?.build_instances(example, scenario, teacher)
}

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Whether every selected sentence occurs (whitespace-insensitively) in a
/// segment document or in the previous context.
pub fn is_grounded(instance: &TrainingInstance) -> bool {
    let sources: Vec<String> = instance
        .segment_docs
        .iter()
        .flat_map(|d| [collapse_ws(&d.title), collapse_ws(&d.text)])
        .chain(std::iter::once(collapse_ws(&instance.prev_context)))
        .collect();
    instance.target_selected_sentences.iter().all(|s| {
        let s = collapse_ws(s);
        sources.iter().any(|src| src.contains(&s))
    })
}

/// Why an instance would be dropped, if it would be.
pub fn rejection_reason(instance: &TrainingInstance) -> Option<&'static str> {
    if instance.target_compressed.trim().is_empty() {
        return Some("empty compressed text");
    }
    if instance.target_condition == Condition::Complete
        && !contains_answer(&instance.target_compressed, &instance.answers)
    {
        return Some("COMPLETE without a gold answer in the compressed text");
    }
    if !is_grounded(instance) {
        return Some("selected sentence not found in the documents or previous context");
    }
    None
}

/// Keeps instances with no [`rejection_reason`], in their original order.
pub fn filter_instances(instances: &[TrainingInstance]) -> Vec<TrainingInstance> {
    instances
        .iter()
        .filter(|i| rejection_reason(i).is_none())
        .cloned()
        .collect()
}

// ---------------------------------------------------------------------------
// Export and statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub id: String,
    pub step: usize,
    pub prompt: String,
    pub response: String,
    pub scenario: Scenario,
    pub group: String,
}

/// The compressor prompt the student sees for this instance.
pub fn sft_prompt(
    instance: &TrainingInstance,
    template: &PromptTemplate,
    segment_size: usize,
) -> Result<String, TemplateError> {
    let segment = Segment {
        index: instance.step,
        documents: instance.segment_docs.clone(),
    };
    compression::build_compressor_prompt(
        &instance.question,
        &segment,
        &instance.prev_context,
        segment_size,
        template,
    )
}

pub fn sft_records(
    instances: &[TrainingInstance],
    template: &PromptTemplate,
    segment_size: usize,
) -> Result<Vec<SftRecord>, TemplateError> {
    instances
        .iter()
        .map(|i| {
            Ok(SftRecord {
                id: i.example_id.clone(),
                step: i.step,
                prompt: sft_prompt(i, template, segment_size)?,
                response: i.response(),
                scenario: i.scenario,
                group: i.group.clone(),
            })
        })
        .collect()
}

/// Writes SFT pairs as JSONL in instance order.
pub fn export_sft(
    instances: &[TrainingInstance],
    template: &PromptTemplate,
    segment_size: usize,
    path: impl AsRef<Path>,
) -> Result<usize, DatagenError> {
    let records = sft_records(instances, template, segment_size)?;
    corpus::write_jsonl(path.as_ref(), &records)?;
    Ok(records.len())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub instances: usize,
    pub examples: usize,
    pub skipped_examples: usize,
    /// Raw instances removed by the grounding filter.
    #[serde(default)]
    pub dropped_by_filter: usize,
    pub groups: BTreeMap<String, usize>,
    /// step -> condition -> count
    pub per_step: BTreeMap<usize, BTreeMap<String, usize>>,
}

impl DatasetStats {
    pub fn from_instances(instances: &[TrainingInstance]) -> Self {
        let mut stats = DatasetStats {
            instances: instances.len(),
            ..Default::default()
        };
        for g in [Scenario::Realistic, Scenario::Distractor]
            .into_iter()
            .flat_map(|s| [group_name(s, Condition::Complete), group_name(s, Condition::Incomplete)])
        {
            stats.groups.insert(g, 0);
        }
        let mut examples = std::collections::BTreeSet::new();
        for i in instances {
            examples.insert(&i.example_id);
            *stats.groups.entry(i.group.clone()).or_default() += 1;
            *stats
                .per_step
                .entry(i.step)
                .or_default()
                .entry(i.target_condition.as_str().to_string())
                .or_default() += 1;
        }
        stats.examples = examples.len();
        stats
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "instances: {}\nexamples:  {}\nskipped:   {}\ndropped:   {}\n\n{:<24}{:>8}\n",
            self.instances, self.examples, self.skipped_examples, self.dropped_by_filter, "group", "count"
        );
        for (g, n) in &self.groups {
            out.push_str(&format!("{g:<24}{n:>8}\n"));
        }
        out.push_str(&format!("\n{:<8}{:>10}{:>12}\n", "step", "COMPLETE", "INCOMPLETE"));
        for (step, by) in &self.per_step {
            let get = |c: &str| by.get(c).copied().unwrap_or(0);
            out.push_str(&format!("{step:<8}{:>10}{:>12}\n", get("COMPLETE"), get("INCOMPLETE")));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Completeness-oracle teacher
// ---------------------------------------------------------------------------

/// Splits text after `.`, `!` or `?` followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?') && bytes.get(i + 1).is_some_and(|n| n.is_ascii_whitespace()) {
            let s = text[start..=i].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + 1;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Deterministic teacher that knows each example's gold answers. It selects
/// the segment sentences mentioning an answer, appends them to the previous
/// context, and reports COMPLETE once an answer is in the context.
#[derive(Debug, Clone, Default)]
pub struct AnswerOracleTeacher {
    name: String,
    answers: Arc<HashMap<String, Vec<String>>>,
}

impl AnswerOracleTeacher {
    pub fn new<'a>(name: impl Into<String>, examples: impl IntoIterator<Item = &'a QaExample>) -> Self {
        AnswerOracleTeacher {
            name: name.into(),
            answers: Arc::new(
                examples
                    .into_iter()
                    .map(|e| (e.id.clone(), e.answers.clone()))
                    .collect(),
            ),
        }
    }

    pub fn respond(&self, key: &str, documents: &[Document], previous_context: &str) -> Result<String, ProviderError> {
        let answers = self
            .answers
            .get(key)
            .ok_or_else(|| ProviderError::Script(format!("{}: no answers registered for {key:?}", self.name)))?;
        let selected: Vec<&str> = documents
            .iter()
            .flat_map(|d| split_sentences(&d.text))
            .filter(|s| contains_answer(s, answers))
            .collect();
        let mut compressed = previous_context.trim().to_string();
        if compressed == NOTHING_RELEVANT {
            compressed.clear();
        }
        for s in &selected {
            if !compressed.is_empty() {
                compressed.push(' ');
            }
            compressed.push_str(s);
        }
        if compressed.is_empty() {
            compressed = NOTHING_RELEVANT.to_string();
        }
        let (rationale, condition) = if contains_answer(&compressed, answers) {
            ("The compressed text states the answer.", Condition::Complete)
        } else {
            (
                "The compressed text does not yet state the answer.",
                Condition::Incomplete,
            )
        };
        let selected = if selected.is_empty() {
            "None".to_string()
        } else {
            selected.join("\n")
        };
        Ok(format!(
            "Selected Sentences:\n{selected}\nSummary: {compressed}\nEvaluation: {rationale} {}",
            condition.token()
        ))
    }
}

impl Provider for AnswerOracleTeacher {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, request: &GenerationRequest<'_>) -> Result<String, ProviderError> {
        match request.role {
            RequestRole::Compress(ctx) => self.respond(ctx.key, ctx.documents, ctx.previous_context),
            _ => Err(ProviderError::Script(format!(
                "{}: the answer oracle only handles compression steps",
                self.name
            ))),
        }
    }
}
