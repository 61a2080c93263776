//! Answer generation from a rendered context.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compression::{duration_secs, CompressionResult};
use crate::corpus::{self, CorpusError, Document, TokenCount, Tokenizer};
use crate::provider::{GenerationRequest, Provider, ProviderError, RequestRole};
use crate::template::{PromptTemplate, TemplateError, READER_SLOTS, READER_TEMPLATE_ID};

/// Placed between the compressed text and the rationale.
pub const RATIONALE_SEPARATOR: &str = "\n\nRationale: ";
pub const DEFAULT_ANSWER_TOKENS: usize = 32;

#[derive(Debug, Error)]
pub enum ReaderError {
    #[error("context mode {mode} needs {needs}")]
    ModeMismatch { mode: ContextMode, needs: &'static str },
    #[error("unknown context mode {0:?}")]
    UnknownMode(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Tokens(#[from] CorpusError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ContextMode {
    CompressedOnly,
    RationaleOnly,
    CompressedPlusRationale,
    RawDocuments,
    OracleDocuments,
    ClosedBook,
}

impl ContextMode {
    pub const ALL: [ContextMode; 6] = [
        ContextMode::CompressedOnly,
        ContextMode::RationaleOnly,
        ContextMode::CompressedPlusRationale,
        ContextMode::RawDocuments,
        ContextMode::OracleDocuments,
        ContextMode::ClosedBook,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ContextMode::CompressedOnly => "COMPRESSED_ONLY",
            ContextMode::RationaleOnly => "RATIONALE_ONLY",
            ContextMode::CompressedPlusRationale => "COMPRESSED_PLUS_RATIONALE",
            ContextMode::RawDocuments => "RAW_DOCUMENTS",
            ContextMode::OracleDocuments => "ORACLE_DOCUMENTS",
            ContextMode::ClosedBook => "CLOSED_BOOK",
        }
    }

    /// Modes that read a [`CompressionResult`].
    pub fn needs_compression(self) -> bool {
        matches!(
            self,
            ContextMode::CompressedOnly | ContextMode::RationaleOnly | ContextMode::CompressedPlusRationale
        )
    }

    pub fn needs_documents(self) -> bool {
        matches!(self, ContextMode::RawDocuments | ContextMode::OracleDocuments)
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ContextMode {
    type Err = ReaderError;

    /// Accepts `COMPRESSED_ONLY`, `compressed-only` and similar spellings.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let canon = s.trim().to_ascii_uppercase().replace('-', "_");
        ContextMode::ALL
            .into_iter()
            .find(|m| m.as_str() == canon)
            .ok_or_else(|| ReaderError::UnknownMode(s.to_string()))
    }
}

/// What a context is rendered from.
#[derive(Debug, Clone, Copy)]
pub enum ContextSource<'a> {
    Compression(&'a CompressionResult),
    Documents(&'a [Document]),
    Nothing,
}

pub fn render_context(source: ContextSource<'_>, mode: ContextMode) -> Result<String, ReaderError> {
    use ContextMode::*;
    match (mode, source) {
        (ClosedBook, _) => Ok(String::new()),
        (CompressedOnly, ContextSource::Compression(r)) => Ok(r.final_context.clone()),
        (RationaleOnly, ContextSource::Compression(r)) => Ok(r.final_evaluation().rationale.clone()),
        (CompressedPlusRationale, ContextSource::Compression(r)) => Ok(format!(
            "{}{RATIONALE_SEPARATOR}{}",
            r.final_context,
            r.final_evaluation().rationale
        )),
        (RawDocuments | OracleDocuments, ContextSource::Documents(docs)) => {
            Ok(crate::compression::render_documents(docs))
        }
        (m, _) if m.needs_compression() => Err(ReaderError::ModeMismatch {
            mode,
            needs: "a compression result",
        }),
        _ => Err(ReaderError::ModeMismatch {
            mode,
            needs: "a document list",
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderAnswer {
    /// Provider output exactly as returned.
    pub text: String,
    pub input_tokens: TokenCount,
    pub output_tokens: TokenCount,
    #[serde(with = "duration_secs")]
    pub elapsed: Duration,
}

#[derive(Clone)]
pub struct Reader {
    template: PromptTemplate,
    tokenizer: Arc<dyn Tokenizer>,
    scheme: String,
    max_tokens: usize,
}

impl fmt::Debug for Reader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Reader")
            .field("template", &self.template.id())
            .field("scheme", &self.scheme)
            .field("max_tokens", &self.max_tokens)
            .finish()
    }
}

impl Reader {
    /// Built-in QA template with the given token scheme.
    pub fn new(scheme: &str) -> Result<Self, ReaderError> {
        Self::with_template(PromptTemplate::builtin(READER_TEMPLATE_ID)?, scheme)
    }

    pub fn with_template(template: PromptTemplate, scheme: &str) -> Result<Self, ReaderError> {
        template.require(READER_SLOTS)?;
        Ok(Reader {
            template,
            tokenizer: corpus::tokenizer(scheme)?,
            scheme: scheme.to_string(),
            max_tokens: DEFAULT_ANSWER_TOKENS,
        })
    }

    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens.max(1);
        self
    }

    pub fn build_prompt(&self, question: &str, context: &str) -> Result<String, ReaderError> {
        Ok(self.template.render(&[("question", question), ("context", context)])?)
    }

    pub fn answer(
        &self,
        key: &str,
        question: &str,
        context: &str,
        provider: &dyn Provider,
    ) -> Result<ReaderAnswer, ReaderError> {
        let prompt = self.build_prompt(question, context)?;
        let request = GenerationRequest {
            prompt: &prompt,
            max_tokens: self.max_tokens,
            role: RequestRole::Read { key, question, context },
        };
        let started = Instant::now();
        let text = provider.generate(&request)?;
        let elapsed = started.elapsed();
        let count = |s: &str| TokenCount {
            value: self.tokenizer.count(s),
            scheme: self.scheme.clone(),
        };
        Ok(ReaderAnswer {
            input_tokens: count(&prompt),
            output_tokens: count(&text),
            text,
            elapsed,
        })
    }
}

/// One-shot helper using the built-in template and whitespace tokens.
pub fn answer(question: &str, context: &str, provider: &dyn Provider) -> Result<ReaderAnswer, ReaderError> {
    Reader::new(corpus::WHITESPACE_SCHEME)?.answer(question, question, context, provider)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::{compress, CompactConfig};
    use crate::provider::{EchoReader, ScriptedProvider};

    fn result() -> CompressionResult {
        let docs: Vec<Document> = (1..=5)
            .map(|i| Document::new(format!("d{i}"), format!("T{i}"), format!("text {i}")).unwrap())
            .collect();
        let p = ScriptedProvider::sequence(
            "m",
            ["Summary: Whitacre led \"Conspirare\".\nEvaluation: enough info. [COMPLETE]"],
        );
        compress("who?", &docs, &CompactConfig::default(), &p).unwrap()
    }

    #[test]
    fn compression_modes() {
        let r = result();
        let src = ContextSource::Compression(&r);
        assert_eq!(
            render_context(src, ContextMode::CompressedOnly).unwrap(),
            r.final_context
        );
        assert_eq!(render_context(src, ContextMode::RationaleOnly).unwrap(), "enough info.");
        assert_eq!(
            render_context(src, ContextMode::CompressedPlusRationale).unwrap(),
            format!("{}{RATIONALE_SEPARATOR}enough info.", r.final_context)
        );
        assert_eq!(render_context(src, ContextMode::ClosedBook).unwrap(), "");
        assert!(render_context(src, ContextMode::RawDocuments).is_err());
    }

    #[test]
    fn document_modes() {
        let docs = vec![
            Document::new("a", "Alpha", "first").unwrap(),
            Document::new("b", "", "second").unwrap(),
        ];
        let src = ContextSource::Documents(&docs);
        assert_eq!(
            render_context(src, ContextMode::RawDocuments).unwrap(),
            "Alpha\nfirst\n\nsecond"
        );
        assert_eq!(
            render_context(src, ContextMode::OracleDocuments).unwrap(),
            render_context(src, ContextMode::RawDocuments).unwrap()
        );
        assert!(matches!(
            render_context(src, ContextMode::CompressedOnly),
            Err(ReaderError::ModeMismatch { .. })
        ));
        assert_eq!(
            render_context(ContextSource::Nothing, ContextMode::ClosedBook).unwrap(),
            ""
        );
        assert!(render_context(ContextSource::Nothing, ContextMode::RawDocuments).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ContextMode::ALL {
            assert_eq!(m.as_str().parse::<ContextMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert_eq!("closed-book".parse::<ContextMode>().unwrap(), ContextMode::ClosedBook);
        assert!("bogus".parse::<ContextMode>().is_err());
    }

    #[test]
    fn echo_reader_answers() {
        let reader = EchoReader::new("echo", "Paris");
        let a = answer("who?", "The conductor is \"Eric Whitacre\" of course.", &reader).unwrap();
        assert_eq!(a.text, "Eric Whitacre");
        assert_eq!(a.output_tokens.value, 2);
        assert!(a.input_tokens.value > 0);
        let a = answer("who?", "", &reader).unwrap();
        assert_eq!(a.text, "Paris");
    }

    #[test]
    fn answer_depends_only_on_question_and_context() {
        let r = result();
        let reader = EchoReader::new("echo", "none");
        let src = ContextSource::Compression(&r);
        let a = |m| answer("who?", &render_context(src, m).unwrap(), &reader).unwrap().text;
        assert_eq!(a(ContextMode::CompressedOnly), "Conspirare");
        assert_eq!(a(ContextMode::CompressedPlusRationale), "Conspirare");
        assert_eq!(a(ContextMode::RationaleOnly), "none");
        assert_eq!(a(ContextMode::ClosedBook), "none");
    }

    #[test]
    fn timing_is_recorded() {
        let slow = crate::provider::Delayed::new(EchoReader::new("echo", "x"), Duration::from_millis(5));
        let a = answer("q", "", &slow).unwrap();
        assert!(a.elapsed >= Duration::from_millis(5));
    }

    #[test]
    fn reader_template_needs_slots() {
        let bad = PromptTemplate::parse("r", "Context: {context}");
        assert!(matches!(
            Reader::with_template(bad, "whitespace"),
            Err(ReaderError::Template(TemplateError::MissingSlot { .. }))
        ));
    }
}
