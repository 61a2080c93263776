//! Prompt templates with `{slot}` placeholders.
//!
//! Templates are parsed once; rendering substitutes values in a single pass,
//! so slot-like text inside a substituted value is never expanded. `{{` and
//! `}}` produce literal braces. A `{` that does not open a well-formed slot
//! is kept as text.

use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

pub const COMPRESS_TEMPLATE_ID: &str = "compress";
pub const TEACHER_TEMPLATE_ID: &str = "teacher";
pub const READER_TEMPLATE_ID: &str = "reader";

pub const COMPRESS_SLOTS: &[&str] = &["question", "documents", "previous_context"];
pub const READER_SLOTS: &[&str] = &["question", "context"];

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("template {id:?} is missing required placeholder {{{slot}}}")]
    MissingSlot { id: String, slot: String },
    #[error("template {id:?}: no value supplied for placeholder {{{slot}}}")]
    UnboundSlot { id: String, slot: String },
    #[error("unknown built-in template {0:?}")]
    UnknownTemplate(String),
    #[error("template {id:?} must contain the text {text:?}")]
    MissingText { id: String, text: String },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
enum Part {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    id: String,
    parts: Vec<Part>,
}

fn is_slot_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

impl PromptTemplate {
    pub fn parse(id: impl Into<String>, text: &str) -> Self {
        let mut parts = Vec::new();
        let mut buf = String::new();
        let mut rest = text;
        while let Some(c) = rest.chars().next() {
            if rest.starts_with("{{") {
                buf.push('{');
                rest = &rest[2..];
                continue;
            }
            if rest.starts_with("}}") {
                buf.push('}');
                rest = &rest[2..];
                continue;
            }
            if c == '{' {
                let name_len = rest[1..].find(|ch: char| !is_slot_char(ch)).unwrap_or(rest.len() - 1);
                if name_len > 0 && rest[1 + name_len..].starts_with('}') {
                    if !buf.is_empty() {
                        parts.push(Part::Text(std::mem::take(&mut buf)));
                    }
                    parts.push(Part::Slot(rest[1..1 + name_len].to_string()));
                    rest = &rest[name_len + 2..];
                    continue;
                }
            }
            buf.push(c);
            rest = &rest[c.len_utf8()..];
        }
        if !buf.is_empty() {
            parts.push(Part::Text(buf));
        }
        PromptTemplate { id: id.into(), parts }
    }

    /// Parses and checks that every `required` slot is present.
    pub fn with_slots(id: impl Into<String>, text: &str, required: &[&str]) -> Result<Self, TemplateError> {
        let t = Self::parse(id, text);
        t.require(required)?;
        Ok(t)
    }

    pub fn from_file(id: impl Into<String>, path: impl AsRef<Path>, required: &[&str]) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| TemplateError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::with_slots(id, &text, required)
    }

    pub fn builtin(id: &str) -> Result<Self, TemplateError> {
        let (text, slots) = match id {
            COMPRESS_TEMPLATE_ID => (include_str!("../templates/compress.txt"), COMPRESS_SLOTS),
            TEACHER_TEMPLATE_ID => (include_str!("../templates/teacher.txt"), COMPRESS_SLOTS),
            READER_TEMPLATE_ID => (include_str!("../templates/reader.txt"), READER_SLOTS),
            other => return Err(TemplateError::UnknownTemplate(other.to_string())),
        };
        Self::with_slots(id, text, slots)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn slots(&self) -> BTreeSet<&str> {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Slot(s) => Some(s.as_str()),
                Part::Text(_) => None,
            })
            .collect()
    }

    /// Checks that the template uses exactly the `required` slots.
    pub fn require(&self, required: &[&str]) -> Result<(), TemplateError> {
        let present = self.slots();
        if let Some(missing) = required.iter().find(|s| !present.contains(**s)) {
            return Err(TemplateError::MissingSlot {
                id: self.id.clone(),
                slot: missing.to_string(),
            });
        }
        if let Some(extra) = present.iter().find(|s| !required.contains(s)) {
            return Err(TemplateError::UnboundSlot {
                id: self.id.clone(),
                slot: extra.to_string(),
            });
        }
        Ok(())
    }

    /// Literal text of the template with slots left empty.
    pub fn literal_text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Slot(_) => None,
            })
            .collect()
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let mut out = String::new();
        for part in &self.parts {
            match part {
                Part::Text(t) => out.push_str(t),
                Part::Slot(name) => {
                    let value = values.iter().find(|(k, _)| k == name).map(|(_, v)| *v).ok_or_else(|| {
                        TemplateError::UnboundSlot {
                            id: self.id.clone(),
                            slot: name.clone(),
                        }
                    })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_in_a_single_pass() {
        let t = PromptTemplate::parse("t", "Q: {question}\nC: {context}");
        let s = t
            .render(&[("question", "what is {context}?"), ("context", "ctx")])
            .unwrap();
        assert_eq!(s, "Q: what is {context}?\nC: ctx");
    }

    #[test]
    fn escapes_and_stray_braces() {
        let t = PromptTemplate::parse("t", "{{literal}} {not a slot} {x}");
        assert_eq!(t.slots().into_iter().collect::<Vec<_>>(), ["x"]);
        assert_eq!(t.render(&[("x", "1")]).unwrap(), "{literal} {not a slot} 1");
    }

    #[test]
    fn unknown_slot_is_rejected_at_load() {
        let err = PromptTemplate::with_slots("bad", "{question} {context} {extra}", READER_SLOTS).unwrap_err();
        assert_eq!(
            err,
            TemplateError::UnboundSlot {
                id: "bad".into(),
                slot: "extra".into()
            }
        );
    }

    #[test]
    fn missing_required_slot_is_rejected() {
        let err =
            PromptTemplate::with_slots("bad", "Docs: {documents} {previous_context}", COMPRESS_SLOTS).unwrap_err();
        assert_eq!(
            err,
            TemplateError::MissingSlot {
                id: "bad".into(),
                slot: "question".into()
            }
        );
    }

    #[test]
    fn unbound_slot_is_an_error() {
        let t = PromptTemplate::parse("t", "{a}{b}");
        assert!(matches!(
            t.render(&[("a", "1")]),
            Err(TemplateError::UnboundSlot { .. })
        ));
    }

    #[test]
    fn builtins_load() {
        for id in [COMPRESS_TEMPLATE_ID, TEACHER_TEMPLATE_ID, READER_TEMPLATE_ID] {
            PromptTemplate::builtin(id).unwrap();
        }
        assert!(PromptTemplate::builtin("nope").is_err());
        let teacher = PromptTemplate::builtin(TEACHER_TEMPLATE_ID).unwrap();
        assert!(teacher
            .literal_text()
            .contains("DO NOT make assumptions or attempt to answer the question; your job is to summarize only."));
    }

    #[test]
    fn multibyte_text_survives() {
        let t = PromptTemplate::parse("t", "é {x} ü{");
        assert_eq!(t.render(&[("x", "ß")]).unwrap(), "é ß ü{");
    }
}
