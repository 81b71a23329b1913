//! Shared data model: source documents, spans, entities, mentions, triples,
//! annotation records and schemas.
//!
//! All character offsets are counted in Unicode scalar values, not bytes.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::markup::{self, MarkupError};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("document id is empty")]
    EmptyId,
    #[error("document `{0}` has empty text")]
    EmptyText(String),
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("invalid span {start}..{end} for text of length {len}")]
    InvalidSpan { start: usize, end: usize, len: usize },
    #[error("schema has no {0}")]
    EmptySchema(&'static str),
    #[error("annotated text: {0}")]
    Markup(#[from] MarkupError),
}

/// A raw input document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
}

impl SourceDocument {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, ModelError> {
        let doc = SourceDocument {
            id: id.into(),
            title: None,
            text: text.into(),
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.id.trim().is_empty() {
            return Err(ModelError::EmptyId);
        }
        if self.text.trim().is_empty() {
            return Err(ModelError::EmptyText(self.id.clone()));
        }
        Ok(())
    }

    pub fn paragraphs(&self) -> Vec<&str> {
        split_paragraphs(&self.text)
    }
}

/// Checks the per-document invariants plus id uniqueness across a corpus.
pub fn validate_corpus(docs: &[SourceDocument]) -> Result<(), ModelError> {
    let mut seen = HashSet::new();
    for doc in docs {
        doc.validate()?;
        if !seen.insert(doc.id.as_str()) {
            return Err(ModelError::DuplicateId(doc.id.clone()));
        }
    }
    Ok(())
}

/// Half-open character range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    /// Validates `0 <= start < end <= text_len`.
    pub fn checked(start: usize, end: usize, text_len: usize) -> Result<Self, ModelError> {
        if start < end && end <= text_len {
            Ok(Span { start, end })
        } else {
            Err(ModelError::InvalidSpan {
                start,
                end,
                len: text_len,
            })
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    pub id: u64,
    pub name: String,
    #[serde(rename = "type")]
    pub type_label: String,
}

/// One tagged occurrence of an entity. `surface` is the exact text at `span`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub entity_id: u64,
    #[serde(flatten)]
    pub span: Span,
    pub surface: String,
    #[serde(rename = "type")]
    pub type_label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub description: String,
    pub triple_string: String,
    pub subject: u64,
    pub predicate: String,
    pub object: u64,
}

/// Generation metadata attached to records produced by the annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// 1-based index of the accepted attempt.
    pub attempt: u32,
    /// Temperatures of every attempt made, in order.
    pub temperatures: Vec<f64>,
    pub retried: bool,
}

/// One annotated document.
///
/// The on-disk field names follow the published sample record shape
/// (`text`, `annotated_text`, `entities`, `relations`). `doc_id`, `mentions`,
/// `entity_types`, `relation_types` and `provenance` are extensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(default)]
    pub doc_id: String,
    pub text: String,
    pub annotated_text: String,
    pub entities: Vec<Entity>,
    #[serde(rename = "relations")]
    pub triples: Vec<Triple>,
    #[serde(default)]
    pub mentions: Vec<Mention>,
    #[serde(default)]
    pub entity_types: Vec<String>,
    #[serde(default)]
    pub relation_types: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl AnnotationRecord {
    /// Builds a record from its parts, deriving mentions by parsing
    /// `annotated_text` and the type inventories from entities and triples.
    pub fn from_parts(
        doc_id: impl Into<String>,
        text: impl Into<String>,
        annotated_text: impl Into<String>,
        entities: Vec<Entity>,
        triples: Vec<Triple>,
    ) -> Result<Self, ModelError> {
        let mut record = AnnotationRecord {
            doc_id: doc_id.into(),
            text: text.into(),
            annotated_text: annotated_text.into(),
            entities,
            triples,
            mentions: Vec::new(),
            entity_types: Vec::new(),
            relation_types: Vec::new(),
            provenance: None,
        };
        record.hydrate()?;
        Ok(record)
    }

    /// Fills in `mentions` (when absent) and recomputes the type inventories.
    /// Used when loading records that only carry the sample-record fields.
    pub fn hydrate(&mut self) -> Result<(), ModelError> {
        if self.mentions.is_empty() && !self.annotated_text.is_empty() {
            let (_, mentions) = markup::parse_annotated(&self.annotated_text)?;
            self.mentions = mentions;
        }
        self.refresh_types();
        Ok(())
    }

    /// Recomputes `entity_types` and `relation_types` from the entities and
    /// triples, in order of first appearance.
    pub fn refresh_types(&mut self) {
        self.entity_types = unique_in_order(self.entities.iter().map(|e| e.type_label.as_str()));
        self.relation_types = unique_in_order(self.triples.iter().map(|t| t.predicate.as_str()));
    }

    pub fn entity(&self, id: u64) -> Option<&Entity> {
        self.entities.iter().find(|e| e.id == id)
    }

    /// True when the entity_types / relation_types lists are exactly the
    /// sets used by entities and triples.
    pub fn types_closed(&self) -> bool {
        let used_e: HashSet<&str> = self.entities.iter().map(|e| e.type_label.as_str()).collect();
        let listed_e: HashSet<&str> = self.entity_types.iter().map(String::as_str).collect();
        let used_r: HashSet<&str> = self.triples.iter().map(|t| t.predicate.as_str()).collect();
        let listed_r: HashSet<&str> = self.relation_types.iter().map(String::as_str).collect();
        used_e == listed_e && used_r == listed_r
    }
}

fn unique_in_order<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .filter(|s| seen.insert(*s))
        .map(str::to_string)
        .collect()
}

/// Entity and relation type inventories that constrain extraction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub entity_types: Vec<String>,
    pub relation_types: Vec<String>,
}

impl Schema {
    /// Builds a schema, dropping entries that repeat after normalization.
    pub fn new(entity_types: Vec<String>, relation_types: Vec<String>) -> Result<Self, ModelError> {
        let schema = Schema {
            entity_types: dedup_normalized(entity_types),
            relation_types: dedup_normalized(relation_types),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.entity_types.is_empty() {
            return Err(ModelError::EmptySchema("entity types"));
        }
        if self.relation_types.is_empty() {
            return Err(ModelError::EmptySchema("relation types"));
        }
        Ok(())
    }

    pub fn has_entity_type(&self, label: &str) -> bool {
        let label = normalize_surface(label);
        self.entity_types.iter().any(|t| normalize_surface(t) == label)
    }

    pub fn has_relation_type(&self, label: &str) -> bool {
        let label = normalize_surface(label);
        self.relation_types.iter().any(|t| normalize_surface(t) == label)
    }
}

fn dedup_normalized(items: Vec<String>) -> Vec<String> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .filter(|s| seen.insert(normalize_surface(s)))
        .collect()
}

/// Lowercases, trims, and collapses internal whitespace runs to one space.
pub fn normalize_surface(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

static PARAGRAPH_BREAK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\r?\n(?:[^\S\n]*\r?\n)+").expect("valid regex"));

/// Byte ranges of the paragraphs of `text`. Paragraphs are separated by one
/// or more blank lines; whitespace-only segments are skipped.
pub fn paragraph_ranges(text: &str) -> Vec<std::ops::Range<usize>> {
    let mut ranges = Vec::new();
    let mut start = 0;
    for m in PARAGRAPH_BREAK.find_iter(text) {
        if !text[start..m.start()].trim().is_empty() {
            ranges.push(start..m.start());
        }
        start = m.end();
    }
    if !text[start..].trim().is_empty() {
        ranges.push(start..text.len());
    }
    ranges
}

pub fn split_paragraphs(text: &str) -> Vec<&str> {
    paragraph_ranges(text).into_iter().map(|r| &text[r]).collect()
}

/// Counts maximal runs of non-whitespace.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Number of Unicode scalar values in `text`.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Substring by character offsets. Returns `None` when out of range.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut indices = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let begin = indices.nth(start)?;
    let finish = if end == start {
        begin
    } else {
        indices.nth(end - start - 1)?
    };
    Some(&text[begin..finish])
}
