//! Rule-based verification of a model annotation against its source text.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::prompt::{RawAnnotation, ResponseError};
use crate::markup;
use crate::model::{char_slice, normalize_surface, Mention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorKind {
    SyntaxError,
    MissingKey,
    EchoMismatch,
    MentionNotInText,
    MissingSpanAnnotation,
    TripleIdUnknown,
    TripleNameMismatch,
    TagParseError,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 8] = [
        ErrorKind::SyntaxError,
        ErrorKind::MissingKey,
        ErrorKind::EchoMismatch,
        ErrorKind::MentionNotInText,
        ErrorKind::MissingSpanAnnotation,
        ErrorKind::TripleIdUnknown,
        ErrorKind::TripleNameMismatch,
        ErrorKind::TagParseError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::SyntaxError => "syntax_error",
            ErrorKind::MissingKey => "missing_key",
            ErrorKind::EchoMismatch => "echo_mismatch",
            ErrorKind::MentionNotInText => "mention_not_in_text",
            ErrorKind::MissingSpanAnnotation => "missing_span_annotation",
            ErrorKind::TripleIdUnknown => "triple_id_unknown",
            ErrorKind::TripleNameMismatch => "triple_name_mismatch",
            ErrorKind::TagParseError => "tag_parse_error",
        }
    }

    /// Error-rate chart bucket this kind is tracked under.
    pub fn tracking_bucket(self) -> &'static str {
        match self {
            ErrorKind::SyntaxError => "syntax",
            ErrorKind::TripleIdUnknown | ErrorKind::TripleNameMismatch => "id_mismatch",
            ErrorKind::MentionNotInText => "entity_not_in_text",
            ErrorKind::MissingSpanAnnotation => "missing_span",
            ErrorKind::MissingKey | ErrorKind::EchoMismatch | ErrorKind::TagParseError => "other",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: ErrorKind,
    pub context: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub errors: Vec<Finding>,
    pub passed: bool,
}

impl VerificationReport {
    pub fn from_findings(errors: Vec<Finding>) -> Self {
        let passed = errors.is_empty();
        VerificationReport { errors, passed }
    }

    pub fn from_response_error(err: &ResponseError) -> Self {
        let kind = match err {
            ResponseError::Syntax(_) => ErrorKind::SyntaxError,
            ResponseError::MissingKey(_) => ErrorKind::MissingKey,
        };
        Self::from_findings(vec![Finding {
            kind,
            context: err.to_string(),
        }])
    }

    pub fn kinds(&self) -> HashSet<ErrorKind> {
        self.errors.iter().map(|f| f.kind).collect()
    }
}

/// Names inside a `(subject, predicate, object)` string; `None` unless there
/// are exactly two commas.
pub fn parse_triple_string(s: &str) -> Option<(String, String, String)> {
    let inner = s.trim().strip_prefix('(')?.strip_suffix(')')?;
    let parts: Vec<&str> = inner.split(',').collect();
    if parts.len() != 3 {
        return None;
    }
    Some((
        parts[0].trim().to_string(),
        parts[1].trim().to_string(),
        parts[2].trim().to_string(),
    ))
}

/// Runs every check and returns all findings.
///
/// Order: tag parse, echo, entity coverage, mention placement, triple ids,
/// triple names. Checks that need parsed mentions are skipped when the tags
/// do not parse; name checks skip triples whose ids are unknown.
pub fn verify_annotation(raw: &RawAnnotation, source_text: &str) -> VerificationReport {
    let mut findings = Vec::new();
    let mut push = |kind, context: String| findings.push(Finding { kind, context });

    let mentions: Option<Vec<Mention>> = match markup::parse_annotated(&raw.text_with_spans) {
        Ok((plain, mentions)) => {
            if plain != source_text {
                let check = markup::verify_echo(source_text, &raw.text_with_spans);
                push(
                    ErrorKind::EchoMismatch,
                    check.reason.unwrap_or_else(|| "stripped text differs".into()),
                );
            }
            Some(mentions)
        }
        Err(e) => {
            push(ErrorKind::TagParseError, e.to_string());
            None
        }
    };

    let mut entity_ids: HashMap<u64, &str> = HashMap::new();
    for entity in &raw.entities {
        if entity_ids.insert(entity.id, entity.name.as_str()).is_some() {
            push(ErrorKind::TripleIdUnknown, format!("entity id {} is listed twice", entity.id));
        }
    }

    if let Some(mentions) = &mentions {
        let tagged: HashSet<u64> = mentions.iter().map(|m| m.entity_id).collect();
        for entity in &raw.entities {
            if !tagged.contains(&entity.id) {
                push(
                    ErrorKind::MissingSpanAnnotation,
                    format!("entity {} ({:?}) has no tagged mention", entity.id, entity.name),
                );
            }
        }
        for m in mentions {
            if !entity_ids.contains_key(&m.entity_id) {
                push(
                    ErrorKind::MissingSpanAnnotation,
                    format!("mention {:?} tagged with id {} that has no entity entry", m.surface, m.entity_id),
                );
            }
            if char_slice(source_text, m.span.start, m.span.end) != Some(m.surface.as_str()) {
                push(
                    ErrorKind::MentionNotInText,
                    format!(
                        "mention {:?} not found at {}..{} of the source text",
                        m.surface, m.span.start, m.span.end
                    ),
                );
            }
        }
    }

    for (i, triple) in raw.triples.iter().enumerate() {
        let subject = entity_ids.get(&triple.subject);
        let object = entity_ids.get(&triple.object);
        for (role, id, found) in [("subject", triple.subject, subject), ("object", triple.object, object)] {
            if found.is_none() {
                push(ErrorKind::TripleIdUnknown, format!("triple {i}: {role} id {id} is not an entity"));
            }
        }
        let (Some(subject_name), Some(object_name)) = (subject, object) else {
            continue;
        };
        match parse_triple_string(&triple.triple_string) {
            None => push(
                ErrorKind::TripleNameMismatch,
                format!("triple {i}: cannot split {:?} into three parts", triple.triple_string),
            ),
            Some((s, _, o)) => {
                if normalize_surface(&s) != normalize_surface(subject_name) {
                    push(
                        ErrorKind::TripleNameMismatch,
                        format!("triple {i}: subject {s:?} does not name entity {subject_name:?}"),
                    );
                }
                if normalize_surface(&o) != normalize_surface(object_name) {
                    push(
                        ErrorKind::TripleNameMismatch,
                        format!("triple {i}: object {o:?} does not name entity {object_name:?}"),
                    );
                }
            }
        }
    }

    VerificationReport::from_findings(findings)
}
