//! The inline `<ent id="…" type="…">…</ent>` annotation dialect.
//!
//! Parsing strips the tags and recovers a [`Mention`] per tagged region with a
//! character span into the stripped text. Rendering is the exact inverse.
//! Text outside tags is taken verbatim: no entity decoding, no whitespace
//! forgiveness.

use thiserror::Error;

use crate::model::{Mention, Span};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum MarkupError {
    #[error("unbalanced tag at offset {position}: {detail}")]
    UnbalancedTag { position: usize, detail: String },
    #[error("malformed attributes at offset {position}: {detail}")]
    MalformedAttributes { position: usize, detail: String },
    #[error("nested <ent> tag at offset {position}")]
    NestedTag { position: usize },
    #[error("empty mention at offset {position}")]
    EmptyMention { position: usize },
    #[error("mentions overlap at {first:?} and {second:?}")]
    OverlappingMentions { first: Span, second: Span },
    #[error("span {span:?} out of bounds for text of length {len}")]
    SpanOutOfBounds { span: Span, len: usize },
    #[error("mention surface {surface:?} does not match text at {span:?}")]
    SurfaceMismatch { span: Span, surface: String },
    #[error("type label {0:?} cannot be written as a double-quoted attribute")]
    UnquotableType(String),
    #[error("text contains tag-like markup at offset {0}")]
    TextContainsMarkup(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagKind {
    Open,
    Close,
    Text,
}

/// A lexical unit of annotated text. `position` is a character offset into
/// the annotated string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagToken {
    pub kind: TagKind,
    pub id: Option<u64>,
    pub type_label: Option<String>,
    pub content: String,
    pub position: usize,
}

const OPEN_PREFIX: &str = "<ent";
const CLOSE_PREFIX: &str = "</ent";

/// Splits annotated text into open, close and text tokens.
pub fn tokenize(annotated: &str) -> Result<Vec<TagToken>, MarkupError> {
    let chars: Vec<char> = annotated.chars().collect();
    let mut tokens = Vec::new();
    let mut text = String::new();
    let mut text_start = 0;
    let mut i = 0;

    let flush = |text: &mut String, start: usize, tokens: &mut Vec<TagToken>| {
        if !text.is_empty() {
            tokens.push(TagToken {
                kind: TagKind::Text,
                id: None,
                type_label: None,
                content: std::mem::take(text),
                position: start,
            });
        }
    };

    while i < chars.len() {
        if chars[i] == '<' {
            if let Some(end) = match_close(&chars, i) {
                flush(&mut text, text_start, &mut tokens);
                tokens.push(TagToken {
                    kind: TagKind::Close,
                    id: None,
                    type_label: None,
                    content: String::new(),
                    position: i,
                });
                i = end;
                text_start = i;
                continue;
            }
            if starts_open(&chars, i) {
                flush(&mut text, text_start, &mut tokens);
                let (end, id, type_label) = parse_open(&chars, i)?;
                tokens.push(TagToken {
                    kind: TagKind::Open,
                    id: Some(id),
                    type_label: Some(type_label),
                    content: String::new(),
                    position: i,
                });
                i = end;
                text_start = i;
                continue;
            }
        }
        if text.is_empty() {
            text_start = i;
        }
        text.push(chars[i]);
        i += 1;
    }
    flush(&mut text, text_start, &mut tokens);
    Ok(tokens)
}

fn has_prefix(chars: &[char], at: usize, prefix: &str) -> bool {
    prefix.chars().enumerate().all(|(k, p)| chars.get(at + k) == Some(&p))
}

fn starts_open(chars: &[char], at: usize) -> bool {
    has_prefix(chars, at, OPEN_PREFIX)
        && matches!(chars.get(at + OPEN_PREFIX.len()), Some(c) if c.is_whitespace() || *c == '>')
}

/// Returns the index just past `</ent\s*>` if one starts at `at`.
fn match_close(chars: &[char], at: usize) -> Option<usize> {
    if !has_prefix(chars, at, CLOSE_PREFIX) {
        return None;
    }
    let mut idx = at + CLOSE_PREFIX.len();
    while chars.get(idx).is_some_and(|c| c.is_whitespace()) {
        idx += 1;
    }
    (chars.get(idx) == Some(&'>')).then_some(idx + 1)
}

/// Parses an opening tag starting at `at`; returns (index past '>', id, type).
fn parse_open(chars: &[char], at: usize) -> Result<(usize, u64, String), MarkupError> {
    let malformed = |detail: &str| MarkupError::MalformedAttributes {
        position: at,
        detail: detail.to_string(),
    };
    let mut idx = at + OPEN_PREFIX.len();
    let mut id = None;
    let mut type_label = None;

    loop {
        while chars.get(idx).is_some_and(|c| c.is_whitespace()) {
            idx += 1;
        }
        match chars.get(idx) {
            None => return Err(malformed("unterminated tag")),
            Some('>') => {
                idx += 1;
                break;
            }
            Some(_) => {}
        }
        let name_start = idx;
        while chars
            .get(idx)
            .is_some_and(|c| !c.is_whitespace() && *c != '=' && *c != '>')
        {
            idx += 1;
        }
        let name: String = chars[name_start..idx].iter().collect();
        while chars.get(idx).is_some_and(|c| c.is_whitespace()) {
            idx += 1;
        }
        if chars.get(idx) != Some(&'=') {
            return Err(malformed(&format!("attribute `{name}` has no value")));
        }
        idx += 1;
        while chars.get(idx).is_some_and(|c| c.is_whitespace()) {
            idx += 1;
        }
        let quote = match chars.get(idx) {
            Some(q @ ('"' | '\'')) => *q,
            _ => return Err(malformed(&format!("attribute `{name}` value is not quoted"))),
        };
        idx += 1;
        let value_start = idx;
        while chars.get(idx).is_some_and(|c| *c != quote) {
            idx += 1;
        }
        if idx >= chars.len() {
            return Err(malformed("unterminated attribute value"));
        }
        let value: String = chars[value_start..idx].iter().collect();
        idx += 1;
        match name.as_str() {
            "id" => {
                let parsed = if !value.is_empty() && value.chars().all(|c| c.is_ascii_digit()) {
                    value.parse::<u64>().ok()
                } else {
                    None
                };
                id = Some(parsed.ok_or_else(|| malformed(&format!("id {value:?} is not an integer")))?);
            }
            "type" => {
                if value.trim().is_empty() {
                    return Err(malformed("empty type"));
                }
                type_label = Some(value);
            }
            _ => {}
        }
    }

    let id = id.ok_or_else(|| malformed("missing id"))?;
    let type_label = type_label.ok_or_else(|| malformed("missing type"))?;
    Ok((idx, id, type_label))
}

/// Strips tags and returns the plain text plus one mention per tagged region,
/// in document order.
pub fn parse_annotated(annotated_text: &str) -> Result<(String, Vec<Mention>), MarkupError> {
    let tokens = tokenize(annotated_text)?;
    let mut plain = String::with_capacity(annotated_text.len());
    let mut plain_len = 0usize;
    let mut mentions = Vec::new();
    // (id, type, plain start, tag position, surface)
    let mut open: Option<(u64, String, usize, usize, String)> = None;

    for token in tokens {
        match token.kind {
            TagKind::Text => {
                plain_len += token.content.chars().count();
                plain.push_str(&token.content);
                if let Some((.., surface)) = open.as_mut() {
                    surface.push_str(&token.content);
                }
            }
            TagKind::Open => {
                if open.is_some() {
                    return Err(MarkupError::NestedTag {
                        position: token.position,
                    });
                }
                open = Some((
                    token.id.expect("open token has id"),
                    token.type_label.expect("open token has type"),
                    plain_len,
                    token.position,
                    String::new(),
                ));
            }
            TagKind::Close => {
                let Some((entity_id, type_label, start, position, surface)) = open.take() else {
                    return Err(MarkupError::UnbalancedTag {
                        position: token.position,
                        detail: "closing tag without opening tag".into(),
                    });
                };
                if plain_len == start {
                    return Err(MarkupError::EmptyMention { position });
                }
                mentions.push(Mention {
                    entity_id,
                    span: Span::new(start, plain_len),
                    surface,
                    type_label,
                });
            }
        }
    }

    if let Some((.., position, _)) = open {
        return Err(MarkupError::UnbalancedTag {
            position,
            detail: "tag is never closed".into(),
        });
    }
    Ok((plain, mentions))
}

/// Inserts tags for `mentions` into `text`. Attributes are always written
/// double-quoted, `id` before `type`.
pub fn render_annotated(text: &str, mentions: &[Mention]) -> Result<String, MarkupError> {
    if let Some(pos) = text.find(OPEN_PREFIX).or_else(|| text.find(CLOSE_PREFIX)) {
        return Err(MarkupError::TextContainsMarkup(text[..pos].chars().count()));
    }
    let chars: Vec<char> = text.chars().collect();
    let mut ordered: Vec<&Mention> = mentions.iter().collect();
    ordered.sort_by_key(|m| (m.span.start, m.span.end));

    for pair in ordered.windows(2) {
        if pair[0].span.overlaps(&pair[1].span) || pair[0].span == pair[1].span {
            return Err(MarkupError::OverlappingMentions {
                first: pair[0].span,
                second: pair[1].span,
            });
        }
    }

    let mut out = String::with_capacity(text.len() + mentions.len() * 32);
    let mut cursor = 0;
    for m in ordered {
        if m.span.start >= m.span.end || m.span.end > chars.len() {
            return Err(MarkupError::SpanOutOfBounds {
                span: m.span,
                len: chars.len(),
            });
        }
        let surface: String = chars[m.span.start..m.span.end].iter().collect();
        if surface != m.surface {
            return Err(MarkupError::SurfaceMismatch {
                span: m.span,
                surface: m.surface.clone(),
            });
        }
        if m.type_label.contains('"') || m.type_label.trim().is_empty() {
            return Err(MarkupError::UnquotableType(m.type_label.clone()));
        }
        out.extend(&chars[cursor..m.span.start]);
        out.push_str(&format!("<ent id=\"{}\" type=\"{}\">", m.entity_id, m.type_label));
        out.push_str(&surface);
        out.push_str("</ent>");
        cursor = m.span.end;
    }
    out.extend(&chars[cursor..]);
    Ok(out)
}

/// Outcome of comparing stripped annotated text against the original.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EchoCheck {
    pub matches: bool,
    pub reason: Option<String>,
}

/// True iff stripping tags from `annotated` reproduces `original` exactly.
pub fn verify_echo(original: &str, annotated: &str) -> EchoCheck {
    match parse_annotated(annotated) {
        Err(e) => EchoCheck {
            matches: false,
            reason: Some(e.to_string()),
        },
        Ok((plain, _)) if plain == original => EchoCheck {
            matches: true,
            reason: None,
        },
        Ok((plain, _)) => {
            let offset = plain
                .chars()
                .zip(original.chars())
                .take_while(|(a, b)| a == b)
                .count();
            EchoCheck {
                matches: false,
                reason: Some(format!("stripped text diverges from original at character {offset}")),
            }
        }
    }
}
