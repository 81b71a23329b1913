//! Zero-shot annotation prompt and response parsing.

use serde_json::Value;
use thiserror::Error;

use crate::gateway::{extract_json_block, ExtractError};
use crate::model::{Entity, Triple};

/// The zero-shot annotation prompt. `{text}` is the only slot; every other
/// brace is literal.
pub const ZERO_SHOT_TEMPLATE: &str = r#"Help me build a knowledge graph schema. I will provide a text and you tell me
which entity types and which relation types (properties) to add to my knowledge
graph schema to model the data in the text.
This is the text in question:

{text}

Return your answer in the following format:
```json
{
  'text_with_spans': # html annotated text where every mention and coreference
  of an entity is annotated, for example: '<ent id="0" type="Person">Alice</ent> (or <ent id="0" type="Person">Ali</ent> as her friends call her) knows <ent id="1" type="Person">Bob</ent> because <ent id="0" type="Person">she</ent> met <ent id="1" type="Person">him</ent> at <ent id="2" type="Educational institution">school</ent>.',
  'entities': [
    {'id': 0, 'name': <name_of_entity>, 'type': <type_of_entity>},
    ..., # add all entities with the types above, even if they are not relevant
    for a triple
  ],
  'triples': [
    {'description': <text_describing_triple>, 'triple_string':
    '(<name_of_subject>, <name_of_relation_type>, <name_of_object>)',
    'subject': <id_of_subject_entity>, 'predicate': <name_of_relation_type>,
    'object': <id_of_object_entity>},
    ...,
  ],
  'relation_types': [<name_of_relation_type>, ...],
  'entity_types': [<name_of_entity_type>, ...],
}
```

Make sure that for every entity type and relation type you annotate *all*
occurrences!"#;

/// Escapes `text` as the body of a JSON string literal (no surrounding quotes).
pub fn json_escape(text: &str) -> String {
    let quoted = serde_json::to_string(text).expect("strings serialize");
    quoted[1..quoted.len() - 1].to_string()
}

/// Fills the zero-shot template. Panics on empty text.
pub fn build_zero_shot_prompt(text: &str) -> String {
    assert!(!text.trim().is_empty(), "zero-shot prompt requires non-empty text");
    ZERO_SHOT_TEMPLATE.replacen("{text}", &json_escape(text), 1)
}

/// Model output before verification.
#[derive(Debug, Clone, PartialEq)]
pub struct RawAnnotation {
    pub text_with_spans: String,
    pub entities: Vec<Entity>,
    pub triples: Vec<Triple>,
    pub relation_types: Vec<String>,
    pub entity_types: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResponseError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("missing or invalid key `{0}`")]
    MissingKey(String),
}

impl From<ExtractError> for ResponseError {
    fn from(e: ExtractError) -> Self {
        ResponseError::Syntax(e.to_string())
    }
}

/// Which keys a response must carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseShape {
    /// The zero-shot answer: `text_with_spans`, `entities`, `triples`,
    /// `relation_types`, `entity_types`, all required.
    ZeroShot,
    /// A completed in-context annotation: `text_with_spans`, `entities` and
    /// `relations` (or `triples`); type lists optional.
    Completion,
}

pub fn parse_annotation_response(response: &str) -> Result<RawAnnotation, ResponseError> {
    parse_response(response, ResponseShape::ZeroShot)
}

pub fn parse_response(response: &str, shape: ResponseShape) -> Result<RawAnnotation, ResponseError> {
    let block = extract_json_block(response)?;
    let value: Value = serde_json::from_str(&block).map_err(|e| ResponseError::Syntax(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ResponseError::Syntax("top-level JSON value is not an object".into()))?;

    let text_with_spans = obj
        .get("text_with_spans")
        .and_then(Value::as_str)
        .ok_or_else(|| ResponseError::MissingKey("text_with_spans".into()))?
        .to_string();

    let entities_value = obj
        .get("entities")
        .ok_or_else(|| ResponseError::MissingKey("entities".into()))?;
    let entities = parse_entities(entities_value)?;

    let (triples_key, triples_value) = match shape {
        ResponseShape::ZeroShot => ("triples", obj.get("triples")),
        ResponseShape::Completion => match obj.get("relations") {
            Some(v) => ("relations", Some(v)),
            None => ("relations", obj.get("triples")),
        },
    };
    let triples_value = triples_value.ok_or_else(|| ResponseError::MissingKey(triples_key.into()))?;
    let triples = parse_triples(triples_key, triples_value)?;

    let relation_types = string_list(obj, "relation_types", shape == ResponseShape::ZeroShot)?;
    let entity_types = string_list(obj, "entity_types", shape == ResponseShape::ZeroShot)?;

    Ok(RawAnnotation {
        text_with_spans,
        entities,
        triples,
        relation_types,
        entity_types,
    })
}

fn string_list(obj: &serde_json::Map<String, Value>, key: &str, required: bool) -> Result<Vec<String>, ResponseError> {
    match obj.get(key) {
        None if !required => Ok(Vec::new()),
        None => Err(ResponseError::MissingKey(key.into())),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| ResponseError::MissingKey(format!("{key}[{i}]")))
            })
            .collect(),
        Some(_) => Err(ResponseError::MissingKey(key.into())),
    }
}

fn field<'a>(item: &'a Value, path: &str, key: &str) -> Result<&'a Value, ResponseError> {
    item.get(key)
        .ok_or_else(|| ResponseError::MissingKey(format!("{path}.{key}")))
}

fn id_field(item: &Value, path: &str, key: &str) -> Result<u64, ResponseError> {
    field(item, path, key)?
        .as_u64()
        .ok_or_else(|| ResponseError::MissingKey(format!("{path}.{key}")))
}

fn text_field(item: &Value, path: &str, key: &str, allow_empty: bool) -> Result<String, ResponseError> {
    let s = field(item, path, key)?
        .as_str()
        .ok_or_else(|| ResponseError::MissingKey(format!("{path}.{key}")))?;
    if !allow_empty && s.trim().is_empty() {
        return Err(ResponseError::MissingKey(format!("{path}.{key}")));
    }
    Ok(s.to_string())
}

fn parse_entities(value: &Value) -> Result<Vec<Entity>, ResponseError> {
    let items = value
        .as_array()
        .ok_or_else(|| ResponseError::MissingKey("entities".into()))?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let path = format!("entities[{i}]");
            Ok(Entity {
                id: id_field(item, &path, "id")?,
                name: text_field(item, &path, "name", false)?,
                type_label: text_field(item, &path, "type", false)?,
            })
        })
        .collect()
}

fn parse_triples(key: &str, value: &Value) -> Result<Vec<Triple>, ResponseError> {
    let items = value
        .as_array()
        .ok_or_else(|| ResponseError::MissingKey(key.into()))?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let path = format!("{key}[{i}]");
            Ok(Triple {
                description: text_field(item, &path, "description", true)?,
                triple_string: text_field(item, &path, "triple_string", true)?,
                subject: id_field(item, &path, "subject")?,
                predicate: text_field(item, &path, "predicate", false)?,
                object: id_field(item, &path, "object")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_slot() {
        let prompt = build_zero_shot_prompt("a\"b");
        assert!(prompt.contains("This is the text in question:\n\na\\\"b\n\nReturn"));
        let prompt = build_zero_shot_prompt("line1\nline2 \\ end");
        assert!(prompt.contains("line1\\nline2 \\\\ end"));
        assert!(!prompt.contains("{text}"));
    }

    #[test]
    #[should_panic]
    fn empty_text_is_rejected() {
        build_zero_shot_prompt("  ");
    }

    #[test]
    fn template_keeps_literal_braces() {
        let prompt = build_zero_shot_prompt("x");
        assert!(prompt.starts_with("Help me build a knowledge graph schema."));
        assert!(prompt.contains("{'id': 0, 'name': <name_of_entity>, 'type': <type_of_entity>},"));
        assert!(prompt.ends_with("occurrences!"));
    }

    #[test]
    fn missing_keys_are_named() {
        assert_eq!(
            parse_annotation_response("{}"),
            Err(ResponseError::MissingKey("text_with_spans".into()))
        );
        let partial = r#"{"text_with_spans": "x", "entities": [{"id": "0", "name": "a", "type": "T"}]}"#;
        assert_eq!(
            parse_annotation_response(partial),
            Err(ResponseError::MissingKey("entities[0].id".into()))
        );
        let no_types = r#"{"text_with_spans": "x", "entities": [], "triples": [], "relation_types": []}"#;
        assert_eq!(
            parse_annotation_response(no_types),
            Err(ResponseError::MissingKey("entity_types".into()))
        );
    }

    #[test]
    fn syntax_errors() {
        assert!(matches!(parse_annotation_response("I cannot help"), Err(ResponseError::Syntax(_))));
        assert!(matches!(
            parse_annotation_response("```json\n{'text_with_spans': 'x'}\n```"),
            Err(ResponseError::Syntax(_))
        ));
        assert!(matches!(parse_annotation_response("[1, 2]"), Err(ResponseError::Syntax(_))));
    }

    #[test]
    fn completion_shape_accepts_relations() {
        let resp = r#"{"text": "a", "text_with_spans": "a", "entities": [], "relations": []}"#;
        assert!(parse_response(resp, ResponseShape::Completion).is_ok());
        assert!(parse_response(resp, ResponseShape::ZeroShot).is_err());
    }
}
