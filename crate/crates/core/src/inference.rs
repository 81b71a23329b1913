//! Two-call in-context extraction.
//!
//! Call one annotates only the first paragraph. Call two sees the whole
//! document with the call-one annotations already in place. Both calls use
//! the same prompt with the retrieved demonstration.

use std::collections::{HashMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::annotator::{parse_response, truncate_text, ResponseShape};
use crate::demo_store::{ExclusionList, Retriever, StoreError};
use crate::gateway::{ChatModel, GatewayError, GenerationParams};
use crate::markup;
use crate::model::{
    char_len, paragraph_ranges, word_count, AnnotationRecord, Entity, Mention, Schema, SourceDocument, Span, Triple,
};
use crate::{pool, template};

pub const INFERENCE_TEMPLATE: &str = r#"Help me build a knowledge graph. I will provide a text and you annotate it.
Here is what correct annotation looks like:
```json
{demonstration}
```

(Note how the entity ids start from 0 and allow for coreference resolution,
as multiple spans in the annotated text can refer to the same entity.)

Here is the annotation I want you to complete:
```json
{annotation}
```

Do not add any entity or relation types! Use only the ones provided in the JSON.
Where possible, reuse the entity ids from the annotation I've started.
If I've missed any entities (or failed to resolve coreferences) or triples,
please fix accordingly.
Return the completed JSON, not just your changes."#;

/// A single paragraph longer than this falls back to sentence truncation.
pub const SINGLE_PARAGRAPH_LIMIT: usize = 150;
pub const FRAGMENT_MIN_WORDS: usize = 100;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaDrops {
    pub entities: usize,
    pub triples: usize,
}

/// Extraction result for one document. Invalid predictions carry no
/// annotations, only the raw responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub doc_id: String,
    pub entities: Vec<Entity>,
    pub mentions: Vec<Mention>,
    #[serde(rename = "relations")]
    pub triples: Vec<Triple>,
    pub valid: bool,
    pub raw_responses: [String; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demo_id: Option<String>,
    #[serde(default)]
    pub schema_drops: SchemaDrops,
}

impl Prediction {
    pub fn invalid(doc_id: impl Into<String>, raw_responses: [String; 2]) -> Self {
        Prediction {
            doc_id: doc_id.into(),
            entities: Vec::new(),
            mentions: Vec::new(),
            triples: Vec::new(),
            valid: false,
            raw_responses,
            demo_id: None,
            schema_drops: SchemaDrops::default(),
        }
    }
}

/// Byte range of the text sent in the first call: the first paragraph, or a
/// sentence-aligned ~100-word prefix when the document is one long paragraph.
pub fn first_fragment_range(doc: &SourceDocument) -> Range<usize> {
    let paragraphs = paragraph_ranges(&doc.text);
    match paragraphs.as_slice() {
        [] => 0..doc.text.len(),
        [only] if word_count(&doc.text[only.clone()]) > SINGLE_PARAGRAPH_LIMIT => {
            let prefix = truncate_text(&doc.text[only.start..], FRAGMENT_MIN_WORDS);
            only.start..only.start + prefix.len()
        }
        [first, ..] => first.clone(),
    }
}

pub fn first_fragment(doc: &SourceDocument) -> &str {
    &doc.text[first_fragment_range(doc)]
}

fn compact(value: &impl Serialize) -> String {
    serde_json::to_string(value).expect("value serializes")
}

fn annotation_block(
    text: &str,
    entity_types: &[String],
    text_with_spans: &str,
    entities: &[Entity],
    relation_types: &[String],
    relations: &[Triple],
) -> String {
    format!(
        "{{\n    \"text\": {},\n    \"entity_types\": {},\n    \"text_with_spans\": {},\n    \"entities\": {},\n    \"relation_types\": {},\n    \"relations\": {}\n}}",
        compact(&text),
        compact(&entity_types),
        compact(&text_with_spans),
        compact(&entities),
        compact(&relation_types),
        compact(&relations),
    )
}

/// Fills the inference prompt. The demonstration block keeps the demo's own
/// types; the block to complete carries the task schema and, when given, the
/// partial annotation (its mentions must index into `query_text`).
pub fn build_inference_prompt(
    demo: &AnnotationRecord,
    partial: Option<&Prediction>,
    query_text: &str,
    schema: &Schema,
) -> String {
    assert!(schema.validate().is_ok(), "inference requires a non-empty schema");
    let demonstration = annotation_block(
        &demo.text,
        &demo.entity_types,
        &demo.annotated_text,
        &demo.entities,
        &demo.relation_types,
        &demo.triples,
    );
    let (entities, relations, with_spans) = match partial {
        Some(p) => (
            p.entities.as_slice(),
            p.triples.as_slice(),
            markup::render_annotated(query_text, &p.mentions).unwrap_or_else(|_| query_text.to_string()),
        ),
        None => (&[][..], &[][..], query_text.to_string()),
    };
    let annotation = annotation_block(
        query_text,
        &schema.entity_types,
        &with_spans,
        entities,
        &schema.relation_types,
        relations,
    );
    template::fill(
        INFERENCE_TEMPLATE,
        &[("demonstration", &demonstration), ("annotation", &annotation)],
    )
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Maps mentions found in `echoed` (which equals `text` up to whitespace
/// runs) back onto exact spans of `text`. Mentions that cannot be placed
/// exactly are dropped.
fn reanchor(echoed: &str, text: &str, mentions: Vec<Mention>) -> Vec<Mention> {
    let echoed_chars: Vec<char> = echoed.chars().collect();
    let text_chars: Vec<char> = text.chars().collect();
    let text_nonws: Vec<usize> = (0..text_chars.len()).filter(|&i| !text_chars[i].is_whitespace()).collect();
    let mut rank = vec![usize::MAX; echoed_chars.len()];
    let mut r = 0;
    for (i, c) in echoed_chars.iter().enumerate() {
        if !c.is_whitespace() {
            rank[i] = r;
            r += 1;
        }
    }
    let byte_to_char: HashMap<usize, usize> = text.char_indices().enumerate().map(|(ci, (b, _))| (b, ci)).collect();

    mentions
        .into_iter()
        .filter_map(|mut m| {
            let inner = (m.span.start..m.span.end).filter(|&i| rank[i] != usize::MAX);
            let (first, last) = {
                let mut it = inner;
                let first = it.next()?;
                let last = it.next_back().unwrap_or(first);
                (first, last)
            };
            let start = *text_nonws.get(rank[first])?;
            let end = *text_nonws.get(rank[last])? + 1;
            let surface = m.surface.trim();
            let candidate: String = text_chars[start..end].iter().collect();
            let span = if candidate == surface {
                Span::new(start, end)
            } else {
                let nearest = text
                    .match_indices(surface)
                    .filter_map(|(b, _)| byte_to_char.get(&b).copied())
                    .min_by_key(|&c| c.abs_diff(start))?;
                Span::new(nearest, nearest + char_len(surface))
            };
            m.surface = text_chars[span.start..span.end].iter().collect();
            m.span = span;
            Some(m)
        })
        .collect()
}

/// Parsed content of one completion, anchored into `text`.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub entities: Vec<Entity>,
    pub mentions: Vec<Mention>,
    pub triples: Vec<Triple>,
}

/// Parses a completion response against `text`. `None` when the response is
/// unusable: no JSON, missing keys, broken tags, or an echo that differs
/// from `text` beyond whitespace.
pub fn interpret_completion(response: &str, text: &str) -> Option<Completion> {
    let raw = parse_response(response, ResponseShape::Completion).ok()?;
    let (echoed, mentions) = markup::parse_annotated(&raw.text_with_spans).ok()?;
    if collapse_ws(&echoed) != collapse_ws(text) {
        return None;
    }
    let mut seen = HashSet::new();
    let entities: Vec<Entity> = raw.entities.into_iter().filter(|e| seen.insert(e.id)).collect();
    let types: HashMap<u64, String> = entities.iter().map(|e| (e.id, e.type_label.clone())).collect();

    let mut mentions: Vec<Mention> = reanchor(&echoed, text, mentions)
        .into_iter()
        .filter_map(|mut m| {
            m.type_label = types.get(&m.entity_id)?.clone();
            Some(m)
        })
        .collect();
    mentions.sort_by_key(|m| (m.span.start, m.span.end));
    mentions.dedup_by(|b, a| a.span.overlaps(&b.span));

    let triples = raw
        .triples
        .into_iter()
        .filter(|t| types.contains_key(&t.subject) && types.contains_key(&t.object))
        .collect();
    Some(Completion {
        entities,
        mentions,
        triples,
    })
}

/// Drops off-schema entities (with their mentions and incident triples) and
/// off-schema triples. Type matching is normalized.
pub fn enforce_schema(pred: &Prediction, schema: &Schema) -> Prediction {
    let mut out = pred.clone();
    let removed: HashSet<u64> = pred
        .entities
        .iter()
        .filter(|e| !schema.has_entity_type(&e.type_label))
        .map(|e| e.id)
        .collect();
    out.entities.retain(|e| !removed.contains(&e.id));
    out.mentions.retain(|m| !removed.contains(&m.entity_id));
    out.triples.retain(|t| {
        !removed.contains(&t.subject) && !removed.contains(&t.object) && schema.has_relation_type(&t.predicate)
    });
    out.schema_drops.entities += pred.entities.len() - out.entities.len();
    out.schema_drops.triples += pred.triples.len() - out.triples.len();
    out
}

fn shift(completion: Completion, char_offset: usize, text: &str) -> Completion {
    let chars: Vec<char> = text.chars().collect();
    let mentions = completion
        .mentions
        .into_iter()
        .map(|mut m| {
            m.span = Span::new(m.span.start + char_offset, m.span.end + char_offset);
            m.surface = chars[m.span.start..m.span.end].iter().collect();
            m
        })
        .collect();
    Completion { mentions, ..completion }
}

/// Runs both calls for one document. Gateway and retrieval errors abort the
/// document; unusable output yields an invalid prediction.
pub fn infer_document(
    doc: &SourceDocument,
    schema: &Schema,
    retriever: &Retriever<'_>,
    exclusions: &ExclusionList,
    model: &dyn ChatModel,
    params: &GenerationParams,
) -> Result<Prediction, InferenceError> {
    let demo = retriever.retrieve(&doc.text, exclusions, 1)?.remove(0);
    let fragment_range = first_fragment_range(doc);
    let fragment = &doc.text[fragment_range.clone()];
    let fragment_offset = char_len(&doc.text[..fragment_range.start]);

    let first_prompt = build_inference_prompt(demo.record, None, fragment, schema);
    let first_response = model.complete(&first_prompt, params)?;
    let partial = interpret_completion(&first_response, fragment).map(|c| {
        let c = shift(c, fragment_offset, &doc.text);
        Prediction {
            entities: c.entities,
            mentions: c.mentions,
            triples: c.triples,
            valid: true,
            ..Prediction::invalid(doc.id.clone(), Default::default())
        }
    });

    let second_prompt = build_inference_prompt(demo.record, partial.as_ref(), &doc.text, schema);
    let second_response = model.complete(&second_prompt, params)?;
    let raw_responses = [first_response, second_response.clone()];

    let Some(completion) = interpret_completion(&second_response, &doc.text) else {
        let mut pred = Prediction::invalid(doc.id.clone(), raw_responses);
        pred.demo_id = Some(demo.doc_id.to_string());
        return Ok(pred);
    };
    let pred = Prediction {
        doc_id: doc.id.clone(),
        entities: completion.entities,
        mentions: completion.mentions,
        triples: completion.triples,
        valid: true,
        raw_responses,
        demo_id: Some(demo.doc_id.to_string()),
        schema_drops: SchemaDrops::default(),
    };
    Ok(enforce_schema(&pred, schema))
}

pub fn infer_corpus(
    docs: &[SourceDocument],
    schema: &Schema,
    retriever: &Retriever<'_>,
    exclusions: &ExclusionList,
    model: &dyn ChatModel,
    params: &GenerationParams,
    parallelism: usize,
) -> Vec<Result<Prediction, InferenceError>> {
    pool::run_ordered(parallelism, docs, |doc| {
        infer_document(doc, schema, retriever, exclusions, model, params)
    })
}

/// Task input: the documents plus the schema to extract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub entity_types: Vec<String>,
    pub relation_types: Vec<String>,
    pub documents: Vec<SourceDocument>,
}

impl TaskFile {
    pub fn schema(&self) -> Result<Schema, crate::model::ModelError> {
        Schema::new(self.entity_types.clone(), self.relation_types.clone())
    }

    pub fn from_json(raw: &str) -> Result<Self, serde_json::Error> {
        let value: Value = serde_json::from_str(raw)?;
        // Also accept the schema nested under "schema".
        if let Some(schema) = value.get("schema") {
            let mut flat = value.clone();
            flat["entity_types"] = schema["entity_types"].clone();
            flat["relation_types"] = schema["relation_types"].clone();
            return serde_json::from_value(flat);
        }
        serde_json::from_value(value)
    }
}
