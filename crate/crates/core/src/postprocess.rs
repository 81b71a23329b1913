//! Post-processing of annotated records: model-checked triple direction,
//! relation-type discard, and degenerate-document filters.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::gateway::{extract_boxed, ChatModel, GatewayError, GenerationParams, Verdict};
use crate::model::{normalize_surface, AnnotationRecord, Entity, Triple};
use crate::{pool, template};

pub const TRIPLE_VERIFICATION_TEMPLATE: &str = r#"Which of the following is a good description of the meaning of the sentence
"{description}"?

A:
```json
{"subject": "{subject}", "predicate": "{predicate}", "object": "{object}"}
```
B:
```json
{"subject": "{object}", "predicate": "{predicate}", "object": "{subject}"}
```
C:
Both. Only use this option if the predicate/property is a symmetric one.

D:
None of the above. Only use this option if the above are nonsensical or vastly
different from the text.

format your answer like so:
\boxed{<A_or_B_or_C_or_D>}"#;

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("triple references entity id {0} which is not in the record")]
    UnresolvableEntity(u64),
    #[error("document {doc_id}: no verdict for triple {index}")]
    MissingVerdict { doc_id: String, index: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub fn build_triple_verification_prompt(triple: &Triple, entities: &[Entity]) -> Result<String, PostprocessError> {
    let name_of = |id: u64| {
        entities
            .iter()
            .find(|e| e.id == id)
            .map(|e| e.name.as_str())
            .ok_or(PostprocessError::UnresolvableEntity(id))
    };
    let subject = name_of(triple.subject)?;
    let object = name_of(triple.object)?;
    Ok(template::fill(
        TRIPLE_VERIFICATION_TEMPLATE,
        &[
            ("description", &triple.description),
            ("subject", subject),
            ("predicate", &triple.predicate),
            ("object", object),
        ],
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adjudication {
    Keep,
    Inconsistent,
}

/// A keeps the triple as stated, C keeps it as symmetric; B (reversed) and
/// D (neither) mark it inconsistent.
pub fn adjudicate(verdict: Verdict) -> Adjudication {
    match verdict {
        Verdict::A | Verdict::C => Adjudication::Keep,
        Verdict::B | Verdict::D => Adjudication::Inconsistent,
    }
}

/// The model's answer for one triple. `verdict` is `None` when the response
/// held no usable `\boxed{}` letter, which counts as inconsistent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleVerdict {
    pub doc_id: String,
    pub index: usize,
    pub verdict: Option<Verdict>,
}

impl TripleVerdict {
    pub fn adjudication(&self) -> Adjudication {
        self.verdict.map_or(Adjudication::Inconsistent, adjudicate)
    }
}

/// Removes every triple whose predicate received at least one inconsistent
/// verdict in this record. Returns the filtered record and the discarded
/// predicates in sorted order.
pub fn apply_discard_policy(
    record: &AnnotationRecord,
    verdicts: &[TripleVerdict],
) -> Result<(AnnotationRecord, Vec<String>), PostprocessError> {
    let mut by_index: BTreeMap<usize, &TripleVerdict> = BTreeMap::new();
    for v in verdicts.iter().filter(|v| v.doc_id == record.doc_id) {
        by_index.insert(v.index, v);
    }
    let mut bad: BTreeSet<String> = BTreeSet::new();
    for (index, triple) in record.triples.iter().enumerate() {
        let verdict = by_index.get(&index).ok_or_else(|| PostprocessError::MissingVerdict {
            doc_id: record.doc_id.clone(),
            index,
        })?;
        if verdict.adjudication() == Adjudication::Inconsistent {
            bad.insert(triple.predicate.clone());
        }
    }
    let mut out = record.clone();
    out.triples.retain(|t| !bad.contains(&t.predicate));
    out.relation_types.retain(|p| !bad.contains(p));
    Ok((out, bad.into_iter().collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Every entity's type equals its own name.
    SelfTyped,
    /// Two or more entities, all of one type.
    MonoTyped,
    NoEntities,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegenerateCheck {
    Keep,
    Drop(DropReason),
}

pub fn filter_degenerate(record: &AnnotationRecord) -> DegenerateCheck {
    if record.entities.is_empty() {
        return DegenerateCheck::Drop(DropReason::NoEntities);
    }
    if record
        .entities
        .iter()
        .all(|e| normalize_surface(&e.name) == normalize_surface(&e.type_label))
    {
        return DegenerateCheck::Drop(DropReason::SelfTyped);
    }
    if record.entities.len() >= 2 {
        let types: HashSet<String> = record.entities.iter().map(|e| normalize_surface(&e.type_label)).collect();
        if types.len() == 1 {
            return DegenerateCheck::Drop(DropReason::MonoTyped);
        }
    }
    DegenerateCheck::Keep
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropStage {
    TripleVerify,
    SelfTyped,
    MonoTyped,
    NoEntities,
}

impl From<DropReason> for DropStage {
    fn from(reason: DropReason) -> Self {
        match reason {
            DropReason::SelfTyped => DropStage::SelfTyped,
            DropReason::MonoTyped => DropStage::MonoTyped,
            DropReason::NoEntities => DropStage::NoEntities,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropLogEntry {
    pub doc_id: String,
    pub stage: DropStage,
    pub reason: Value,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PostprocessOutput {
    pub kept: Vec<AnnotationRecord>,
    pub drops: Vec<DropLogEntry>,
    pub verdicts: Vec<TripleVerdict>,
}

fn verdict_label(v: &TripleVerdict) -> &'static str {
    match v.verdict {
        Some(Verdict::A) => "A",
        Some(Verdict::B) => "B",
        Some(Verdict::C) => "C",
        Some(Verdict::D) => "D",
        None => "no_verdict",
    }
}

/// Asks the model about each triple of a record, one call per triple.
pub fn verify_triples(
    record: &AnnotationRecord,
    model: &dyn ChatModel,
    params: &GenerationParams,
) -> Result<Vec<TripleVerdict>, PostprocessError> {
    record
        .triples
        .iter()
        .enumerate()
        .map(|(index, triple)| {
            let prompt = build_triple_verification_prompt(triple, &record.entities)?;
            let response = model.complete(&prompt, params)?;
            Ok(TripleVerdict {
                doc_id: record.doc_id.clone(),
                index,
                verdict: extract_boxed(&response).ok(),
            })
        })
        .collect()
}

struct DocResult {
    kept: Option<AnnotationRecord>,
    drops: Vec<DropLogEntry>,
    verdicts: Vec<TripleVerdict>,
}

fn process_one(record: &AnnotationRecord, model: &dyn ChatModel, params: &GenerationParams) -> DocResult {
    let mut drops = Vec::new();
    let verdicts = match verify_triples(record, model, params) {
        Ok(v) => v,
        Err(e) => {
            return DocResult {
                kept: None,
                drops: vec![DropLogEntry {
                    doc_id: record.doc_id.clone(),
                    stage: DropStage::TripleVerify,
                    reason: json!({ "error": e.to_string() }),
                }],
                verdicts: Vec::new(),
            }
        }
    };
    let (filtered, discarded) = apply_discard_policy(record, &verdicts).expect("verdicts cover every triple");
    for predicate in &discarded {
        let involved: Vec<Value> = record
            .triples
            .iter()
            .zip(&verdicts)
            .filter(|(t, _)| &t.predicate == predicate)
            .map(|(t, v)| json!({ "index": v.index, "triple_string": t.triple_string, "verdict": verdict_label(v) }))
            .collect();
        drops.push(DropLogEntry {
            doc_id: record.doc_id.clone(),
            stage: DropStage::TripleVerify,
            reason: json!({ "predicate": predicate, "removed": involved }),
        });
    }
    let kept = match filter_degenerate(&filtered) {
        DegenerateCheck::Keep => Some(filtered),
        DegenerateCheck::Drop(reason) => {
            drops.push(DropLogEntry {
                doc_id: record.doc_id.clone(),
                stage: reason.into(),
                reason: json!({
                    "entities": filtered.entities.len(),
                    "entity_types": filtered.entity_types,
                }),
            });
            None
        }
    };
    DocResult { kept, drops, verdicts }
}

/// Runs triple verification, the discard policy and the degenerate filters
/// over a corpus. A gateway failure drops only the affected document.
pub fn postprocess_corpus(
    records: &[AnnotationRecord],
    model: &dyn ChatModel,
    params: &GenerationParams,
    parallelism: usize,
) -> PostprocessOutput {
    let results = pool::run_ordered(parallelism, records, |r| process_one(r, model, params));
    let mut out = PostprocessOutput::default();
    for r in results {
        out.kept.extend(r.kept);
        out.drops.extend(r.drops);
        out.verdicts.extend(r.verdicts);
    }
    out
}
