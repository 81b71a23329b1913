//! Scoring of predictions against gold annotations.
//!
//! Five tasks: mention detection, entity identification, entity
//! classification, and relation extraction in general and strict modes.
//! Everything is micro-averaged over documents and reported as percentages.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::Prediction;
use crate::markup;
use crate::model::{normalize_surface, AnnotationRecord, Mention, Span};
use crate::pool;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("gold document {0} has entities but no mention annotation")]
    GoldMissingMentions(String),
    #[error("gold document {0} has no span offsets")]
    GoldMissingOffsets(String),
    #[error("no predictions to evaluate")]
    EmptyPredictionSet,
    #[error("gold document {0} has broken markup: {1}")]
    GoldMarkup(String, String),
}

/// Precision, recall and F1 as percentages; each is 0 when its denominator is.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { 100.0 * num as f64 / den as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    fn from_matches(matched: usize, predicted: usize, gold: usize) -> Self {
        Counts {
            tp: matched,
            fp: predicted - matched,
            fn_: gold - matched,
        }
    }

    fn add(self, other: Counts) -> Counts {
        Counts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

impl From<Counts> for TaskScores {
    fn from(counts: Counts) -> Self {
        let (precision, recall, f1) = prf(counts.tp, counts.fp, counts.fn_);
        TaskScores {
            precision,
            recall,
            f1,
            counts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Invalid outputs score as empty predictions.
    AllDocs,
    /// Documents without a valid output are left out.
    ValidOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strictness {
    /// Endpoint entity types are ignored.
    General,
    /// Endpoint entity types must match the gold endpoints.
    Strict,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Match mentions on character offsets instead of surfaces.
    pub mentions_by_offset: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalMention {
    /// Normalized surface.
    pub surface: String,
    pub span: Option<Span>,
}

/// An entity cluster reduced to what matching needs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalEntity {
    pub id: u64,
    /// Normalized type label.
    pub type_label: String,
    /// Normalized mention surfaces, or the normalized name when there are none.
    pub surfaces: BTreeSet<String>,
}

impl EvalEntity {
    fn key(&self) -> String {
        let mut key = self.surfaces.iter().cloned().collect::<Vec<_>>().join("\u{1f}");
        key.push('\u{1e}');
        key.push_str(&self.type_label);
        key
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTriple {
    pub subject: u64,
    /// Normalized predicate.
    pub predicate: String,
    pub object: u64,
}

/// One document on either side of the comparison.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalDoc {
    pub doc_id: String,
    pub valid: bool,
    pub entities: Vec<EvalEntity>,
    /// `None` when the source carries clusters but no mention annotation.
    pub mentions: Option<Vec<EvalMention>>,
    pub triples: Vec<EvalTriple>,
}

fn build_entities<'a>(
    entities: impl Iterator<Item = (u64, &'a str, &'a str)>,
    mentions: &[Mention],
) -> Vec<EvalEntity> {
    let mut by_id: HashMap<u64, BTreeSet<String>> = HashMap::new();
    for m in mentions {
        by_id.entry(m.entity_id).or_default().insert(normalize_surface(&m.surface));
    }
    entities
        .map(|(id, name, type_label)| EvalEntity {
            id,
            type_label: normalize_surface(type_label),
            surfaces: by_id
                .get(&id)
                .filter(|s| !s.is_empty())
                .cloned()
                .unwrap_or_else(|| BTreeSet::from([normalize_surface(name)])),
        })
        .collect()
}

fn eval_mentions_of(mentions: &[Mention]) -> Vec<EvalMention> {
    mentions
        .iter()
        .map(|m| EvalMention {
            surface: normalize_surface(&m.surface),
            span: Some(m.span),
        })
        .collect()
}

impl EvalDoc {
    pub fn empty(doc_id: impl Into<String>) -> Self {
        EvalDoc {
            doc_id: doc_id.into(),
            valid: false,
            entities: Vec::new(),
            mentions: Some(Vec::new()),
            triples: Vec::new(),
        }
    }

    /// Gold or demo record. Mentions are recovered from the annotated text
    /// when the record does not list them.
    pub fn from_record(record: &AnnotationRecord) -> Result<Self, EvalError> {
        let mentions = if record.mentions.is_empty() && !record.annotated_text.is_empty() {
            markup::parse_annotated(&record.annotated_text)
                .map_err(|e| EvalError::GoldMarkup(record.doc_id.clone(), e.to_string()))?
                .1
        } else {
            record.mentions.clone()
        };
        let has_mentions = !mentions.is_empty() || record.entities.is_empty();
        Ok(EvalDoc {
            doc_id: record.doc_id.clone(),
            valid: true,
            entities: build_entities(
                record.entities.iter().map(|e| (e.id, e.name.as_str(), e.type_label.as_str())),
                &mentions,
            ),
            mentions: has_mentions.then(|| eval_mentions_of(&mentions)),
            triples: record
                .triples
                .iter()
                .map(|t| EvalTriple {
                    subject: t.subject,
                    predicate: normalize_surface(&t.predicate),
                    object: t.object,
                })
                .collect(),
        })
    }

    /// Invalid predictions become empty documents.
    pub fn from_prediction(pred: &Prediction) -> Self {
        if !pred.valid {
            return EvalDoc::empty(pred.doc_id.clone());
        }
        EvalDoc {
            doc_id: pred.doc_id.clone(),
            valid: true,
            entities: build_entities(
                pred.entities.iter().map(|e| (e.id, e.name.as_str(), e.type_label.as_str())),
                &pred.mentions,
            ),
            mentions: Some(eval_mentions_of(&pred.mentions)),
            triples: pred
                .triples
                .iter()
                .map(|t| EvalTriple {
                    subject: t.subject,
                    predicate: normalize_surface(&t.predicate),
                    object: t.object,
                })
                .collect(),
        }
    }
}

/// Gold in cluster form: each entity lists its mention surfaces, triples
/// refer to entities by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterGold {
    #[serde(alias = "id", alias = "title")]
    pub doc_id: String,
    pub entities: Vec<ClusterEntity>,
    #[serde(default)]
    pub triples: Vec<ClusterTriple>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEntity {
    #[serde(rename = "type")]
    pub type_label: String,
    pub mentions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTriple {
    pub head: u64,
    pub relation: String,
    pub tail: u64,
}

impl From<&ClusterGold> for EvalDoc {
    fn from(gold: &ClusterGold) -> Self {
        let entities: Vec<EvalEntity> = gold
            .entities
            .iter()
            .enumerate()
            .map(|(i, e)| EvalEntity {
                id: i as u64,
                type_label: normalize_surface(&e.type_label),
                surfaces: e.mentions.iter().map(|m| normalize_surface(m)).collect(),
            })
            .collect();
        let mentions: Vec<EvalMention> = gold
            .entities
            .iter()
            .flat_map(|e| &e.mentions)
            .map(|m| EvalMention {
                surface: normalize_surface(m),
                span: None,
            })
            .collect();
        let has_mentions = !mentions.is_empty() || entities.is_empty();
        EvalDoc {
            doc_id: gold.doc_id.clone(),
            valid: true,
            entities,
            mentions: has_mentions.then_some(mentions),
            triples: gold
                .triples
                .iter()
                .map(|t| EvalTriple {
                    subject: t.head,
                    predicate: normalize_surface(&t.relation),
                    object: t.tail,
                })
                .collect(),
        }
    }
}

/// Candidate pair for greedy one-to-one matching.
struct Candidate {
    score: usize,
    exact: bool,
    pred_key: String,
    gold_key: String,
    pred: usize,
    gold: usize,
}

/// Matches in descending score; ties prefer exact matches, then go to the
/// lexicographically smaller (pred, gold) keys.
fn greedy_match(mut candidates: Vec<Candidate>) -> Vec<(usize, usize)> {
    candidates.sort_by(|a, b| {
        b.score
            .cmp(&a.score)
            .then(b.exact.cmp(&a.exact))
            .then_with(|| a.pred_key.cmp(&b.pred_key))
            .then_with(|| a.gold_key.cmp(&b.gold_key))
    });
    let mut used_pred = HashSet::new();
    let mut used_gold = HashSet::new();
    let mut out = Vec::new();
    for c in candidates {
        if !used_pred.contains(&c.pred) && !used_gold.contains(&c.gold) {
            used_pred.insert(c.pred);
            used_gold.insert(c.gold);
            out.push((c.pred, c.gold));
        }
    }
    out
}

fn overlap(a: &EvalEntity, b: &EvalEntity) -> usize {
    a.surfaces.intersection(&b.surfaces).count()
}

fn entity_pairs(pred: &EvalDoc, gold: &EvalDoc) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (pi, p) in pred.entities.iter().enumerate() {
        for (gi, g) in gold.entities.iter().enumerate() {
            let score = overlap(p, g);
            if score > 0 {
                candidates.push(Candidate {
                    score,
                    exact: p.surfaces == g.surfaces,
                    pred_key: p.key(),
                    gold_key: g.key(),
                    pred: pi,
                    gold: gi,
                });
            }
        }
    }
    greedy_match(candidates)
}

fn mention_counts(pred: &EvalDoc, gold: &EvalDoc, options: EvalOptions) -> Result<Counts, EvalError> {
    let gold_mentions = gold
        .mentions
        .as_ref()
        .ok_or_else(|| EvalError::GoldMissingMentions(gold.doc_id.clone()))?;
    let pred_mentions = pred.mentions.as_deref().unwrap_or_default();
    let key = |m: &EvalMention| -> Option<String> {
        if options.mentions_by_offset {
            m.span.map(|s| format!("{}:{}", s.start, s.end))
        } else {
            Some(m.surface.clone())
        }
    };
    let mut remaining: HashMap<String, usize> = HashMap::new();
    for m in gold_mentions {
        let k = key(m).ok_or_else(|| EvalError::GoldMissingOffsets(gold.doc_id.clone()))?;
        *remaining.entry(k).or_default() += 1;
    }
    let mut matched = 0;
    for m in pred_mentions {
        if let Some(slot) = key(m).and_then(|k| remaining.get_mut(&k)) {
            if *slot > 0 {
                *slot -= 1;
                matched += 1;
            }
        }
    }
    Ok(Counts::from_matches(matched, pred_mentions.len(), gold_mentions.len()))
}

fn ident_counts(pred: &EvalDoc, gold: &EvalDoc) -> Counts {
    let pairs = entity_pairs(pred, gold);
    Counts::from_matches(pairs.len(), pred.entities.len(), gold.entities.len())
}

fn class_counts(pred: &EvalDoc, gold: &EvalDoc) -> Counts {
    let typed = entity_pairs(pred, gold)
        .into_iter()
        .filter(|&(p, g)| pred.entities[p].type_label == gold.entities[g].type_label)
        .count();
    Counts::from_matches(typed, pred.entities.len(), gold.entities.len())
}

fn relation_counts(pred: &EvalDoc, gold: &EvalDoc, strictness: Strictness) -> Counts {
    let pred_ents: HashMap<u64, &EvalEntity> = pred.entities.iter().map(|e| (e.id, e)).collect();
    let gold_ents: HashMap<u64, &EvalEntity> = gold.entities.iter().map(|e| (e.id, e)).collect();
    let resolve = |t: &EvalTriple, map: &HashMap<u64, &'_ EvalEntity>| -> Option<(EvalEntity, EvalEntity)> {
        Some(((*map.get(&t.subject)?).clone(), (*map.get(&t.object)?).clone()))
    };
    let mut candidates = Vec::new();
    for (pi, pt) in pred.triples.iter().enumerate() {
        let Some((ps, po)) = resolve(pt, &pred_ents) else { continue };
        for (gi, gt) in gold.triples.iter().enumerate() {
            if pt.predicate != gt.predicate {
                continue;
            }
            let Some((gs, go)) = resolve(gt, &gold_ents) else { continue };
            let (subject_overlap, object_overlap) = (overlap(&ps, &gs), overlap(&po, &go));
            if subject_overlap == 0 || object_overlap == 0 {
                continue;
            }
            if strictness == Strictness::Strict && (ps.type_label != gs.type_label || po.type_label != go.type_label) {
                continue;
            }
            candidates.push(Candidate {
                score: subject_overlap + object_overlap,
                exact: ps.surfaces == gs.surfaces && po.surfaces == go.surfaces,
                pred_key: format!("{}\u{1d}{}\u{1d}{}", ps.key(), pt.predicate, po.key()),
                gold_key: format!("{}\u{1d}{}\u{1d}{}", gs.key(), gt.predicate, go.key()),
                pred: pi,
                gold: gi,
            });
        }
    }
    let matched = greedy_match(candidates).len();
    Counts::from_matches(matched, pred.triples.len(), gold.triples.len())
}

/// Pairs each gold document with its prediction. Missing predictions count
/// as invalid; predictions for unknown documents are ignored.
fn align<'a>(preds: &'a [EvalDoc], golds: &'a [EvalDoc], mode: EvalMode) -> Vec<(Option<&'a EvalDoc>, &'a EvalDoc)> {
    let by_id: HashMap<&str, &EvalDoc> = preds.iter().map(|p| (p.doc_id.as_str(), p)).collect();
    golds
        .iter()
        .filter_map(|g| {
            let pred = by_id.get(g.doc_id.as_str()).copied().filter(|p| p.valid);
            match (mode, pred) {
                (EvalMode::ValidOnly, None) => None,
                _ => Some((pred, g)),
            }
        })
        .collect()
}

fn tally(
    preds: &[EvalDoc],
    golds: &[EvalDoc],
    mode: EvalMode,
    parallelism: usize,
    per_doc: impl Fn(&EvalDoc, &EvalDoc) -> Result<Counts, EvalError> + Sync,
) -> Result<Counts, EvalError> {
    let pairs = align(preds, golds, mode);
    let per_doc_counts = pool::run_ordered(parallelism, &pairs, |(pred, gold)| match pred {
        Some(p) => per_doc(p, gold),
        None => per_doc(&EvalDoc::empty(gold.doc_id.clone()), gold),
    });
    per_doc_counts
        .into_iter()
        .try_fold(Counts::default(), |acc, c| Ok(acc.add(c?)))
}

pub fn eval_mentions(
    preds: &[EvalDoc],
    golds: &[EvalDoc],
    mode: EvalMode,
    options: EvalOptions,
) -> Result<TaskScores, EvalError> {
    tally(preds, golds, mode, 1, |p, g| mention_counts(p, g, options)).map(Into::into)
}

pub fn eval_entity_ident(preds: &[EvalDoc], golds: &[EvalDoc], mode: EvalMode) -> TaskScores {
    tally(preds, golds, mode, 1, |p, g| Ok(ident_counts(p, g)))
        .expect("entity matching is infallible")
        .into()
}

pub fn eval_entity_class(preds: &[EvalDoc], golds: &[EvalDoc], mode: EvalMode) -> TaskScores {
    tally(preds, golds, mode, 1, |p, g| Ok(class_counts(p, g)))
        .expect("entity matching is infallible")
        .into()
}

pub fn eval_relations(preds: &[EvalDoc], golds: &[EvalDoc], mode: EvalMode, strictness: Strictness) -> TaskScores {
    tally(preds, golds, mode, 1, |p, g| Ok(relation_counts(p, g, strictness)))
        .expect("relation matching is infallible")
        .into()
}

/// Percentage of predictions marked valid.
pub fn valid_rate(preds: &[EvalDoc]) -> Result<f64, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyPredictionSet);
    }
    Ok(100.0 * preds.iter().filter(|p| p.valid).count() as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub documents: usize,
    pub valid_rate: f64,
    pub mention_det: TaskScores,
    pub entity_ident: TaskScores,
    pub entity_class: TaskScores,
    pub re_general: TaskScores,
    pub re_strict: TaskScores,
}

pub const TASK_LABELS: [&str; 5] = ["Mention det.", "Entity Ident.", "Entity Class.", "RE (General)", "RE (Strict)"];

impl EvalReport {
    pub fn rows(&self) -> [(&'static str, &TaskScores); 5] {
        [
            (TASK_LABELS[0], &self.mention_det),
            (TASK_LABELS[1], &self.entity_ident),
            (TASK_LABELS[2], &self.entity_class),
            (TASK_LABELS[3], &self.re_general),
            (TASK_LABELS[4], &self.re_strict),
        ]
    }

    pub fn to_table(&self) -> String {
        let mode = match self.mode {
            EvalMode::AllDocs => "all documents",
            EvalMode::ValidOnly => "valid outputs only",
        };
        let mut out = format!(
            "Mode: {mode} ({} documents, valid rate {:.2}%)\n{:<14} {:>7} {:>7} {:>7}\n",
            self.documents, self.valid_rate, "Task", "P (%)", "R (%)", "F1 (%)"
        );
        for (label, s) in self.rows() {
            let _ = writeln!(out, "{label:<14} {:>7.2} {:>7.2} {:>7.2}", s.precision, s.recall, s.f1);
        }
        out
    }
}

/// Scores every task. The valid rate is taken over the gold documents, with
/// a missing prediction counted as invalid.
pub fn evaluate(
    preds: &[EvalDoc],
    golds: &[EvalDoc],
    mode: EvalMode,
    options: EvalOptions,
    parallelism: usize,
) -> Result<EvalReport, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::EmptyPredictionSet);
    }
    let aligned_all = align(preds, golds, EvalMode::AllDocs);
    let valid = aligned_all.iter().filter(|(p, _)| p.is_some()).count();
    let valid_rate = if aligned_all.is_empty() {
        0.0
    } else {
        100.0 * valid as f64 / aligned_all.len() as f64
    };
    // One pass per document computes all five tallies.
    let pairs = align(preds, golds, mode);
    let per_doc = pool::run_ordered(parallelism, &pairs, |(pred, gold)| {
        let empty;
        let p = match pred {
            Some(p) => *p,
            None => {
                empty = EvalDoc::empty(gold.doc_id.clone());
                &empty
            }
        };
        Ok::<_, EvalError>([
            mention_counts(p, gold, options)?,
            ident_counts(p, gold),
            class_counts(p, gold),
            relation_counts(p, gold, Strictness::General),
            relation_counts(p, gold, Strictness::Strict),
        ])
    });
    let mut totals = [Counts::default(); 5];
    for doc in per_doc {
        for (total, c) in totals.iter_mut().zip(doc?) {
            *total = total.add(c);
        }
    }
    Ok(EvalReport {
        mode,
        documents: pairs.len(),
        valid_rate,
        mention_det: totals[0].into(),
        entity_ident: totals[1].into(),
        entity_class: totals[2].into(),
        re_general: totals[3].into(),
        re_strict: totals[4].into(),
    })
}
