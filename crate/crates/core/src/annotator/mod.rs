//! Annotation phase: truncate, prompt zero-shot, parse, verify, and retry
//! once at a raised temperature.

mod prompt;
mod segment;
mod verify;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub use prompt::{
    build_zero_shot_prompt, json_escape, parse_annotation_response, parse_response, RawAnnotation, ResponseError,
    ResponseShape, ZERO_SHOT_TEMPLATE,
};
pub use segment::{sentence_ranges, split_sentences, truncate_text};
pub use verify::{parse_triple_string, verify_annotation, ErrorKind, Finding, VerificationReport};

use crate::gateway::{ChatModel, GatewayError, GenerationParams};
use crate::markup;
use crate::model::{word_count, AnnotationRecord, Mention, Provenance, SourceDocument};
use crate::pool;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatorConfig {
    /// Model name and first-attempt temperature.
    pub params: GenerationParams,
    pub retry_temperature: f64,
    pub min_words: usize,
}

impl AnnotatorConfig {
    pub fn new(model_name: impl Into<String>) -> Self {
        AnnotatorConfig {
            params: GenerationParams::new(model_name, 0.0),
            retry_temperature: 0.2,
            min_words: 100,
        }
    }
}

/// A document that failed annotation. Verification failures carry one report
/// per attempt; gateway failures carry `error` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub doc_id: String,
    pub word_count: usize,
    #[serde(default)]
    pub reports: Vec<VerificationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl FailureRecord {
    pub fn is_job_error(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnnotationOutcome {
    Annotated(AnnotationRecord),
    Rejected(FailureRecord),
}

/// Everything the length statistics need about one processed document.
#[derive(Debug, Clone, PartialEq)]
pub struct DocumentOutcome {
    pub doc_id: String,
    pub word_count: usize,
    /// Report of the first attempt (empty and passing when it succeeded).
    pub first_attempt: VerificationReport,
    pub result: Result<AnnotationRecord, FailureRecord>,
}

impl DocumentOutcome {
    pub fn succeeded(&self) -> bool {
        self.result.is_ok()
    }
}

fn attempt(
    model: &dyn ChatModel,
    prompt: &str,
    params: &GenerationParams,
    truncated: &str,
) -> Result<(VerificationReport, Option<RawAnnotation>), GatewayError> {
    let response = model.complete(prompt, params)?;
    Ok(match parse_annotation_response(&response) {
        Err(e) => (VerificationReport::from_response_error(&e), None),
        Ok(raw) => {
            let report = verify_annotation(&raw, truncated);
            (report, Some(raw))
        }
    })
}

/// Annotates one document. Gateway errors surface as `Err`, distinct from a
/// verification rejection.
pub fn annotate_document(
    doc: &SourceDocument,
    model: &dyn ChatModel,
    config: &AnnotatorConfig,
) -> Result<AnnotationOutcome, GatewayError> {
    annotate_with_first_report(doc, model, config).map(|(outcome, _)| outcome)
}

fn annotate_with_first_report(
    doc: &SourceDocument,
    model: &dyn ChatModel,
    config: &AnnotatorConfig,
) -> Result<(AnnotationOutcome, VerificationReport), GatewayError> {
    let truncated = truncate_text(&doc.text, config.min_words);
    let prompt = build_zero_shot_prompt(truncated);
    let schedule = [config.params.temperature, config.retry_temperature];
    let mut reports = Vec::with_capacity(2);

    for (index, temperature) in schedule.iter().enumerate() {
        let params = config.params.with_temperature(*temperature);
        let (report, raw) = attempt(model, &prompt, &params, truncated)?;
        if report.passed {
            let raw = raw.expect("passing report has a parsed annotation");
            let provenance = Provenance {
                attempt: index as u32 + 1,
                temperatures: schedule[..=index].to_vec(),
                retried: index > 0,
            };
            let record = to_record(&doc.id, truncated, raw, provenance);
            let first = reports.into_iter().next().unwrap_or_else(|| report.clone());
            return Ok((AnnotationOutcome::Annotated(record), first));
        }
        reports.push(report);
    }

    let first = reports[0].clone();
    Ok((
        AnnotationOutcome::Rejected(FailureRecord {
            doc_id: doc.id.clone(),
            word_count: word_count(truncated),
            reports,
            error: None,
        }),
        first,
    ))
}

/// Converts a verified annotation into a record. Mention types follow their
/// entity's type and the annotated text is re-rendered canonically.
fn to_record(doc_id: &str, text: &str, raw: RawAnnotation, provenance: Provenance) -> AnnotationRecord {
    let types: HashMap<u64, &str> = raw.entities.iter().map(|e| (e.id, e.type_label.as_str())).collect();
    let (_, parsed) = markup::parse_annotated(&raw.text_with_spans).expect("verified markup parses");
    let mentions: Vec<Mention> = parsed
        .into_iter()
        .map(|mut m| {
            if let Some(t) = types.get(&m.entity_id) {
                m.type_label = t.to_string();
            }
            m
        })
        .collect();
    let annotated_text = markup::render_annotated(text, &mentions).unwrap_or(raw.text_with_spans);
    let mut record = AnnotationRecord {
        doc_id: doc_id.to_string(),
        text: text.to_string(),
        annotated_text,
        entities: raw.entities,
        triples: raw.triples,
        mentions,
        entity_types: Vec::new(),
        relation_types: Vec::new(),
        provenance: Some(provenance),
    };
    record.refresh_types();
    record
}

/// Annotates a corpus on a bounded pool; outcomes keep input order.
pub fn annotate_corpus(
    docs: &[SourceDocument],
    model: &dyn ChatModel,
    config: &AnnotatorConfig,
    parallelism: usize,
) -> Vec<DocumentOutcome> {
    pool::run_ordered(parallelism, docs, |doc| {
        let words = word_count(truncate_text(&doc.text, config.min_words));
        match annotate_with_first_report(doc, model, config) {
            Ok((AnnotationOutcome::Annotated(record), first)) => DocumentOutcome {
                doc_id: doc.id.clone(),
                word_count: words,
                first_attempt: first,
                result: Ok(record),
            },
            Ok((AnnotationOutcome::Rejected(failure), first)) => DocumentOutcome {
                doc_id: doc.id.clone(),
                word_count: words,
                first_attempt: first,
                result: Err(failure),
            },
            Err(e) => {
                log::warn!("document {}: {e}", doc.id);
                DocumentOutcome {
                    doc_id: doc.id.clone(),
                    word_count: words,
                    first_attempt: VerificationReport::from_findings(Vec::new()),
                    result: Err(FailureRecord {
                        doc_id: doc.id.clone(),
                        word_count: words,
                        reports: Vec::new(),
                        error: Some(e.to_string()),
                    }),
                }
            }
        }
    })
}

/// Attempts and first-attempt failures for one word-count bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthErrorStats {
    /// Inclusive lower bound in words.
    pub bucket_start: usize,
    /// Inclusive upper bound in words.
    pub bucket_end: usize,
    pub attempts: usize,
    /// Documents that produced no record.
    pub failed: usize,
    /// Documents whose first attempt showed each kind (counted once per doc).
    pub failures: BTreeMap<ErrorKind, usize>,
}

/// Buckets outcomes by truncated word count. Only buckets with at least one
/// attempt are emitted, in ascending order.
pub fn collect_length_stats(outcomes: &[DocumentOutcome], bucket_width: usize) -> Vec<LengthErrorStats> {
    let width = bucket_width.max(1);
    let mut buckets: BTreeMap<usize, LengthErrorStats> = BTreeMap::new();
    for outcome in outcomes {
        let index = outcome.word_count / width;
        let entry = buckets.entry(index).or_insert_with(|| LengthErrorStats {
            bucket_start: index * width,
            bucket_end: index * width + width - 1,
            attempts: 0,
            failed: 0,
            failures: ErrorKind::ALL.iter().map(|k| (*k, 0)).collect(),
        });
        entry.attempts += 1;
        if !outcome.succeeded() {
            entry.failed += 1;
        }
        for kind in outcome.first_attempt.kinds() {
            *entry.failures.entry(kind).or_default() += 1;
        }
    }
    buckets.into_values().collect()
}

/// CSV rendering: `bucket,attempts,failed,<one column per ErrorKind>`.
pub fn length_stats_csv(stats: &[LengthErrorStats]) -> String {
    let mut out = String::from("bucket,attempts,failed");
    for kind in ErrorKind::ALL {
        out.push(',');
        out.push_str(kind.as_str());
    }
    out.push('\n');
    for row in stats {
        out.push_str(&format!("{}-{},{},{}", row.bucket_start, row.bucket_end, row.attempts, row.failed));
        for kind in ErrorKind::ALL {
            out.push_str(&format!(",{}", row.failures.get(&kind).copied().unwrap_or(0)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(words: usize, kinds: &[ErrorKind]) -> DocumentOutcome {
        let report = VerificationReport::from_findings(
            kinds
                .iter()
                .map(|k| Finding {
                    kind: *k,
                    context: String::new(),
                })
                .collect(),
        );
        let result = if kinds.is_empty() {
            Ok(AnnotationRecord::from_parts("d", "x", "x", vec![], vec![]).unwrap())
        } else {
            Err(FailureRecord {
                doc_id: "d".into(),
                word_count: words,
                reports: vec![report.clone(), report.clone()],
                error: None,
            })
        };
        DocumentOutcome {
            doc_id: "d".into(),
            word_count: words,
            first_attempt: report,
            result,
        }
    }

    #[test]
    fn successes_land_in_one_bucket() {
        let outcomes: Vec<_> = (0..10).map(|_| outcome(80, &[])).collect();
        let stats = collect_length_stats(&outcomes, 25);
        assert_eq!(stats.len(), 1);
        assert_eq!((stats[0].bucket_start, stats[0].bucket_end), (75, 99));
        assert_eq!(stats[0].attempts, 10);
        assert!(stats[0].failures.values().all(|c| *c == 0));
    }

    #[test]
    fn syntax_error_counted() {
        let stats = collect_length_stats(&[outcome(120, &[ErrorKind::SyntaxError])], 25);
        assert_eq!((stats[0].bucket_start, stats[0].bucket_end), (100, 124));
        assert_eq!(stats[0].failures[&ErrorKind::SyntaxError], 1);
        assert_eq!(stats[0].failed, 1);
    }

    #[test]
    fn totals_are_conserved() {
        let kinds = [
            &[][..],
            &[ErrorKind::SyntaxError][..],
            &[ErrorKind::EchoMismatch, ErrorKind::MentionNotInText][..],
            &[ErrorKind::TripleIdUnknown][..],
        ];
        let outcomes: Vec<_> = (0..20).map(|i| outcome(i * 17 % 300, kinds[i % 4])).collect();
        let stats = collect_length_stats(&outcomes, 25);
        assert_eq!(stats.iter().map(|s| s.attempts).sum::<usize>(), 20);
        assert_eq!(stats.iter().map(|s| s.failed).sum::<usize>(), 15);
        for row in &stats {
            assert!(row.failures.values().all(|c| *c <= row.attempts));
        }
        let csv = length_stats_csv(&stats);
        assert!(csv.starts_with("bucket,attempts,failed,syntax_error,"));
        assert_eq!(csv.lines().count(), stats.len() + 1);
    }
}
