//! Demonstration database: embedding, an exact cosine index over truncated
//! texts, and top-k retrieval with contamination exclusions.
//!
//! Two embedding modes exist. `Provider` calls an HTTP embeddings endpoint
//! and is what semantic retrieval should use. `Lexical` is an L2-normalized
//! term-frequency vector over the index vocabulary; it keeps tests and
//! offline runs hermetic but is not a semantic substitute.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::annotator::truncate_text;
use crate::model::AnnotationRecord;
use crate::pool;

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("embedding provider: {0}")]
    Provider(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("cannot build an index from zero records")]
    EmptyRecords,
    #[error("no index entries remain after exclusions")]
    EmptyIndexAfterExclusion,
    #[error("index file: {0}")]
    Format(String),
    #[error("index was built in {index} mode but queried with a {embedder} embedder")]
    ModeMismatch { index: String, embedder: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, StoreError>;
    fn mode(&self) -> EmbeddingMode;
    /// Vocabulary to persist with the index (lexical mode only).
    fn vocabulary(&self) -> Vec<String> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    Lexical,
    Provider,
}

impl std::fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EmbeddingMode::Lexical => "lexical",
            EmbeddingMode::Provider => "provider",
        })
    }
}

/// Normalized word tokens: lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.chars().flat_map(char::to_lowercase).collect())
        .collect()
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, StoreError> {
    if u.len() != v.len() {
        return Err(StoreError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let (nu, nv) = (l2_norm(u), l2_norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(StoreError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Term-frequency embedder over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct LexicalEmbedder {
    vocabulary: Vec<String>,
    positions: HashMap<String, usize>,
}

impl LexicalEmbedder {
    pub fn new(vocabulary: Vec<String>) -> Self {
        let positions = vocabulary.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        LexicalEmbedder { vocabulary, positions }
    }

    /// Sorted vocabulary of every token in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let vocab: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        Self::new(vocab.into_iter().collect())
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }
}

impl Embedder for LexicalEmbedder {
    /// A query with no in-vocabulary tokens yields the zero vector.
    fn embed(&self, text: &str) -> Result<Vec<f64>, StoreError> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(StoreError::EmptyText);
        }
        let mut v = vec![0.0; self.vocabulary.len()];
        for t in tokens {
            if let Some(&i) = self.positions.get(&t) {
                v[i] += 1.0;
            }
        }
        let norm = l2_norm(&v);
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }

    fn mode(&self) -> EmbeddingMode {
        EmbeddingMode::Lexical
    }

    fn vocabulary(&self) -> Vec<String> {
        self.vocabulary.clone()
    }
}

/// Client for `POST {base_url}/embeddings` taking `{"model", "input"}` and
/// answering `{"data": [{"embedding": [...]}]}`.
pub struct HttpEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Result<Self, StoreError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| StoreError::Provider(e.to_string()))?;
        Ok(HttpEmbedder {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            client,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, StoreError> {
        if text.trim().is_empty() {
            return Err(StoreError::EmptyText);
        }
        let mut request = self
            .client
            .post(format!("{}/embeddings", self.base_url))
            .json(&json!({ "model": self.model, "input": text }));
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| StoreError::Provider(e.to_string()))?;
        let status = response.status();
        let body = response.text().map_err(|e| StoreError::Provider(e.to_string()))?;
        if !status.is_success() {
            return Err(StoreError::Provider(format!("HTTP {}: {body}", status.as_u16())));
        }
        let parsed: Value = serde_json::from_str(&body).map_err(|e| StoreError::Provider(e.to_string()))?;
        let vector: Vec<f64> = parsed
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| StoreError::Provider("missing data[0].embedding".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| StoreError::Provider("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        if vector.is_empty() {
            return Err(StoreError::Provider("empty embedding".into()));
        }
        Ok(vector)
    }

    fn mode(&self) -> EmbeddingMode {
        EmbeddingMode::Provider
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoIndexEntry {
    pub doc_id: String,
    pub truncated_text: String,
    pub vector: Vec<f64>,
    pub record: AnnotationRecord,
}

/// Serialized as one JSON document: header fields then `entries`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoIndex {
    pub format_version: u32,
    pub mode: EmbeddingMode,
    pub dimension: usize,
    pub min_words: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vocabulary: Vec<String>,
    pub entries: Vec<DemoIndexEntry>,
}

impl DemoIndex {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("index serializes")
    }

    pub fn from_json(raw: &str) -> Result<Self, StoreError> {
        let index: DemoIndex = serde_json::from_str(raw).map_err(|e| StoreError::Format(e.to_string()))?;
        if index.format_version != INDEX_FORMAT_VERSION {
            return Err(StoreError::Format(format!(
                "unsupported format version {}",
                index.format_version
            )));
        }
        if let Some(bad) = index.entries.iter().find(|e| e.vector.len() != index.dimension) {
            return Err(StoreError::Format(format!("entry {} has the wrong dimension", bad.doc_id)));
        }
        Ok(index)
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The query-side embedder for a lexical index.
    pub fn lexical_embedder(&self) -> Option<LexicalEmbedder> {
        (self.mode == EmbeddingMode::Lexical).then(|| LexicalEmbedder::new(self.vocabulary.clone()))
    }
}

/// Embeds the truncated text of every record. Any embedding failure fails the
/// whole build.
pub fn build_index(
    records: &[AnnotationRecord],
    embedder: &dyn Embedder,
    min_words: usize,
    parallelism: usize,
) -> Result<DemoIndex, StoreError> {
    if records.is_empty() {
        return Err(StoreError::EmptyRecords);
    }
    let vectors = pool::run_ordered(parallelism, records, |r| {
        let truncated = truncate_text(&r.text, min_words);
        embedder.embed(truncated).map(|v| (truncated.to_string(), v))
    });
    let mut entries = Vec::with_capacity(records.len());
    let mut dimension = None;
    for (record, embedded) in records.iter().zip(vectors) {
        let (truncated_text, vector) = embedded?;
        if l2_norm(&vector) == 0.0 {
            return Err(StoreError::ZeroVector);
        }
        match dimension {
            None => dimension = Some(vector.len()),
            Some(d) if d != vector.len() => {
                return Err(StoreError::DimensionMismatch {
                    left: d,
                    right: vector.len(),
                })
            }
            _ => {}
        }
        entries.push(DemoIndexEntry {
            doc_id: record.doc_id.clone(),
            truncated_text,
            vector,
            record: record.clone(),
        });
    }
    let vocabulary = embedder.vocabulary();
    Ok(DemoIndex {
        format_version: INDEX_FORMAT_VERSION,
        mode: embedder.mode(),
        dimension: dimension.unwrap_or(0),
        min_words,
        vocabulary,
        entries,
    })
}

/// Builds a lexical index whose vocabulary spans the records' truncated texts.
pub fn build_lexical_index(
    records: &[AnnotationRecord],
    min_words: usize,
    parallelism: usize,
) -> Result<DemoIndex, StoreError> {
    let embedder = LexicalEmbedder::from_texts(records.iter().map(|r| truncate_text(&r.text, min_words)));
    build_index(records, &embedder, min_words, parallelism)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExclusionList {
    pub doc_ids: HashSet<String>,
}

impl ExclusionList {
    pub fn new<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ExclusionList {
            doc_ids: ids.into_iter().map(Into::into).collect(),
        }
    }

    /// One doc id per line; blank lines are ignored.
    pub fn parse(raw: &str) -> Self {
        Self::new(raw.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.doc_ids.contains(doc_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved<'a> {
    pub doc_id: &'a str,
    pub similarity: f64,
    pub record: &'a AnnotationRecord,
}

/// An index paired with the embedder used for queries.
pub struct Retriever<'a> {
    index: &'a DemoIndex,
    embedder: Box<dyn Embedder + 'a>,
}

impl<'a> Retriever<'a> {
    pub fn new(index: &'a DemoIndex, embedder: Box<dyn Embedder + 'a>) -> Result<Self, StoreError> {
        if embedder.mode() != index.mode {
            return Err(StoreError::ModeMismatch {
                index: index.mode.to_string(),
                embedder: embedder.mode().to_string(),
            });
        }
        Ok(Retriever { index, embedder })
    }

    pub fn lexical(index: &'a DemoIndex) -> Result<Self, StoreError> {
        let embedder = index.lexical_embedder().ok_or(StoreError::ModeMismatch {
            index: index.mode.to_string(),
            embedder: EmbeddingMode::Lexical.to_string(),
        })?;
        Self::new(index, Box::new(embedder))
    }

    pub fn index(&self) -> &DemoIndex {
        self.index
    }

    /// Truncates and embeds the query the same way as the demonstrations,
    /// then returns the `k` most similar non-excluded entries. Ties go to
    /// the smaller doc id.
    pub fn retrieve(&self, query_text: &str, exclusions: &ExclusionList, k: usize) -> Result<Vec<Retrieved<'a>>, StoreError> {
        let truncated = truncate_text(query_text, self.index.min_words);
        let query = self.embedder.embed(truncated)?;
        if query.len() != self.index.dimension {
            return Err(StoreError::DimensionMismatch {
                left: query.len(),
                right: self.index.dimension,
            });
        }
        let query_is_zero = l2_norm(&query) == 0.0;
        let mut scored = Vec::new();
        for entry in self.index.entries.iter().filter(|e| !exclusions.contains(&e.doc_id)) {
            let similarity = if query_is_zero { 0.0 } else { cosine(&query, &entry.vector)? };
            scored.push(Retrieved {
                doc_id: entry.doc_id.as_str(),
                similarity,
                record: &entry.record,
            });
        }
        if scored.is_empty() {
            return Err(StoreError::EmptyIndexAfterExclusion);
        }
        scored.sort_by(|a, b| {
            b.similarity
                .total_cmp(&a.similarity)
                .then_with(|| a.doc_id.cmp(b.doc_id))
        });
        scored.truncate(k.max(1));
        Ok(scored)
    }
}
