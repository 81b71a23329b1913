//! One function per pipeline stage. Each reads its inputs, writes its
//! outputs atomically under `out`, and finishes with a manifest.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use docsynth::annotator::{annotate_corpus, collect_length_stats, length_stats_csv, AnnotatorConfig};
use docsynth::demo_store::{
    build_index, build_lexical_index, DemoIndex, Embedder, EmbeddingMode, ExclusionList, HttpEmbedder, Retriever,
};
use docsynth::eval::{evaluate, ClusterGold, EvalDoc, EvalMode, EvalOptions, EvalReport};
use docsynth::gateway::{CacheMode, ChatModel, Gateway, HttpChatClient, ReplayCache};
use docsynth::inference::{infer_corpus, InferenceError, Prediction, TaskFile};
use docsynth::model::{validate_corpus, AnnotationRecord, SourceDocument};
use docsynth::postprocess::postprocess_corpus;
use docsynth::stats::DatasetStats;

use crate::config::{Endpoints, RunConfig, ENV_CHAT_URL, ENV_EMBEDDING_URL};
use crate::files::{read_jsonl, to_jsonl, OutputSet};

/// The chat gateway for the configured cache mode.
pub fn build_gateway(config: &RunConfig, endpoints: &Endpoints) -> Result<Gateway> {
    let cache = || -> Result<ReplayCache> {
        let dir = config
            .cache_dir
            .as_ref()
            .ok_or_else(|| anyhow!("{:?} mode needs a cache directory (--cache)", config.cache_mode))?;
        Ok(ReplayCache::open(dir)?)
    };
    let transport = || -> Result<Box<dyn ChatModel>> {
        let url = endpoints
            .chat_url
            .clone()
            .ok_or_else(|| anyhow!("no chat endpoint: set {ENV_CHAT_URL}"))?;
        Ok(Box::new(HttpChatClient::new(url, endpoints.api_key.clone())?))
    };
    Ok(match config.cache_mode {
        CacheMode::Replay => Gateway::replay(cache()?),
        CacheMode::Record => Gateway::record(transport()?, cache()?),
        CacheMode::Live => Gateway::live(transport()?),
    })
}

fn provider_embedder(config: &RunConfig, endpoints: &Endpoints) -> Result<HttpEmbedder> {
    let url = endpoints
        .embedding_url
        .clone()
        .ok_or_else(|| anyhow!("provider embeddings need {ENV_EMBEDDING_URL}"))?;
    let model = config
        .embedding_model
        .clone()
        .ok_or_else(|| anyhow!("provider embeddings need embedding_model in the config"))?;
    Ok(HttpEmbedder::new(url, model, endpoints.api_key.clone())?)
}

fn load_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut records: Vec<AnnotationRecord> = read_jsonl(path)?;
    for (i, r) in records.iter_mut().enumerate() {
        r.hydrate()
            .with_context(|| format!("{}: record {} ({:?})", path.display(), i + 1, r.doc_id))?;
    }
    Ok(records)
}

fn load_exclusions(config: &RunConfig, out: &mut OutputSet) -> Result<ExclusionList> {
    match &config.exclusions {
        Some(path) => {
            out.input(path)?;
            Ok(ExclusionList::load(path).with_context(|| format!("reading {}", path.display()))?)
        }
        None => Ok(ExclusionList::new(Vec::<String>::new())),
    }
}

/// Reads a corpus from a JSONL file of documents or a directory of `.txt`
/// files (id = file stem), validates it and writes `corpus.jsonl`.
pub fn cmd_ingest(input: &Path, out: &Path, config: &RunConfig) -> Result<usize> {
    let mut outputs = OutputSet::new(out, "ingest", &config.fingerprint());
    let docs: Vec<SourceDocument> = if input.is_dir() {
        let mut paths: Vec<_> = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                outputs.input(p)?;
                let id = p.file_stem().unwrap_or_default().to_string_lossy().into_owned();
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(SourceDocument { id, title: None, text })
            })
            .collect::<Result<_>>()?
    } else {
        outputs.input(input)?;
        read_jsonl(input)?
    };
    validate_corpus(&docs)?;
    outputs.write("corpus.jsonl", to_jsonl(&docs).as_bytes())?;
    outputs.finish()?;
    Ok(docs.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub attempts: usize,
    pub successes: usize,
}

impl GenerateSummary {
    pub fn yield_percent(&self) -> f64 {
        100.0 * self.successes as f64 / self.attempts as f64
    }
}

/// Annotates a corpus and writes `annotations.jsonl`, `failures.jsonl` and
/// `length_stats.csv`.
pub fn cmd_generate(corpus: &Path, out: &Path, config: &RunConfig, model: &dyn ChatModel) -> Result<GenerateSummary> {
    let mut outputs = OutputSet::new(out, "generate", &config.fingerprint());
    outputs.input(corpus)?;
    let docs: Vec<SourceDocument> = read_jsonl(corpus)?;
    if docs.is_empty() {
        bail!("empty corpus");
    }
    validate_corpus(&docs)?;
    let annotator = AnnotatorConfig {
        params: config.params(),
        retry_temperature: config.retry_temperature,
        min_words: config.min_words,
    };
    let outcomes = annotate_corpus(&docs, model, &annotator, config.parallelism);
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for o in &outcomes {
        match &o.result {
            Ok(r) => records.push(r.clone()),
            Err(f) => failures.push(f.clone()),
        }
    }
    outputs.write("annotations.jsonl", to_jsonl(&records).as_bytes())?;
    outputs.write("failures.jsonl", to_jsonl(&failures).as_bytes())?;
    let stats = collect_length_stats(&outcomes, config.bucket_width);
    outputs.write("length_stats.csv", length_stats_csv(&stats).as_bytes())?;
    outputs.finish()?;
    Ok(GenerateSummary {
        attempts: outcomes.len(),
        successes: records.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PostprocessSummary {
    pub input: usize,
    pub kept: usize,
    pub dropped_documents: usize,
    pub drop_entries: usize,
}

/// Verifies triples and filters records. Writes `kept.jsonl`, `drops.jsonl`
/// and `verdicts.jsonl`.
pub fn cmd_postprocess(
    annotations: &Path,
    out: &Path,
    config: &RunConfig,
    model: &dyn ChatModel,
) -> Result<PostprocessSummary> {
    let mut outputs = OutputSet::new(out, "postprocess", &config.fingerprint());
    outputs.input(annotations)?;
    let records = load_records(annotations)?;
    let result = postprocess_corpus(&records, model, &config.params(), config.parallelism);
    outputs.write("kept.jsonl", to_jsonl(&result.kept).as_bytes())?;
    outputs.write("drops.jsonl", to_jsonl(&result.drops).as_bytes())?;
    outputs.write("verdicts.jsonl", to_jsonl(&result.verdicts).as_bytes())?;
    outputs.finish()?;
    Ok(PostprocessSummary {
        input: records.len(),
        kept: result.kept.len(),
        dropped_documents: records.len() - result.kept.len(),
        drop_entries: result.drops.len(),
    })
}

/// Computes dataset statistics; writes `stats.json` when `out` is given.
pub fn cmd_stats(dataset: &Path, out: Option<&Path>, config: &RunConfig, attempts: Option<usize>) -> Result<DatasetStats> {
    let records = load_records(dataset)?;
    let stats = DatasetStats::compute(&records, config.top_k, attempts);
    if let Some(dir) = out {
        let mut outputs = OutputSet::new(dir, "stats", &config.fingerprint());
        outputs.input(dataset)?;
        outputs.write("stats.json", (serde_json::to_string_pretty(&stats)? + "\n").as_bytes())?;
        outputs.finish()?;
    }
    Ok(stats)
}

/// Embeds demonstration records into `index.json`.
pub fn cmd_index(records_path: &Path, out: &Path, config: &RunConfig, endpoints: &Endpoints) -> Result<usize> {
    let mut outputs = OutputSet::new(out, "index", &config.fingerprint());
    outputs.input(records_path)?;
    let records = load_records(records_path)?;
    let index = match config.embedding {
        EmbeddingMode::Lexical => build_lexical_index(&records, config.min_words, config.parallelism)?,
        EmbeddingMode::Provider => {
            let embedder = provider_embedder(config, endpoints)?;
            build_index(&records, &embedder, config.min_words, config.parallelism)?
        }
    };
    outputs.write("index.json", index.to_json().as_bytes())?;
    outputs.finish()?;
    Ok(index.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InferSummary {
    pub documents: usize,
    pub valid: usize,
    pub errors: usize,
}

/// Runs two-call extraction over a task file. Gateway failures are listed
/// in `errors.jsonl`; retrieval failures abort the run.
pub fn cmd_infer(
    task_path: &Path,
    index_path: &Path,
    out: &Path,
    config: &RunConfig,
    endpoints: &Endpoints,
    model: &dyn ChatModel,
) -> Result<InferSummary> {
    let mut outputs = OutputSet::new(out, "infer", &config.fingerprint());
    outputs.input(task_path)?;
    outputs.input(index_path)?;
    let raw = fs::read_to_string(task_path).with_context(|| format!("reading {}", task_path.display()))?;
    let task = TaskFile::from_json(&raw).with_context(|| format!("parsing {}", task_path.display()))?;
    let schema = task.schema()?;
    validate_corpus(&task.documents)?;
    let index = DemoIndex::load(index_path)?;
    let exclusions = load_exclusions(config, &mut outputs)?;
    let retriever = match index.mode {
        EmbeddingMode::Lexical => Retriever::lexical(&index)?,
        EmbeddingMode::Provider => {
            let embedder: Box<dyn Embedder> = Box::new(provider_embedder(config, endpoints)?);
            Retriever::new(&index, embedder)?
        }
    };
    let results = infer_corpus(
        &task.documents,
        &schema,
        &retriever,
        &exclusions,
        model,
        &config.params(),
        config.parallelism,
    );
    let mut predictions: Vec<Prediction> = Vec::new();
    let mut errors = Vec::new();
    for (doc, result) in task.documents.iter().zip(results) {
        match result {
            Ok(p) => predictions.push(p),
            Err(InferenceError::Store(e)) => return Err(e).with_context(|| format!("document {}", doc.id)),
            Err(e) => errors.push(json!({ "doc_id": doc.id, "error": e.to_string() })),
        }
    }
    outputs.write("predictions.jsonl", to_jsonl(&predictions).as_bytes())?;
    outputs.write("errors.jsonl", to_jsonl(&errors).as_bytes())?;
    outputs.finish()?;
    Ok(InferSummary {
        documents: task.documents.len(),
        valid: predictions.iter().filter(|p| p.valid).count(),
        errors: errors.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GoldFormat {
    /// JSONL of annotation records.
    Records,
    /// JSONL of entity clusters with mention surfaces.
    Clusters,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutput {
    pub valid_rate: f64,
    pub all_docs: EvalReport,
    pub valid_only: EvalReport,
}

/// Scores predictions in both modes and writes `eval.json`.
pub fn cmd_eval(
    predictions_path: &Path,
    gold_path: &Path,
    gold_format: GoldFormat,
    options: EvalOptions,
    out: &Path,
    config: &RunConfig,
) -> Result<EvalOutput> {
    let mut outputs = OutputSet::new(out, "eval", &config.fingerprint());
    outputs.input(predictions_path)?;
    outputs.input(gold_path)?;
    let predictions: Vec<Prediction> = read_jsonl(predictions_path)?;
    let golds: Vec<EvalDoc> = match gold_format {
        GoldFormat::Records => read_jsonl::<AnnotationRecord>(gold_path)?
            .iter()
            .map(EvalDoc::from_record)
            .collect::<Result<_, _>>()?,
        GoldFormat::Clusters => read_jsonl::<ClusterGold>(gold_path)?.iter().map(EvalDoc::from).collect(),
    };
    let mut seen = HashSet::new();
    if let Some(dup) = golds.iter().find(|g| !seen.insert(g.doc_id.as_str())) {
        bail!("gold document {} appears twice", dup.doc_id);
    }
    let preds: Vec<EvalDoc> = predictions.iter().map(EvalDoc::from_prediction).collect();
    let all_docs = evaluate(&preds, &golds, EvalMode::AllDocs, options, config.parallelism)?;
    let valid_only = evaluate(&preds, &golds, EvalMode::ValidOnly, options, config.parallelism)?;
    let result = EvalOutput {
        valid_rate: all_docs.valid_rate,
        all_docs,
        valid_only,
    };
    outputs.write("eval.json", (serde_json::to_string_pretty(&result)? + "\n").as_bytes())?;
    outputs.finish()?;
    Ok(result)
}
