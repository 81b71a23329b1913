use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use docsynth::eval::EvalOptions;
use docsynth::gateway::CacheMode;

use crate::commands::{self, GoldFormat};
use crate::config::{Endpoints, RunConfig};

/// Synthetic document-level entity and relation annotation, and
/// schema-constrained extraction with retrieved demonstrations.
///
/// Endpoints and credentials come from DOCSYNTH_CHAT_URL,
/// DOCSYNTH_EMBEDDING_URL and DOCSYNTH_API_KEY.
#[derive(Debug, Parser)]
#[command(name = "docsynth", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportMode {
    All,
    ValidOnly,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory of recorded model exchanges.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// Serve model calls only from the cache.
    #[arg(long, global = true, conflicts_with = "record")]
    pub replay: bool,
    /// Call the model and record every exchange in the cache.
    #[arg(long, global = true)]
    pub record: bool,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    #[arg(long, global = true)]
    pub min_words: Option<usize>,
    #[arg(long, global = true)]
    pub top_k: Option<usize>,
    /// Demonstration doc ids to never retrieve, one per line.
    #[arg(long, global = true)]
    pub exclusions: Option<PathBuf>,
    /// Which evaluation report to print (both are always written).
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ReportMode>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a corpus (JSONL or a directory of .txt files).
    Ingest {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Annotate a corpus with verification and one retry.
    Generate {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify triples, apply the discard policy and drop degenerate records.
    Postprocess {
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print dataset statistics.
    Stats {
        dataset: PathBuf,
        /// Documents attempted, to report a yield.
        #[arg(long)]
        attempts: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a demonstration index from annotation records.
    Index {
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract entities and relations for a task file.
    Infer {
        task: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against gold annotations.
    Eval {
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Gold given as entity clusters instead of annotation records.
        #[arg(long)]
        clusters: bool,
        /// Match mentions by character offsets.
        #[arg(long)]
        by_offset: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

impl GlobalArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(dir) = &self.cache {
            config.cache_dir = Some(dir.clone());
        }
        if self.replay {
            config.cache_mode = CacheMode::Replay;
        }
        if self.record {
            config.cache_mode = CacheMode::Record;
        }
        if let Some(m) = &self.model {
            config.model_name = m.clone();
        }
        if let Some(p) = self.parallelism {
            config.parallelism = p;
        }
        if let Some(w) = self.min_words {
            config.min_words = w;
        }
        if let Some(k) = self.top_k {
            config.top_k = k;
        }
        if let Some(e) = &self.exclusions {
            config.exclusions = Some(e.clone());
        }
        config.validate()?;
        Ok(config)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = cli.global.resolve()?;
    let endpoints = Endpoints::from_env();
    match cli.command {
        Command::Ingest { input, out } => {
            let n = commands::cmd_ingest(&input, &out, &config)?;
            println!("ingested {n} documents");
        }
        Command::Generate { corpus, out } => {
            let gateway = commands::build_gateway(&config, &endpoints)?;
            let s = commands::cmd_generate(&corpus, &out, &config, &gateway)?;
            println!(
                "yield: {:.2}% ({} of {} documents)",
                s.yield_percent(),
                s.successes,
                s.attempts
            );
        }
        Command::Postprocess { annotations, out } => {
            let gateway = commands::build_gateway(&config, &endpoints)?;
            let s = commands::cmd_postprocess(&annotations, &out, &config, &gateway)?;
            println!("kept {}, dropped {} (of {} records)", s.kept, s.dropped_documents, s.input);
        }
        Command::Stats { dataset, attempts, out } => {
            let stats = commands::cmd_stats(&dataset, out.as_deref(), &config, attempts)?;
            print!("{}", stats.to_table());
        }
        Command::Index { records, out } => {
            let n = commands::cmd_index(&records, &out, &config, &endpoints)?;
            println!("indexed {n} demonstrations");
        }
        Command::Infer { task, index, out } => {
            let gateway = commands::build_gateway(&config, &endpoints)?;
            let s = commands::cmd_infer(&task, &index, &out, &config, &endpoints, &gateway)?;
            println!("{} documents, {} valid, {} errors", s.documents, s.valid, s.errors);
        }
        Command::Eval {
            predictions,
            gold,
            clusters,
            by_offset,
            out,
        } => {
            let format = if clusters { GoldFormat::Clusters } else { GoldFormat::Records };
            let options = EvalOptions {
                mentions_by_offset: by_offset,
            };
            let r = commands::cmd_eval(&predictions, &gold, format, options, &out, &config)?;
            if cli.global.mode != Some(ReportMode::ValidOnly) {
                println!("{}", r.all_docs.to_table());
            }
            if cli.global.mode != Some(ReportMode::All) {
                println!("{}", r.valid_only.to_table());
            }
            println!("valid outputs: {:.2}%", r.valid_rate);
        }
    }
    Ok(())
}
