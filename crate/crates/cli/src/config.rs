use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use docsynth::demo_store::EmbeddingMode;
use docsynth::gateway::{CacheMode, GenerationParams};

pub const ENV_API_KEY: &str = "DOCSYNTH_API_KEY";
pub const ENV_CHAT_URL: &str = "DOCSYNTH_CHAT_URL";
pub const ENV_EMBEDDING_URL: &str = "DOCSYNTH_EMBEDDING_URL";

/// Run settings, read from a TOML file and overridden by flags. Endpoints
/// and credentials never live here; see [`Endpoints`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model_name: String,
    pub primary_temperature: f64,
    pub retry_temperature: f64,
    pub max_tokens: Option<u32>,
    pub min_words: usize,
    pub parallelism: usize,
    pub cache_dir: Option<PathBuf>,
    pub cache_mode: CacheMode,
    pub embedding: EmbeddingMode,
    pub embedding_model: Option<String>,
    pub top_k: usize,
    pub bucket_width: usize,
    pub exclusions: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model_name: "default".into(),
            primary_temperature: 0.0,
            retry_temperature: 0.2,
            max_tokens: None,
            min_words: 100,
            parallelism: 4,
            cache_dir: None,
            cache_mode: CacheMode::Live,
            embedding: EmbeddingMode::Lexical,
            embedding_model: None,
            top_k: 30,
            bucket_width: 25,
            exclusions: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.retry_temperature <= self.primary_temperature {
            bail!(
                "retry temperature {} must exceed primary temperature {}",
                self.retry_temperature,
                self.primary_temperature
            );
        }
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        if self.model_name.trim().is_empty() {
            bail!("model_name is empty");
        }
        self.params().validate()?;
        Ok(())
    }

    pub fn params(&self) -> GenerationParams {
        GenerationParams {
            temperature: self.primary_temperature,
            max_tokens: self.max_tokens,
            model_name: self.model_name.clone(),
        }
    }

    /// Settings that can change outputs. Paths are left out so that runs in
    /// different directories hash alike; file contents are hashed as inputs.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.cache_dir = None;
        c.exclusions = None;
        c.parallelism = 1;
        serde_json::to_string(&c).expect("config serializes")
    }
}

/// Endpoint URLs and the API key, taken from the environment only.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Endpoints {
    pub api_key: Option<String>,
    pub chat_url: Option<String>,
    pub embedding_url: Option<String>,
}

impl Endpoints {
    pub fn from_env() -> Self {
        let var = |name| std::env::var(name).ok().filter(|v: &String| !v.trim().is_empty());
        Endpoints {
            api_key: var(ENV_API_KEY),
            chat_url: var(ENV_CHAT_URL),
            embedding_url: var(ENV_EMBEDDING_URL),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let c: RunConfig = toml::from_str("model_name = \"m\"\ncache_mode = \"replay\"\nparallelism = 2").unwrap();
        assert_eq!(c.model_name, "m");
        assert_eq!(c.cache_mode, CacheMode::Replay);
        assert_eq!(c.min_words, 100);
        assert_eq!(c.retry_temperature, 0.2);
        c.validate().unwrap();
        assert!(toml::from_str::<RunConfig>("api_key = \"x\"").is_err());
    }

    #[test]
    fn invariants() {
        let mut c = RunConfig::default();
        c.retry_temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.parallelism = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fingerprint_ignores_paths() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.cache_dir = Some("/tmp/x".into());
        b.parallelism = 8;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.min_words = 50;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
