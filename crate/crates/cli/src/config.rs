//! Run configuration: a flat TOML file of `key = value` lines, overridden by
//! command-line flags.
//!
//! ```toml
//! corpus = "data/train.json"
//! out = "runs/sweep-1"
//! cache = "runs/sweep-1/cache.jsonl"
//! mode = "replay"
//! method = "paraphrase"
//! endpoint = "https://api.openai.com/v1/completions"
//! model = "text-davinci-003"
//! concurrency = 4
//! max_attempts = 5
//! max_delay_secs = 60
//! timeout_secs = 60
//! paraphrase_retries = 5
//! seed = 13
//! n = 400
//! format = "spert"
//! symmetric_swap = true
//! embeddings = "emb.jsonl"
//! embedding_endpoint = "https://api.openai.com/v1/embeddings"
//! embedding_model = "text-embedding-ada-002"
//! ```

use std::path::{Path, PathBuf};

use pga_core::corpus::ExportFormat;
use pga_core::gateway::Mode;
use pga_core::Method;
use serde::Deserialize;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub cache: Option<PathBuf>,
    pub mode: Option<String>,
    pub method: Option<String>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub concurrency: Option<usize>,
    pub max_attempts: Option<u32>,
    pub max_delay_secs: Option<u64>,
    pub timeout_secs: Option<u64>,
    pub paraphrase_retries: Option<u32>,
    pub seed: Option<u64>,
    pub n: Option<usize>,
    pub format: Option<String>,
    pub symmetric_swap: Option<bool>,
    pub embeddings: Option<PathBuf>,
    pub embedding_endpoint: Option<String>,
    pub embedding_model: Option<String>,
}

pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/completions";
pub const DEFAULT_EMBEDDING_MODEL: &str = "text-embedding-ada-002";

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        RunConfig::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<RunConfig, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.message().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Values of `over` replace those of `self`.
    pub fn merge(self, over: RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),*) => { RunConfig { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(
            corpus,
            out,
            cache,
            mode,
            method,
            endpoint,
            model,
            concurrency,
            max_attempts,
            max_delay_secs,
            timeout_secs,
            paraphrase_retries,
            seed,
            n,
            format,
            symmetric_swap,
            embeddings,
            embedding_endpoint,
            embedding_model
        )
    }

    pub fn validate(&self) -> Result<(), String> {
        self.mode()?;
        self.method()?;
        self.format()?;
        if self.concurrency == Some(0) {
            return Err("concurrency must be at least 1".into());
        }
        if self.max_attempts == Some(0) {
            return Err("max_attempts must be at least 1".into());
        }
        if self.timeout_secs == Some(0) {
            return Err("timeout_secs must be at least 1".into());
        }
        Ok(())
    }

    pub fn mode(&self) -> Result<Mode, String> {
        self.mode.as_deref().unwrap_or("replay").parse()
    }

    pub fn method(&self) -> Result<Option<Method>, String> {
        self.method.as_deref().map(str::parse).transpose()
    }

    pub fn format(&self) -> Result<ExportFormat, String> {
        self.format.as_deref().unwrap_or("scierc").parse()
    }

    pub fn out_dir(&self) -> Result<&Path, String> {
        self.out
            .as_deref()
            .ok_or_else(|| "no output directory (--out or `out`)".into())
    }

    pub fn corpus_path(&self) -> Result<&Path, String> {
        self.corpus
            .as_deref()
            .ok_or_else(|| "no corpus (--corpus or `corpus`)".into())
    }

    /// Cache file, `cache.jsonl` inside the output directory by default.
    pub fn cache_path(&self) -> Result<PathBuf, String> {
        match &self.cache {
            Some(p) => Ok(p.clone()),
            None => Ok(self.out_dir()?.join("cache.jsonl")),
        }
    }
}
