//! Run configuration: TOML file, flags, environment and defaults, resolved
//! in that order of precedence (flags first).

use std::fs;
use std::path::{Path, PathBuf};

use rar_core::rank::{PromptStyle, RemoteConfig, RetryPolicy, RANKER_URL_ENV};
use rar_core::regions::RegionParams;
use rar_core::retrieve::{DEFAULT_K, DEFAULT_TEMPLATE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    I2i,
    I2t,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Identity,
    Oracle,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Plain,
    InContext,
}

impl From<Style> for PromptStyle {
    fn from(s: Style) -> Self {
        match s {
            Style::Plain => PromptStyle::Plain,
            Style::InContext => PromptStyle::InContext,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankerSection {
    pub backend: Option<Backend>,
    pub url: Option<String>,
    pub max_in_flight: Option<usize>,
    pub timeout_secs: Option<u64>,
    pub retries: Option<u32>,
    pub backoff_ms: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSection {
    pub crop_scale: Option<f64>,
    pub blur: Option<bool>,
    pub blur_sigma: Option<f64>,
    pub out_size: Option<u32>,
}

/// On-disk configuration; every key is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub memory: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub k: Option<usize>,
    pub mode: Option<Mode>,
    pub exact: Option<bool>,
    pub style: Option<Style>,
    pub seed: Option<u64>,
    pub template: Option<String>,
    pub image_ref_template: Option<String>,
    #[serde(default)]
    pub ranker: RankerSection,
    #[serde(default)]
    pub regions: RegionSection,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn load_optional(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or(Ok(ConfigFile::default()), Self::load)
    }

    pub fn region_params(&self) -> RegionParams {
        let d = RegionParams::default();
        RegionParams {
            crop_scale: self.regions.crop_scale.unwrap_or(d.crop_scale),
            blur: self.regions.blur.unwrap_or(d.blur),
            blur_sigma: self.regions.blur_sigma.unwrap_or(d.blur_sigma),
            out_size: self.regions.out_size.unwrap_or(d.out_size),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankerSpec {
    pub backend: Backend,
    pub url: Option<String>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    pub retries: u32,
    pub backoff_ms: u64,
}

impl RankerSpec {
    pub fn remote_config(&self) -> Result<RemoteConfig, CliError> {
        let url = self
            .url
            .clone()
            .ok_or_else(|| CliError::usage(format!("remote ranker needs --ranker-url, ranker.url or {RANKER_URL_ENV}")))?;
        let mut c = RemoteConfig::new(url);
        c.max_in_flight = self.max_in_flight;
        c.timeout = std::time::Duration::from_secs(self.timeout_secs);
        c.retry = RetryPolicy {
            retries: self.retries,
            base_delay: std::time::Duration::from_millis(self.backoff_ms),
        };
        Ok(c)
    }
}

/// Fully resolved settings of a `predict` run. Its hash is the run fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub memory: PathBuf,
    pub index: Option<PathBuf>,
    pub queries: PathBuf,
    pub k: usize,
    pub mode: Mode,
    pub exact: bool,
    pub style: PromptStyle,
    pub seed: u64,
    pub template: String,
    pub image_ref_template: String,
    pub ranker: RankerSpec,
}

/// Flag values; `None` means not given on the command line.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct RunFlags {
    /// Memory file (.rarm)
    #[arg(long)]
    pub memory: Option<PathBuf>,
    /// Index file (.rari); without it image retrieval is exact
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Query records, line-delimited JSON
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Ignore the index and scan exhaustively
    #[arg(long)]
    pub exact: bool,
    #[arg(long, value_enum)]
    pub style: Option<Style>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prompt template recorded for text embeddings
    #[arg(long)]
    pub template: Option<String>,
    /// Image reference sent to the ranker; `{id}` becomes the query id
    #[arg(long)]
    pub image_ref_template: Option<String>,
    #[arg(long, value_enum)]
    pub ranker: Option<Backend>,
    #[arg(long)]
    pub ranker_url: Option<String>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
    #[arg(long)]
    pub retries: Option<u32>,
    #[arg(long)]
    pub backoff_ms: Option<u64>,
}

pub fn resolve(flags: &RunFlags, file: &ConfigFile, env_url: Option<String>) -> Result<RunConfig, CliError> {
    let memory = flags
        .memory
        .clone()
        .or_else(|| file.memory.clone())
        .ok_or_else(|| CliError::usage("--memory is required"))?;
    let queries = flags
        .queries
        .clone()
        .or_else(|| file.queries.clone())
        .ok_or_else(|| CliError::usage("--queries is required"))?;
    let k = flags.k.or(file.k).unwrap_or(DEFAULT_K);
    if k == 0 {
        return Err(CliError::usage("k must be at least 1"));
    }
    let r = &file.ranker;
    let ranker = RankerSpec {
        backend: flags.ranker.or(r.backend).unwrap_or(Backend::Identity),
        url: flags.ranker_url.clone().or_else(|| r.url.clone()).or(env_url),
        max_in_flight: flags.max_in_flight.or(r.max_in_flight).unwrap_or(8),
        timeout_secs: flags.timeout_secs.or(r.timeout_secs).unwrap_or(60),
        retries: flags.retries.or(r.retries).unwrap_or(3),
        backoff_ms: flags.backoff_ms.or(r.backoff_ms).unwrap_or(500),
    };
    if ranker.max_in_flight == 0 {
        return Err(CliError::usage("max_in_flight must be at least 1"));
    }
    Ok(RunConfig {
        memory,
        index: flags.index.clone().or_else(|| file.index.clone()),
        queries,
        k,
        mode: flags.mode.or(file.mode).unwrap_or(Mode::I2i),
        exact: flags.exact || file.exact.unwrap_or(false),
        style: flags.style.or(file.style).map(PromptStyle::from).unwrap_or_default(),
        seed: flags.seed.or(file.seed).unwrap_or(0),
        template: flags
            .template
            .clone()
            .or_else(|| file.template.clone())
            .unwrap_or_else(|| DEFAULT_TEMPLATE.to_string()),
        image_ref_template: flags
            .image_ref_template
            .clone()
            .or_else(|| file.image_ref_template.clone())
            .unwrap_or_else(|| "{id}".to_string()),
        ranker,
    })
}

pub fn env_ranker_url() -> Option<String> {
    std::env::var(RANKER_URL_ENV).ok().filter(|s| !s.is_empty())
}

/// SHA-256 of the JSON form, lowercase hex.
pub fn fingerprint(config: &RunConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}
