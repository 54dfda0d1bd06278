//! Campaign configuration files and model/target construction.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::Deserialize;
use slicefuzz::modelclient::{
    CompletionParams, HttpClient, HttpClientConfig, ModelClient, OracleClient, OracleSearch, ScriptedClient,
};
use slicefuzz::scheduler::{QueueMode, DEFAULT_ATTEMPT_CAP};
use slicefuzz::slicer::{PromptMode, DEFAULT_PROMPT_BUDGET};
use slicefuzz::targets::{builtin_target, ExternalTarget, BUILTIN_TARGETS};
use slicefuzz::{ProgramIndex, TargetAdapter};

pub const MODEL_URL_ENV: &str = "SLICEFUZZ_MODEL_URL";
pub const API_KEY_ENV: &str = "SLICEFUZZ_API_KEY";

/// A configuration problem, reported with the offending field.
#[derive(Debug)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid config field `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Oracle,
    Scripted,
    Http,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backend: Backend,
    /// Model name sent to the chat-completions endpoint.
    pub name: Option<String>,
    pub url: Option<String>,
    pub script: Option<PathBuf>,
    #[serde(default = "default_oracle_budget")]
    pub oracle_budget: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_attempts")]
    pub attempts: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_oracle_budget() -> usize {
    20_000
}
fn default_temperature() -> f64 {
    CompletionParams::default().temperature
}
fn default_max_tokens() -> u32 {
    CompletionParams::default().max_tokens
}
fn default_attempts() -> usize {
    1
}
fn default_timeout() -> u64 {
    120
}
fn default_in_flight() -> usize {
    1
}

impl ModelConfig {
    pub fn oracle(budget: usize) -> Self {
        ModelConfig {
            backend: Backend::Oracle,
            name: None,
            url: None,
            script: None,
            oracle_budget: budget,
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            attempts: default_attempts(),
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
        }
    }

    /// Parses `oracle[:budget]`, `scripted:<path>` or `http:<model-name>`.
    pub fn from_spec(spec: &str) -> Result<Self, ConfigError> {
        let bad = |m: &str| ConfigError::new("model", m.to_string());
        let (kind, arg) = match spec.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (spec, None),
        };
        let mut cfg = ModelConfig::oracle(default_oracle_budget());
        match (kind, arg) {
            ("oracle", None) => {}
            ("oracle", Some(b)) => cfg.oracle_budget = b.parse().map_err(|_| bad("oracle budget must be an integer"))?,
            ("scripted", Some(p)) if !p.is_empty() => {
                cfg.backend = Backend::Scripted;
                cfg.script = Some(PathBuf::from(p));
            }
            ("http", Some(n)) if !n.is_empty() => {
                cfg.backend = Backend::Http;
                cfg.name = Some(n.to_string());
            }
            _ => return Err(bad("expected oracle[:budget], scripted:<path> or http:<model-name>")),
        }
        Ok(cfg)
    }

    pub fn completion_params(&self) -> CompletionParams {
        CompletionParams {
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            attempts: self.attempts,
        }
    }

    /// Applies the URL and API key environment overrides.
    pub fn apply_env(&mut self) {
        if let Ok(url) = std::env::var(MODEL_URL_ENV) {
            if !url.is_empty() {
                self.url = Some(url);
            }
        }
    }

    pub fn validate(&self, prefix: &str) -> Result<(), ConfigError> {
        let field = |f: &str| format!("{prefix}{f}");
        match self.backend {
            Backend::Oracle => {}
            Backend::Scripted => match &self.script {
                None => return Err(ConfigError::new(field("script"), "required for the scripted backend")),
                Some(p) if !p.is_file() => {
                    return Err(ConfigError::new(field("script"), format!("{} does not exist", p.display())))
                }
                _ => {}
            },
            Backend::Http => {
                if self.url.as_deref().is_none_or(str::is_empty) {
                    return Err(ConfigError::new(
                        field("url"),
                        format!("required for the http backend (or set {MODEL_URL_ENV})"),
                    ));
                }
                if self.name.as_deref().is_none_or(str::is_empty) {
                    return Err(ConfigError::new(field("name"), "required for the http backend"));
                }
            }
        }
        if self.attempts == 0 {
            return Err(ConfigError::new(field("attempts"), "must be at least 1"));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(ConfigError::new(field("temperature"), "must be within [0, 2]"));
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::new(field("max_in_flight"), "must be at least 1"));
        }
        Ok(())
    }

    pub fn build(&self, target: &Arc<dyn TargetAdapter>) -> anyhow::Result<Arc<dyn ModelClient>> {
        Ok(match self.backend {
            Backend::Oracle => Arc::new(OracleClient::new(
                target.clone(),
                OracleSearch::for_target(target.name(), self.oracle_budget),
            )),
            Backend::Scripted => Arc::new(ScriptedClient::load(self.script.as_deref().expect("validated"))?),
            Backend::Http => Arc::new(HttpClient::new(HttpClientConfig {
                base_url: self.url.clone().expect("validated"),
                model: self.name.clone().expect("validated"),
                api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
                timeout_secs: self.timeout_secs,
                max_in_flight: self.max_in_flight,
            })?),
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &self.script {
            self.script = Some(base.join(p));
        }
    }
}

/// How to reach a target: a built-in name, or a program plus its index.
#[derive(Debug, Clone)]
pub struct TargetSpec {
    pub target: String,
    pub index: Option<PathBuf>,
    pub args: Vec<String>,
}

impl TargetSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if BUILTIN_TARGETS.contains(&self.target.as_str()) {
            return Ok(());
        }
        if !Path::new(&self.target).exists() {
            return Err(ConfigError::new(
                "target",
                format!(
                    "`{}` is neither a built-in target ({}) nor an existing program",
                    self.target,
                    BUILTIN_TARGETS.join(", ")
                ),
            ));
        }
        match &self.index {
            None => Err(ConfigError::new("index", "required for external targets")),
            Some(p) if !p.is_file() => Err(ConfigError::new("index", format!("{} does not exist", p.display()))),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> anyhow::Result<Arc<dyn TargetAdapter>> {
        self.validate()?;
        if BUILTIN_TARGETS.contains(&self.target.as_str()) {
            return Ok(builtin_target(&self.target)?);
        }
        let index = ProgramIndex::load_sidecar(self.index.as_deref().expect("validated"))?;
        Ok(Arc::new(ExternalTarget::new(&self.target, self.args.clone(), index)?))
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    /// Built-in target name or path to an instrumented program.
    pub target: String,
    pub index: Option<PathBuf>,
    #[serde(default)]
    pub target_args: Vec<String>,
    /// Initial corpus directory; built-in targets fall back to their default seeds.
    pub corpus: Option<PathBuf>,
    pub output: PathBuf,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_iterations")]
    pub iterations: u64,
    pub max_duration_secs: Option<u64>,
    #[serde(default = "default_time_limit_ms")]
    pub time_limit_ms: u64,
    #[serde(default = "yes")]
    pub lm_enabled: bool,
    #[serde(default = "yes")]
    pub priority_scheduling: bool,
    #[serde(default = "default_mode")]
    pub mode: PromptMode,
    #[serde(default = "yes")]
    pub filter_answerable: bool,
    /// Seed the corpus with training-split answers so training branches are
    /// never asked about.
    #[serde(default)]
    pub leakage_injection: bool,
    /// Training split to inject; built from the corpus when absent.
    pub training_dataset: Option<PathBuf>,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    #[serde(default = "default_prompt_budget")]
    pub prompt_budget: usize,
    #[serde(default = "default_attempt_cap")]
    pub attempt_cap: u32,
    #[serde(default = "default_consumer_interval")]
    pub consumer_interval: u64,
    #[serde(default)]
    pub threaded: bool,
    pub model: Option<ModelConfig>,
}

fn yes() -> bool {
    true
}
fn default_iterations() -> u64 {
    10_000
}
fn default_time_limit_ms() -> u64 {
    1_000
}
fn default_mode() -> PromptMode {
    PromptMode::FullTrace
}
fn default_train_ratio() -> f64 {
    slicefuzz::dataset::DEFAULT_TRAIN_RATIO
}
fn default_prompt_budget() -> usize {
    DEFAULT_PROMPT_BUDGET
}
fn default_attempt_cap() -> u32 {
    DEFAULT_ATTEMPT_CAP
}
fn default_consumer_interval() -> u64 {
    100
}

impl CampaignConfig {
    /// Reads a TOML file. Relative paths are taken from the file's directory;
    /// the model URL comes from the environment when set there.
    pub fn load(path: &Path) -> anyhow::Result<CampaignConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("config", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: CampaignConfig = toml::from_str(&text).map_err(|e| parse_error(&e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        if let Some(m) = &mut cfg.model {
            m.apply_env();
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| *p = base.join(&*p);
        if !BUILTIN_TARGETS.contains(&self.target.as_str()) {
            self.target = base.join(&self.target).to_string_lossy().into_owned();
        }
        self.index.as_mut().map(join);
        self.corpus.as_mut().map(join);
        self.training_dataset.as_mut().map(join);
        join(&mut self.output);
        if let Some(m) = &mut self.model {
            m.resolve_paths(base);
        }
    }

    pub fn target_spec(&self) -> TargetSpec {
        TargetSpec {
            target: self.target.clone(),
            index: self.index.clone(),
            args: self.target_args.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.target_spec().validate()?;
        if let Some(c) = &self.corpus {
            if !c.is_dir() {
                return Err(ConfigError::new("corpus", format!("{} is not a directory", c.display())));
            }
        } else if !BUILTIN_TARGETS.contains(&self.target.as_str()) {
            return Err(ConfigError::new("corpus", "required for external targets"));
        }
        if self.iterations == 0 && self.max_duration_secs.is_none() {
            return Err(ConfigError::new("iterations", "must be positive unless max_duration_secs is set"));
        }
        if self.time_limit_ms == 0 {
            return Err(ConfigError::new("time_limit_ms", "must be positive"));
        }
        if self.consumer_interval == 0 {
            return Err(ConfigError::new("consumer_interval", "must be at least 1"));
        }
        if self.attempt_cap == 0 {
            return Err(ConfigError::new("attempt_cap", "must be at least 1"));
        }
        if self.prompt_budget == 0 {
            return Err(ConfigError::new("prompt_budget", "must be positive"));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(ConfigError::new("train_ratio", "must be strictly between 0 and 1"));
        }
        if let Some(p) = &self.training_dataset {
            if !self.leakage_injection {
                return Err(ConfigError::new("training_dataset", "only used with leakage_injection = true"));
            }
            if !p.is_file() {
                return Err(ConfigError::new("training_dataset", format!("{} does not exist", p.display())));
            }
        }
        match (&self.model, self.lm_enabled) {
            (None, true) => Err(ConfigError::new("model", "a [model] table is required when lm_enabled = true")),
            (Some(m), true) => m.validate("model."),
            _ => Ok(()),
        }
    }

    pub fn time_limit(&self) -> Duration {
        Duration::from_millis(self.time_limit_ms)
    }

    pub fn queue_mode(&self) -> QueueMode {
        if self.priority_scheduling {
            QueueMode::Priority
        } else {
            QueueMode::Fifo
        }
    }
}

/// Maps a TOML error to the field it concerns where one can be named.
fn parse_error(e: &toml::de::Error) -> ConfigError {
    let msg = e.message().to_string();
    let named = msg.starts_with("unknown field") || msg.starts_with("missing field");
    match msg.split('`').nth(1).filter(|_| named) {
        Some(field) => ConfigError::new(field, msg.clone()),
        None => ConfigError::new("config", e.to_string()),
    }
}
