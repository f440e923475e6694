//! Operator configuration: `forumint.toml`, overridden by environment
//! variables, overridden by command-line flags.
//!
//! The API credential is never read from the file; it comes only from
//! `FORUMINT_API_KEY`.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use forumint_core::backend::{LiveConfig, RetryPolicy, DEFAULT_API_BASE, DEFAULT_MODEL, ENV_API_BASE, ENV_API_KEY};
use forumint_core::pipeline::{BackendMode, Chunking, RunConfig};
use forumint_core::schema::{OverflowPolicy, PromptConfig};

pub const DEFAULT_CONFIG_FILE: &str = "forumint.toml";
pub const ENV_CONFIG: &str = "FORUMINT_CONFIG";
pub const ENV_STORE: &str = "FORUMINT_STORE";
pub const ENV_MODEL: &str = "FORUMINT_MODEL";
pub const ENV_CONCURRENCY: &str = "FORUMINT_CONCURRENCY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Tense {
    #[default]
    Present,
    Any,
}

/// Contents of the config file. Every field is optional; unknown keys are
/// an error.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub store: Option<PathBuf>,
    #[serde(default)]
    pub run: FileRun,
    #[serde(default)]
    pub live: FileLive,
    #[serde(default)]
    pub serve: FileServe,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRun {
    pub backend: Option<BackendMode>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_output: Option<u32>,
    pub include_title_always: Option<bool>,
    pub narrative_guard: Option<bool>,
    pub chunking: Option<Chunking>,
    pub concurrency: Option<usize>,
    pub char_budget: Option<usize>,
    pub overflow: Option<OverflowPolicy>,
    pub tense: Option<Tense>,
    pub transcripts: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileLive {
    pub api_base: Option<String>,
    pub timeout_secs: Option<u64>,
    pub max_retries: Option<u32>,
    pub max_in_flight: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileServe {
    pub port: Option<u16>,
    pub coders: Option<Vec<String>>,
    pub static_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn parse(text: &str) -> anyhow::Result<FileConfig> {
        Ok(toml::from_str(text)?)
    }

    /// Loads `explicit`, else `$FORUMINT_CONFIG`, else `./forumint.toml` if
    /// present. An explicitly named file must exist.
    pub fn load(explicit: Option<&Path>) -> anyhow::Result<(FileConfig, Option<PathBuf>)> {
        let env = std::env::var_os(ENV_CONFIG).map(PathBuf::from);
        let named = explicit.map(Path::to_path_buf).or(env);
        let path = match named {
            Some(p) => p,
            None => {
                let default = PathBuf::from(DEFAULT_CONFIG_FILE);
                if !default.exists() {
                    return Ok((FileConfig::default(), None));
                }
                default
            }
        };
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg = FileConfig::parse(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok((cfg, Some(path)))
    }
}

/// Values given on the command line; `None` means "not given".
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlagOverrides {
    pub store: Option<PathBuf>,
    pub backend: Option<BackendMode>,
    pub model: Option<String>,
    pub temperature: Option<f64>,
    pub max_output: Option<u32>,
    pub no_title_always: bool,
    pub narrative_guard: bool,
    pub chunking: Option<Chunking>,
    pub concurrency: Option<usize>,
    pub char_budget: Option<usize>,
    pub overflow: Option<OverflowPolicy>,
    pub tense: Option<Tense>,
    pub transcripts: Option<PathBuf>,
    pub retry_quarantined: bool,
    pub api_base: Option<String>,
    pub port: Option<u16>,
    pub coders: Option<Vec<String>>,
    pub static_dir: Option<PathBuf>,
}

/// Environment lookups, injectable for tests.
pub trait Env {
    fn var(&self, key: &str) -> Option<String>;
}

pub struct ProcessEnv;

impl Env for ProcessEnv {
    fn var(&self, key: &str) -> Option<String> {
        std::env::var(key).ok().filter(|v| !v.is_empty())
    }
}

impl Env for std::collections::HashMap<String, String> {
    fn var(&self, key: &str) -> Option<String> {
        self.get(key).cloned()
    }
}

/// The effective configuration after merging file, environment and flags.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliConfig {
    pub config_file: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub run: EffectiveRun,
    pub live: EffectiveLive,
    pub serve: EffectiveServe,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveRun {
    pub backend: BackendMode,
    pub model: String,
    pub temperature: f64,
    pub max_output: u32,
    pub include_title_always: bool,
    pub narrative_guard: bool,
    pub chunking: Chunking,
    pub concurrency: usize,
    pub char_budget: usize,
    pub overflow: OverflowPolicy,
    pub tense: Tense,
    pub transcripts: Option<PathBuf>,
    pub retry_quarantined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveLive {
    pub api_base: String,
    /// Whether a credential is available; the value itself is never shown.
    pub api_key_set: bool,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveServe {
    pub port: u16,
    pub coders: Option<Vec<String>>,
    pub static_dir: Option<PathBuf>,
}

fn env_parse<T: std::str::FromStr>(env: &dyn Env, key: &str) -> anyhow::Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    match env.var(key) {
        None => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|e| anyhow::anyhow!("invalid {key}={v:?}: {e}")),
    }
}

impl CliConfig {
    pub fn resolve(
        file: FileConfig,
        config_file: Option<PathBuf>,
        env: &dyn Env,
        flags: &FlagOverrides,
    ) -> anyhow::Result<CliConfig> {
        let run = &file.run;
        let default_run = RunConfig::default();
        let store = flags
            .store
            .clone()
            .or_else(|| env.var(ENV_STORE).map(PathBuf::from))
            .or(file.store);
        let model = flags
            .model
            .clone()
            .or_else(|| env.var(ENV_MODEL))
            .or(run.model.clone())
            .unwrap_or_else(|| DEFAULT_MODEL.to_string());
        let concurrency = match flags.concurrency {
            Some(c) => c,
            None => env_parse(env, ENV_CONCURRENCY)?
                .or(run.concurrency)
                .unwrap_or(default_run.concurrency),
        };
        let api_base = flags
            .api_base
            .clone()
            .or_else(|| env.var(ENV_API_BASE))
            .or(file.live.api_base.clone())
            .unwrap_or_else(|| DEFAULT_API_BASE.to_string());

        let cfg = CliConfig {
            config_file,
            store,
            run: EffectiveRun {
                backend: flags.backend.or(run.backend).unwrap_or_default(),
                model,
                temperature: flags
                    .temperature
                    .or(run.temperature)
                    .unwrap_or(default_run.temperature),
                max_output: flags
                    .max_output
                    .or(run.max_output)
                    .unwrap_or(default_run.max_output),
                include_title_always: !flags.no_title_always
                    && run.include_title_always.unwrap_or(true),
                narrative_guard: flags.narrative_guard || run.narrative_guard.unwrap_or(false),
                chunking: flags.chunking.or(run.chunking).unwrap_or_default(),
                concurrency,
                char_budget: flags
                    .char_budget
                    .or(run.char_budget)
                    .unwrap_or(default_run.prompt.char_budget),
                overflow: flags.overflow.or(run.overflow).unwrap_or_default(),
                tense: flags.tense.or(run.tense).unwrap_or_default(),
                transcripts: flags.transcripts.clone().or(run.transcripts.clone()),
                retry_quarantined: flags.retry_quarantined,
            },
            live: EffectiveLive {
                api_base,
                api_key_set: env.var(ENV_API_KEY).is_some(),
                timeout_secs: file.live.timeout_secs.unwrap_or(60),
                max_retries: file.live.max_retries.unwrap_or(RetryPolicy::default().max_retries),
                max_in_flight: file.live.max_in_flight.unwrap_or(4),
            },
            serve: EffectiveServe {
                port: flags.port.or(file.serve.port).unwrap_or(8080),
                coders: flags.coders.clone().or(file.serve.coders.clone()),
                static_dir: flags.static_dir.clone().or(file.serve.static_dir.clone()),
            },
        };
        cfg.run_config().validate()?;
        Ok(cfg)
    }

    pub fn run_config(&self) -> RunConfig {
        let r = &self.run;
        RunConfig {
            backend_mode: r.backend,
            model_id: r.model.clone(),
            temperature: r.temperature,
            max_output: r.max_output,
            include_title_always: r.include_title_always,
            chunking: r.chunking,
            concurrency: r.concurrency,
            prompt: PromptConfig {
                narrative_guard: r.narrative_guard,
                char_budget: r.char_budget,
                overflow: r.overflow,
            },
            retry_quarantined: r.retry_quarantined,
        }
    }

    /// Live client settings; the key is read from the environment here and
    /// nowhere else.
    pub fn live_config(&self, env: &dyn Env) -> anyhow::Result<LiveConfig> {
        let api_key = env
            .var(ENV_API_KEY)
            .ok_or_else(|| anyhow::anyhow!("{ENV_API_KEY} is not set"))?;
        Ok(LiveConfig {
            api_base: self.live.api_base.clone(),
            api_key,
            timeout: Duration::from_secs(self.live.timeout_secs),
            retry: RetryPolicy {
                max_retries: self.live.max_retries,
                ..RetryPolicy::default()
            },
            max_in_flight: self.live.max_in_flight,
        })
    }

    pub fn store_path(&self) -> anyhow::Result<&Path> {
        self.store
            .as_deref()
            .ok_or_else(|| anyhow::anyhow!("no store given (use --store, {ENV_STORE} or `store` in the config file)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(FileConfig::parse("stroe = \"x\"").is_err());
        assert!(FileConfig::parse("[run]\napi_key = \"sk\"").is_err());
        assert!(FileConfig::parse("[run]\nconcurrency = 2").is_ok());
    }

    #[test]
    fn flags_beat_env_beat_file() {
        let file = FileConfig::parse(
            "store = \"from-file\"\n[run]\nmodel = \"file-model\"\nconcurrency = 2\nchunking = \"whole-thread\"\n",
        )
        .unwrap();
        let mut env = HashMap::new();
        env.insert(ENV_MODEL.to_string(), "env-model".to_string());
        env.insert(ENV_CONCURRENCY.to_string(), "3".to_string());

        let cfg = CliConfig::resolve(file.clone(), None, &env, &FlagOverrides::default()).unwrap();
        assert_eq!(cfg.store, Some(PathBuf::from("from-file")));
        assert_eq!(cfg.run.model, "env-model");
        assert_eq!(cfg.run.concurrency, 3);
        assert_eq!(cfg.run.chunking, Chunking::WholeThread);

        let flags = FlagOverrides {
            model: Some("flag-model".into()),
            concurrency: Some(7),
            ..FlagOverrides::default()
        };
        let cfg = CliConfig::resolve(file, None, &env, &flags).unwrap();
        assert_eq!(cfg.run.model, "flag-model");
        assert_eq!(cfg.run.concurrency, 7);
    }

    #[test]
    fn bad_env_value_is_an_error() {
        let mut env = HashMap::new();
        env.insert(ENV_CONCURRENCY.to_string(), "many".to_string());
        assert!(CliConfig::resolve(FileConfig::default(), None, &env, &FlagOverrides::default()).is_err());
    }

    #[test]
    fn key_only_from_environment() {
        let env: HashMap<String, String> = HashMap::new();
        let cfg = CliConfig::resolve(FileConfig::default(), None, &env, &FlagOverrides::default()).unwrap();
        assert!(!cfg.live.api_key_set);
        assert!(cfg.live_config(&env).is_err());
        let env: HashMap<String, String> = [(ENV_API_KEY.to_string(), "k".to_string())].into();
        assert_eq!(cfg.live_config(&env).unwrap().api_key, "k");
    }
}
