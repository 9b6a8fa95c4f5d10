//! Plain-text run configuration: one `dotted.key = value` per line, `#` comments.
//! Unknown keys and out-of-range values are rejected.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::backends::{
    BackendSet, DetectorBackend, HttpDetector, HttpLlm, HttpScorer, HttpSettings, LlmBackend, MockScript,
    ScorerBackend, ScriptedDetector, ScriptedLlm, ScriptedScorer,
};
use crate::grammar::{FlmParser, GrammarError, SpatialTermDict, DEFAULT_WORD_CAP};
use crate::pipeline::{Engine, EngineConfig};
use crate::prompting::{PromptError, PromptTemplates};

pub const CONFIG_ENV: &str = "FLORA_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("{key}: {reason}")]
    Invalid { key: String, reason: String },
    #[error("no {0} backend configured (set {0}.url or a mock script)")]
    MissingBackend(&'static str),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dict(#[from] GrammarError),
    #[error(transparent)]
    Templates(#[from] PromptError),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServiceConfig {
    pub url: Option<String>,
    pub token: Option<String>,
    pub timeout: Option<Duration>,
}

impl ServiceConfig {
    fn settings(&self) -> Option<HttpSettings> {
        let url = self.url.clone()?;
        let mut s = HttpSettings::new(url);
        if let Some(t) = self.timeout {
            s = s.with_timeout(t);
        }
        s.bearer_token = self.token.clone();
        Some(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub llm: ServiceConfig,
    pub llm_model: Option<String>,
    pub detector: ServiceConfig,
    pub scorer: ServiceConfig,
    pub engine: EngineConfig,
    pub word_cap: usize,
    pub eval_parallelism: usize,
    pub eval_strict: bool,
    pub mock_llm: Option<PathBuf>,
    pub mock_backends: Option<PathBuf>,
    pub dict_path: Option<PathBuf>,
    pub templates_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            llm: ServiceConfig::default(),
            llm_model: None,
            detector: ServiceConfig::default(),
            scorer: ServiceConfig::default(),
            engine: EngineConfig::default(),
            word_cap: DEFAULT_WORD_CAP,
            eval_parallelism: 1,
            eval_strict: false,
            mock_llm: None,
            mock_backends: None,
            dict_path: None,
            templates_path: None,
        }
    }
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), reason: reason.into() }
}

fn number<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| invalid(key, format!("not a number: {value:?}")))
}

fn unit_interval(key: &str, value: &str, lo_open: bool, hi_open: bool) -> Result<f64, ConfigError> {
    let v: f64 = number(key, value)?;
    let ok = v.is_finite() && if lo_open { v > 0.0 } else { v >= 0.0 } && if hi_open { v < 1.0 } else { v <= 1.0 };
    if ok {
        Ok(v)
    } else {
        Err(invalid(key, format!("{v} out of range")))
    }
}

fn timeout(key: &str, value: &str) -> Result<Duration, ConfigError> {
    let ms: u64 = number(key, value)?;
    if ms == 0 {
        return Err(invalid(key, "must be positive"));
    }
    Ok(Duration::from_millis(ms))
}

fn positive(key: &str, value: &str) -> Result<usize, ConfigError> {
    let n: usize = number(key, value)?;
    if n == 0 {
        return Err(invalid(key, "must be at least 1"));
    }
    Ok(n)
}

/// Drops a trailing comment: `#` at line start or after whitespace.
fn strip_comment(line: &str) -> &str {
    let b = line.as_bytes();
    match (0..b.len()).find(|&i| b[i] == b'#' && (i == 0 || b[i - 1].is_ascii_whitespace())) {
        Some(i) => &line[..i],
        None => line,
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(ConfigError::Malformed { line: i + 1 })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    /// Loads `path`, else `$FLORA_CONFIG`, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path.map(Path::to_path_buf).or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from)) {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let text = || Some(value.to_string());
        match key {
            "llm.url" => self.llm.url = text(),
            "llm.model" => self.llm_model = text(),
            "llm.token" => self.llm.token = text(),
            "llm.timeout_ms" => self.llm.timeout = Some(timeout(key, value)?),
            "detector.url" => self.detector.url = text(),
            "detector.token" => self.detector.token = text(),
            "detector.timeout_ms" => self.detector.timeout = Some(timeout(key, value)?),
            "detector.threshold" => self.engine.detector_threshold = unit_interval(key, value, false, false)?,
            "scorer.url" => self.scorer.url = text(),
            "scorer.token" => self.scorer.token = text(),
            "scorer.timeout_ms" => self.scorer.timeout = Some(timeout(key, value)?),
            "max_candidates" => self.engine.max_candidates = positive(key, value)?,
            "sigma.kind" => self.engine.sigma = value.parse().map_err(|e: String| invalid(key, e))?,
            "ensemble.weight" => self.engine.ensemble_weight = unit_interval(key, value, false, false)?,
            "softmax.temperature" => {
                let t: f64 = number(key, value)?;
                if !(t.is_finite() && t > 0.0) {
                    return Err(invalid(key, "must be positive"));
                }
                self.engine.temperature = t;
            }
            "fusion.epsilon" => self.engine.epsilon = unit_interval(key, value, true, true)?,
            "filter.word_cap" => self.word_cap = positive(key, value)?,
            "eval.parallelism" => self.eval_parallelism = positive(key, value)?,
            "eval.strict" => self.eval_strict = value.parse().map_err(|_| invalid(key, "expected true or false"))?,
            "mock.llm" => self.mock_llm = Some(PathBuf::from(value)),
            "mock.backends" => self.mock_backends = Some(PathBuf::from(value)),
            "dict.path" => self.dict_path = Some(PathBuf::from(value)),
            "templates.path" => self.templates_path = Some(PathBuf::from(value)),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn engine(&self) -> Result<Engine, ConfigError> {
        let dict = match &self.dict_path {
            Some(p) => SpatialTermDict::load(p)?,
            None => SpatialTermDict::default(),
        };
        let templates = match &self.templates_path {
            Some(p) => PromptTemplates::load(p)?,
            None => PromptTemplates::default(),
        };
        Ok(Engine::new(FlmParser::new(dict, self.word_cap), templates, self.engine))
    }

    fn load_script(path: &Path) -> Result<MockScript, ConfigError> {
        MockScript::load(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
    }

    pub fn llm_backend(&self) -> Result<Arc<dyn LlmBackend>, ConfigError> {
        if let Some(p) = self.mock_llm.as_ref().or(self.mock_backends.as_ref()) {
            return Ok(Arc::new(ScriptedLlm::new(Self::load_script(p)?.llm)));
        }
        let settings = self.llm.settings().ok_or(ConfigError::MissingBackend("llm"))?;
        Ok(Arc::new(HttpLlm::new(settings, self.llm_model.clone())))
    }

    /// Builds all three backends. A mock script, when set, takes precedence over URLs.
    pub fn backends(&self) -> Result<BackendSet, ConfigError> {
        let llm = self.llm_backend()?;
        let script = self.mock_backends.as_deref().map(Self::load_script).transpose()?;
        let detector: Arc<dyn DetectorBackend> = match (&script, self.detector.settings()) {
            (Some(s), _) => Arc::new(ScriptedDetector::new(s.scenes.clone())),
            (None, Some(settings)) => Arc::new(HttpDetector::new(settings)),
            (None, None) => return Err(ConfigError::MissingBackend("detector")),
        };
        let scorer: Arc<dyn ScorerBackend> = match (&script, self.scorer.settings()) {
            (Some(s), _) => Arc::new(ScriptedScorer::new(s.scenes.clone())),
            (None, Some(settings)) => Arc::new(HttpScorer::new(settings)),
            (None, None) => return Err(ConfigError::MissingBackend("scorer")),
        };
        Ok(BackendSet::new(llm, detector, scorer))
    }
}
