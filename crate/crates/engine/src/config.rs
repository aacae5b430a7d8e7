//! Experiment configuration.
//!
//! A config is a single TOML (or JSON) document. Relative paths are
//! resolved against the directory holding the config file. The config
//! digest covers the parsed config plus the bytes of every input file it
//! references, so editing a persona file changes run identity.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use surveyor_core::methods::{
    check_compatibility, CompileOptions, GenerationMethod, MethodError, ProviderCapabilities, SamplingDefaults,
};
use surveyor_core::parsers::{JudgeConfig, ThinkDelimiters};
use surveyor_core::perturbation::{KeyboardLayout, Lexicon, PerturbationContext, PerturbationSpec, VariantId};
use surveyor_core::presentation::PresentationMode;
use surveyor_core::survey::{
    load_personas, load_questionnaire, LoadError, Persona, PersonaError, PromptTemplate, Question, Questionnaire,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("questionnaire {path}: {source}")]
    Questionnaire {
        path: String,
        #[source]
        source: LoadError,
    },
    #[error("personas {path}: {source}")]
    Personas {
        path: String,
        #[source]
        source: PersonaError,
    },
    #[error("perturbation assets: {0}")]
    Assets(String),
    #[error("{0}")]
    Invalid(String),
    #[error("method {method} in mode {mode}: {source}")]
    Incompatible {
        method: String,
        mode: PresentationMode,
        #[source]
        source: MethodError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ConfigError + '_ {
    move |source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RetryClass {
    /// HTTP 429.
    #[serde(rename = "429")]
    RateLimited,
    /// HTTP 5xx.
    #[serde(rename = "5xx")]
    ServerError,
    /// Other HTTP 4xx except authentication failures.
    #[serde(rename = "4xx")]
    ClientError,
    #[serde(rename = "timeout")]
    Timeout,
    #[serde(rename = "connect")]
    Connect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_retry_on")]
    pub retry_on: Vec<RetryClass>,
    /// Seed of the jitter stream.
    #[serde(default)]
    pub jitter_seed: u64,
}

fn default_attempts() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_retry_on() -> Vec<RetryClass> {
    vec![
        RetryClass::RateLimited,
        RetryClass::ServerError,
        RetryClass::Timeout,
        RetryClass::Connect,
    ]
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: default_attempts(),
            backoff_base_ms: default_backoff(),
            retry_on: default_retry_on(),
            jitter_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    /// Base URL up to and including the API version, e.g.
    /// `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "yes")]
    pub supports_assistant_priming: bool,
    #[serde(default = "yes")]
    pub supports_guided_choice: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: u32,
    /// Group units sharing a system prompt when dispatching.
    #[serde(default = "yes")]
    pub prefix_friendly_order: bool,
}

fn default_timeout() -> u64 {
    60
}
fn default_in_flight() -> usize {
    8
}
fn default_max_tokens() -> u32 {
    SamplingDefaults::default().max_tokens
}
fn default_top_logprobs() -> u32 {
    SamplingDefaults::default().top_logprobs
}
fn yes() -> bool {
    true
}

impl ProviderConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
            supports_assistant_priming: true,
            supports_guided_choice: true,
            temperature: None,
            max_tokens: default_max_tokens(),
            top_logprobs: default_top_logprobs(),
            prefix_friendly_order: true,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_in_flight == 0 {
            return Err(ConfigError::Invalid("provider.max_in_flight must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(ConfigError::Invalid("provider.retry.max_attempts must be at least 1".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(ConfigError::Invalid("provider.base_url is empty".into()));
        }
        Ok(())
    }

    pub fn capabilities(&self) -> ProviderCapabilities {
        ProviderCapabilities {
            assistant_priming: self.supports_assistant_priming,
            guided_choice: self.supports_guided_choice,
        }
    }

    pub fn sampling(&self) -> SamplingDefaults {
        SamplingDefaults {
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            top_logprobs: self.top_logprobs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateConfig {
    /// System template; defaults to the bare persona prompt.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    /// Inline user template. Exactly one of `user` and `user_file` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_stem: Option<String>,
    #[serde(default = "yes")]
    pub require_questions_placeholder: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub name: String,
    #[serde(default)]
    pub perturbations: Vec<PerturbationSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParsingConfig {
    /// Send unparseable free-text answers to a judge model.
    #[serde(default)]
    pub judge: bool,
    #[serde(default)]
    pub judge_config: JudgeConfig,
    #[serde(default = "default_think")]
    pub think_delimiters: Vec<ThinkDelimiters>,
    /// Extra token prefixes accepted when matching first-token
    /// log-probabilities to labels.
    #[serde(default)]
    pub alias_prefixes: Vec<String>,
}

fn default_think() -> Vec<ThinkDelimiters> {
    vec![ThinkDelimiters::default()]
}

impl Default for ParsingConfig {
    fn default() -> Self {
        Self {
            judge: false,
            judge_config: JudgeConfig::default(),
            think_delimiters: default_think(),
            alias_prefixes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationAssets {
    /// Tab-separated adjacency table; the bundled US QWERTY table otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keyboard_layout: Option<PathBuf>,
    /// Tab-separated synonym lexicon; the bundled English list otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(default = "yes")]
    pub pin_refusal_last: bool,
}

impl Default for PerturbationAssets {
    fn default() -> Self {
        Self {
            keyboard_layout: None,
            lexicon: None,
            pin_refusal_last: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub questionnaire: PathBuf,
    pub personas: PathBuf,
    pub template: TemplateConfig,
    pub modes: Vec<PresentationMode>,
    /// Named perturbation pipelines. An empty list means the unperturbed
    /// questionnaire only.
    #[serde(default)]
    pub variants: Vec<VariantConfig>,
    pub methods: Vec<GenerationMethod>,
    pub provider: ProviderConfig,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<PathBuf>,
    /// Persona attributes used to form subpopulations when scoring.
    #[serde(default)]
    pub stratify_by: Vec<String>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub parsing: ParsingConfig,
    #[serde(default)]
    pub perturbation_assets: PerturbationAssets,
    /// Directory relative paths resolve against. Not part of the document.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_name() -> String {
    "experiment".into()
}

pub const BASE_VARIANT: &str = "base";

/// Everything a config references, loaded and checked.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub questionnaire: Questionnaire,
    pub personas: Vec<Persona>,
    pub template: PromptTemplate,
    pub variants: Vec<VariantConfig>,
    pub perturbation: PerturbationContext,
    pub digest: String,
}

impl Inputs {
    pub fn variant(&self, name: &str) -> Option<&VariantConfig> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn variant_id(&self, v: &VariantConfig) -> String {
        VariantId::for_specs(self.questionnaire.id.clone(), &v.perturbations).to_string()
    }

    pub fn persona(&self, id: &str) -> Option<&Persona> {
        self.personas.iter().find(|p| p.id == id)
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let json = path.extension().and_then(|e| e.to_str()) == Some("json");
        if json {
            Self::from_json(&text, base)
        } else {
            Self::from_toml(&text, base)
        }
    }

    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to toml")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn reference_path(&self) -> Option<PathBuf> {
        self.reference.as_deref().map(|p| self.resolve(p))
    }

    pub fn compile_options(&self, template: &PromptTemplate) -> CompileOptions {
        CompileOptions {
            capabilities: self.provider.capabilities(),
            sampling: self.provider.sampling(),
            answer_field: template.answer_field.clone(),
            question_stem: template.question_stem.clone(),
        }
    }

    pub fn variants_or_base(&self) -> Vec<VariantConfig> {
        if self.variants.is_empty() {
            vec![VariantConfig {
                name: BASE_VARIANT.into(),
                perturbations: Vec::new(),
            }]
        } else {
            self.variants.clone()
        }
    }

    pub fn method(&self, name: &str) -> Option<&GenerationMethod> {
        self.methods
            .iter()
            .find(|m| m.name() == name)
            .or_else(|| self.methods.iter().find(|m| m.kind.as_str() == name))
    }

    /// Checks the grid-level invariants that need no file access.
    pub fn validate_shape(&self) -> Result<(), ConfigError> {
        if self.modes.is_empty() {
            return Err(ConfigError::Invalid("at least one presentation mode is required".into()));
        }
        if self.methods.is_empty() {
            return Err(ConfigError::Invalid("at least one method is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("at least one seed is required".into()));
        }
        for (what, dup) in [
            ("mode", has_duplicates(self.modes.iter().map(|m| m.as_str().to_string()))),
            ("method", has_duplicates(self.methods.iter().map(GenerationMethod::name))),
            ("seed", has_duplicates(self.seeds.iter().map(u64::to_string))),
            ("variant", has_duplicates(self.variants.iter().map(|v| v.name.clone()))),
        ] {
            if let Some(d) = dup {
                return Err(ConfigError::Invalid(format!("duplicate {what} {d}")));
            }
        }
        for m in &self.methods {
            m.validate().map_err(|e| ConfigError::Invalid(format!("method {}: {e}", m.name())))?;
        }
        match (&self.template.user, &self.template.user_file) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid("template sets both user and user_file".into()));
            }
            (None, None) => return Err(ConfigError::Invalid("template needs user or user_file".into())),
            _ => {}
        }
        self.provider.validate()
    }

    fn read(&self, p: &Path) -> Result<Vec<u8>, ConfigError> {
        let path = self.resolve(p);
        std::fs::read(&path).map_err(io_err(&path))
    }

    pub fn load_template(&self) -> Result<PromptTemplate, ConfigError> {
        let user = match (&self.template.user, &self.template.user_file) {
            (Some(u), _) => u.clone(),
            (None, Some(f)) => String::from_utf8(self.read(f)?)
                .map_err(|e| ConfigError::Invalid(format!("user template is not UTF-8: {e}")))?,
            (None, None) => return Err(ConfigError::Invalid("template needs user or user_file".into())),
        };
        let mut t = PromptTemplate::new(user);
        if let Some(s) = &self.template.system {
            t.system_template = s.clone();
        }
        if let Some(f) = &self.template.answer_field {
            t.answer_field = f.clone();
        }
        t.question_stem = self.template.question_stem.clone();
        t.require_questions_placeholder = self.template.require_questions_placeholder;
        Ok(t)
    }

    fn perturbation_context(&self) -> Result<PerturbationContext, ConfigError> {
        let mut ctx = PerturbationContext {
            pin_refusal_last: self.perturbation_assets.pin_refusal_last,
            ..PerturbationContext::default()
        };
        if let Some(p) = &self.perturbation_assets.keyboard_layout {
            let text = String::from_utf8_lossy(&self.read(p)?).into_owned();
            ctx.layout = KeyboardLayout::parse(&text).map_err(|e| ConfigError::Assets(e.to_string()))?;
        }
        if let Some(p) = &self.perturbation_assets.lexicon {
            let text = String::from_utf8_lossy(&self.read(p)?).into_owned();
            ctx.lexicon = Lexicon::parse(&text).map_err(|e| ConfigError::Assets(e.to_string()))?;
        }
        Ok(ctx)
    }

    /// Loads and validates every input, checks that all (method, mode)
    /// pairs are compatible with the questionnaire and computes the digest.
    pub fn load_inputs(&self) -> Result<Inputs, ConfigError> {
        self.validate_shape()?;
        let qpath = self.resolve(&self.questionnaire);
        let questionnaire = load_questionnaire(&qpath).map_err(|source| ConfigError::Questionnaire {
            path: qpath.display().to_string(),
            source,
        })?;
        let ppath = self.resolve(&self.personas);
        let personas = load_personas(&ppath).map_err(|source| ConfigError::Personas {
            path: ppath.display().to_string(),
            source,
        })?;
        if personas.is_empty() {
            return Err(ConfigError::Personas {
                path: ppath.display().to_string(),
                source: PersonaError::Empty,
            });
        }
        let template = self.load_template()?;
        let perturbation = self.perturbation_context()?;

        let questions: Vec<&Question> = questionnaire.questions.iter().collect();
        for method in &self.methods {
            for &mode in &self.modes {
                check_compatibility(method, mode, &questions).map_err(|source| ConfigError::Incompatible {
                    method: method.name(),
                    mode,
                    source,
                })?;
            }
        }
        for attr in &self.stratify_by {
            if personas.iter().all(|p| !p.attributes.contains_key(attr)) && self.reference.is_none() {
                return Err(ConfigError::Invalid(format!("stratify_by attribute {attr} is unknown")));
            }
        }

        let digest = self.digest()?;
        Ok(Inputs {
            questionnaire,
            personas,
            template,
            variants: self.variants_or_base(),
            perturbation,
            digest,
        })
    }

    /// Hex SHA-256 over the config's canonical JSON and the contents of
    /// every referenced file.
    pub fn digest(&self) -> Result<String, ConfigError> {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        let mut files: Vec<&Path> = vec![&self.questionnaire, &self.personas];
        files.extend(self.template.user_file.as_deref());
        files.extend(self.reference.as_deref());
        files.extend(self.perturbation_assets.keyboard_layout.as_deref());
        files.extend(self.perturbation_assets.lexicon.as_deref());
        for f in files {
            h.update(b"\n");
            h.update(Sha256::digest(self.read(f)?));
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn has_duplicates(items: impl Iterator<Item = String>) -> Option<String> {
    let mut seen = std::collections::BTreeSet::new();
    items.into_iter().find(|i| !seen.insert(i.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
questionnaire = "q.csv"
personas = "p.csv"
modes = ["battery", "single_item"]
seeds = [1]
output_dir = "out"

[template]
user = "{{QUESTIONS}}"

[[methods]]
kind = "restricted_choice"
json_wrapper = true

[provider]
base_url = "http://127.0.0.1:1/v1"
model = "m"
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, "/tmp/x").unwrap();
        assert_eq!(cfg.provider.retry.max_attempts, 3);
        assert_eq!(cfg.provider.max_in_flight, 8);
        assert_eq!(cfg.variants_or_base()[0].name, BASE_VARIANT);
        assert_eq!(cfg.resolve(Path::new("q.csv")), PathBuf::from("/tmp/x/q.csv"));
        assert_eq!(cfg.methods[0].name(), "restricted_choice+json");
        cfg.validate_shape().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, "").unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml(), "").unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_empty_grid() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL, "").unwrap();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate_shape(), Err(ConfigError::Invalid(_))));
        let mut cfg = ExperimentConfig::from_toml(MINIMAL, "").unwrap();
        cfg.provider.max_in_flight = 0;
        assert!(cfg.validate_shape().is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        let bad = MINIMAL.replace("seeds = [1]", "seeds = [1]\nsedes = [2]");
        assert!(matches!(ExperimentConfig::from_toml(&bad, ""), Err(ConfigError::Syntax(_))));
    }
}
