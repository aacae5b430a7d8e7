//! Response-generation methods: how an answer is elicited from the model
//! and what the request must look like on the wire.
//!
//! Eight methods in three families:
//!
//! | kind                        | family            | battery | wire extras               |
//! |-----------------------------|-------------------|---------|---------------------------|
//! | `first_token_probabilities` | token probability | no      | logprobs, 1 token         |
//! | `first_token_restricted`    | token probability | no      | logprobs + guided choice  |
//! | `answer_prefix`             | token probability | no      | assistant priming         |
//! | `restricted_choice`         | restricted        | JSON    | optional guided choice    |
//! | `restricted_reasoning`      | restricted        | yes     | JSON with `reasoning`     |
//! | `verbalized_distribution`   | restricted        | yes     | JSON probability per option |
//! | `open_ended_classification` | open              | no      | second classification call |
//! | `open_ended_distribution`   | open              | no      | second distribution call  |
//!
//! `first_token_restricted` is read as "guided choice over the labels and
//! logprobs of the first position".

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::chat::{ConversationTurn, Role};
use crate::distribution::Distribution;
use crate::presentation::{render_question, InferenceUnit, PresentationMode};
use crate::survey::{Question, ScaleKind};
use crate::template::substitute_placeholders;

pub(crate) mod assets {
    pub const JSON_FORMAT: &str = include_str!("../assets/instructions/v1/json_format.txt");
    pub const CHOOSE_LABEL: &str = include_str!("../assets/instructions/v1/choose_label.txt");
    pub const CHOOSE_NUMBER: &str = include_str!("../assets/instructions/v1/choose_number.txt");
    pub const VERBALIZED: &str = include_str!("../assets/instructions/v1/verbalized.txt");
    pub const OPEN_ENDED: &str = include_str!("../assets/instructions/v1/open_ended.txt");
    pub const CLASSIFY_LABEL: &str = include_str!("../assets/instructions/v1/classify_label.txt");
    pub const CLASSIFY_NUMBER: &str = include_str!("../assets/instructions/v1/classify_number.txt");
    pub const CLASSIFY_DISTRIBUTION: &str = include_str!("../assets/instructions/v1/classify_distribution.txt");
    pub const JUDGE: &str = include_str!("../assets/instructions/v1/judge.txt");
    pub const JUDGE_NUMBER: &str = include_str!("../assets/instructions/v1/judge_number.txt");
}

/// Completion budget for restricted single-answer methods.
pub const RESTRICTED_MAX_TOKENS: u32 = 16;
pub const REASONING_FIELD: &str = "reasoning";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    FirstTokenProbabilities,
    FirstTokenRestricted,
    AnswerPrefix,
    RestrictedChoice,
    RestrictedReasoning,
    VerbalizedDistribution,
    OpenEndedClassification,
    OpenEndedDistribution,
}

impl MethodKind {
    pub const ALL: [MethodKind; 8] = [
        MethodKind::FirstTokenProbabilities,
        MethodKind::FirstTokenRestricted,
        MethodKind::AnswerPrefix,
        MethodKind::RestrictedChoice,
        MethodKind::RestrictedReasoning,
        MethodKind::VerbalizedDistribution,
        MethodKind::OpenEndedClassification,
        MethodKind::OpenEndedDistribution,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::FirstTokenProbabilities => "first_token_probabilities",
            MethodKind::FirstTokenRestricted => "first_token_restricted",
            MethodKind::AnswerPrefix => "answer_prefix",
            MethodKind::RestrictedChoice => "restricted_choice",
            MethodKind::RestrictedReasoning => "restricted_reasoning",
            MethodKind::VerbalizedDistribution => "verbalized_distribution",
            MethodKind::OpenEndedClassification => "open_ended_classification",
            MethodKind::OpenEndedDistribution => "open_ended_distribution",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    pub fn reads_logprobs(self) -> bool {
        matches!(
            self,
            MethodKind::FirstTokenProbabilities | MethodKind::FirstTokenRestricted | MethodKind::AnswerPrefix
        )
    }

    pub fn is_open_ended(self) -> bool {
        matches!(self, MethodKind::OpenEndedClassification | MethodKind::OpenEndedDistribution)
    }

    /// Kinds that may restrict decoding to the answer options.
    pub fn allows_constrained_vocabulary(self) -> bool {
        matches!(
            self,
            MethodKind::RestrictedChoice | MethodKind::RestrictedReasoning | MethodKind::FirstTokenRestricted
        )
    }

    /// Answers are always wrapped in a JSON object.
    pub fn always_json(self) -> bool {
        matches!(self, MethodKind::RestrictedReasoning | MethodKind::VerbalizedDistribution)
    }

    /// The method produces a distribution over options rather than a choice.
    pub fn yields_distribution(self) -> bool {
        self.reads_logprobs()
            || matches!(self, MethodKind::VerbalizedDistribution | MethodKind::OpenEndedDistribution)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GenerationMethod {
    pub kind: MethodKind,
    #[serde(default)]
    pub constrained_vocabulary: bool,
    #[serde(default)]
    pub json_wrapper: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_text: Option<String>,
}

impl GenerationMethod {
    pub fn new(kind: MethodKind) -> Self {
        Self {
            kind,
            constrained_vocabulary: kind == MethodKind::FirstTokenRestricted,
            json_wrapper: false,
            prefix_text: None,
        }
    }

    pub fn json(mut self) -> Self {
        self.json_wrapper = true;
        self
    }

    pub fn constrained(mut self) -> Self {
        self.constrained_vocabulary = true;
        self
    }

    pub fn with_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.prefix_text = Some(prefix.into());
        self
    }

    pub fn uses_json(&self) -> bool {
        self.json_wrapper || self.kind.always_json()
    }

    pub fn is_constrained(&self) -> bool {
        self.constrained_vocabulary || self.kind == MethodKind::FirstTokenRestricted
    }

    /// Short stable name, e.g. `restricted_choice+json+constrained`.
    pub fn name(&self) -> String {
        let mut name = self.kind.as_str().to_string();
        if self.json_wrapper && !self.kind.always_json() {
            name.push_str("+json");
        }
        if self.constrained_vocabulary && self.kind != MethodKind::FirstTokenRestricted {
            name.push_str("+constrained");
        }
        name
    }

    pub fn validate(&self) -> Result<(), MethodError> {
        if self.constrained_vocabulary && !self.kind.allows_constrained_vocabulary() {
            return Err(MethodError::InvalidConfig(format!(
                "constrained_vocabulary is not available for {}",
                self.kind
            )));
        }
        match (&self.prefix_text, self.kind) {
            (Some(p), MethodKind::AnswerPrefix) if !p.is_empty() => Ok(()),
            (_, MethodKind::AnswerPrefix) => Err(MethodError::MissingPrefix),
            (Some(_), kind) => Err(MethodError::InvalidConfig(format!("prefix_text is only used by answer_prefix, not {kind}"))),
            (None, _) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum MethodError {
    #[error("invalid method configuration: {0}")]
    InvalidConfig(String),
    #[error("answer_prefix needs a non-empty prefix_text (use first_token_probabilities for no prefix)")]
    MissingPrefix,
    #[error("{method} cannot be used with {mode} presentation")]
    IncompatibleMode { method: MethodKind, mode: PresentationMode },
    #[error("{method} cannot answer {scale} question {question}")]
    IncompatibleScale {
        method: MethodKind,
        scale: &'static str,
        question: String,
    },
    #[error("provider does not support assistant priming")]
    PrimingUnsupported,
    #[error("no option token among the top log-probabilities")]
    ZeroCoverage,
    #[error("unit expects questions that were not supplied: {0}")]
    MissingQuestion(String),
}

/// Checks a (method, mode) pair against the questions it will answer.
/// Every combination either passes or yields a typed error.
pub fn check_compatibility(
    method: &GenerationMethod,
    mode: PresentationMode,
    questions: &[&Question],
) -> Result<(), MethodError> {
    method.validate()?;
    if mode == PresentationMode::Battery {
        let ok = match method.kind {
            MethodKind::RestrictedChoice => method.json_wrapper,
            MethodKind::RestrictedReasoning | MethodKind::VerbalizedDistribution => true,
            _ => false,
        };
        if !ok {
            return Err(MethodError::IncompatibleMode {
                method: method.kind,
                mode,
            });
        }
    }
    let needs_options = method.kind.reads_logprobs()
        || matches!(method.kind, MethodKind::VerbalizedDistribution | MethodKind::OpenEndedDistribution);
    if needs_options {
        if let Some(q) = questions.iter().find(|q| !q.has_options()) {
            return Err(MethodError::IncompatibleScale {
                method: method.kind,
                scale: ScaleKind::NumericRange.as_str(),
                question: q.id.clone(),
            });
        }
    }
    Ok(())
}

pub fn battery_key(answer_field: &str, question: &Question) -> String {
    format!("{answer_field}_{}", question.text)
}

fn bind(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn fill(template: &str, pairs: &[(&str, String)]) -> String {
    substitute_placeholders(template, &bind(pairs)).text
}

fn quote_key(key: &str) -> String {
    serde_json::to_string(key).expect("string serializes")
}

/// `{ "k": <k>, ... }` as shown to the model, one field per line.
fn json_fields(fields: &[(String, String)]) -> String {
    let body: Vec<String> = fields
        .iter()
        .map(|(k, placeholder)| format!("  {}: {placeholder}", quote_key(k)))
        .collect();
    format!("{{\n{}\n}}", body.join(",\n"))
}

fn json_format(fields: &[(String, String)]) -> String {
    fill(assets::JSON_FORMAT, &[("FIELDS", json_fields(fields))])
}

fn placeholder_for(key: &str) -> String {
    format!("<{key}>")
}

fn probability_object(question: &Question, indent: &str) -> String {
    let body: Vec<String> = question
        .options
        .iter()
        .map(|o| format!("{indent}  {}: <probability of {}>", quote_key(&o.label), o.label))
        .collect();
    format!("{{\n{}\n{indent}}}", body.join(",\n"))
}

/// The method's canonical output instruction for the given questions.
pub fn output_instruction(
    method: &GenerationMethod,
    mode: PresentationMode,
    questions: &[&Question],
    answer_field: &str,
) -> String {
    let battery = mode == PresentationMode::Battery;
    match method.kind {
        MethodKind::OpenEndedClassification | MethodKind::OpenEndedDistribution => assets::OPEN_ENDED.to_string(),
        MethodKind::VerbalizedDistribution => {
            let json = if battery {
                let body: Vec<String> = questions
                    .iter()
                    .map(|q| format!("  {}: {}", quote_key(&battery_key(answer_field, q)), probability_object(q, "  ")))
                    .collect();
                fill(assets::JSON_FORMAT, &[("FIELDS", format!("{{\n{}\n}}", body.join(",\n")))])
            } else {
                let q = questions.first().expect("one question");
                fill(assets::JSON_FORMAT, &[("FIELDS", probability_object(q, ""))])
            };
            fill(assets::VERBALIZED, &[("JSON_FORMAT", json)])
        }
        MethodKind::RestrictedChoice | MethodKind::RestrictedReasoning if method.uses_json() => {
            let mut fields = Vec::new();
            if method.kind == MethodKind::RestrictedReasoning {
                fields.push((REASONING_FIELD.to_string(), placeholder_for(REASONING_FIELD)));
            }
            if battery {
                for q in questions {
                    let key = battery_key(answer_field, q);
                    fields.push((key.clone(), placeholder_for(&key)));
                }
            } else {
                fields.push((answer_field.to_string(), placeholder_for(answer_field)));
            }
            json_format(&fields)
        }
        _ => {
            let q = questions.first().expect("one question");
            match (q.has_options(), q.range) {
                (false, Some(r)) => fill(assets::CHOOSE_NUMBER, &[("MIN", r.min.to_string()), ("MAX", r.max.to_string())]),
                _ => assets::CHOOSE_LABEL.to_string(),
            }
        }
    }
}

/// Whether rendered questions list their answer options. Open-ended
/// elicitation shows the bare question.
pub fn shows_options(method: &GenerationMethod) -> bool {
    !method.kind.is_open_ended()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderCapabilities {
    pub assistant_priming: bool,
    pub guided_choice: bool,
}

impl Default for ProviderCapabilities {
    fn default() -> Self {
        Self {
            assistant_priming: true,
            guided_choice: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingDefaults {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub max_tokens: u32,
    pub top_logprobs: u32,
}

impl Default for SamplingDefaults {
    fn default() -> Self {
        Self {
            temperature: None,
            max_tokens: 500,
            top_logprobs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CompileOptions {
    pub capabilities: ProviderCapabilities,
    pub sampling: SamplingDefaults,
    pub answer_field: String,
    pub question_stem: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub max_tokens: u32,
}

/// Wire-level parameters for one request. `messages` holds only the
/// unit's own turns; sequential history is prepended at execution time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub messages: Vec<ConversationTurn>,
    pub sampling: Sampling,
    pub want_logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_outputs: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub json_schema: Option<Value>,
    pub output_instruction: String,
}

impl RequestSpec {
    /// Text of a trailing partial assistant turn, if the request primes one.
    pub fn assistant_prefix(&self) -> Option<&str> {
        self.messages
            .last()
            .filter(|m| m.role == Role::Assistant)
            .map(|m| m.content.as_str())
    }

    /// Full message list for the wire: `history` followed by this
    /// request's turns.
    pub fn with_history(&self, history: &[ConversationTurn]) -> Vec<ConversationTurn> {
        history.iter().chain(&self.messages).cloned().collect()
    }
}

fn allowed_for(question: &Question) -> Vec<String> {
    match (question.has_options(), question.range) {
        (false, Some(r)) => (r.min..=r.max).map(|v| v.to_string()).collect(),
        _ => question.options.iter().map(|o| o.label.clone()).collect(),
    }
}

fn value_schema(question: &Question) -> Value {
    match (question.has_options(), question.range) {
        (false, Some(r)) => json!({"type": "number", "minimum": r.min, "maximum": r.max}),
        _ => json!({"type": "string", "enum": question.labels()}),
    }
}

fn answer_schema(method: &GenerationMethod, mode: PresentationMode, questions: &[&Question], field: &str) -> Value {
    let mut properties = serde_json::Map::new();
    let mut required = Vec::new();
    if method.kind == MethodKind::RestrictedReasoning {
        properties.insert(REASONING_FIELD.into(), json!({"type": "string"}));
        required.push(REASONING_FIELD.to_string());
    }
    if mode == PresentationMode::Battery {
        for q in questions {
            let key = battery_key(field, q);
            properties.insert(key.clone(), value_schema(q));
            required.push(key);
        }
    } else {
        properties.insert(field.to_string(), value_schema(questions[0]));
        required.push(field.to_string());
    }
    json!({"type": "object", "properties": properties, "required": required})
}

/// Compiles a rendered unit into wire parameters.
pub fn compile(
    method: &GenerationMethod,
    unit: &InferenceUnit,
    questions: &[&Question],
    opts: &CompileOptions,
) -> Result<RequestSpec, MethodError> {
    let mode = unit.unit_id.mode;
    if questions.is_empty() {
        return Err(MethodError::MissingQuestion(unit.expected_answers.join(",")));
    }
    check_compatibility(method, mode, questions)?;
    let battery = mode == PresentationMode::Battery;

    let max_tokens = match method.kind {
        k if k.reads_logprobs() => 1,
        MethodKind::RestrictedChoice if !battery => RESTRICTED_MAX_TOKENS,
        _ => opts.sampling.max_tokens,
    };
    let want_logprobs = method.kind.reads_logprobs();

    let (allowed_outputs, json_schema) = if method.is_constrained() {
        let mut allowed: Vec<String> = Vec::new();
        for q in questions {
            for a in allowed_for(q) {
                if !allowed.contains(&a) {
                    allowed.push(a);
                }
            }
        }
        let schema = method
            .uses_json()
            .then(|| answer_schema(method, mode, questions, &opts.answer_field));
        (Some(allowed), schema)
    } else {
        (None, None)
    };

    let spec = RequestSpec {
        messages: unit.initial_turns.clone(),
        sampling: Sampling {
            temperature: opts.sampling.temperature,
            seed: Some(unit.unit_id.seed),
            max_tokens,
        },
        want_logprobs,
        top_logprobs: want_logprobs.then_some(opts.sampling.top_logprobs),
        allowed_outputs,
        json_schema,
        output_instruction: output_instruction(method, mode, questions, &opts.answer_field),
    };
    if method.kind == MethodKind::AnswerPrefix {
        apply_answer_prefix(method, spec, &opts.capabilities)
    } else {
        Ok(spec)
    }
}

/// Appends the method's prefix as a partial assistant turn so the model
/// continues from it; log-probabilities are then read at the next position.
pub fn apply_answer_prefix(
    method: &GenerationMethod,
    mut spec: RequestSpec,
    caps: &ProviderCapabilities,
) -> Result<RequestSpec, MethodError> {
    let prefix = method
        .prefix_text
        .as_deref()
        .filter(|p| !p.is_empty())
        .ok_or(MethodError::MissingPrefix)?;
    if !caps.assistant_priming {
        return Err(MethodError::PrimingUnsupported);
    }
    spec.messages.push(ConversationTurn::assistant(prefix));
    spec.want_logprobs = true;
    spec.top_logprobs = spec.top_logprobs.or(Some(SamplingDefaults::default().top_logprobs));
    spec.sampling.max_tokens = 1;
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FollowupKind {
    Label,
    Number,
    Distribution,
}

/// Second-stage request of an open-ended method: classify the free-text
/// answer against the question's options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSpec {
    pub kind: FollowupKind,
    pub question: Question,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_stem: Option<String>,
    pub sampling: Sampling,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_outputs: Option<Vec<String>>,
}

fn option_lines(question: &Question) -> String {
    question
        .options
        .iter()
        .map(|o| format!("{}: {}", o.label, o.text))
        .collect::<Vec<_>>()
        .join("\n")
}

impl ClassificationSpec {
    pub fn instruction(&self, raw_answer: &str) -> String {
        let question = render_question(&self.question, self.question_stem.as_deref(), false);
        let q = &self.question;
        match self.kind {
            FollowupKind::Label => fill(
                assets::CLASSIFY_LABEL,
                &[("QUESTION", question), ("ANSWER", raw_answer.to_string()), ("OPTIONS", option_lines(q))],
            ),
            FollowupKind::Number => {
                let r = q.range.expect("numeric question has a range");
                fill(
                    assets::CLASSIFY_NUMBER,
                    &[
                        ("QUESTION", question),
                        ("ANSWER", raw_answer.to_string()),
                        ("MIN", r.min.to_string()),
                        ("MAX", r.max.to_string()),
                    ],
                )
            }
            FollowupKind::Distribution => fill(
                assets::CLASSIFY_DISTRIBUTION,
                &[
                    ("QUESTION", question),
                    ("ANSWER", raw_answer.to_string()),
                    ("OPTIONS", option_lines(q)),
                    ("JSON_FORMAT", fill(assets::JSON_FORMAT, &[("FIELDS", probability_object(q, ""))])),
                ],
            ),
        }
    }

    /// The classification request for a first-stage answer. It is issued
    /// outside the respondent's conversation.
    pub fn request(&self, raw_answer: &str) -> RequestSpec {
        let instruction = self.instruction(raw_answer);
        RequestSpec {
            messages: vec![ConversationTurn::user(instruction.clone())],
            sampling: self.sampling.clone(),
            want_logprobs: false,
            top_logprobs: None,
            allowed_outputs: self.allowed_outputs.clone(),
            json_schema: None,
            output_instruction: instruction,
        }
    }
}

/// First-stage request (no options shown) plus the classification
/// follow-up.
pub fn plan_open_ended(
    method: &GenerationMethod,
    unit: &InferenceUnit,
    question: &Question,
    opts: &CompileOptions,
) -> Result<(RequestSpec, ClassificationSpec), MethodError> {
    if !method.kind.is_open_ended() {
        return Err(MethodError::InvalidConfig(format!("{} is not open-ended", method.kind)));
    }
    let first = compile(method, unit, &[question], opts)?;
    let kind = match (method.kind, question.has_options()) {
        (MethodKind::OpenEndedDistribution, _) => FollowupKind::Distribution,
        (_, true) => FollowupKind::Label,
        (_, false) => FollowupKind::Number,
    };
    let max_tokens = match kind {
        FollowupKind::Distribution => opts.sampling.max_tokens,
        _ => RESTRICTED_MAX_TOKENS,
    };
    let allowed_outputs = (kind == FollowupKind::Label && opts.capabilities.guided_choice)
        .then(|| question.options.iter().map(|o| o.label.clone()).collect());
    Ok((
        first,
        ClassificationSpec {
            kind,
            question: question.clone(),
            question_stem: opts.question_stem.clone(),
            sampling: Sampling {
                temperature: Some(0.0),
                seed: Some(unit.unit_id.seed),
                max_tokens,
            },
            allowed_outputs,
        },
    ))
}

/// One entry of a top-k log-probability list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

impl TokenLogprob {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self {
            token: token.into(),
            logprob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstTokenDistribution {
    pub distribution: Distribution,
    /// Probability mass of top-k tokens that matched an option.
    pub matched_mass: f64,
    /// Probability mass of top-k tokens that matched nothing.
    pub unmatched_mass: f64,
}

/// Token spellings counted towards an option: the label, the label with a
/// leading space, the lowercased label, plus any configured extras.
pub fn label_aliases(label: &str, extra_prefixes: &[String]) -> Vec<String> {
    let mut aliases = vec![label.to_string(), format!(" {label}"), label.to_lowercase()];
    for p in extra_prefixes {
        aliases.push(format!("{p}{label}"));
    }
    aliases.dedup();
    let mut seen = Vec::new();
    aliases.retain(|a| {
        if seen.contains(a) {
            false
        } else {
            seen.push(a.clone());
            true
        }
    });
    aliases
}

/// Sums `exp(logprob)` per option over its alias set and renormalizes.
pub fn extract_first_token_distribution(
    top: &[TokenLogprob],
    question: &Question,
    extra_prefixes: &[String],
) -> Result<FirstTokenDistribution, MethodError> {
    let aliases: Vec<Vec<String>> = question
        .options
        .iter()
        .map(|o| label_aliases(&o.label, extra_prefixes))
        .collect();
    let mut mass = vec![0.0; question.options.len()];
    let mut unmatched = 0.0;
    for entry in top {
        let p = entry.logprob.exp();
        if !p.is_finite() {
            continue;
        }
        // An exact label match wins over alias matches of other options.
        let idx = question
            .options
            .iter()
            .position(|o| o.label == entry.token)
            .or_else(|| aliases.iter().position(|a| a.contains(&entry.token)));
        match idx {
            Some(i) => mass[i] += p,
            None => unmatched += p,
        }
    }
    let matched: f64 = mass.iter().sum();
    if matched <= 0.0 {
        return Err(MethodError::ZeroCoverage);
    }
    let distribution = Distribution::labels(question.options.iter().map(|o| o.label.clone()).collect(), mass)
        .map_err(|_| MethodError::ZeroCoverage)?;
    Ok(FirstTokenDistribution {
        distribution,
        matched_mass: matched,
        unmatched_mass: unmatched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presentation::{render, PlanKey};
    use crate::survey::{AnswerOption, Persona, PromptTemplate, Questionnaire};

    fn abc() -> Question {
        Question::with_options(
            "q",
            "Pick one",
            ScaleKind::Categorical,
            vec![AnswerOption::new("A", "x"), AnswerOption::new("B", "y"), AnswerOption::new("C", "z")],
        )
    }

    fn therm() -> Question {
        Question::numeric("t1", "The Democratic Party?", 0, 100)
    }

    fn unit_for(method: &GenerationMethod, mode: PresentationMode, qs: Vec<Question>) -> (Questionnaire, InferenceUnit) {
        let questionnaire = Questionnaire::new("q", qs).unwrap();
        let persona = Persona {
            id: "p".into(),
            system_prompt: "You are a voter.".into(),
            attributes: Default::default(),
        };
        let template = PromptTemplate::new("Answer:\n{{QUESTIONS}}").with_answer_field("temperature");
        let plan = render(mode, &questionnaire, &persona, &template, method, &PlanKey::new("base", "m", 1)).unwrap();
        (questionnaire, plan.units[0].clone())
    }

    fn opts() -> CompileOptions {
        CompileOptions {
            answer_field: "temperature".into(),
            ..Default::default()
        }
    }

    #[test]
    fn json_instruction_for_thermometer() {
        let m = GenerationMethod::new(MethodKind::RestrictedChoice).json();
        let (q, unit) = unit_for(&m, PresentationMode::SingleItem, vec![therm()]);
        let spec = compile(&m, &unit, &[&q.questions[0]], &opts()).unwrap();
        assert_eq!(
            spec.output_instruction,
            "You only respond in the following JSON format:\n```json\n{\n  \"temperature\": <temperature>\n}\n```"
        );
        assert!(spec.sampling.max_tokens <= RESTRICTED_MAX_TOKENS);
        assert!(!spec.want_logprobs);
    }

    #[test]
    fn first_token_requests_logprobs() {
        let m = GenerationMethod::new(MethodKind::FirstTokenProbabilities);
        let (q, unit) = unit_for(&m, PresentationMode::SingleItem, vec![abc()]);
        let spec = compile(&m, &unit, &[&q.questions[0]], &opts()).unwrap();
        assert!(spec.want_logprobs);
        assert_eq!(spec.sampling.max_tokens, 1);
        assert_eq!(spec.top_logprobs, Some(20));
        assert_eq!(spec.allowed_outputs, None);
    }

    #[test]
    fn first_token_restricted_sets_both_flags() {
        let m = GenerationMethod::new(MethodKind::FirstTokenRestricted);
        let (q, unit) = unit_for(&m, PresentationMode::SingleItem, vec![abc()]);
        let spec = compile(&m, &unit, &[&q.questions[0]], &opts()).unwrap();
        assert!(spec.want_logprobs);
        assert_eq!(spec.allowed_outputs, Some(vec!["A".into(), "B".into(), "C".into()]));
    }

    #[test]
    fn verbalized_keys_are_labels() {
        let five = Question::with_options(
            "imp",
            "How important?",
            ScaleKind::Ordinal,
            (1..=5).map(|i| AnswerOption::new(i.to_string(), format!("level {i}")).with_ordinal(i)).collect(),
        );
        let m = GenerationMethod::new(MethodKind::VerbalizedDistribution);
        let text = output_instruction(&m, PresentationMode::SingleItem, &[&five], "answer");
        for i in 1..=5 {
            assert!(text.contains(&format!("\"{i}\": <probability of {i}>")), "{text}");
        }
        assert!(text.contains("sum to 1"));
    }

    #[test]
    fn constrained_choice_allows_exactly_labels() {
        let m = GenerationMethod::new(MethodKind::RestrictedChoice).constrained();
        let (q, unit) = unit_for(&m, PresentationMode::SingleItem, vec![abc()]);
        let spec = compile(&m, &unit, &[&q.questions[0]], &opts()).unwrap();
        assert_eq!(spec.allowed_outputs.unwrap(), q.questions[0].labels());
        assert_eq!(spec.json_schema, None);
    }

    #[test]
    fn compatibility_matrix_is_total() {
        let qs = [abc()];
        let refs: Vec<&Question> = qs.iter().collect();
        for kind in MethodKind::ALL {
            for json in [false, true] {
                let mut m = GenerationMethod::new(kind);
                m.json_wrapper = json;
                if kind == MethodKind::AnswerPrefix {
                    m.prefix_text = Some("My answer is option ".into());
                }
                for mode in PresentationMode::ALL {
                    let res = check_compatibility(&m, mode, &refs);
                    let battery_ok = matches!(
                        (kind, json),
                        (MethodKind::RestrictedChoice, true)
                            | (MethodKind::RestrictedReasoning, _)
                            | (MethodKind::VerbalizedDistribution, _)
                    );
                    let expect_ok = mode != PresentationMode::Battery || battery_ok;
                    assert_eq!(res.is_ok(), expect_ok, "{kind} json={json} {mode}");
                    if let Err(e) = res {
                        assert!(matches!(e, MethodError::IncompatibleMode { .. }));
                    }
                }
            }
        }
    }

    #[test]
    fn token_methods_reject_numeric_questions() {
        let m = GenerationMethod::new(MethodKind::FirstTokenProbabilities);
        let q = therm();
        assert!(matches!(
            check_compatibility(&m, PresentationMode::SingleItem, &[&q]),
            Err(MethodError::IncompatibleScale { .. })
        ));
    }

    #[test]
    fn answer_prefix_primes_assistant_turn() {
        let m = GenerationMethod::new(MethodKind::AnswerPrefix).with_prefix("My answer is option ");
        let (q, unit) = unit_for(&m, PresentationMode::SingleItem, vec![abc()]);
        let spec = compile(&m, &unit, &[&q.questions[0]], &opts()).unwrap();
        let last = spec.messages.last().unwrap();
        assert_eq!(last.role, Role::Assistant);
        assert_eq!(last.content, "My answer is option ");
        assert_eq!(spec.assistant_prefix(), Some("My answer is option "));
        assert!(spec.want_logprobs);

        let again = compile(&m, &unit, &[&q.questions[0]], &opts()).unwrap();
        assert_eq!(serde_json::to_string(&spec).unwrap(), serde_json::to_string(&again).unwrap());

        let empty = GenerationMethod::new(MethodKind::AnswerPrefix).with_prefix("");
        assert_eq!(empty.validate(), Err(MethodError::MissingPrefix));

        let no_priming = CompileOptions {
            capabilities: ProviderCapabilities {
                assistant_priming: false,
                guided_choice: true,
            },
            ..opts()
        };
        assert_eq!(
            compile(&m, &unit, &[&q.questions[0]], &no_priming),
            Err(MethodError::PrimingUnsupported)
        );
    }

    #[test]
    fn open_ended_stages() {
        let m = GenerationMethod::new(MethodKind::OpenEndedClassification);
        let (q, unit) = unit_for(&m, PresentationMode::SingleItem, vec![abc()]);
        let (first, follow) = plan_open_ended(&m, &unit, &q.questions[0], &opts()).unwrap();
        for o in &q.questions[0].options {
            assert!(!first.output_instruction.contains(&format!("{}: {}", o.label, o.text)));
        }
        assert!(!first.messages[1].content.contains("A: x"));
        let req = follow.request("I'd go with the second thing, y.");
        assert!(req.messages[0].content.contains("I'd go with the second thing, y."));
        assert!(req.messages[0].content.contains("B: y"));
        assert_eq!(follow.kind, FollowupKind::Label);

        let md = GenerationMethod::new(MethodKind::OpenEndedDistribution);
        let (_, follow) = plan_open_ended(&md, &unit, &q.questions[0], &opts()).unwrap();
        assert_eq!(follow.kind, FollowupKind::Distribution);
        assert!(follow.request("x").messages[0].content.contains("<probability of C>"));
    }

    #[test]
    fn first_token_direct_normalization() {
        let q = abc();
        let top = [
            TokenLogprob::new("A", 0.6f64.ln()),
            TokenLogprob::new(" B", 0.3f64.ln()),
            TokenLogprob::new("C", 0.1f64.ln()),
        ];
        let d = extract_first_token_distribution(&top, &q, &[]).unwrap();
        let m = d.distribution.mass();
        assert!((m[0] - 0.6).abs() < 1e-12 && (m[1] - 0.3).abs() < 1e-12 && (m[2] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn first_token_zero_coverage() {
        let top = [TokenLogprob::new("Z", -0.1)];
        assert_eq!(extract_first_token_distribution(&top, &abc(), &[]), Err(MethodError::ZeroCoverage));
    }
}
