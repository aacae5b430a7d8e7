//! Turns raw model output into typed answers.
//!
//! Every `parse_*` function is total: malformed input becomes an
//! [`AnswerValue::Unparseable`] carrying a [`Reason`] code, never a panic.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::chat::{CompletionProvider, ConversationTurn};
use crate::distribution::Distribution;
use crate::methods::{
    assets, battery_key, extract_first_token_distribution, GenerationMethod, MethodError, MethodKind, TokenLogprob,
    REASONING_FIELD,
};
use crate::presentation::{render_question, PresentationMode};
use crate::survey::Question;
use crate::template::substitute_placeholders;

/// Lower and upper bound on the raw mass sum of a verbalized distribution.
pub const VERBALIZED_SUM_BOUNDS: (f64, f64) = (0.8, 1.2);
pub const DEFAULT_ESCAPE_LABEL: &str = "UNPARSEABLE";

/// Machine-readable reason attached to an unparseable answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    /// Several options match equally well.
    Ambiguous,
    /// Nothing in the reply matches an option.
    NoMatch,
    OutOfRange,
    /// A number was expected but the value is not numeric.
    Nan,
    /// Battery key `<field>_<question text>` absent.
    MissingKey,
    /// The answer field is absent (for example a reasoning-only object).
    MissingAnswer,
    /// A verbalized distribution lacks an option key.
    MissingOption,
    NegativeMass,
    SumOutOfTolerance,
    NoJson,
    /// A token-probability method got no log-probabilities back.
    MissingLogprobs,
    ZeroCoverage,
    JudgeRejected,
    JudgeFailed,
    /// The request itself failed, so there is no reply to parse.
    ProviderError,
}

impl Reason {
    pub fn as_str(self) -> &'static str {
        match self {
            Reason::Ambiguous => "ambiguous",
            Reason::NoMatch => "no_match",
            Reason::OutOfRange => "out_of_range",
            Reason::Nan => "nan",
            Reason::MissingKey => "missing_key",
            Reason::MissingAnswer => "missing_answer",
            Reason::MissingOption => "missing_option",
            Reason::NegativeMass => "negative_mass",
            Reason::SumOutOfTolerance => "sum_out_of_tolerance",
            Reason::NoJson => "no_json",
            Reason::MissingLogprobs => "missing_logprobs",
            Reason::ZeroCoverage => "zero_coverage",
            Reason::JudgeRejected => "judge_rejected",
            Reason::JudgeFailed => "judge_failed",
            Reason::ProviderError => "provider_error",
        }
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnswerValue {
    Choice { label: String },
    Number { value: f64 },
    Distribution { distribution: Distribution },
    Unparseable {
        reason: Reason,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        detail: Option<String>,
    },
}

impl AnswerValue {
    pub fn unparseable(reason: Reason) -> Self {
        AnswerValue::Unparseable { reason, detail: None }
    }

    fn unparseable_with(reason: Reason, detail: impl Into<String>) -> Self {
        AnswerValue::Unparseable {
            reason,
            detail: Some(detail.into()),
        }
    }

    pub fn is_parsed(&self) -> bool {
        !matches!(self, AnswerValue::Unparseable { .. })
    }

    pub fn reason(&self) -> Option<Reason> {
        match self {
            AnswerValue::Unparseable { reason, .. } => Some(*reason),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParsePath {
    Json,
    DirectMatch,
    Logprobs,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub question_id: String,
    pub value: AnswerValue,
    pub parse_path: ParsePath,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reasoning_text: Option<String>,
}

impl ParsedAnswer {
    fn new(question: &Question, value: AnswerValue, parse_path: ParsePath) -> Self {
        Self {
            question_id: question.id.clone(),
            value,
            parse_path,
            reasoning_text: None,
        }
    }

    fn with_reasoning(mut self, reasoning: Option<String>) -> Self {
        self.reasoning_text = reasoning;
        self
    }
}

/// Opening and closing delimiter of a reasoning block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThinkDelimiters {
    pub open: String,
    pub close: String,
}

impl Default for ThinkDelimiters {
    fn default() -> Self {
        Self {
            open: "<think>".into(),
            close: "</think>".into(),
        }
    }
}

/// Removes reasoning blocks and returns (remaining text, reasoning). An
/// unclosed block swallows the rest of the text. A lone closing delimiter
/// (the opening one was part of the prompt) splits the text there.
pub fn strip_reasoning_tags(text: &str, delimiters: &[ThinkDelimiters]) -> (String, Option<String>) {
    let mut body = text.to_string();
    let mut reasoning: Vec<String> = Vec::new();
    for d in delimiters {
        if d.open.is_empty() || d.close.is_empty() {
            continue;
        }
        if !body.contains(&d.open) {
            if let Some(end) = body.find(&d.close) {
                reasoning.push(body[..end].trim().to_string());
                body = body[end + d.close.len()..].to_string();
            }
        }
        while let Some(start) = body.find(&d.open) {
            let after = start + d.open.len();
            match body[after..].find(&d.close) {
                Some(rel) => {
                    reasoning.push(body[after..after + rel].trim().to_string());
                    body.replace_range(start..after + rel + d.close.len(), "");
                }
                None => {
                    reasoning.push(body[after..].trim().to_string());
                    body.truncate(start);
                }
            }
        }
    }
    let reasoning = (!reasoning.is_empty()).then(|| reasoning.join("\n\n"));
    (body.trim().to_string(), reasoning)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JsonBlock {
    pub value: Value,
    /// Byte offset of the object's opening brace.
    pub offset: usize,
}

fn first_object_at(text: &str, base: usize) -> Option<JsonBlock> {
    for (i, _) in text.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        if let Some(Ok(value @ Value::Object(_))) = stream.next() {
            return Some(JsonBlock { value, offset: base + i });
        }
    }
    None
}

/// First JSON object in `text`: fenced code blocks are searched first,
/// then bare braces anywhere.
pub fn extract_json_block(text: &str) -> Option<JsonBlock> {
    let mut pos = 0;
    while let Some(rel) = text[pos..].find("```") {
        let fence = pos + rel + 3;
        let body_start = text[fence..].find('\n').map(|n| fence + n + 1).unwrap_or(fence);
        let Some(close_rel) = text[body_start..].find("```") else {
            break;
        };
        let body_end = body_start + close_rel;
        let body = &text[body_start..body_end];
        if let Ok(value @ Value::Object(_)) = serde_json::from_str::<Value>(body.trim()) {
            let lead = body.len() - body.trim_start().len();
            return Some(JsonBlock {
                value,
                offset: body_start + lead,
            });
        }
        if let Some(block) = first_object_at(body, body_start) {
            return Some(block);
        }
        pos = body_end + 3;
    }
    first_object_at(text, 0)
}

fn normalize(s: &str) -> String {
    let trimmed = s
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '*')
        .trim_end_matches(['.', '!', ','])
        .trim();
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Matches free text against the options. Precedence: exact label, exact
/// option text, normalized text or label, then a single option label
/// occurring as a standalone token. Several candidates at one level are
/// ambiguous.
pub fn match_choice(text: &str, question: &Question) -> AnswerValue {
    let options = &question.options;
    let t = text.trim();
    let choice = |i: usize| AnswerValue::Choice {
        label: options[i].label.clone(),
    };
    let unique = |hits: Vec<usize>| -> Option<AnswerValue> {
        match hits.len() {
            0 => None,
            1 => Some(choice(hits[0])),
            _ => Some(AnswerValue::unparseable_with(
                Reason::Ambiguous,
                hits.iter().map(|&i| options[i].label.as_str()).collect::<Vec<_>>().join(","),
            )),
        }
    };
    let positions = |pred: &dyn Fn(&crate::survey::AnswerOption) -> bool| -> Vec<usize> {
        options.iter().enumerate().filter(|(_, o)| pred(o)).map(|(i, _)| i).collect()
    };
    if let Some(v) = unique(positions(&|o| o.label == t)) {
        return v;
    }
    if let Some(v) = unique(positions(&|o| o.text == t)) {
        return v;
    }
    let n = normalize(t);
    if let Some(v) = unique(positions(&|o| normalize(&o.text) == n)) {
        return v;
    }
    if let Some(v) = unique(positions(&|o| normalize(&o.label) == n)) {
        return v;
    }
    let tokens: Vec<&str> = t.split(|c: char| !c.is_alphanumeric()).filter(|s| !s.is_empty()).collect();
    if let Some(v) = unique(positions(&|o| tokens.contains(&o.label.as_str()))) {
        return v;
    }
    AnswerValue::unparseable(Reason::NoMatch)
}

pub fn parse_choice(text: &str, question: &Question) -> ParsedAnswer {
    ParsedAnswer::new(question, match_choice(text, question), ParsePath::DirectMatch)
}

fn check_range(value: f64, question: &Question) -> AnswerValue {
    if !value.is_finite() {
        return AnswerValue::unparseable(Reason::Nan);
    }
    match question.range {
        Some(r) if value < r.min as f64 || value > r.max as f64 => {
            AnswerValue::unparseable_with(Reason::OutOfRange, value.to_string())
        }
        _ => AnswerValue::Number { value },
    }
}

fn numbers_in(text: &str) -> Vec<f64> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        let starts_number = bytes[i].is_ascii_digit()
            || (bytes[i] == b'-' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit()
                && (i == 0 || !bytes[i - 1].is_ascii_alphanumeric()));
        if !starts_number {
            i += 1;
            continue;
        }
        let start = i;
        i += 1;
        while i < bytes.len() && (bytes[i].is_ascii_digit() || (bytes[i] == b'.' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit())) {
            i += 1;
        }
        if let Ok(v) = text[start..i].parse::<f64>() {
            out.push(v);
        }
    }
    out
}

/// A number from free text: the whole reply, or the only number in it.
pub fn match_number_text(text: &str, question: &Question) -> AnswerValue {
    let t = text.trim().trim_end_matches('.');
    if let Ok(v) = t.parse::<f64>() {
        return check_range(v, question);
    }
    let found = numbers_in(t);
    let mut distinct = found.clone();
    distinct.dedup();
    match distinct.as_slice() {
        [] => AnswerValue::unparseable(Reason::Nan),
        [v] => check_range(*v, question),
        _ => AnswerValue::unparseable_with(Reason::Ambiguous, format!("{found:?}")),
    }
}

/// A number from a JSON value; numeric strings are accepted, nothing is
/// clamped or rounded.
pub fn match_number_value(value: &Value, question: &Question) -> AnswerValue {
    match value {
        Value::Number(n) => n.as_f64().map_or(AnswerValue::unparseable(Reason::Nan), |v| check_range(v, question)),
        Value::String(s) => match s.trim().parse::<f64>() {
            Ok(v) => check_range(v, question),
            Err(_) => AnswerValue::unparseable_with(Reason::Nan, s.clone()),
        },
        other => AnswerValue::unparseable_with(Reason::Nan, other.to_string()),
    }
}

pub fn parse_number_text(text: &str, question: &Question) -> ParsedAnswer {
    ParsedAnswer::new(question, match_number_text(text, question), ParsePath::DirectMatch)
}

/// Reads `field` of a JSON object as a number.
pub fn parse_number_json(json: &Value, field: &str, question: &Question) -> ParsedAnswer {
    let value = match json.get(field) {
        Some(v) => match_number_value(v, question),
        None => AnswerValue::unparseable(Reason::MissingAnswer),
    };
    ParsedAnswer::new(question, value, ParsePath::Json)
}

/// A JSON answer value for either kind of question.
pub fn match_value(value: &Value, question: &Question) -> AnswerValue {
    if !question.has_options() {
        return match_number_value(value, question);
    }
    match value {
        Value::String(s) => match_choice(s, question),
        Value::Number(n) => match_choice(&n.to_string(), question),
        other => AnswerValue::unparseable_with(Reason::NoMatch, other.to_string()),
    }
}

fn match_text(text: &str, question: &Question) -> AnswerValue {
    if question.has_options() {
        match_choice(text, question)
    } else {
        match_number_text(text, question)
    }
}

fn mass_value(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().trim_end_matches('%').trim().parse::<f64>().ok(),
        _ => None,
    }
}

/// Per-option masses keyed by label; each must be ≥ 0 and the raw sum
/// within [`VERBALIZED_SUM_BOUNDS`] before renormalizing.
pub fn match_verbalized(json: &Value, question: &Question) -> AnswerValue {
    let Some(obj) = json.as_object() else {
        return AnswerValue::unparseable_with(Reason::NoJson, "expected an object");
    };
    let mut masses = Vec::with_capacity(question.options.len());
    for o in &question.options {
        let Some(raw) = obj.get(&o.label) else {
            return AnswerValue::unparseable_with(Reason::MissingOption, o.label.clone());
        };
        let Some(m) = mass_value(raw) else {
            return AnswerValue::unparseable_with(Reason::Nan, raw.to_string());
        };
        if m < 0.0 || !m.is_finite() {
            return AnswerValue::unparseable_with(Reason::NegativeMass, o.label.clone());
        }
        masses.push(m);
    }
    let sum: f64 = masses.iter().sum();
    let (lo, hi) = VERBALIZED_SUM_BOUNDS;
    if !(lo..=hi).contains(&sum) {
        return AnswerValue::unparseable_with(Reason::SumOutOfTolerance, sum.to_string());
    }
    match Distribution::labels(question.labels().into_iter().map(String::from).collect(), masses) {
        Ok(distribution) => AnswerValue::Distribution { distribution },
        Err(e) => AnswerValue::unparseable_with(Reason::SumOutOfTolerance, e.to_string()),
    }
}

pub fn parse_verbalized_distribution(json: &Value, question: &Question) -> ParsedAnswer {
    ParsedAnswer::new(question, match_verbalized(json, question), ParsePath::Json)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("object has no answer besides the reasoning field")]
pub struct MissingAnswer;

/// Splits off the `reasoning` field. The remainder must hold at least one
/// other key. An empty reasoning string is kept as `Some("")`.
pub fn split_reasoning(json: &Value) -> Result<(Option<String>, Value), MissingAnswer> {
    let Some(obj) = json.as_object() else {
        return Err(MissingAnswer);
    };
    let mut rest = obj.clone();
    let reasoning = rest.remove(REASONING_FIELD).map(|v| match v {
        Value::String(s) => s,
        other => other.to_string(),
    });
    if rest.is_empty() {
        return Err(MissingAnswer);
    }
    Ok((reasoning, Value::Object(rest)))
}

/// What each battery value holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatteryValue {
    Answer,
    Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryParse {
    pub answers: Vec<ParsedAnswer>,
    pub extra_keys: Vec<String>,
}

/// One answer per question by exact key `<field>_<question text>`; key
/// order is irrelevant and `reasoning` is not counted as extra.
pub fn parse_battery(json: &Value, questions: &[&Question], answer_field: &str, kind: BatteryValue) -> BatteryParse {
    let empty = serde_json::Map::new();
    let obj = json.as_object().unwrap_or(&empty);
    let mut used = Vec::new();
    let answers = questions
        .iter()
        .map(|q| {
            let key = battery_key(answer_field, q);
            let value = match obj.get(&key) {
                None => AnswerValue::unparseable_with(Reason::MissingKey, key.clone()),
                Some(v) => {
                    used.push(key);
                    match kind {
                        BatteryValue::Answer => match_value(v, q),
                        BatteryValue::Distribution => match_verbalized(v, q),
                    }
                }
            };
            ParsedAnswer::new(q, value, ParsePath::Json)
        })
        .collect();
    let extra_keys = obj
        .keys()
        .filter(|k| k.as_str() != REASONING_FIELD && !used.contains(k))
        .cloned()
        .collect();
    BatteryParse { answers, extra_keys }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub escape_label: String,
    /// Replaces the built-in instruction; same placeholders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            escape_label: DEFAULT_ESCAPE_LABEL.into(),
            instruction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeTranscript {
    pub request: Vec<ConversationTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn judge_request(raw_text: &str, question: &Question, cfg: &JudgeConfig) -> Vec<ConversationTurn> {
    let mut bind = BTreeMap::from([
        ("QUESTION".to_string(), render_question(question, None, false)),
        ("ANSWER".to_string(), raw_text.to_string()),
        ("ESCAPE".to_string(), cfg.escape_label.clone()),
    ]);
    let builtin = if question.has_options() {
        let lines: Vec<String> = question.options.iter().map(|o| format!("{}: {}", o.label, o.text)).collect();
        bind.insert("OPTIONS".into(), lines.join("\n"));
        assets::JUDGE
    } else {
        let r = question.range.unwrap_or(crate::survey::NumericRange { min: 0, max: 0 });
        bind.insert("MIN".into(), r.min.to_string());
        bind.insert("MAX".into(), r.max.to_string());
        assets::JUDGE_NUMBER
    };
    let template = cfg.instruction.as_deref().unwrap_or(builtin);
    vec![ConversationTurn::user(substitute_placeholders(template, &bind).text)]
}

/// Asks a judge model to map `raw_text` to one option (or a number).
pub fn judge_parse(
    raw_text: &str,
    question: &Question,
    provider: &dyn CompletionProvider,
    cfg: &JudgeConfig,
) -> (ParsedAnswer, JudgeTranscript) {
    let request = judge_request(raw_text, question, cfg);
    let (value, reply, error) = match provider.complete(&request) {
        Err(e) => (AnswerValue::unparseable_with(Reason::JudgeFailed, e.to_string()), None, Some(e.to_string())),
        Ok(reply) => {
            let value = if normalize(&reply) == normalize(&cfg.escape_label) {
                AnswerValue::unparseable(Reason::JudgeRejected)
            } else {
                match match_text(&reply, question) {
                    v if v.is_parsed() => v,
                    _ => AnswerValue::unparseable_with(Reason::JudgeRejected, reply.clone()),
                }
            };
            (value, Some(reply), None)
        }
    };
    (
        ParsedAnswer::new(question, value, ParsePath::Judge),
        JudgeTranscript { request, reply, error },
    )
}

/// Method-level settings the dispatcher needs.
#[derive(Debug, Clone)]
pub struct ParseContext<'a> {
    pub method: &'a GenerationMethod,
    pub mode: PresentationMode,
    pub answer_field: &'a str,
    pub think_delimiters: &'a [ThinkDelimiters],
    pub alias_prefixes: &'a [String],
}

fn all_unparseable(questions: &[&Question], reason: Reason, path: ParsePath, detail: Option<String>) -> Vec<ParsedAnswer> {
    questions
        .iter()
        .map(|q| {
            ParsedAnswer::new(
                q,
                AnswerValue::Unparseable {
                    reason,
                    detail: detail.clone(),
                },
                path,
            )
        })
        .collect()
}

fn merge_reasoning(a: Option<String>, b: Option<String>) -> Option<String> {
    match (a, b) {
        (Some(a), Some(b)) => Some(format!("{a}\n\n{b}")),
        (a, b) => a.or(b),
    }
}

/// Parses one reply into exactly one answer per question.
///
/// For open-ended methods `text` is the classification reply, not the
/// free-text answer.
pub fn parse_response(
    ctx: &ParseContext<'_>,
    questions: &[&Question],
    text: &str,
    top_logprobs: Option<&[TokenLogprob]>,
) -> Vec<ParsedAnswer> {
    let (body, think) = strip_reasoning_tags(text, ctx.think_delimiters);
    let kind = ctx.method.kind;

    if kind.reads_logprobs() {
        return questions
            .iter()
            .map(|q| {
                let value = match top_logprobs {
                    None | Some([]) => AnswerValue::unparseable(Reason::MissingLogprobs),
                    Some(top) => match extract_first_token_distribution(top, q, ctx.alias_prefixes) {
                        Ok(d) => AnswerValue::Distribution {
                            distribution: d.distribution,
                        },
                        Err(MethodError::ZeroCoverage) => AnswerValue::unparseable(Reason::ZeroCoverage),
                        Err(e) => AnswerValue::unparseable_with(Reason::NoMatch, e.to_string()),
                    },
                };
                ParsedAnswer::new(q, value, ParsePath::Logprobs).with_reasoning(think.clone())
            })
            .collect();
    }

    let distribution = matches!(kind, MethodKind::VerbalizedDistribution | MethodKind::OpenEndedDistribution);
    let wants_json = ctx.method.uses_json() || distribution;

    if !wants_json {
        return questions
            .iter()
            .map(|q| ParsedAnswer::new(q, match_text(&body, q), ParsePath::DirectMatch).with_reasoning(think.clone()))
            .collect();
    }

    let Some(block) = extract_json_block(&body) else {
        // A bare answer to a JSON prompt is still usable for single items.
        if !distribution && ctx.mode != PresentationMode::Battery && questions.len() == 1 {
            let v = match_text(&body, questions[0]);
            if v.is_parsed() {
                return vec![ParsedAnswer::new(questions[0], v, ParsePath::DirectMatch).with_reasoning(think)];
            }
        }
        return all_unparseable(questions, Reason::NoJson, ParsePath::Json, None);
    };
    let mut json = block.value;
    let mut reasoning = think;
    if kind == MethodKind::RestrictedReasoning {
        match split_reasoning(&json) {
            Ok((r, rest)) => {
                reasoning = merge_reasoning(r, reasoning);
                json = rest;
            }
            Err(MissingAnswer) => {
                let r = json.get(REASONING_FIELD).and_then(|v| v.as_str()).map(String::from);
                let mut out = all_unparseable(questions, Reason::MissingAnswer, ParsePath::Json, None);
                for a in &mut out {
                    a.reasoning_text = merge_reasoning(r.clone(), reasoning.clone());
                }
                return out;
            }
        }
    }

    let answers = if ctx.mode == PresentationMode::Battery {
        let value_kind = if distribution {
            BatteryValue::Distribution
        } else {
            BatteryValue::Answer
        };
        parse_battery(&json, questions, ctx.answer_field, value_kind).answers
    } else {
        questions
            .iter()
            .map(|q| {
                let value = if distribution {
                    match_verbalized(&json, q)
                } else {
                    match json.get(ctx.answer_field) {
                        Some(v) => match_value(v, q),
                        None => AnswerValue::unparseable(Reason::MissingAnswer),
                    }
                };
                ParsedAnswer::new(q, value, ParsePath::Json)
            })
            .collect()
    };
    answers.into_iter().map(|a| a.with_reasoning(reasoning.clone())).collect()
}
