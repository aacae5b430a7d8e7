//! Well-formed replies in each method's expected output format. Used by the
//! mock provider, by previews and by round-trip tests.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::methods::{battery_key, GenerationMethod, MethodKind, TokenLogprob, REASONING_FIELD};
use crate::presentation::PresentationMode;
use crate::survey::Question;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScriptedAnswer {
    Choice { label: String },
    Number { value: f64 },
    /// One mass per option, in option order.
    Distribution { mass: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalReply {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<Vec<TokenLogprob>>,
}

fn number_json(v: f64) -> Value {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        json!(v as i64)
    } else {
        json!(v)
    }
}

fn answer_json(answer: &ScriptedAnswer, question: &Question) -> Value {
    match answer {
        ScriptedAnswer::Choice { label } => json!(label),
        ScriptedAnswer::Number { value } => number_json(*value),
        ScriptedAnswer::Distribution { mass } => {
            // Point answer for a distribution: the modal option.
            let i = argmax(mass);
            json!(question.options.get(i).map(|o| o.label.clone()).unwrap_or_default())
        }
    }
}

fn argmax(mass: &[f64]) -> usize {
    mass.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &m)| if m > best.1 { (i, m) } else { best })
        .0
}

fn masses(answer: &ScriptedAnswer, question: &Question) -> Vec<f64> {
    let n = question.options.len();
    match answer {
        ScriptedAnswer::Distribution { mass } => mass.clone(),
        ScriptedAnswer::Choice { label } => question
            .options
            .iter()
            .map(|o| if &o.label == label { 1.0 } else { 0.0 })
            .collect(),
        ScriptedAnswer::Number { .. } => vec![1.0 / n.max(1) as f64; n],
    }
}

fn probability_json(answer: &ScriptedAnswer, question: &Question) -> Value {
    let mut obj = Map::new();
    for (o, m) in question.options.iter().zip(masses(answer, question)) {
        obj.insert(o.label.clone(), json!(m));
    }
    Value::Object(obj)
}

fn fenced(value: &Value) -> String {
    format!("```json\n{}\n```", serde_json::to_string_pretty(value).expect("json"))
}

fn plain(answer: &ScriptedAnswer, question: &Question) -> String {
    match answer_json(answer, question) {
        Value::String(s) => s,
        other => other.to_string(),
    }
}

/// Free-text first-stage answer of an open-ended method.
pub fn open_ended_text(answer: &ScriptedAnswer, question: &Question) -> String {
    match answer {
        ScriptedAnswer::Number { value } => format!("I would put it at about {value}."),
        other => {
            let label = plain(other, question);
            let text = question.option_by_label(&label).map(|o| o.text.as_str()).unwrap_or("");
            format!("Honestly, {text}.")
        }
    }
}

/// The reply a well-behaved model gives. For open-ended methods this is
/// the reply to the classification follow-up.
pub fn canonical_reply(
    method: &GenerationMethod,
    mode: PresentationMode,
    questions: &[&Question],
    answer_field: &str,
    answers: &[ScriptedAnswer],
) -> CanonicalReply {
    let kind = method.kind;
    let text_only = |text: String| CanonicalReply { text, top_logprobs: None };
    if kind.reads_logprobs() {
        let q = questions[0];
        let m = masses(&answers[0], q);
        let top = q
            .options
            .iter()
            .zip(&m)
            .filter(|(_, m)| **m > 0.0)
            .map(|(o, m)| TokenLogprob::new(o.label.clone(), m.ln()))
            .collect::<Vec<_>>();
        let first = q.options.get(argmax(&m)).map(|o| o.label.clone()).unwrap_or_default();
        return CanonicalReply {
            text: first,
            top_logprobs: Some(top),
        };
    }
    let battery = mode == PresentationMode::Battery;
    match kind {
        MethodKind::VerbalizedDistribution | MethodKind::OpenEndedDistribution => {
            let value = if battery {
                let mut obj = Map::new();
                for (q, a) in questions.iter().zip(answers) {
                    obj.insert(battery_key(answer_field, q), probability_json(a, q));
                }
                Value::Object(obj)
            } else {
                probability_json(&answers[0], questions[0])
            };
            text_only(fenced(&value))
        }
        _ if method.uses_json() => {
            let mut obj = Map::new();
            if kind == MethodKind::RestrictedReasoning {
                obj.insert(REASONING_FIELD.into(), json!("Weighing how this person would see it."));
            }
            if battery {
                for (q, a) in questions.iter().zip(answers) {
                    obj.insert(battery_key(answer_field, q), answer_json(a, q));
                }
            } else {
                obj.insert(answer_field.into(), answer_json(&answers[0], questions[0]));
            }
            text_only(fenced(&Value::Object(obj)))
        }
        _ => text_only(plain(&answers[0], questions[0])),
    }
}
