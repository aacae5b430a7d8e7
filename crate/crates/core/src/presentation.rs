//! Arranges a questionnaire into chat requests.
//!
//! * `single_item`: one fresh `[system, user]` conversation per question.
//! * `sequential`: one conversation; the first unit carries the system turn
//!   and every later unit adds a single user turn after the previous reply.
//! * `battery`: one `[system, user]` request holding every question.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{ConversationTurn, Role};
use crate::methods::{check_compatibility, output_instruction, shows_options, GenerationMethod, MethodError};
use crate::survey::{Persona, PromptTemplate, Question, Questionnaire};
use crate::template::{substitute_placeholders, OUTPUT_INSTRUCTIONS, PERSONA, QUESTIONS};

/// `item` value of a battery unit.
pub const BATTERY_ITEM: &str = "battery";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresentationMode {
    Sequential,
    Battery,
    SingleItem,
}

impl PresentationMode {
    pub const ALL: [PresentationMode; 3] = [
        PresentationMode::Sequential,
        PresentationMode::Battery,
        PresentationMode::SingleItem,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PresentationMode::Sequential => "sequential",
            PresentationMode::Battery => "battery",
            PresentationMode::SingleItem => "single_item",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

impl fmt::Display for PresentationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitId {
    pub persona_id: String,
    pub variant_id: String,
    pub mode: PresentationMode,
    pub method: String,
    pub seed: u64,
    /// Question id, or [`BATTERY_ITEM`].
    pub item: String,
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}/s{}/{}",
            self.persona_id, self.variant_id, self.mode, self.method, self.seed, self.item
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceUnit {
    pub unit_id: UnitId,
    /// Turns this unit contributes. For dependent units the history of
    /// earlier units is prepended when the request is issued.
    pub initial_turns: Vec<ConversationTurn>,
    pub depends_on_previous: bool,
    pub expected_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub persona_id: String,
    pub mode: PresentationMode,
    pub units: Vec<InferenceUnit>,
}

impl PromptPlan {
    /// Wire message lists in issue order, assuming each reply is `replies[i]`
    /// (missing replies count as empty).
    pub fn requests_with_replies(&self, replies: &[String]) -> Vec<Vec<ConversationTurn>> {
        let mut out = Vec::with_capacity(self.units.len());
        let mut history: Vec<ConversationTurn> = Vec::new();
        for (i, unit) in self.units.iter().enumerate() {
            if !unit.depends_on_previous {
                history.clear();
            }
            let mut request = history.clone();
            request.extend(unit.initial_turns.iter().cloned());
            let reply = replies.get(i).cloned().unwrap_or_default();
            history = request.clone();
            history.push(ConversationTurn::assistant(reply));
            out.push(request);
        }
        out
    }

    pub fn simulated_requests(&self) -> Vec<Vec<ConversationTurn>> {
        self.requests_with_replies(&[])
    }

    /// Characters sent over all requests, with empty replies.
    pub fn total_input_chars(&self) -> usize {
        self.simulated_requests()
            .iter()
            .flatten()
            .map(|t| t.content.chars().count())
            .sum()
    }

    /// Canonical JSON (struct fields in declaration order, maps sorted).
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

/// Everything besides the content that identifies a plan's units.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanKey {
    pub variant_id: String,
    pub method_name: String,
    pub seed: u64,
}

impl PlanKey {
    pub fn new(variant_id: impl Into<String>, method_name: impl Into<String>, seed: u64) -> Self {
        Self {
            variant_id: variant_id.into(),
            method_name: method_name.into(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RenderError {
    #[error("template has no {{{{QUESTIONS}}}} placeholder")]
    MissingQuestionsSlot,
    #[error("unresolved placeholders in {which} template: {names:?}")]
    Unresolved { which: &'static str, names: Vec<String> },
    #[error("persona {0} renders to an empty system prompt")]
    EmptySystemPrompt(String),
    #[error("rendered user turn is empty")]
    EmptyUserTurn,
    #[error(transparent)]
    Method(#[from] MethodError),
}

/// One question as shown to the model: optional stem, the text, then one
/// `label: text` line per option when options are shown.
pub fn render_question(question: &Question, stem: Option<&str>, show_options: bool) -> String {
    let mut out = match stem {
        Some(s) if !s.is_empty() => format!("{s} {}", question.text),
        _ => question.text.clone(),
    };
    if show_options {
        for o in &question.options {
            out.push('\n');
            out.push_str(&o.label);
            out.push_str(": ");
            out.push_str(&o.text);
        }
    }
    out
}

fn render_system(template: &PromptTemplate, persona: &Persona) -> Result<String, RenderError> {
    let bindings = BTreeMap::from([(PERSONA.to_string(), persona.system_prompt.clone())]);
    let sub = substitute_placeholders(&template.system_template, &bindings);
    if !sub.is_complete() {
        return Err(RenderError::Unresolved {
            which: "system",
            names: sub.unresolved,
        });
    }
    if sub.text.trim().is_empty() {
        return Err(RenderError::EmptySystemPrompt(persona.id.clone()));
    }
    Ok(sub.text)
}

/// Fills the user template. Without an `{{OUTPUT_INSTRUCTIONS}}` slot the
/// instruction is appended after a blank line; without `{{QUESTIONS}}` the
/// questions are appended the same way, or the template is rejected if it
/// requires the slot.
pub fn render_user_turn(template: &PromptTemplate, questions: &str, instruction: &str) -> Result<String, RenderError> {
    if !template.has_questions_slot() && template.require_questions_placeholder {
        return Err(RenderError::MissingQuestionsSlot);
    }
    let bindings = BTreeMap::from([
        (QUESTIONS.to_string(), questions.to_string()),
        (OUTPUT_INSTRUCTIONS.to_string(), instruction.to_string()),
    ]);
    let sub = substitute_placeholders(&template.user_template, &bindings);
    if !sub.is_complete() {
        return Err(RenderError::Unresolved {
            which: "user",
            names: sub.unresolved,
        });
    }
    let mut text = sub.text;
    let mut append = |s: &str| {
        if s.is_empty() {
            return;
        }
        if !text.is_empty() {
            text.push_str("\n\n");
        }
        text.push_str(s);
    };
    if !template.has_questions_slot() {
        append(questions);
    }
    if !template.has_instruction_slot() {
        append(instruction);
    }
    if text.trim().is_empty() {
        return Err(RenderError::EmptyUserTurn);
    }
    Ok(text)
}

/// Renders a plan for any mode.
pub fn render(
    mode: PresentationMode,
    questionnaire: &Questionnaire,
    persona: &Persona,
    template: &PromptTemplate,
    method: &GenerationMethod,
    key: &PlanKey,
) -> Result<PromptPlan, RenderError> {
    let all: Vec<&Question> = questionnaire.questions.iter().collect();
    check_compatibility(method, mode, &all)?;
    let system = render_system(template, persona)?;
    let stem = template.question_stem.as_deref();
    let show = shows_options(method);
    let field = template.answer_field.as_str();
    let unit_id = |item: &str| UnitId {
        persona_id: persona.id.clone(),
        variant_id: key.variant_id.clone(),
        mode,
        method: key.method_name.clone(),
        seed: key.seed,
        item: item.to_string(),
    };

    let units = match mode {
        PresentationMode::Battery => {
            let block = all
                .iter()
                .map(|q| render_question(q, stem, show))
                .collect::<Vec<_>>()
                .join("\n");
            let instruction = output_instruction(method, mode, &all, field);
            let user = render_user_turn(template, &block, &instruction)?;
            vec![InferenceUnit {
                unit_id: unit_id(BATTERY_ITEM),
                initial_turns: vec![ConversationTurn::system(system), ConversationTurn::user(user)],
                depends_on_previous: false,
                expected_answers: all.iter().map(|q| q.id.clone()).collect(),
            }]
        }
        PresentationMode::SingleItem | PresentationMode::Sequential => {
            let sequential = mode == PresentationMode::Sequential;
            let mut units = Vec::with_capacity(all.len());
            for (i, q) in all.iter().enumerate() {
                let instruction = output_instruction(method, mode, &[q], field);
                let user = render_user_turn(template, &render_question(q, stem, show), &instruction)?;
                let first_of_conversation = !sequential || i == 0;
                let mut turns = Vec::with_capacity(2);
                if first_of_conversation {
                    turns.push(ConversationTurn::system(system.clone()));
                }
                turns.push(ConversationTurn::user(user));
                units.push(InferenceUnit {
                    unit_id: unit_id(&q.id),
                    initial_turns: turns,
                    depends_on_previous: !first_of_conversation,
                    expected_answers: vec![q.id.clone()],
                });
            }
            units
        }
    };
    Ok(PromptPlan {
        persona_id: persona.id.clone(),
        mode,
        units,
    })
}

pub fn render_single_item(
    q: &Questionnaire,
    p: &Persona,
    t: &PromptTemplate,
    m: &GenerationMethod,
    key: &PlanKey,
) -> Result<PromptPlan, RenderError> {
    render(PresentationMode::SingleItem, q, p, t, m, key)
}

pub fn render_sequential(
    q: &Questionnaire,
    p: &Persona,
    t: &PromptTemplate,
    m: &GenerationMethod,
    key: &PlanKey,
) -> Result<PromptPlan, RenderError> {
    render(PresentationMode::Sequential, q, p, t, m, key)
}

pub fn render_battery(
    q: &Questionnaire,
    p: &Persona,
    t: &PromptTemplate,
    m: &GenerationMethod,
    key: &PlanKey,
) -> Result<PromptPlan, RenderError> {
    render(PresentationMode::Battery, q, p, t, m, key)
}

/// Number of system turns in a request; used by invariant checks.
pub fn system_turns(messages: &[ConversationTurn]) -> usize {
    messages.iter().filter(|m| m.role == Role::System).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::methods::MethodKind;

    fn instrument(n: usize) -> Questionnaire {
        let qs = (0..n)
            .map(|i| Question::numeric(format!("q{i}"), format!("Group {i}?"), 0, 100))
            .collect();
        Questionnaire::new("therm", qs).unwrap()
    }

    fn persona() -> Persona {
        Persona {
            id: "p1".into(),
            system_prompt: "You are a voter.".into(),
            attributes: Default::default(),
        }
    }

    fn template() -> PromptTemplate {
        PromptTemplate::new("Rate the group.\n\n{{OUTPUT_INSTRUCTIONS}}\n\n{{QUESTIONS}}").with_answer_field("temperature")
    }

    fn method() -> GenerationMethod {
        GenerationMethod::new(MethodKind::RestrictedChoice).json()
    }

    fn key() -> PlanKey {
        PlanKey::new("therm", method().name(), 7)
    }

    #[test]
    fn sequential_request_sizes() {
        let plan = render_sequential(&instrument(16), &persona(), &template(), &method(), &key()).unwrap();
        let reqs = plan.simulated_requests();
        for (i, r) in reqs.iter().enumerate() {
            assert_eq!(r.len(), 2 + 2 * i);
            assert_eq!(system_turns(r), 1);
        }
        assert!(!plan.units[0].depends_on_previous);
        assert!(plan.units[1..].iter().all(|u| u.depends_on_previous));
    }

    #[test]
    fn battery_single_unit_and_joined_questions() {
        let plan = render_battery(&instrument(3), &persona(), &template(), &method(), &key()).unwrap();
        assert_eq!(plan.units.len(), 1);
        let user = &plan.units[0].initial_turns[1].content;
        assert!(user.ends_with("Group 0?\nGroup 1?\nGroup 2?"), "{user}");
        assert_eq!(plan.units[0].expected_answers, vec!["q0", "q1", "q2"]);
        assert!(user.contains("\"temperature_Group 1?\": <temperature_Group 1?>"));
    }

    #[test]
    fn one_question_collapses() {
        let q = instrument(1);
        let single = render_single_item(&q, &persona(), &template(), &method(), &key()).unwrap();
        let seq = render_sequential(&q, &persona(), &template(), &method(), &key()).unwrap();
        assert_eq!(single.simulated_requests(), seq.simulated_requests());
    }

    #[test]
    fn size_ordering() {
        let q = instrument(16);
        let b = render_battery(&q, &persona(), &template(), &method(), &key()).unwrap();
        let s = render_single_item(&q, &persona(), &template(), &method(), &key()).unwrap();
        let seq = render_sequential(&q, &persona(), &template(), &method(), &key()).unwrap();
        assert!(b.total_input_chars() < s.total_input_chars());
        assert!(s.total_input_chars() < seq.total_input_chars());
    }

    #[test]
    fn missing_questions_slot() {
        let t = PromptTemplate::new("No slot here.");
        assert_eq!(
            render_single_item(&instrument(2), &persona(), &t, &method(), &key()).unwrap_err(),
            RenderError::MissingQuestionsSlot
        );
        let mut lenient = t.clone();
        lenient.require_questions_placeholder = false;
        let plan = render_single_item(&instrument(2), &persona(), &lenient, &method(), &key()).unwrap();
        assert!(plan.units[1].initial_turns[1].content.starts_with("No slot here.\n\nGroup 1?"));
    }

    #[test]
    fn unknown_placeholder_rejected() {
        let t = PromptTemplate::new("{{QUESTIONS}} {{MOOD}}");
        assert!(matches!(
            render_battery(&instrument(2), &persona(), &t, &method(), &key()),
            Err(RenderError::Unresolved { which: "user", .. })
        ));
    }

    #[test]
    fn battery_rejects_token_methods() {
        let m = GenerationMethod::new(MethodKind::FirstTokenProbabilities);
        assert!(matches!(
            render_battery(&instrument(2), &persona(), &template(), &m, &key()),
            Err(RenderError::Method(MethodError::IncompatibleMode { .. }))
        ));
    }

    #[test]
    fn stem_prefixes_question_text() {
        let t = template().with_question_stem("How do you feel towards");
        let plan = render_battery(&instrument(1), &persona(), &t, &method(), &key()).unwrap();
        let user = &plan.units[0].initial_turns[1].content;
        assert!(user.ends_with("How do you feel towards Group 0?"));
        assert!(user.contains("\"temperature_Group 0?\""));
    }
}
