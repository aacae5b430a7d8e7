//! Seeded, composable questionnaire perturbations.
//!
//! Every operator is a pure function of its input, its seed and the
//! bundled assets, except [`paraphrase`], which asks a model. Pipelines are
//! described by an ordered list of [`PerturbationSpec`]s and identified by a
//! [`VariantId`] that digests exactly that list.

mod options;
mod text;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chat::{CompletionProvider, ConversationTurn, ProviderError};
use crate::rng::{SeededRng, SplitMix64};
use crate::survey::{Question, Questionnaire, ScaleKind};
use crate::template::substitute_placeholders;

pub use options::{
    relabel, remove_refusal, reorder_questions, reverse_options, scale_parity, shuffle_options, LabelSchema,
    ReorderMode,
};
pub use text::{
    key_typo, keyboard_typo, letter_swap, swap_adjacent, synonym_replace, words, KeyboardLayout, Lexicon,
    DEFAULT_LEXICON, QWERTY_US_V1,
};

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("question {0} has no answer options")]
    NoOptions(String),
    #[error("no refusal option in question {0}")]
    NoRefusal(String),
    #[error("question {0} is not ordinal")]
    NotOrdinal(String),
    #[error("question {question} has {found} substantive options, need at least 2")]
    TooFewOptions { question: String, found: usize },
    #[error("question {0} has an even scale; middle_text is required")]
    MissingMiddleText(String),
    #[error("label {label} would be duplicated in question {question}")]
    LabelClash { question: String, label: String },
    #[error("label schema exhausted for question {question}: need {needed}, have {available}")]
    SchemaExhausted {
        question: String,
        needed: usize,
        available: usize,
    },
    #[error("{0} requires a seed")]
    MissingSeed(&'static str),
    #[error("text has no alphabetic characters")]
    NoAlphabetic,
    #[error("text has no word of length 2 or more")]
    NoSwappableWord,
    #[error("text has no characters on the keyboard layout")]
    NoKeyboardEligible,
    #[error("text has no words covered by the lexicon")]
    NoLexiconWord,
    #[error("replacement rate must be in (0, 1], got {0}")]
    InvalidRate(f64),
    #[error("asset error: {0}")]
    Asset(String),
    #[error("unknown question id {0}")]
    UnknownQuestion(String),
    #[error("{0} does not apply to any question")]
    NotApplicable(&'static str),
    #[error("paraphrase requires an inference provider")]
    ProviderMissing,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("paraphrase of question {0} is empty")]
    EmptyParaphrase(String),
    #[error("perturbation {index} ({kind}) failed: {source}")]
    Pipeline {
        index: usize,
        kind: &'static str,
        #[source]
        source: Box<PerturbError>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    ReverseOptions,
    ShuffleOptions {
        seed: u64,
    },
    RemoveRefusal,
    ScaleParity {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        middle_text: Option<String>,
    },
    Relabel {
        schema: LabelSchema,
    },
    ReorderQuestions {
        mode: ReorderMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    KeyTypo {
        seed: u64,
    },
    LetterSwap {
        seed: u64,
    },
    KeyboardTypo {
        seed: u64,
    },
    SynonymReplace {
        rate: f64,
        seed: u64,
    },
    Paraphrase {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        instruction: Option<String>,
    },
}

impl Perturbation {
    pub fn kind(&self) -> &'static str {
        match self {
            Perturbation::ReverseOptions => "reverse_options",
            Perturbation::ShuffleOptions { .. } => "shuffle_options",
            Perturbation::RemoveRefusal => "remove_refusal",
            Perturbation::ScaleParity { .. } => "scale_parity",
            Perturbation::Relabel { .. } => "relabel",
            Perturbation::ReorderQuestions { .. } => "reorder_questions",
            Perturbation::KeyTypo { .. } => "key_typo",
            Perturbation::LetterSwap { .. } => "letter_swap",
            Perturbation::KeyboardTypo { .. } => "keyboard_typo",
            Perturbation::SynonymReplace { .. } => "synonym_replace",
            Perturbation::Paraphrase { .. } => "paraphrase",
        }
    }

    pub fn needs_provider(&self) -> bool {
        matches!(self, Perturbation::Paraphrase { .. })
    }
}

/// One step of a perturbation pipeline. `questions` restricts the step to
/// the listed question ids; when absent the step applies to every question
/// it can apply to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    #[serde(flatten)]
    pub op: Perturbation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub questions: Option<Vec<String>>,
}

impl PerturbationSpec {
    pub fn new(op: Perturbation) -> Self {
        Self { op, questions: None }
    }

    pub fn on(mut self, question_ids: &[&str]) -> Self {
        self.questions = Some(question_ids.iter().map(|s| s.to_string()).collect());
        self
    }

    /// Hex SHA-256 of the spec's canonical JSON encoding.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("spec serializes");
        hex(&Sha256::digest(canonical))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Provenance of a questionnaire variant: the base questionnaire plus the
/// ordered digests of the applied specs.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantId {
    pub base: String,
    pub applied: Vec<String>,
}

impl VariantId {
    pub fn base(base: impl Into<String>) -> Self {
        Self {
            base: base.into(),
            applied: Vec::new(),
        }
    }

    pub fn for_specs(base: impl Into<String>, specs: &[PerturbationSpec]) -> Self {
        Self {
            base: base.into(),
            applied: specs.iter().map(PerturbationSpec::digest).collect(),
        }
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.applied.is_empty() {
            return f.write_str(&self.base);
        }
        let mut h = Sha256::new();
        for d in &self.applied {
            h.update(d.as_bytes());
            h.update(b"\n");
        }
        write!(f, "{}~{}", self.base, &hex(&h.finalize())[..12])
    }
}

/// Record of one paraphrase call, kept for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseRecord {
    pub question_id: String,
    pub request: Vec<ConversationTurn>,
    pub reply: String,
}

pub const DEFAULT_PARAPHRASE_INSTRUCTION: &str = "Rephrase the following survey question so that its meaning stays exactly the same. \
Respond with the rephrased question only.\n\n{{QUESTION}}";

/// Replaces the question text with a model paraphrase. Options are left
/// byte-identical.
pub fn paraphrase(
    question: &Question,
    provider: &dyn CompletionProvider,
    instruction: Option<&str>,
) -> Result<(Question, ParaphraseRecord), PerturbError> {
    let bindings = [("QUESTION".to_string(), question.text.clone())].into_iter().collect();
    let prompt = substitute_placeholders(instruction.unwrap_or(DEFAULT_PARAPHRASE_INSTRUCTION), &bindings).text;
    let request = vec![ConversationTurn::user(prompt)];
    let reply = provider.complete(&request)?;
    let text = reply.trim();
    if text.is_empty() {
        return Err(PerturbError::EmptyParaphrase(question.id.clone()));
    }
    let out = Question {
        text: text.to_string(),
        ..question.clone()
    };
    Ok((
        out,
        ParaphraseRecord {
            question_id: question.id.clone(),
            request,
            reply,
        },
    ))
}

/// Assets and switches shared by every step of a pipeline.
#[derive(Debug, Clone)]
pub struct PerturbationContext {
    pub layout: KeyboardLayout,
    pub lexicon: Lexicon,
    pub pin_refusal_last: bool,
}

impl Default for PerturbationContext {
    fn default() -> Self {
        Self {
            layout: KeyboardLayout::qwerty_us(),
            lexicon: Lexicon::default_english(),
            pin_refusal_last: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub id: VariantId,
    pub questionnaire: Questionnaire,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<ParaphraseRecord>,
}

/// Applies `specs` left to right. The first failing step aborts with its
/// index.
pub fn apply_pipeline(
    base: &Questionnaire,
    specs: &[PerturbationSpec],
    ctx: &PerturbationContext,
    provider: Option<&dyn CompletionProvider>,
) -> Result<Variant, PerturbError> {
    let mut current = base.clone();
    let mut provenance = Vec::new();
    for (index, spec) in specs.iter().enumerate() {
        current = apply_one(&current, spec, ctx, provider, &mut provenance).map_err(|e| PerturbError::Pipeline {
            index,
            kind: spec.op.kind(),
            source: Box::new(e),
        })?;
    }
    Ok(Variant {
        id: VariantId::for_specs(base.id.clone(), specs),
        questionnaire: current,
        provenance,
    })
}

fn target_indices(
    q: &Questionnaire,
    spec: &PerturbationSpec,
    applicable: impl Fn(&Question) -> bool,
) -> Result<(Vec<usize>, bool), PerturbError> {
    match &spec.questions {
        Some(ids) => {
            let mut out = Vec::new();
            for id in ids {
                let i = q
                    .questions
                    .iter()
                    .position(|x| &x.id == id)
                    .ok_or_else(|| PerturbError::UnknownQuestion(id.clone()))?;
                out.push(i);
            }
            Ok((out, true))
        }
        None => {
            let out: Vec<usize> = (0..q.questions.len()).filter(|&i| applicable(&q.questions[i])).collect();
            if out.is_empty() {
                return Err(PerturbError::NotApplicable(spec.op.kind()));
            }
            Ok((out, false))
        }
    }
}

fn apply_one(
    q: &Questionnaire,
    spec: &PerturbationSpec,
    ctx: &PerturbationContext,
    provider: Option<&dyn CompletionProvider>,
    provenance: &mut Vec<ParaphraseRecord>,
) -> Result<Questionnaire, PerturbError> {
    if let Perturbation::ReorderQuestions { mode, seed } = &spec.op {
        return reorder_questions(q, *mode, *seed);
    }

    let applicable: Box<dyn Fn(&Question) -> bool> = match &spec.op {
        Perturbation::ReverseOptions | Perturbation::ShuffleOptions { .. } | Perturbation::Relabel { .. } => {
            Box::new(Question::has_options)
        }
        Perturbation::RemoveRefusal => Box::new(|x: &Question| x.refusal_index().is_some()),
        Perturbation::ScaleParity { .. } => Box::new(|x: &Question| x.scale_kind == ScaleKind::Ordinal),
        _ => Box::new(|_: &Question| true),
    };
    let (targets, _explicit) = target_indices(q, spec, applicable)?;

    // One seed per targeted question, drawn in questionnaire order.
    let mut seeds = match &spec.op {
        Perturbation::ShuffleOptions { seed }
        | Perturbation::KeyTypo { seed }
        | Perturbation::LetterSwap { seed }
        | Perturbation::KeyboardTypo { seed }
        | Perturbation::SynonymReplace { seed, .. } => Some(SplitMix64::new(*seed)),
        _ => None,
    };
    let mut next_rng = || SeededRng::new(seeds.as_mut().map(SplitMix64::next_u64).unwrap_or(0));

    let mut out = q.clone();
    for i in targets {
        let question = &q.questions[i];
        let with_text = |text: String| Question {
            text,
            ..question.clone()
        };
        out.questions[i] = match &spec.op {
            Perturbation::ReverseOptions => reverse_options(question)?,
            Perturbation::ShuffleOptions { .. } => {
                options::shuffle_options_with(question, &mut next_rng(), ctx.pin_refusal_last)?
            }
            Perturbation::RemoveRefusal => remove_refusal(question)?,
            Perturbation::ScaleParity { middle_text } => scale_parity(question, middle_text.as_deref())?,
            Perturbation::Relabel { schema } => relabel(question, schema)?,
            Perturbation::KeyTypo { .. } => with_text(text::key_typo_with(&question.text, &mut next_rng())?),
            Perturbation::LetterSwap { .. } => with_text(text::letter_swap_with(&question.text, &mut next_rng())?),
            Perturbation::KeyboardTypo { .. } => {
                with_text(text::keyboard_typo_with(&question.text, &mut next_rng(), &ctx.layout)?)
            }
            Perturbation::SynonymReplace { rate, .. } => with_text(text::synonym_replace_with(
                &question.text,
                *rate,
                &ctx.lexicon,
                &mut next_rng(),
            )?),
            Perturbation::Paraphrase { instruction } => {
                let provider = provider.ok_or(PerturbError::ProviderMissing)?;
                let (para, record) = paraphrase(question, provider, instruction.as_deref())?;
                provenance.push(record);
                para
            }
            Perturbation::ReorderQuestions { .. } => unreachable!("handled above"),
        };
    }
    Ok(out)
}
