//! Browser demo over the core library. Every operation takes and returns
//! JSON so the page needs no generated bindings beyond three functions.
//!
//! The `*_json` functions are plain Rust and carry the logic; the exported
//! wrappers only convert errors into JavaScript exceptions.

use serde::{Deserialize, Serialize};
use surveyor_core::chat::ConversationTurn;
use surveyor_core::distribution::Distribution;
use surveyor_core::methods::GenerationMethod;
use surveyor_core::metrics::{tvd, wasserstein1};
use surveyor_core::perturbation::{apply_pipeline, PerturbationContext, PerturbationSpec};
use surveyor_core::presentation::{render, PlanKey, PresentationMode};
use surveyor_core::survey::{read_questionnaire, Persona, PromptTemplate, Question, Questionnaire, SourceFormat};
use thiserror::Error;
use wasm_bindgen::prelude::*;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("bad input: {0}")]
    Input(#[from] serde_json::Error),
    #[error("questionnaire: {0}")]
    Questionnaire(#[from] surveyor_core::survey::LoadError),
    #[error("perturbation: {0}")]
    Perturb(#[from] surveyor_core::perturbation::PerturbError),
    #[error("{0} needs a model and is not available in the demo")]
    NeedsProvider(&'static str),
    #[error("distribution: {0}")]
    Distribution(#[from] surveyor_core::distribution::DistributionError),
    #[error("metric: {0}")]
    Metric(#[from] surveyor_core::metrics::MetricError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl From<Format> for SourceFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => SourceFormat::Csv,
            Format::Json => SourceFormat::Json,
        }
    }
}

fn questionnaire(content: &str, format: Format) -> Result<Questionnaire, DemoError> {
    Ok(read_questionnaire(content.as_bytes(), format.into(), "demo")?)
}

#[derive(Debug, Deserialize)]
pub struct PreviewInput {
    pub questionnaire: String,
    #[serde(default)]
    pub format: Format,
    pub persona: Persona,
    pub template: PromptTemplate,
    pub method: GenerationMethod,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct ModePreview {
    pub mode: PresentationMode,
    pub calls: usize,
    pub input_chars: usize,
    /// Message lists in issue order; sequential replies are left empty.
    pub requests: Vec<Vec<ConversationTurn>>,
}

#[derive(Debug, Serialize)]
pub struct Skipped {
    pub mode: PresentationMode,
    pub reason: String,
}

#[derive(Debug, Serialize)]
pub struct PreviewOutput {
    pub modes: Vec<ModePreview>,
    pub skipped: Vec<Skipped>,
}

/// Renders the questionnaire in every presentation mode.
pub fn preview_modes(input: &PreviewInput) -> Result<PreviewOutput, DemoError> {
    let q = questionnaire(&input.questionnaire, input.format)?;
    let key = PlanKey::new(q.id.clone(), input.method.name(), input.seed);
    let mut out = PreviewOutput {
        modes: Vec::new(),
        skipped: Vec::new(),
    };
    for mode in PresentationMode::ALL {
        match render(mode, &q, &input.persona, &input.template, &input.method, &key) {
            Ok(plan) => out.modes.push(ModePreview {
                mode,
                calls: plan.units.len(),
                input_chars: plan.total_input_chars(),
                requests: plan.simulated_requests(),
            }),
            Err(e) => out.skipped.push(Skipped {
                mode,
                reason: e.to_string(),
            }),
        }
    }
    Ok(out)
}

pub fn preview_modes_json(input: &str) -> Result<String, DemoError> {
    let input: PreviewInput = serde_json::from_str(input)?;
    Ok(serde_json::to_string(&preview_modes(&input)?)?)
}

#[derive(Debug, Deserialize)]
pub struct PerturbInput {
    pub questionnaire: String,
    #[serde(default)]
    pub format: Format,
    pub perturbations: Vec<PerturbationSpec>,
}

#[derive(Debug, PartialEq, Serialize)]
pub struct QuestionDiff {
    pub question_id: String,
    pub before: String,
    pub after: String,
}

#[derive(Debug, Serialize)]
pub struct PerturbOutput {
    pub variant_id: String,
    pub questionnaire: Questionnaire,
    pub changed: Vec<QuestionDiff>,
}

fn describe(q: &Question) -> String {
    let mut s = q.text.clone();
    for o in &q.options {
        s.push_str(&format!("\n  {}: {}", o.label, o.text));
    }
    s
}

/// Applies a perturbation pipeline and reports which questions changed.
pub fn perturb(input: &PerturbInput) -> Result<PerturbOutput, DemoError> {
    if let Some(spec) = input.perturbations.iter().find(|s| s.op.needs_provider()) {
        return Err(DemoError::NeedsProvider(spec.op.kind()));
    }
    let base = questionnaire(&input.questionnaire, input.format)?;
    let variant = apply_pipeline(&base, &input.perturbations, &PerturbationContext::default(), None)?;
    let changed = variant
        .questionnaire
        .questions
        .iter()
        .filter_map(|after| {
            let before = base.question(&after.id)?;
            let (b, a) = (describe(before), describe(after));
            (b != a).then(|| QuestionDiff {
                question_id: after.id.clone(),
                before: b,
                after: a,
            })
        })
        .collect();
    Ok(PerturbOutput {
        variant_id: variant.id.to_string(),
        questionnaire: variant.questionnaire,
        changed,
    })
}

pub fn perturb_json(input: &str) -> Result<String, DemoError> {
    let input: PerturbInput = serde_json::from_str(input)?;
    Ok(serde_json::to_string(&perturb(&input)?)?)
}

/// Two unnormalized mass vectors over a shared ordered support. Without
/// `positions` the categories sit at 1, 2, ..., n.
#[derive(Debug, Deserialize)]
pub struct DistanceInput {
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    #[serde(default)]
    pub positions: Option<Vec<f64>>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct DistanceOutput {
    pub w1: f64,
    pub tvd: f64,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub cdf_p: Vec<f64>,
    pub cdf_q: Vec<f64>,
}

fn cumulative(mass: &[f64]) -> Vec<f64> {
    mass.iter()
        .scan(0.0, |acc, m| {
            *acc += m;
            Some(*acc)
        })
        .collect()
}

pub fn distances(input: &DistanceInput) -> Result<DistanceOutput, DemoError> {
    let n = input.p.len();
    if input.q.len() != n {
        return Err(DemoError::Invalid(format!("p has {n} masses, q has {}", input.q.len())));
    }
    let positions = input.positions.clone().unwrap_or_else(|| (1..=n).map(|i| i as f64).collect());
    if positions.len() != n {
        return Err(DemoError::Invalid(format!("{} positions for {n} masses", positions.len())));
    }
    let labels = input
        .labels
        .clone()
        .unwrap_or_else(|| positions.iter().map(|x| x.to_string()).collect());
    let p = Distribution::points(positions.clone(), input.p.clone())?;
    let q = Distribution::points(positions.clone(), input.q.clone())?;
    let w1 = wasserstein1(&p, &q, &positions)?;
    let tv = tvd(
        &Distribution::labels(labels.clone(), input.p.clone())?,
        &Distribution::labels(labels, input.q.clone())?,
    )?;
    Ok(DistanceOutput {
        w1,
        tvd: tv,
        cdf_p: cumulative(p.mass()),
        cdf_q: cumulative(q.mass()),
        p: p.mass().to_vec(),
        q: q.mass().to_vec(),
    })
}

pub fn distances_json(input: &str) -> Result<String, DemoError> {
    let input: DistanceInput = serde_json::from_str(input)?;
    Ok(serde_json::to_string(&distances(&input)?)?)
}

fn js(e: DemoError) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen(js_name = previewModes)]
pub fn preview_modes_js(input: &str) -> Result<String, JsValue> {
    preview_modes_json(input).map_err(js)
}

#[wasm_bindgen(js_name = perturb)]
pub fn perturb_js(input: &str) -> Result<String, JsValue> {
    perturb_json(input).map_err(js)
}

#[wasm_bindgen(js_name = distances)]
pub fn distances_js(input: &str) -> Result<String, JsValue> {
    distances_json(input).map_err(js)
}
