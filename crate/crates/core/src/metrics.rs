//! Alignment between model answers and reference respondents.
//!
//! Individual alignment uses MAE and Pearson's r on point predictions.
//! Distributional alignment compares, per subpopulation and question, the
//! distribution of model answers with the distribution of reference answers:
//! W1 for ordinal and numeric questions, TVD for categorical ones.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distribution::{Distribution, DistributionError, Support};
use crate::parsers::{match_choice, AnswerValue};
use crate::survey::{Question, Questionnaire, ScaleKind};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("no values")]
    Empty,
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation needs at least two pairs")]
    TooFewPairs,
    #[error("correlation is undefined for a constant series")]
    ConstantSeries,
    #[error("distributions are not on the same support")]
    SupportMismatch,
    #[error("weights must be finite and non-negative")]
    InvalidWeight,
    #[error("total weight is zero")]
    ZeroWeight,
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("no parseable answers ({excluded} excluded)")]
    NoParseable { excluded: usize },
    #[error("no prediction matches a reference respondent and question")]
    EmptyJoin,
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("reading reference: {0}")]
    Csv(#[from] csv::Error),
    #[error("reference has no respondent_id column")]
    MissingIdColumn,
    #[error("duplicate respondent id {0:?}")]
    DuplicateRespondent(String),
    #[error("row {row}, question {question}: {message}")]
    BadValue {
        row: usize,
        question: String,
        message: String,
    },
}

pub fn mae(pairs: &[(f64, f64)]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(pairs.iter().map(|(p, t)| (p - t).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Sample Pearson correlation.
pub fn pearson(preds: &[f64], truths: &[f64]) -> Result<f64, MetricError> {
    if preds.len() != truths.len() {
        return Err(MetricError::LengthMismatch(preds.len(), truths.len()));
    }
    let n = preds.len();
    if n < 2 {
        return Err(MetricError::TooFewPairs);
    }
    let mp = preds.iter().sum::<f64>() / n as f64;
    let mt = truths.iter().sum::<f64>() / n as f64;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(truths) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp) * (p - mp);
        vt += (t - mt) * (t - mt);
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(MetricError::ConstantSeries);
    }
    Ok((cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0))
}

/// W1 between two distributions over the same ordered `support`:
/// `Σ |CDF_p(x_i) − CDF_q(x_i)| · (x_{i+1} − x_i)`.
pub fn wasserstein1(p: &Distribution, q: &Distribution, support: &[f64]) -> Result<f64, MetricError> {
    if p.len() != support.len() || q.len() != support.len() {
        return Err(MetricError::SupportMismatch);
    }
    if support.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(MetricError::SupportMismatch);
    }
    if let (Support::Points(a), Support::Points(b)) = (p.support(), q.support()) {
        if a != b || a.as_slice() != support {
            return Err(MetricError::SupportMismatch);
        }
    }
    let (pm, qm) = (p.mass(), q.mass());
    let (mut cp, mut cq, mut total) = (0.0, 0.0, 0.0);
    for i in 0..support.len().saturating_sub(1) {
        cp += pm[i];
        cq += qm[i];
        total += (cp - cq).abs() * (support[i + 1] - support[i]);
    }
    Ok(total)
}

/// Masses of two point distributions on the union of their supports.
pub fn align_points(p: &Distribution, q: &Distribution) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), MetricError> {
    let (Support::Points(a), Support::Points(b)) = (p.support(), q.support()) else {
        return Err(MetricError::SupportMismatch);
    };
    let mut support: Vec<f64> = a.iter().chain(b).copied().collect();
    support.sort_by(f64::total_cmp);
    support.dedup();
    let spread = |pts: &[f64], mass: &[f64]| {
        let mut out = vec![0.0; support.len()];
        for (x, m) in pts.iter().zip(mass) {
            let i = support.binary_search_by(|s| s.total_cmp(x)).expect("point in union");
            out[i] += m;
        }
        out
    };
    let pm = spread(a, p.mass());
    let qm = spread(b, q.mass());
    Ok((support, pm, qm))
}

/// W1 between two point distributions whose supports may differ.
pub fn wasserstein1_points(p: &Distribution, q: &Distribution) -> Result<f64, MetricError> {
    let (support, pm, qm) = align_points(p, q)?;
    let p = Distribution::points(support.clone(), pm)?;
    let q = Distribution::points(support.clone(), qm)?;
    wasserstein1(&p, &q, &support)
}

/// Total variation distance, `½ Σ |p_i − q_i|`.
pub fn tvd(p: &Distribution, q: &Distribution) -> Result<f64, MetricError> {
    if p.support() != q.support() {
        return Err(MetricError::SupportMismatch);
    }
    let l1: f64 = p.mass().iter().zip(q.mass()).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * l1).min(1.0))
}

pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<f64, MetricError> {
    if values.len() != weights.len() {
        return Err(MetricError::LengthMismatch(values.len(), weights.len()));
    }
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(MetricError::InvalidWeight);
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(MetricError::ZeroWeight);
    }
    Ok(values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total)
}

/// Option masses of one answer (each answer has total weight 1).
fn option_masses(value: &AnswerValue, question: &Question) -> Option<Vec<f64>> {
    let n = question.options.len();
    match value {
        AnswerValue::Choice { label } => {
            let i = question.options.iter().position(|o| &o.label == label)?;
            let mut m = vec![0.0; n];
            m[i] = 1.0;
            Some(m)
        }
        AnswerValue::Distribution { distribution } => {
            let m: Vec<f64> = question
                .options
                .iter()
                .map(|o| distribution.mass_of(&o.label).unwrap_or(0.0))
                .collect();
            (m.iter().sum::<f64>() > 0.0).then_some(m)
        }
        _ => None,
    }
}

/// Weighted points of one answer on the question's numeric axis. Refusal
/// mass is dropped and the rest renormalized.
fn answer_points(value: &AnswerValue, question: &Question) -> Option<Vec<(f64, f64)>> {
    if let AnswerValue::Number { value } = value {
        return value.is_finite().then(|| vec![(*value, 1.0)]);
    }
    let masses = option_masses(value, question)?;
    let pts: Vec<(f64, f64)> = question
        .options
        .iter()
        .zip(masses)
        .filter(|(o, m)| !o.is_refusal && *m > 0.0)
        .filter_map(|(o, m)| o.ordinal_value.map(|v| (v as f64, m)))
        .collect();
    let total: f64 = pts.iter().map(|(_, m)| m).sum();
    (total > 0.0).then(|| pts.into_iter().map(|(x, m)| (x, m / total)).collect())
}

/// Expected position of an answer, used for MAE and Pearson.
pub fn point_prediction(value: &AnswerValue, question: &Question) -> Option<f64> {
    if question.scale_kind == ScaleKind::Categorical {
        return None;
    }
    answer_points(value, question).map(|pts| pts.iter().map(|(x, m)| x * m).sum())
}

/// Normalized histogram of answers: over option labels for questions with
/// options, over observed values otherwise. Unparseable answers are
/// skipped and counted.
pub fn empirical_distribution(values: &[AnswerValue], question: &Question) -> Result<(Distribution, usize), MetricError> {
    let mut excluded = 0;
    if question.has_options() {
        let mut mass = vec![0.0; question.options.len()];
        let mut used = 0;
        for v in values {
            match option_masses(v, question) {
                Some(m) => {
                    used += 1;
                    let total: f64 = m.iter().sum();
                    for (acc, x) in mass.iter_mut().zip(m) {
                        *acc += x / total;
                    }
                }
                None => excluded += 1,
            }
        }
        if used == 0 {
            return Err(MetricError::NoParseable { excluded });
        }
        let labels = question.options.iter().map(|o| o.label.clone()).collect();
        return Ok((Distribution::labels(labels, mass)?, excluded));
    }
    let mut hist: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for v in values {
        match answer_points(v, question) {
            Some(pts) => {
                for (x, m) in pts {
                    hist.entry(order_key(x)).or_insert((x, 0.0)).1 += m;
                }
            }
            None => excluded += 1,
        }
    }
    if hist.is_empty() {
        return Err(MetricError::NoParseable { excluded });
    }
    let (pts, mass): (Vec<f64>, Vec<f64>) = hist.into_values().unzip();
    Ok((Distribution::points(pts, mass)?, excluded))
}

/// Monotone map from finite f64 to u64 so values sort numerically.
fn order_key(x: f64) -> u64 {
    let bits = x.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

/// Distribution over ordinal positions (refusals excluded) or observed
/// numeric values.
fn positional_distribution(values: &[AnswerValue], question: &Question) -> Option<Distribution> {
    let mut hist: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for v in values {
        if let Some(pts) = answer_points(v, question) {
            for (x, m) in pts {
                hist.entry(order_key(x)).or_insert((x, 0.0)).1 += m;
            }
        }
    }
    let (pts, mass): (Vec<f64>, Vec<f64>) = hist.into_values().unzip();
    Distribution::points(pts, mass).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Respondent {
    pub id: String,
    pub attributes: BTreeMap<String, String>,
    pub answers: BTreeMap<String, AnswerValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub respondents: Vec<Respondent>,
}

pub const RESPONDENT_ID: &str = "respondent_id";

impl ReferenceSet {
    /// Wide CSV: `respondent_id`, then any attribute columns, then one
    /// column per question id. Empty cells are missing answers. Option
    /// questions accept a label or the option text.
    pub fn from_csv<R: Read>(reader: R, questionnaire: &Questionnaire) -> Result<Self, ReferenceError> {
        let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let id_col = headers
            .iter()
            .position(|h| h == RESPONDENT_ID)
            .ok_or(ReferenceError::MissingIdColumn)?;
        let mut seen = BTreeSet::new();
        let mut respondents = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let id = record[id_col].trim().to_string();
            if !seen.insert(id.clone()) {
                return Err(ReferenceError::DuplicateRespondent(id));
            }
            let mut attributes = BTreeMap::new();
            let mut answers = BTreeMap::new();
            for (col, name) in headers.iter().enumerate() {
                if col == id_col {
                    continue;
                }
                let cell = record[col].trim();
                match questionnaire.question(name) {
                    Some(q) => {
                        if cell.is_empty() {
                            continue;
                        }
                        let value = reference_value(cell, q).map_err(|message| ReferenceError::BadValue {
                            row: row + 2,
                            question: name.to_string(),
                            message,
                        })?;
                        answers.insert(name.to_string(), value);
                    }
                    None => {
                        attributes.insert(name.to_string(), cell.to_string());
                    }
                }
            }
            respondents.push(Respondent { id, attributes, answers });
        }
        Ok(Self { respondents })
    }

    pub fn respondent(&self, id: &str) -> Option<&Respondent> {
        self.respondents.iter().find(|r| r.id == id)
    }
}

fn reference_value(cell: &str, q: &Question) -> Result<AnswerValue, String> {
    if q.has_options() {
        match match_choice(cell, q) {
            v @ AnswerValue::Choice { .. } => Ok(v),
            _ => Err(format!("{cell:?} matches no option")),
        }
    } else {
        let v: f64 = cell.parse().map_err(|_| format!("{cell:?} is not a number"))?;
        match q.range {
            Some(r) if v < r.min as f64 || v > r.max as f64 => Err(format!("{v} outside {}..={}", r.min, r.max)),
            _ => Ok(AnswerValue::Number { value: v }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subpopulation {
    /// Attribute name to value, in the requested attribute order.
    pub key: Vec<(String, String)>,
    pub members: Vec<String>,
}

impl Subpopulation {
    pub fn weight(&self) -> usize {
        self.members.len()
    }

    /// `race=Hispanic|gender=Male`.
    pub fn label(&self) -> String {
        if self.key.is_empty() {
            return "all".into();
        }
        self.key.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join("|")
    }
}

/// One subpopulation per occupied combination of the given attributes.
/// With no attributes the whole set is one subpopulation.
pub fn stratify(reference: &ReferenceSet, attributes: &[String]) -> Result<Vec<Subpopulation>, MetricError> {
    for a in attributes {
        if !reference.respondents.iter().any(|r| r.attributes.contains_key(a)) {
            return Err(MetricError::UnknownAttribute(a.clone()));
        }
    }
    let mut groups: BTreeMap<Vec<String>, Vec<String>> = BTreeMap::new();
    for r in &reference.respondents {
        let values = attributes
            .iter()
            .map(|a| r.attributes.get(a).cloned().unwrap_or_default())
            .collect();
        groups.entry(values).or_default().push(r.id.clone());
    }
    Ok(groups
        .into_iter()
        .map(|(values, members)| Subpopulation {
            key: attributes.iter().cloned().zip(values).collect(),
            members,
        })
        .collect())
}

/// Identifies one experimental condition in a report.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub variant: String,
    pub mode: String,
    pub method: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub cell: Cell,
    /// Joins with the reference respondent id.
    pub persona_id: String,
    pub question_id: String,
    pub value: AnswerValue,
}

/// Re-expresses an answer given on a perturbed question in the base
/// question's labels, matching options by text. Returns `None` when a
/// chosen option (or any option with mass) has no counterpart in the base,
/// as happens after a scale-parity change.
pub fn map_to_base(value: &AnswerValue, variant: &Question, base: &Question) -> Option<AnswerValue> {
    let to_base = |label: &str| -> Option<String> {
        let text = &variant.option_by_label(label)?.text;
        base.options.iter().find(|o| &o.text == text).map(|o| o.label.clone())
    };
    match value {
        AnswerValue::Choice { label } => to_base(label).map(|label| AnswerValue::Choice { label }),
        AnswerValue::Distribution { distribution } => {
            let mut mass = vec![0.0; base.options.len()];
            for o in &variant.options {
                let m = distribution.mass_of(&o.label).unwrap_or(0.0);
                if m == 0.0 {
                    continue;
                }
                let label = to_base(&o.label)?;
                let i = base.options.iter().position(|b| b.label == label)?;
                mass[i] += m;
            }
            let labels = base.options.iter().map(|o| o.label.clone()).collect();
            Distribution::labels(labels, mass)
                .ok()
                .map(|distribution| AnswerValue::Distribution { distribution })
        }
        other => Some(other.clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub question_id: String,
    pub pairs: usize,
    pub mae: Option<f64>,
    pub pearson: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    W1,
    Tvd,
}

impl DistanceKind {
    pub fn for_question(q: &Question) -> Self {
        match q.scale_kind {
            ScaleKind::Categorical => DistanceKind::Tvd,
            _ => DistanceKind::W1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DistanceKind::W1 => "w1",
            DistanceKind::Tvd => "tvd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubpopulationScore {
    pub subpopulation: String,
    pub question_id: String,
    pub metric: DistanceKind,
    /// Reference member count.
    pub weight: usize,
    pub predictions: usize,
    /// `None` when either side has no usable answers.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: Cell,
    pub predictions: usize,
    pub unparseable: usize,
    pub unparseable_rate: f64,
    pub mae: Option<f64>,
    pub pearson: Option<f64>,
    pub per_question: Vec<QuestionScore>,
    pub distributional: Vec<SubpopulationScore>,
    pub weighted_w1: Option<f64>,
    pub weighted_tvd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub stratify_by: Vec<String>,
    pub subpopulations: usize,
    pub cells: Vec<CellReport>,
}

fn weighted(scores: &[&SubpopulationScore]) -> Option<f64> {
    let (v, w): (Vec<f64>, Vec<f64>) = scores
        .iter()
        .filter_map(|s| s.value.map(|v| (v, s.weight as f64)))
        .unzip();
    weighted_mean(&v, &w).ok()
}

/// Scores predictions per cell. Predictions are expected on the base
/// questionnaire (labels of the unperturbed instrument).
pub fn alignment_report(
    predictions: &[Prediction],
    reference: &ReferenceSet,
    questionnaire: &Questionnaire,
    stratify_by: &[String],
) -> Result<AlignmentReport, MetricError> {
    let subpops = stratify(reference, stratify_by)?;
    let index: BTreeMap<&str, &Respondent> = reference.respondents.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut by_cell: BTreeMap<&Cell, Vec<&Prediction>> = BTreeMap::new();
    let mut joined = 0;
    for p in predictions {
        if index.contains_key(p.persona_id.as_str()) && questionnaire.question(&p.question_id).is_some() {
            joined += 1;
        }
        by_cell.entry(&p.cell).or_default().push(p);
    }
    if joined == 0 {
        return Err(MetricError::EmptyJoin);
    }

    let mut cells = Vec::with_capacity(by_cell.len());
    for (cell, preds) in by_cell {
        let preds: Vec<&Prediction> = preds
            .into_iter()
            .filter(|p| index.contains_key(p.persona_id.as_str()) && questionnaire.question(&p.question_id).is_some())
            .collect();
        let unparseable = preds.iter().filter(|p| !p.value.is_parsed()).count();

        let mut all_pairs = Vec::new();
        let mut per_question = Vec::new();
        for q in &questionnaire.questions {
            let pairs: Vec<(f64, f64)> = preds
                .iter()
                .filter(|p| p.question_id == q.id)
                .filter_map(|p| {
                    let truth = index[p.persona_id.as_str()].answers.get(&q.id)?;
                    Some((point_prediction(&p.value, q)?, point_prediction(truth, q)?))
                })
                .collect();
            let (ps, ts): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            per_question.push(QuestionScore {
                question_id: q.id.clone(),
                pairs: pairs.len(),
                mae: mae(&pairs).ok(),
                pearson: pearson(&ps, &ts).ok(),
            });
            all_pairs.extend(pairs);
        }
        let (ps, ts): (Vec<f64>, Vec<f64>) = all_pairs.iter().copied().unzip();

        let mut distributional = Vec::with_capacity(subpops.len() * questionnaire.questions.len());
        for sp in &subpops {
            let members: BTreeSet<&str> = sp.members.iter().map(String::as_str).collect();
            for q in &questionnaire.questions {
                let predicted: Vec<AnswerValue> = preds
                    .iter()
                    .filter(|p| p.question_id == q.id && members.contains(p.persona_id.as_str()))
                    .map(|p| p.value.clone())
                    .collect();
                let truth: Vec<AnswerValue> = sp
                    .members
                    .iter()
                    .filter_map(|m| index[m.as_str()].answers.get(&q.id).cloned())
                    .collect();
                let metric = DistanceKind::for_question(q);
                let value = match metric {
                    DistanceKind::Tvd => match (empirical_distribution(&predicted, q), empirical_distribution(&truth, q)) {
                        (Ok((a, _)), Ok((b, _))) => tvd(&a, &b).ok(),
                        _ => None,
                    },
                    DistanceKind::W1 => match (positional_distribution(&predicted, q), positional_distribution(&truth, q)) {
                        (Some(a), Some(b)) => wasserstein1_points(&a, &b).ok(),
                        _ => None,
                    },
                };
                distributional.push(SubpopulationScore {
                    subpopulation: sp.label(),
                    question_id: q.id.clone(),
                    metric,
                    weight: sp.weight(),
                    predictions: predicted.len(),
                    value,
                });
            }
        }
        let of_kind = |k: DistanceKind| -> Vec<&SubpopulationScore> {
            distributional.iter().filter(|s| s.metric == k).collect()
        };
        let weighted_w1 = weighted(&of_kind(DistanceKind::W1));
        let weighted_tvd = weighted(&of_kind(DistanceKind::Tvd));
        cells.push(CellReport {
            cell: cell.clone(),
            predictions: preds.len(),
            unparseable,
            unparseable_rate: if preds.is_empty() {
                0.0
            } else {
                unparseable as f64 / preds.len() as f64
            },
            mae: mae(&all_pairs).ok(),
            pearson: pearson(&ps, &ts).ok(),
            per_question,
            distributional,
            weighted_w1,
            weighted_tvd,
        });
    }
    Ok(AlignmentReport {
        stratify_by: stratify_by.to_vec(),
        subpopulations: subpops.len(),
        cells,
    })
}

pub const REPORT_CSV_COLUMNS: [&str; 10] = [
    "variant",
    "mode",
    "method",
    "seed",
    "section",
    "question_id",
    "subpopulation",
    "metric",
    "value",
    "weight",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AlignmentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Long format: one row per (cell, metric, question, subpopulation).
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_CSV_COLUMNS).expect("in-memory write");
        for c in &self.cells {
            let seed = c.cell.seed.to_string();
            let mut row = |section: &str, qid: &str, sub: &str, metric: &str, value: String, weight: String| {
                w.write_record([
                    c.cell.variant.as_str(),
                    c.cell.mode.as_str(),
                    c.cell.method.as_str(),
                    seed.as_str(),
                    section,
                    qid,
                    sub,
                    metric,
                    value.as_str(),
                    weight.as_str(),
                ])
                .expect("in-memory write");
            };
            row("overall", "", "", "mae", fmt_opt(c.mae), String::new());
            row("overall", "", "", "pearson", fmt_opt(c.pearson), String::new());
            row("overall", "", "", "unparseable_rate", c.unparseable_rate.to_string(), c.predictions.to_string());
            row("overall", "", "", "weighted_w1", fmt_opt(c.weighted_w1), String::new());
            row("overall", "", "", "weighted_tvd", fmt_opt(c.weighted_tvd), String::new());
            for q in &c.per_question {
                row("question", &q.question_id, "", "mae", fmt_opt(q.mae), q.pairs.to_string());
                row("question", &q.question_id, "", "pearson", fmt_opt(q.pearson), q.pairs.to_string());
            }
            for s in &c.distributional {
                row(
                    "subpopulation",
                    &s.question_id,
                    &s.subpopulation,
                    s.metric.as_str(),
                    fmt_opt(s.value),
                    s.weight.to_string(),
                );
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}
