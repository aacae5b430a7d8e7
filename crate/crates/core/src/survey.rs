//! Questionnaire, persona and prompt-template data model, plus CSV/JSON
//! loaders.
//!
//! Questionnaire CSV layout, one row per answer option (numeric-range
//! questions occupy a single row):
//!
//! ```text
//! question_id,question_text,scale_kind,option_label,option_text,is_refusal,ordinal_value,range_min,range_max
//! ```
//!
//! Persona CSV: `id` and `system_prompt` are reserved, every other column is
//! an attribute.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::template::{self, fill_braced};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleKind {
    Categorical,
    Ordinal,
    NumericRange,
}

impl ScaleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleKind::Categorical => "categorical",
            ScaleKind::Ordinal => "ordinal",
            ScaleKind::NumericRange => "numeric_range",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "categorical" => Some(ScaleKind::Categorical),
            "ordinal" => Some(ScaleKind::Ordinal),
            "numeric_range" => Some(ScaleKind::NumericRange),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: String,
    pub text: String,
    #[serde(default)]
    pub is_refusal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal_value: Option<i64>,
}

impl AnswerOption {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            text: text.into(),
            is_refusal: false,
            ordinal_value: None,
        }
    }

    pub fn refusal(mut self) -> Self {
        self.is_refusal = true;
        self
    }

    pub fn with_ordinal(mut self, value: i64) -> Self {
        self.ordinal_value = Some(value);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumericRange {
    pub min: i64,
    pub max: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub scale_kind: ScaleKind,
    #[serde(default)]
    pub options: Vec<AnswerOption>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<NumericRange>,
}

impl Question {
    pub fn numeric(id: impl Into<String>, text: impl Into<String>, min: i64, max: i64) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            scale_kind: ScaleKind::NumericRange,
            options: Vec::new(),
            range: Some(NumericRange { min, max }),
        }
    }

    pub fn with_options(
        id: impl Into<String>,
        text: impl Into<String>,
        scale_kind: ScaleKind,
        options: Vec<AnswerOption>,
    ) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            scale_kind,
            options,
            range: None,
        }
    }

    pub fn has_options(&self) -> bool {
        self.scale_kind != ScaleKind::NumericRange
    }

    pub fn labels(&self) -> Vec<&str> {
        self.options.iter().map(|o| o.label.as_str()).collect()
    }

    pub fn option_by_label(&self, label: &str) -> Option<&AnswerOption> {
        self.options.iter().find(|o| o.label == label)
    }

    pub fn refusal_index(&self) -> Option<usize> {
        self.options.iter().position(|o| o.is_refusal)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Questionnaire {
    pub id: String,
    pub questions: Vec<Question>,
}

impl Questionnaire {
    /// Builds a questionnaire and rejects it if any invariant fails.
    pub fn new(id: impl Into<String>, questions: Vec<Question>) -> Result<Self, LoadError> {
        let q = Self {
            id: id.into(),
            questions,
        };
        let diagnostics = validate(&q);
        if diagnostics.is_empty() {
            Ok(q)
        } else {
            Err(LoadError::Invalid(diagnostics))
        }
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn question_ids(&self) -> Vec<&str> {
        self.questions.iter().map(|q| q.id.as_str()).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("questionnaire serializes")
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), LoadError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(QUESTIONNAIRE_COLUMNS)?;
        for q in &self.questions {
            let (min, max) = q
                .range
                .map(|r| (r.min.to_string(), r.max.to_string()))
                .unwrap_or_default();
            if q.options.is_empty() {
                w.write_record([
                    q.id.as_str(),
                    q.text.as_str(),
                    q.scale_kind.as_str(),
                    "",
                    "",
                    "",
                    "",
                    &min,
                    &max,
                ])?;
            }
            for o in &q.options {
                let ord = o.ordinal_value.map(|v| v.to_string()).unwrap_or_default();
                w.write_record([
                    q.id.as_str(),
                    q.text.as_str(),
                    q.scale_kind.as_str(),
                    o.label.as_str(),
                    o.text.as_str(),
                    if o.is_refusal { "true" } else { "false" },
                    &ord,
                    &min,
                    &max,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory csv write");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub id: String,
    pub system_prompt: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl Persona {
    /// Fills a single-brace persona description (`It is {year}. You are a
    /// {age} year-old, ...`) from `attributes`. Every placeholder must be
    /// bound.
    pub fn from_template(
        id: impl Into<String>,
        description: &str,
        attributes: BTreeMap<String, String>,
    ) -> Result<Self, PersonaError> {
        let filled = fill_braced(description, &attributes);
        if !filled.is_complete() {
            return Err(PersonaError::Unresolved(filled.unresolved));
        }
        if filled.text.trim().is_empty() {
            return Err(PersonaError::EmptySystemPrompt { row: 0 });
        }
        Ok(Self {
            id: id.into(),
            system_prompt: filled.text,
            attributes,
        })
    }
}

/// User/system prompt skeleton. The user template places questions at
/// `{{QUESTIONS}}` and the method's output instruction at
/// `{{OUTPUT_INSTRUCTIONS}}`; without that slot the instruction is appended
/// after the questions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(default = "default_system_template")]
    pub system_template: String,
    pub user_template: String,
    /// JSON answer key used by restricted methods (`"temperature"` for
    /// feeling thermometers).
    #[serde(default = "default_answer_field")]
    pub answer_field: String,
    /// Optional lead-in prepended to each question when rendered
    /// (`"How do you feel towards"`). Battery answer keys use the bare
    /// question text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_stem: Option<String>,
    /// When false, a template without `{{QUESTIONS}}` gets the questions
    /// appended instead of being rejected.
    #[serde(default = "default_true")]
    pub require_questions_placeholder: bool,
}

fn default_system_template() -> String {
    format!("{{{{{}}}}}", template::PERSONA)
}

fn default_answer_field() -> String {
    "answer".to_string()
}

fn default_true() -> bool {
    true
}

impl PromptTemplate {
    pub fn new(user_template: impl Into<String>) -> Self {
        Self {
            system_template: default_system_template(),
            user_template: user_template.into(),
            answer_field: default_answer_field(),
            question_stem: None,
            require_questions_placeholder: true,
        }
    }

    pub fn with_answer_field(mut self, field: impl Into<String>) -> Self {
        self.answer_field = field.into();
        self
    }

    pub fn with_question_stem(mut self, stem: impl Into<String>) -> Self {
        self.question_stem = Some(stem.into());
        self
    }

    pub fn has_questions_slot(&self) -> bool {
        template::placeholder_names(&self.user_template)
            .iter()
            .any(|n| n == template::QUESTIONS)
    }

    pub fn has_instruction_slot(&self) -> bool {
        template::placeholder_names(&self.user_template)
            .iter()
            .any(|n| n == template::OUTPUT_INSTRUCTIONS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    NoQuestions,
    DuplicateQuestionId,
    EmptyQuestionId,
    EmptyQuestionText,
    EmptyLabel,
    DuplicateLabel,
    DuplicateOptionText,
    MultipleRefusals,
    MissingOptions,
    OptionsOnNumericRange,
    MissingRange,
    InvalidRange,
    RangeOnNonNumeric,
    MissingOrdinalValue,
    NonMonotoneOrdinal,
}

impl Rule {
    pub fn describe(self) -> &'static str {
        match self {
            Rule::NoQuestions => "no questions",
            Rule::DuplicateQuestionId => "duplicate question id",
            Rule::EmptyQuestionId => "empty question id",
            Rule::EmptyQuestionText => "empty question text",
            Rule::EmptyLabel => "empty option label",
            Rule::DuplicateLabel => "duplicate option label",
            Rule::DuplicateOptionText => "duplicate option text",
            Rule::MultipleRefusals => "more than one refusal option",
            Rule::MissingOptions => "categorical or ordinal question without options",
            Rule::OptionsOnNumericRange => "numeric_range question with options",
            Rule::MissingRange => "numeric_range question without range",
            Rule::InvalidRange => "range min must be below max",
            Rule::RangeOnNonNumeric => "range on a question with options",
            Rule::MissingOrdinalValue => "ordinal option without ordinal value",
            Rule::NonMonotoneOrdinal => "non-monotone ordinal values",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub question_id: Option<String>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.question_id {
            Some(id) => write!(f, "{id}: {}", self.rule.describe())?,
            None => write!(f, "{}", self.rule.describe())?,
        }
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

/// Checks every questionnaire invariant and returns one diagnostic per
/// violation. An empty list means the instrument is valid.
pub fn validate(questionnaire: &Questionnaire) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |qid: Option<&str>, rule: Rule, detail: String| {
        out.push(Diagnostic {
            question_id: qid.map(str::to_string),
            rule,
            detail,
        })
    };

    if questionnaire.questions.is_empty() {
        push(None, Rule::NoQuestions, String::new());
    }
    let mut seen_ids = HashSet::new();
    for q in &questionnaire.questions {
        let qid = Some(q.id.as_str());
        if q.id.trim().is_empty() {
            push(qid, Rule::EmptyQuestionId, String::new());
        }
        if !seen_ids.insert(q.id.as_str()) {
            push(qid, Rule::DuplicateQuestionId, String::new());
        }
        if q.text.trim().is_empty() {
            push(qid, Rule::EmptyQuestionText, String::new());
        }

        match q.scale_kind {
            ScaleKind::NumericRange => {
                if !q.options.is_empty() {
                    push(qid, Rule::OptionsOnNumericRange, format!("{} options", q.options.len()));
                }
                match q.range {
                    None => push(qid, Rule::MissingRange, String::new()),
                    Some(r) if r.min >= r.max => {
                        push(qid, Rule::InvalidRange, format!("{}..{}", r.min, r.max))
                    }
                    Some(_) => {}
                }
            }
            ScaleKind::Categorical | ScaleKind::Ordinal => {
                if q.options.is_empty() {
                    push(qid, Rule::MissingOptions, String::new());
                }
                if q.range.is_some() {
                    push(qid, Rule::RangeOnNonNumeric, String::new());
                }
            }
        }

        let mut labels = HashSet::new();
        let mut texts = HashSet::new();
        for o in &q.options {
            if o.label.trim().is_empty() {
                push(qid, Rule::EmptyLabel, String::new());
            } else if !labels.insert(o.label.as_str()) {
                push(qid, Rule::DuplicateLabel, o.label.clone());
            }
            if !texts.insert(o.text.as_str()) {
                push(qid, Rule::DuplicateOptionText, o.text.clone());
            }
        }
        let refusals = q.options.iter().filter(|o| o.is_refusal).count();
        if refusals > 1 {
            push(qid, Rule::MultipleRefusals, format!("{refusals} refusal options"));
        }

        if q.scale_kind == ScaleKind::Ordinal {
            let substantive: Vec<&AnswerOption> =
                q.options.iter().filter(|o| !o.is_refusal).collect();
            if substantive.iter().any(|o| o.ordinal_value.is_none()) {
                push(qid, Rule::MissingOrdinalValue, String::new());
            } else {
                let values: Vec<i64> = substantive.iter().filter_map(|o| o.ordinal_value).collect();
                if values.windows(2).any(|w| w[0] >= w[1]) {
                    let seq: Vec<String> = values.iter().map(|v| v.to_string()).collect();
                    push(qid, Rule::NonMonotoneOrdinal, seq.join(","));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceFormat {
    Csv,
    Json,
}

impl SourceFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(SourceFormat::Csv),
            "json" => Some(SourceFormat::Json),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown file format for {0}")]
    UnknownFormat(String),
    #[error("malformed file at row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("no questions")]
    NoQuestions,
    #[error("invalid questionnaire: {}", join_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
}

fn join_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum PersonaError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown file format for {0}")]
    UnknownFormat(String),
    #[error("persona file has no system_prompt column")]
    MissingSystemPromptField,
    #[error("persona file is empty")]
    Empty,
    #[error("empty system_prompt in row {row}")]
    EmptySystemPrompt { row: usize },
    #[error("duplicate persona id {0}")]
    DuplicateId(String),
    #[error("unresolved persona placeholders: {}", .0.join(", "))]
    Unresolved(Vec<String>),
}

pub const QUESTIONNAIRE_COLUMNS: [&str; 9] = [
    "question_id",
    "question_text",
    "scale_kind",
    "option_label",
    "option_text",
    "is_refusal",
    "ordinal_value",
    "range_min",
    "range_max",
];

/// Loads a questionnaire file, inferring the format from its extension.
/// The questionnaire id is taken from the JSON document or, for CSV, the
/// file stem.
pub fn load_questionnaire(path: &Path) -> Result<Questionnaire, LoadError> {
    let format = SourceFormat::from_path(path)
        .ok_or_else(|| LoadError::UnknownFormat(path.display().to_string()))?;
    let id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("questionnaire")
        .to_string();
    let file = std::fs::File::open(path)?;
    read_questionnaire(file, format, &id)
}

pub fn read_questionnaire<R: Read>(
    reader: R,
    format: SourceFormat,
    id: &str,
) -> Result<Questionnaire, LoadError> {
    let mut reader = reader;
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(LoadError::NoQuestions);
    }
    let mut questionnaire = match format {
        SourceFormat::Json => serde_json::from_slice::<Questionnaire>(&bytes)?,
        SourceFormat::Csv => read_questionnaire_csv(bytes.as_slice(), id)?,
    };
    if questionnaire.questions.is_empty() {
        return Err(LoadError::NoQuestions);
    }
    fill_missing_ordinals(&mut questionnaire);
    let diagnostics = validate(&questionnaire);
    if !diagnostics.is_empty() {
        return Err(LoadError::Invalid(diagnostics));
    }
    Ok(questionnaire)
}

/// Ordinal questions whose options carry no values at all get 1..n by
/// position. Partially numbered scales are left for `validate` to reject.
fn fill_missing_ordinals(q: &mut Questionnaire) {
    for question in q.questions.iter_mut().filter(|q| q.scale_kind == ScaleKind::Ordinal) {
        if question.options.iter().all(|o| o.ordinal_value.is_none()) {
            let mut next = 1;
            for o in question.options.iter_mut().filter(|o| !o.is_refusal) {
                o.ordinal_value = Some(next);
                next += 1;
            }
        }
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" | "false" | "0" | "no" => Some(false),
        "true" | "1" | "yes" => Some(true),
        _ => None,
    }
}

fn parse_opt_int(s: &str, row: usize, column: &str) -> Result<Option<i64>, LoadError> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| LoadError::Malformed {
        row,
        message: format!("{column} is not an integer: {s:?}"),
    })
}

fn read_questionnaire_csv<R: Read>(reader: R, id: &str) -> Result<Questionnaire, LoadError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::None).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, LoadError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| LoadError::Malformed {
                row: 1,
                message: format!("missing column {name}"),
            })
    };
    let idx: Vec<usize> = QUESTIONNAIRE_COLUMNS
        .iter()
        .map(|c| col(c))
        .collect::<Result<_, _>>()?;

    let mut questions: Vec<Question> = Vec::new();
    let mut closed: HashSet<String> = HashSet::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let field = |k: usize| record.get(idx[k]).unwrap_or("");
        let qid = field(0).trim().to_string();
        if qid.is_empty() {
            return Err(LoadError::Malformed {
                row,
                message: "empty question_id".into(),
            });
        }
        let scale_kind = ScaleKind::parse(field(2)).ok_or_else(|| LoadError::Malformed {
            row,
            message: format!("unknown scale_kind {:?}", field(2)),
        })?;
        let min = parse_opt_int(field(7), row, "range_min")?;
        let max = parse_opt_int(field(8), row, "range_max")?;
        let range = match (min, max) {
            (Some(min), Some(max)) => Some(NumericRange { min, max }),
            (None, None) => None,
            _ => {
                return Err(LoadError::Malformed {
                    row,
                    message: "range_min and range_max must be given together".into(),
                })
            }
        };

        let continues = questions.last().is_some_and(|q| q.id == qid);
        if !continues {
            if let Some(prev) = questions.last() {
                closed.insert(prev.id.clone());
            }
            if closed.contains(&qid) || questions.iter().any(|q| q.id == qid) {
                return Err(LoadError::Invalid(vec![Diagnostic {
                    question_id: Some(qid),
                    rule: Rule::DuplicateQuestionId,
                    detail: format!("row {row}"),
                }]));
            }
            questions.push(Question {
                id: qid.clone(),
                text: field(1).to_string(),
                scale_kind,
                options: Vec::new(),
                range,
            });
        } else {
            let q = questions.last().expect("continuing question");
            if q.scale_kind != scale_kind {
                return Err(LoadError::Malformed {
                    row,
                    message: format!("scale_kind changes within question {qid}"),
                });
            }
            if !field(1).is_empty() && field(1) != q.text {
                return Err(LoadError::Malformed {
                    row,
                    message: format!("question_text changes within question {qid}"),
                });
            }
        }

        let label = field(3);
        let text = field(4);
        if !label.is_empty() || !text.is_empty() {
            let is_refusal = parse_bool(field(5)).ok_or_else(|| LoadError::Malformed {
                row,
                message: format!("is_refusal is not a boolean: {:?}", field(5)),
            })?;
            let ordinal_value = parse_opt_int(field(6), row, "ordinal_value")?;
            questions
                .last_mut()
                .expect("question exists")
                .options
                .push(AnswerOption {
                    label: label.to_string(),
                    text: text.to_string(),
                    is_refusal,
                    ordinal_value,
                });
        }
    }
    Ok(Questionnaire {
        id: id.to_string(),
        questions,
    })
}

/// Loads personas, inferring the format from the file extension.
pub fn load_personas(path: &Path) -> Result<Vec<Persona>, PersonaError> {
    let format = SourceFormat::from_path(path)
        .ok_or_else(|| PersonaError::UnknownFormat(path.display().to_string()))?;
    read_personas(std::fs::File::open(path)?, format)
}

pub fn read_personas<R: Read>(reader: R, format: SourceFormat) -> Result<Vec<Persona>, PersonaError> {
    let personas = match format {
        SourceFormat::Json => {
            let personas: Vec<Persona> = serde_json::from_reader(reader)?;
            for (i, p) in personas.iter().enumerate() {
                if p.system_prompt.trim().is_empty() {
                    return Err(PersonaError::EmptySystemPrompt { row: i + 1 });
                }
            }
            personas
        }
        SourceFormat::Csv => read_personas_csv(reader)?,
    };
    if personas.is_empty() {
        return Err(PersonaError::Empty);
    }
    let mut ids = BTreeSet::new();
    for p in &personas {
        if !ids.insert(p.id.as_str()) {
            return Err(PersonaError::DuplicateId(p.id.clone()));
        }
    }
    Ok(personas)
}

fn read_personas_csv<R: Read>(reader: R) -> Result<Vec<Persona>, PersonaError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(PersonaError::Empty);
    }
    let prompt_col = headers
        .iter()
        .position(|h| h.trim() == "system_prompt")
        .ok_or(PersonaError::MissingSystemPromptField)?;
    let id_col = headers.iter().position(|h| h.trim() == "id");

    let mut personas = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let system_prompt = record.get(prompt_col).unwrap_or("").to_string();
        if system_prompt.trim().is_empty() {
            return Err(PersonaError::EmptySystemPrompt { row });
        }
        let id = id_col
            .and_then(|c| record.get(c))
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().to_string())
            .unwrap_or_else(|| format!("p{}", i + 1));
        let attributes = headers
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != prompt_col && Some(*c) != id_col)
            .map(|(c, h)| (h.trim().to_string(), record.get(c).unwrap_or("").to_string()))
            .collect();
        personas.push(Persona {
            id,
            system_prompt,
            attributes,
        });
    }
    Ok(personas)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str =
        "question_id,question_text,scale_kind,option_label,option_text,is_refusal,ordinal_value,range_min,range_max\n";

    fn csv_q(body: &str) -> Result<Questionnaire, LoadError> {
        read_questionnaire(format!("{HEADER}{body}").as_bytes(), SourceFormat::Csv, "t")
    }

    #[test]
    fn loads_numeric_and_option_questions_in_row_order() {
        let q = csv_q(
            "q2,The Democratic Party?,numeric_range,,,,,0,100\n\
             q1,How important?,ordinal,1,Very important,false,1,,\n\
             q1,,ordinal,2,Not important,false,2,,\n\
             q1,,ordinal,3,Don't know,true,,,\n",
        )
        .unwrap();
        assert_eq!(q.question_ids(), vec!["q2", "q1"]);
        assert_eq!(q.questions[0].range, Some(NumericRange { min: 0, max: 100 }));
        assert_eq!(q.questions[1].options.len(), 3);
        assert!(q.questions[1].options[2].is_refusal);
    }

    #[test]
    fn duplicate_label_is_rejected() {
        let err = csv_q("q1,Pick,categorical,A,Yes,,,,\nq1,Pick,categorical,A,No,,,,\n").unwrap_err();
        match err {
            LoadError::Invalid(d) => assert_eq!(d[0].rule, Rule::DuplicateLabel),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_has_no_questions() {
        let err = csv_q("").unwrap_err();
        assert!(matches!(err, LoadError::NoQuestions));
        assert_eq!(err.to_string(), "no questions");
        let err = read_questionnaire(&b""[..], SourceFormat::Csv, "t").unwrap_err();
        assert!(matches!(err, LoadError::NoQuestions));
    }

    #[test]
    fn noncontiguous_question_id_is_duplicate() {
        let err = csv_q(
            "q1,A?,numeric_range,,,,,0,10\nq2,B?,numeric_range,,,,,0,10\nq1,A?,numeric_range,,,,,0,10\n",
        )
        .unwrap_err();
        assert!(matches!(err, LoadError::Invalid(ref d) if d[0].rule == Rule::DuplicateQuestionId));
    }

    #[test]
    fn numeric_with_options_is_rejected() {
        let err = csv_q("q1,Temp?,numeric_range,A,Warm,,,0,100\n").unwrap_err();
        assert!(matches!(err, LoadError::Invalid(ref d) if d.iter().any(|d| d.rule == Rule::OptionsOnNumericRange)));
    }

    #[test]
    fn ordinal_values_filled_when_absent() {
        let q = csv_q("q,Agree?,ordinal,1,Agree,,,,\nq,,ordinal,2,Disagree,,,,\n").unwrap();
        let values: Vec<_> = q.questions[0].options.iter().map(|o| o.ordinal_value).collect();
        assert_eq!(values, vec![Some(1), Some(2)]);
    }

    #[test]
    fn validate_flags_non_monotone_ordinals() {
        let q = Questionnaire {
            id: "x".into(),
            questions: vec![Question::with_options(
                "q",
                "Agree?",
                ScaleKind::Ordinal,
                vec![
                    AnswerOption::new("a", "one").with_ordinal(1),
                    AnswerOption::new("b", "three").with_ordinal(3),
                    AnswerOption::new("c", "two").with_ordinal(2),
                ],
            )],
        };
        let d = validate(&q);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].rule, Rule::NonMonotoneOrdinal);
        assert_eq!(d[0].question_id.as_deref(), Some("q"));
        assert_eq!(d[0].to_string(), "q: non-monotone ordinal values (1,3,2)");
    }

    #[test]
    fn validate_flags_two_refusals() {
        let q = Questionnaire {
            id: "x".into(),
            questions: vec![Question::with_options(
                "q",
                "Pick",
                ScaleKind::Categorical,
                vec![
                    AnswerOption::new("A", "Yes"),
                    AnswerOption::new("B", "Don't know").refusal(),
                    AnswerOption::new("C", "Refused").refusal(),
                ],
            )],
        };
        let d = validate(&q);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].rule, Rule::MultipleRefusals);
    }

    #[test]
    fn json_and_csv_interconvert() {
        let q = csv_q(
            "q1,Temp?,numeric_range,,,,,0,100\nq2,Pick,categorical,A,Yes,false,,,\nq2,Pick,categorical,B,\"No, never\",true,,,\n",
        )
        .unwrap();
        let from_json = read_questionnaire(q.to_json().as_bytes(), SourceFormat::Json, "t").unwrap();
        assert_eq!(from_json, q);
        let from_csv = read_questionnaire(q.to_csv().as_bytes(), SourceFormat::Csv, "t").unwrap();
        assert_eq!(from_csv, q);
    }

    #[test]
    fn personas_csv_maps_columns() {
        let data = "id,system_prompt,race,gender,ideology\n\
                    a,You are A.,Hispanic,Female,Liberal\n\
                    b,You are B.,Non-Hispanic White,Male,Moderate\n\
                    c,You are C.,Non-Hispanic Black,Female,Conservative\n";
        let personas = read_personas(data.as_bytes(), SourceFormat::Csv).unwrap();
        assert_eq!(personas.len(), 3);
        for p in &personas {
            assert_eq!(p.attributes.len(), 3);
        }
        assert_eq!(personas[1].attributes["race"], "Non-Hispanic White");
    }

    #[test]
    fn personas_reject_empty_prompt_and_missing_column() {
        let err = read_personas("id,system_prompt\na,\n".as_bytes(), SourceFormat::Csv).unwrap_err();
        assert!(matches!(err, PersonaError::EmptySystemPrompt { row: 2 }));
        let err = read_personas("id,race\na,x\n".as_bytes(), SourceFormat::Csv).unwrap_err();
        assert!(matches!(err, PersonaError::MissingSystemPromptField));
        let err = read_personas("".as_bytes(), SourceFormat::Csv).unwrap_err();
        assert!(matches!(err, PersonaError::Empty | PersonaError::MissingSystemPromptField));
        let err = read_personas("id,system_prompt\n".as_bytes(), SourceFormat::Csv).unwrap_err();
        assert!(matches!(err, PersonaError::Empty));
    }

    #[test]
    fn persona_from_description_template() {
        let description = "It is {year}. You are a {age} year-old, {marst}, {raceth} {gender} with \
            {education} making {income} per year, living in the United States. You are {ideo}, \
            {regis} {PID} who {interest} pays attention to what’s going on in government and politics.";
        let attrs: BTreeMap<String, String> = [
            ("year", "2016"),
            ("age", "45"),
            ("marst", "married"),
            ("raceth", "white"),
            ("gender", "man"),
            ("education", "a college degree"),
            ("income", "$60,000"),
            ("ideo", "moderate"),
            ("regis", "a registered"),
            ("PID", "independent"),
            ("interest", "sometimes"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        let p = Persona::from_template("r1", description, attrs.clone()).unwrap();
        assert!(!p.system_prompt.contains('{'));
        assert!(p.system_prompt.starts_with("It is 2016. You are a 45 year-old"));

        let mut missing = attrs;
        missing.remove("PID");
        let err = Persona::from_template("r1", description, missing).unwrap_err();
        assert!(matches!(err, PersonaError::Unresolved(ref v) if v == &["PID".to_string()]));
    }
}
