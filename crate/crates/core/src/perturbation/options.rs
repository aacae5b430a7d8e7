//! Answer-option and question-order perturbations.
//!
//! Option-order operators permute option *texts* across fixed label slots:
//! after reversing `1: Very important .. 5: Not important` the first slot
//! still carries label `1`, now paired with `Not important`. Ordinal values
//! stay attached to slots as well, so the presented scale remains
//! monotone.

use serde::{Deserialize, Serialize};

use super::PerturbError;
use crate::rng::SeededRng;
use crate::survey::{AnswerOption, Question, Questionnaire, ScaleKind};

fn require_options(q: &Question) -> Result<(), PerturbError> {
    if q.has_options() {
        Ok(())
    } else {
        Err(PerturbError::NoOptions(q.id.clone()))
    }
}

/// Places `(text, is_refusal)` pairs into the question's existing slots.
/// Slot `i` keeps its label; substantive slots receive the original
/// substantive ordinal values in ascending order.
fn reassign(q: &Question, order: Vec<(String, bool)>) -> Question {
    let mut ordinals: Vec<i64> = q
        .options
        .iter()
        .filter(|o| !o.is_refusal)
        .filter_map(|o| o.ordinal_value)
        .collect();
    ordinals.sort_unstable();
    let mut ordinals = ordinals.into_iter();
    let options = q
        .options
        .iter()
        .zip(order)
        .map(|(slot, (text, is_refusal))| AnswerOption {
            label: slot.label.clone(),
            text,
            is_refusal,
            ordinal_value: if is_refusal { None } else { ordinals.next() },
        })
        .collect();
    Question {
        options,
        ..q.clone()
    }
}

fn texts(q: &Question) -> Vec<(String, bool)> {
    q.options.iter().map(|o| (o.text.clone(), o.is_refusal)).collect()
}

/// Reverses the substantive options. A refusal option keeps its slot.
pub fn reverse_options(q: &Question) -> Result<Question, PerturbError> {
    require_options(q)?;
    let mut order = texts(q);
    let substantive: Vec<usize> = (0..order.len()).filter(|&i| !order[i].1).collect();
    let reversed: Vec<(String, bool)> = substantive.iter().rev().map(|&i| order[i].clone()).collect();
    for (slot, item) in substantive.iter().zip(reversed) {
        order[*slot] = item;
    }
    Ok(reassign(q, order))
}

/// Seeded uniform permutation of the options. With `pin_refusal_last` the
/// refusal option is excluded from the shuffle and placed in the final slot.
pub fn shuffle_options(q: &Question, seed: u64, pin_refusal_last: bool) -> Result<Question, PerturbError> {
    shuffle_options_with(q, &mut SeededRng::new(seed), pin_refusal_last)
}

pub(crate) fn shuffle_options_with(
    q: &Question,
    rng: &mut SeededRng,
    pin_refusal_last: bool,
) -> Result<Question, PerturbError> {
    require_options(q)?;
    let all = texts(q);
    let order = if pin_refusal_last {
        let (refusal, mut rest): (Vec<_>, Vec<_>) = all.into_iter().partition(|(_, r)| *r);
        rng.shuffle(&mut rest);
        rest.extend(refusal);
        rest
    } else {
        let mut all = all;
        rng.shuffle(&mut all);
        all
    };
    Ok(reassign(q, order))
}

pub fn remove_refusal(q: &Question) -> Result<Question, PerturbError> {
    require_options(q)?;
    let idx = q.refusal_index().ok_or_else(|| PerturbError::NoRefusal(q.id.clone()))?;
    let mut out = q.clone();
    out.options.remove(idx);
    Ok(out)
}

/// Flips the parity of an ordinal scale. Odd scales lose their middle
/// category; even scales gain `middle_text` in the middle. Substantive
/// options are relabelled `1..m`; a refusal option moves to the end with
/// its label unchanged.
pub fn scale_parity(q: &Question, middle_text: Option<&str>) -> Result<Question, PerturbError> {
    if q.scale_kind != ScaleKind::Ordinal {
        return Err(PerturbError::NotOrdinal(q.id.clone()));
    }
    let mut substantive: Vec<AnswerOption> = q.options.iter().filter(|o| !o.is_refusal).cloned().collect();
    let refusal: Option<AnswerOption> = q.options.iter().find(|o| o.is_refusal).cloned();
    let n = substantive.len();
    if n < 2 {
        return Err(PerturbError::TooFewOptions {
            question: q.id.clone(),
            found: n,
        });
    }
    if n.is_multiple_of(2) {
        let text = middle_text
            .filter(|t| !t.trim().is_empty())
            .ok_or_else(|| PerturbError::MissingMiddleText(q.id.clone()))?;
        substantive.insert(n / 2, AnswerOption::new("", text));
    } else {
        substantive.remove(n.div_ceil(2) - 1);
    }
    for (i, o) in substantive.iter_mut().enumerate() {
        o.label = (i + 1).to_string();
        o.ordinal_value = Some(i as i64 + 1);
    }
    if let Some(r) = refusal {
        if substantive.iter().any(|o| o.label == r.label || o.text == r.text) {
            return Err(PerturbError::LabelClash {
                question: q.id.clone(),
                label: r.label,
            });
        }
        substantive.push(r);
    }
    Ok(Question {
        options: substantive,
        ..q.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSchema {
    UpperAlpha,
    LowerAlpha,
    Arabic,
    RomanLower,
    Custom(Vec<String>),
}

fn roman(mut n: usize) -> String {
    const TABLE: [(usize, &str); 13] = [
        (1000, "m"),
        (900, "cm"),
        (500, "d"),
        (400, "cd"),
        (100, "c"),
        (90, "xc"),
        (50, "l"),
        (40, "xl"),
        (10, "x"),
        (9, "ix"),
        (5, "v"),
        (4, "iv"),
        (1, "i"),
    ];
    let mut out = String::new();
    for (value, digits) in TABLE {
        while n >= value {
            out.push_str(digits);
            n -= value;
        }
    }
    out
}

impl LabelSchema {
    /// First `count` labels of the schema, or `None` when it runs out.
    pub fn labels(&self, count: usize) -> Option<Vec<String>> {
        let capacity = match self {
            LabelSchema::UpperAlpha | LabelSchema::LowerAlpha => 26,
            LabelSchema::Arabic => usize::MAX,
            LabelSchema::RomanLower => 3999,
            LabelSchema::Custom(list) => list.len(),
        };
        if count > capacity {
            return None;
        }
        Some(
            (0..count)
                .map(|i| match self {
                    LabelSchema::UpperAlpha => char::from(b'A' + i as u8).to_string(),
                    LabelSchema::LowerAlpha => char::from(b'a' + i as u8).to_string(),
                    LabelSchema::Arabic => (i + 1).to_string(),
                    LabelSchema::RomanLower => roman(i + 1),
                    LabelSchema::Custom(list) => list[i].clone(),
                })
                .collect(),
        )
    }

    fn capacity_hint(&self) -> usize {
        match self {
            LabelSchema::UpperAlpha | LabelSchema::LowerAlpha => 26,
            LabelSchema::Arabic => usize::MAX,
            LabelSchema::RomanLower => 3999,
            LabelSchema::Custom(list) => list.len(),
        }
    }
}

pub fn relabel(q: &Question, schema: &LabelSchema) -> Result<Question, PerturbError> {
    require_options(q)?;
    let labels = schema.labels(q.options.len()).ok_or_else(|| PerturbError::SchemaExhausted {
        question: q.id.clone(),
        needed: q.options.len(),
        available: schema.capacity_hint(),
    })?;
    let mut out = q.clone();
    for (o, label) in out.options.iter_mut().zip(labels) {
        o.label = label;
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = out.options.iter().find(|o| !seen.insert(o.label.as_str())) {
        return Err(PerturbError::LabelClash {
            question: q.id.clone(),
            label: dup.label.clone(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReorderMode {
    Reverse,
    Shuffle,
}

/// Reverses or shuffles question order. `Shuffle` needs a seed.
pub fn reorder_questions(
    q: &Questionnaire,
    mode: ReorderMode,
    seed: Option<u64>,
) -> Result<Questionnaire, PerturbError> {
    let mut out = q.clone();
    match mode {
        ReorderMode::Reverse => out.questions.reverse(),
        ReorderMode::Shuffle => {
            let seed = seed.ok_or(PerturbError::MissingSeed("reorder_questions"))?;
            SeededRng::new(seed).shuffle(&mut out.questions);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn importance() -> Question {
        let texts = [
            "Very important",
            "Important",
            "Moderately important",
            "Slightly important",
            "Not important",
        ];
        Question::with_options(
            "imp",
            "How important is this issue?",
            ScaleKind::Ordinal,
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| AnswerOption::new((i + 1).to_string(), *t).with_ordinal(i as i64 + 1))
                .collect(),
        )
    }

    fn with_refusal(mut q: Question) -> Question {
        q.options.push(AnswerOption::new("8", "Don't know").refusal());
        q
    }

    #[test]
    fn reverse_pairs_first_label_with_last_text() {
        let r = reverse_options(&importance()).unwrap();
        assert_eq!(r.options[0].label, "1");
        assert_eq!(r.options[0].text, "Not important");
        assert_eq!(r.options[4].label, "5");
        assert_eq!(r.options[4].text, "Very important");
        assert_eq!(r.options[0].ordinal_value, Some(1));
    }

    #[test]
    fn reverse_is_an_involution_and_fixes_singletons() {
        let two = Question::with_options(
            "y",
            "Yes or no?",
            ScaleKind::Categorical,
            vec![AnswerOption::new("A", "Yes"), AnswerOption::new("B", "No")],
        );
        assert_eq!(reverse_options(&reverse_options(&two).unwrap()).unwrap(), two);
        let one = Question::with_options("o", "Only?", ScaleKind::Categorical, vec![AnswerOption::new("A", "Only")]);
        assert_eq!(reverse_options(&one).unwrap(), one);
    }

    #[test]
    fn reverse_keeps_refusal_in_place() {
        let r = reverse_options(&with_refusal(importance())).unwrap();
        assert_eq!(r.options[5].text, "Don't know");
        assert!(r.options[5].is_refusal);
        assert_eq!(r.options[0].text, "Not important");
    }

    #[test]
    fn reverse_rejects_numeric() {
        let q = Question::numeric("t", "Temp?", 0, 100);
        assert!(matches!(reverse_options(&q), Err(PerturbError::NoOptions(_))));
    }

    #[test]
    fn remove_refusal_drops_exactly_one() {
        let q = Question::with_options(
            "q",
            "Pick",
            ScaleKind::Categorical,
            vec![
                AnswerOption::new("A", "a"),
                AnswerOption::new("B", "b"),
                AnswerOption::new("DK", "Don't know").refusal(),
                AnswerOption::new("C", "c"),
            ],
        );
        let r = remove_refusal(&q).unwrap();
        assert_eq!(r.labels(), vec!["A", "B", "C"]);
        assert!(r.options.iter().all(|o| !o.is_refusal));
        let err = remove_refusal(&r).unwrap_err();
        assert_eq!(err.to_string(), "no refusal option in question q");
    }

    #[test]
    fn parity_removes_middle_of_odd_scale() {
        let r = scale_parity(&importance(), None).unwrap();
        assert_eq!(r.labels(), vec!["1", "2", "3", "4"]);
        assert!(!r.options.iter().any(|o| o.text == "Moderately important"));
    }

    #[test]
    fn parity_inserts_neutral_into_even_scale() {
        let four = Question::with_options(
            "agree",
            "Do you agree?",
            ScaleKind::Ordinal,
            ["Strongly agree", "Agree", "Disagree", "Strongly disagree"]
                .iter()
                .enumerate()
                .map(|(i, t)| AnswerOption::new((i + 1).to_string(), *t).with_ordinal(i as i64 + 1))
                .collect(),
        );
        let r = scale_parity(&four, Some("Neutral")).unwrap();
        assert_eq!(r.options.len(), 5);
        assert_eq!(r.options[2].text, "Neutral");
        assert_eq!(r.options[2].label, "3");
        assert!(matches!(scale_parity(&four, None), Err(PerturbError::MissingMiddleText(_))));
    }

    #[test]
    fn parity_round_trip_restores_scale() {
        let q = importance();
        let even = scale_parity(&q, None).unwrap();
        let back = scale_parity(&even, Some("Moderately important")).unwrap();
        assert_eq!(back, q);
    }

    #[test]
    fn parity_keeps_refusal_last() {
        let r = scale_parity(&with_refusal(importance()), None).unwrap();
        let last = r.options.last().unwrap();
        assert!(last.is_refusal);
        assert_eq!(last.label, "8");
        assert_eq!(r.options.len(), 5);
    }

    #[test]
    fn parity_rejects_categorical() {
        let q = Question::with_options("c", "Pick", ScaleKind::Categorical, vec![AnswerOption::new("A", "x")]);
        assert!(matches!(scale_parity(&q, None), Err(PerturbError::NotOrdinal(_))));
    }

    #[test]
    fn relabel_schemas() {
        let q = Question::with_options(
            "q",
            "Pick",
            ScaleKind::Categorical,
            vec![AnswerOption::new("1", "x"), AnswerOption::new("2", "y"), AnswerOption::new("3", "z")],
        );
        assert_eq!(relabel(&q, &LabelSchema::UpperAlpha).unwrap().labels(), vec!["A", "B", "C"]);
        assert_eq!(relabel(&q, &LabelSchema::RomanLower).unwrap().labels(), vec!["i", "ii", "iii"]);
        let err = relabel(&q, &LabelSchema::Custom(vec!["x".into(), "y".into()])).unwrap_err();
        assert!(err.to_string().contains("schema exhausted"));
    }

    #[test]
    fn roman_numerals() {
        assert_eq!(roman(4), "iv");
        assert_eq!(roman(9), "ix");
        assert_eq!(roman(14), "xiv");
        assert_eq!(roman(1994), "mcmxciv");
    }

    #[test]
    fn shuffle_pins_refusal_last() {
        let q = with_refusal(importance());
        for seed in 0..50 {
            let s = shuffle_options(&q, seed, true).unwrap();
            assert!(s.options.last().unwrap().is_refusal);
            assert_eq!(s.options.last().unwrap().text, "Don't know");
        }
    }

    #[test]
    fn reorder_reverse() {
        let q = Questionnaire {
            id: "x".into(),
            questions: ["q1", "q2", "q3"].iter().map(|id| Question::numeric(*id, *id, 0, 1)).collect(),
        };
        let r = reorder_questions(&q, ReorderMode::Reverse, None).unwrap();
        assert_eq!(r.question_ids(), vec!["q3", "q2", "q1"]);
        assert!(matches!(
            reorder_questions(&q, ReorderMode::Shuffle, None),
            Err(PerturbError::MissingSeed(_))
        ));
    }
}
