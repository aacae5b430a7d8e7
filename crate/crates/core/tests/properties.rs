mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use surveyor_core::canonical::{canonical_reply, ScriptedAnswer};
use surveyor_core::chat::Role;
use surveyor_core::distribution::Distribution;
use surveyor_core::methods::{
    check_compatibility, extract_first_token_distribution, plan_open_ended, CompileOptions, GenerationMethod,
    MethodKind, TokenLogprob,
};
use surveyor_core::metrics::{stratify, tvd, wasserstein1, ReferenceSet, Respondent};
use surveyor_core::parsers::{
    extract_json_block, match_choice, match_number_text, parse_response, AnswerValue, ParseContext, ThinkDelimiters,
};
use surveyor_core::perturbation::{
    key_typo, keyboard_typo, letter_swap, relabel, remove_refusal, reorder_questions, reverse_options, scale_parity,
    shuffle_options, synonym_replace, words, KeyboardLayout, LabelSchema, Lexicon, ReorderMode,
};
use surveyor_core::presentation::{render, PlanKey, PresentationMode};
use surveyor_core::survey::{AnswerOption, Persona, PromptTemplate, Question, Questionnaire, ScaleKind};

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn thermometers(n: usize) -> Questionnaire {
    let qs = (0..n)
        .map(|i| Question::numeric(format!("q{i}"), format!("Item {i}?"), 0, 100))
        .collect();
    Questionnaire::new("inst", qs).unwrap()
}

fn persona() -> Persona {
    Persona {
        id: "p".into(),
        system_prompt: "You are a respondent.".into(),
        attributes: Default::default(),
    }
}

fn template() -> PromptTemplate {
    PromptTemplate::new("Answer the following.\n\n{{OUTPUT_INSTRUCTIONS}}\n\n{{QUESTIONS}}").with_answer_field("temperature")
}

/// Ordinal question with `n` substantive options and optionally a refusal
/// placed at `refusal_at`.
fn ordinal(n: usize, refusal_at: Option<usize>) -> Question {
    let mut opts: Vec<AnswerOption> = (1..=n)
        .map(|i| AnswerOption::new(i.to_string(), format!("level {i}")).with_ordinal(i as i64))
        .collect();
    if let Some(at) = refusal_at {
        opts.insert(at.min(n), AnswerOption::new("99", "Don't know").refusal());
    }
    Question::with_options("o", "How much?", ScaleKind::Ordinal, opts)
}

fn arb_question() -> impl Strategy<Value = Question> {
    (1usize..9, proptest::option::of(0usize..9)).prop_map(|(n, r)| ordinal(n, r))
}

fn texts(q: &Question) -> Vec<String> {
    let mut t: Vec<String> = q.options.iter().map(|o| o.text.clone()).collect();
    t.sort();
    t
}

fn hamming(a: &str, b: &str) -> usize {
    a.chars().zip(b.chars()).filter(|(x, y)| x != y).count()
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn unit_count_law(n in 1usize..=50) {
        let q = thermometers(n);
        let m = GenerationMethod::new(MethodKind::RestrictedChoice).json();
        for mode in PresentationMode::ALL {
            let plan = render(mode, &q, &persona(), &template(), &m, &PlanKey::new("v", m.name(), 0)).unwrap();
            let expected = if mode == PresentationMode::Battery { 1 } else { n };
            prop_assert_eq!(plan.units.len(), expected);

            // Each question text sits in exactly one unit's user content.
            for question in &q.questions {
                let hits = plan.units.iter().filter(|u| {
                    u.initial_turns.iter().any(|t| t.role == Role::User && t.content.lines().any(|l| l == question.text))
                }).count();
                prop_assert_eq!(hits, 1, "{} in {}", question.text, mode);
            }

            // One system turn per issued request; sequential history grows as a prefix.
            let reqs = plan.simulated_requests();
            for (i, r) in reqs.iter().enumerate() {
                prop_assert_eq!(r.iter().filter(|t| t.role == Role::System).count(), 1);
                if mode == PresentationMode::Sequential {
                    prop_assert_eq!(r.len(), 2 + 2 * i);
                    if i > 0 {
                        prop_assert!(r.starts_with(&reqs[i - 1]));
                    }
                }
            }

            let again = render(mode, &q, &persona(), &template(), &m, &PlanKey::new("v", m.name(), 0)).unwrap();
            prop_assert_eq!(plan.to_canonical_json(), again.to_canonical_json());
        }
    }
}

proptest! {
    #![proptest_config(cfg(1000))]

    #[test]
    fn reverse_is_an_involution(q in arb_question()) {
        let twice = reverse_options(&reverse_options(&q).unwrap()).unwrap();
        prop_assert_eq!(&twice, &q);
        let once = reverse_options(&q).unwrap();
        prop_assert_eq!(once.labels(), q.labels());
        prop_assert_eq!(texts(&once), texts(&q));
        prop_assert_eq!(once.id, q.id);
    }

    #[test]
    fn shuffle_preserves_texts(q in arb_question(), seed in any::<u64>(), pin in any::<bool>()) {
        let s = shuffle_options(&q, seed, pin).unwrap();
        prop_assert_eq!(texts(&s), texts(&q));
        prop_assert_eq!(s.labels(), q.labels());
        prop_assert_eq!(&s, &shuffle_options(&q, seed, pin).unwrap());
        if pin && q.refusal_index().is_some() {
            prop_assert_eq!(s.refusal_index(), Some(s.options.len() - 1));
        }
    }

    #[test]
    fn remove_refusal_drops_exactly_one(n in 1usize..9, at in 0usize..9) {
        let q = ordinal(n, Some(at));
        let r = remove_refusal(&q).unwrap();
        prop_assert_eq!(r.options.len(), q.options.len() - 1);
        let survivors: Vec<&AnswerOption> = q.options.iter().filter(|o| !o.is_refusal).collect();
        prop_assert_eq!(r.options.iter().collect::<Vec<_>>(), survivors);
        prop_assert!(remove_refusal(&ordinal(n, None)).is_err());
    }

    #[test]
    fn scale_parity_flips_parity(n in 2usize..12, refusal in any::<bool>()) {
        let q = ordinal(n, refusal.then_some(n));
        let out = scale_parity(&q, Some("Neutral")).unwrap();
        let subst: Vec<&AnswerOption> = out.options.iter().filter(|o| !o.is_refusal).collect();
        prop_assert_eq!(subst.len() % 2, (n + 1) % 2);
        for (i, o) in subst.iter().enumerate() {
            prop_assert_eq!(&o.label, &(i + 1).to_string());
            prop_assert_eq!(o.ordinal_value, Some(i as i64 + 1));
        }
        if refusal {
            prop_assert!(out.options.last().unwrap().is_refusal);
        }
        if n % 2 == 1 {
            // Re-inserting the removed middle restores the original texts.
            let middle = q.options[(n + 1) / 2 - 1].text.clone();
            let back = scale_parity(&out, Some(&middle)).unwrap();
            let t: Vec<&str> = back.options.iter().map(|o| o.text.as_str()).collect();
            let orig: Vec<&str> = q.options.iter().map(|o| o.text.as_str()).collect();
            prop_assert_eq!(t, orig);
        }
    }

    #[test]
    fn relabel_keeps_texts(q in arb_question(), schema in 0usize..4) {
        let schema = [LabelSchema::UpperAlpha, LabelSchema::LowerAlpha, LabelSchema::Arabic, LabelSchema::RomanLower][schema].clone();
        let r = relabel(&q, &schema).unwrap();
        let a: Vec<(&str, bool)> = r.options.iter().map(|o| (o.text.as_str(), o.is_refusal)).collect();
        let b: Vec<(&str, bool)> = q.options.iter().map(|o| (o.text.as_str(), o.is_refusal)).collect();
        prop_assert_eq!(a, b);
        prop_assert_eq!(r.labels().iter().map(|s| s.to_string()).collect::<Vec<_>>(), schema.labels(q.options.len()).unwrap());
    }

    #[test]
    fn reorder_is_a_permutation(n in 1usize..20, seed in any::<u64>()) {
        let q = thermometers(n);
        let s = reorder_questions(&q, ReorderMode::Shuffle, Some(seed)).unwrap();
        let mut ids: Vec<&str> = s.question_ids();
        ids.sort();
        let mut orig = q.question_ids();
        orig.sort();
        prop_assert_eq!(ids, orig);
        let r = reorder_questions(&q, ReorderMode::Reverse, None).unwrap();
        let rev: Vec<&str> = q.question_ids().into_iter().rev().collect();
        prop_assert_eq!(r.question_ids(), rev);
    }

    #[test]
    fn key_typo_changes_one_letter(text in "[a-zA-Z ,.?!0-9]{0,40}", seed in any::<u64>()) {
        match key_typo(&text, seed) {
            Err(_) => prop_assert!(!text.chars().any(|c| c.is_alphabetic())),
            Ok(out) => {
                prop_assert_eq!(out.chars().count(), text.chars().count());
                prop_assert_eq!(hamming(&out, &text), 1);
                for (a, b) in text.chars().zip(out.chars()) {
                    if a != b {
                        prop_assert!(a.is_alphabetic());
                        prop_assert!(b.is_ascii_lowercase());
                        prop_assert_ne!(a.to_ascii_lowercase(), b);
                    }
                }
            }
        }
    }

    #[test]
    fn letter_swap_transposes_within_a_word(text in "[a-zA-Z ,.?]{0,40}", seed in any::<u64>()) {
        match letter_swap(&text, seed) {
            Err(_) => {
                let chars: Vec<char> = text.chars().collect();
                prop_assert!(words(&chars).iter().all(|(s, e)| e - s < 2));
            }
            Ok(out) => {
                let mut a: Vec<char> = text.chars().collect();
                let mut b: Vec<char> = out.chars().collect();
                let diffs: Vec<usize> = (0..a.len()).filter(|&i| a[i] != b[i]).collect();
                prop_assert!(diffs.is_empty() || (diffs.len() == 2 && diffs[1] == diffs[0] + 1));
                for &i in &diffs {
                    prop_assert!(a[i].is_alphabetic());
                }
                a.sort();
                b.sort();
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn keyboard_typo_uses_neighbours(text in "[a-zA-Z ,.?]{0,40}", seed in any::<u64>()) {
        let layout = KeyboardLayout::qwerty_us();
        if let Ok(out) = keyboard_typo(&text, seed, &layout) {
            prop_assert_eq!(hamming(&out, &text), 1);
            for (a, b) in text.chars().zip(out.chars()) {
                if a != b {
                    let n = layout.neighbours(a.to_ascii_lowercase()).unwrap();
                    prop_assert!(n.contains(&b.to_ascii_lowercase()));
                    prop_assert_eq!(a.is_uppercase(), b.is_uppercase());
                }
            }
        }
    }

    #[test]
    fn synonym_replace_keeps_word_count(
        ws in proptest::collection::vec(prop_oneof![Just("important"), Just("question"), Just("the"), Just("happy"), Just("big"), Just("Problem")], 1..12),
        rate in 0.01f64..=1.0,
        seed in any::<u64>(),
    ) {
        let text = ws.join(" ");
        let lex = Lexicon::default_english();
        if let Ok(out) = synonym_replace(&text, rate, &lex, seed) {
            prop_assert_eq!(out.split(' ').count(), ws.len());
            for (a, b) in text.split(' ').zip(out.split(' ')) {
                if a != b {
                    prop_assert!(lex.synonyms(&a.to_lowercase()).is_some());
                    prop_assert_eq!(a.chars().next().unwrap().is_uppercase(), b.chars().next().unwrap().is_uppercase());
                }
            }
        }
    }
}

fn arb_masses(len: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..1.0, len).prop_filter("positive mass", |m| m.iter().sum::<f64>() > 1e-6)
}

fn arb_support() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::btree_set(-50i32..50, 1..=10).prop_map(|s| s.into_iter().map(f64::from).collect())
}

fn arb_triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    arb_support().prop_flat_map(|s| {
        let n = s.len();
        (Just(s), arb_masses(n), arb_masses(n), arb_masses(n))
    })
}

proptest! {
    #![proptest_config(cfg(1000))]

    #[test]
    fn w1_matches_transport_oracle((s, a, b, c) in arb_triple()) {
        let p = Distribution::points(s.clone(), a).unwrap();
        let q = Distribution::points(s.clone(), b).unwrap();
        let r = Distribution::points(s.clone(), c).unwrap();
        let pq = wasserstein1(&p, &q, &s).unwrap();
        let oracle = common::transport_cost(&s, p.mass(), &s, q.mass());
        prop_assert!((pq - oracle).abs() < 1e-9, "{} vs {}", pq, oracle);
        prop_assert!(pq >= 0.0);
        prop_assert!((pq - wasserstein1(&q, &p, &s).unwrap()).abs() < 1e-12);
        prop_assert_eq!(wasserstein1(&p, &p, &s).unwrap(), 0.0);
        let pr = wasserstein1(&p, &r, &s).unwrap();
        let qr = wasserstein1(&q, &r, &s).unwrap();
        prop_assert!(pr <= pq + qr + 1e-9);
    }

    #[test]
    fn tvd_bounds((s, a, b, _c) in arb_triple()) {
        let labels: Vec<String> = s.iter().map(|x| x.to_string()).collect();
        let p = Distribution::labels(labels.clone(), a).unwrap();
        let q = Distribution::labels(labels, b).unwrap();
        let d = tvd(&p, &q).unwrap();
        let l1: f64 = p.mass().iter().zip(q.mass()).map(|(x, y)| (x - y).abs()).sum();
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((d - 0.5 * l1).abs() < 1e-12);
        prop_assert!((d - tvd(&q, &p).unwrap()).abs() < 1e-15);
        prop_assert_eq!(tvd(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn stratify_partitions(attrs in proptest::collection::vec((0u8..3, 0u8..2, 0u8..7), 1..200)) {
        let respondents: Vec<Respondent> = attrs.iter().enumerate().map(|(i, (r, g, ideo))| Respondent {
            id: format!("r{i}"),
            attributes: BTreeMap::from([
                ("race".to_string(), r.to_string()),
                ("gender".to_string(), g.to_string()),
                ("ideology".to_string(), ideo.to_string()),
            ]),
            answers: BTreeMap::new(),
        }).collect();
        let reference = ReferenceSet { respondents };
        let names = vec!["race".to_string(), "gender".to_string(), "ideology".to_string()];
        let subs = stratify(&reference, &names).unwrap();
        let mut all: Vec<String> = subs.iter().flat_map(|s| s.members.clone()).collect();
        prop_assert_eq!(all.len(), attrs.len());
        all.sort();
        all.dedup();
        prop_assert_eq!(all.len(), attrs.len());
        for s in &subs {
            prop_assert!(!s.members.is_empty());
            for m in &s.members {
                let r = reference.respondent(m).unwrap();
                for (k, v) in &s.key {
                    prop_assert_eq!(&r.attributes[k], v);
                }
            }
        }
    }

    #[test]
    fn first_token_distribution_is_normalized(
        entries in proptest::collection::vec((prop_oneof![Just("1"), Just(" 2"), Just("3"), Just("x"), Just("99")], -20.0f64..0.0), 0..10)
    ) {
        let q = ordinal(3, Some(3));
        let top: Vec<TokenLogprob> = entries.iter().map(|(t, l)| TokenLogprob::new(*t, *l)).collect();
        if let Ok(d) = extract_first_token_distribution(&top, &q, &[]) {
            let sum: f64 = d.distribution.mass().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(d.distribution.mass().iter().all(|m| *m >= 0.0));
        }
    }

    #[test]
    fn parsers_are_total(text in "\\PC{0,80}") {
        let q = ordinal(5, Some(5));
        let _ = match_choice(&text, &q);
        let _ = match_number_text(&text, &Question::numeric("n", "N", 0, 100));
        let _ = extract_json_block(&text);
    }
}

fn methods() -> Vec<GenerationMethod> {
    let mut out = Vec::new();
    for kind in MethodKind::ALL {
        let mut m = GenerationMethod::new(kind);
        if kind == MethodKind::AnswerPrefix {
            m = m.with_prefix("My answer is option ");
        }
        out.push(m.clone());
        if kind == MethodKind::RestrictedChoice {
            out.push(m.clone().json());
            out.push(m.json().constrained());
        }
    }
    out
}

fn scripted(q: &Question, pick: usize, kind: MethodKind) -> ScriptedAnswer {
    if !q.has_options() {
        return ScriptedAnswer::Number { value: (pick % 101) as f64 };
    }
    let n = q.options.len();
    if kind.yields_distribution() {
        let mut mass = vec![0.0; n];
        mass[pick % n] = 0.7;
        mass[(pick + 1) % n] += 0.3;
        ScriptedAnswer::Distribution { mass }
    } else {
        ScriptedAnswer::Choice {
            label: q.options[pick % n].label.clone(),
        }
    }
}

fn matches_script(v: &AnswerValue, s: &ScriptedAnswer) -> bool {
    match (v, s) {
        (AnswerValue::Choice { label }, ScriptedAnswer::Choice { label: l }) => label == l,
        (AnswerValue::Number { value }, ScriptedAnswer::Number { value: x }) => value == x,
        (AnswerValue::Distribution { distribution }, ScriptedAnswer::Distribution { mass }) => {
            let total: f64 = mass.iter().sum();
            distribution.mass().iter().zip(mass).all(|(a, b)| (a - b / total).abs() < 1e-9)
        }
        _ => false,
    }
}

proptest! {
    #![proptest_config(cfg(48))]

    // Render, answer in the canonical format, parse: every compatible
    // (method, mode) pair recovers the scripted values exactly.
    #[test]
    fn render_reply_parse_round_trip(n in 1usize..6, options in 2usize..6, numeric in any::<bool>(), pick in 0usize..100) {
        let questions: Vec<Question> = (0..n).map(|i| {
            if numeric && i % 2 == 1 {
                Question::numeric(format!("q{i}"), format!("Thermometer {i}?"), 0, 100)
            } else {
                let mut q = ordinal(options, None);
                q.id = format!("q{i}");
                q.text = format!("Scale {i}?");
                q
            }
        }).collect();
        let inst = Questionnaire::new("rt", questions).unwrap();
        let all: Vec<&Question> = inst.questions.iter().collect();
        let opts = CompileOptions { answer_field: "answer".into(), ..Default::default() };
        for m in methods() {
            for mode in PresentationMode::ALL {
                if check_compatibility(&m, mode, &all).is_err() {
                    continue;
                }
                let plan = render(mode, &inst, &persona(), &PromptTemplate::new("{{QUESTIONS}}"), &m, &PlanKey::new("v", m.name(), 1)).unwrap();
                let ctx = ParseContext { method: &m, mode, answer_field: "answer", think_delimiters: &[ThinkDelimiters::default()], alias_prefixes: &[] };
                for unit in &plan.units {
                    let qs: Vec<&Question> = unit.expected_answers.iter().map(|id| inst.question(id).unwrap()).collect();
                    let script: Vec<ScriptedAnswer> = qs.iter().enumerate().map(|(i, q)| scripted(q, pick + i, m.kind)).collect();
                    if m.kind.is_open_ended() {
                        plan_open_ended(&m, unit, qs[0], &opts).unwrap();
                    }
                    let reply = canonical_reply(&m, mode, &qs, "answer", &script);
                    let parsed = parse_response(&ctx, &qs, &reply.text, reply.top_logprobs.as_deref());
                    prop_assert_eq!(parsed.len(), qs.len());
                    for (p, s) in parsed.iter().zip(&script) {
                        prop_assert!(matches_script(&p.value, s), "{} {}: {:?} vs {:?} from {}", m.name(), mode, p.value, s, reply.text);
                    }
                }
            }
        }
    }
}
