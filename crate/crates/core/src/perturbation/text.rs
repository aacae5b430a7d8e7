//! Character- and word-level question perturbations.
//!
//! A "word" is a maximal run of alphabetic characters. Positions are
//! counted in chars, never bytes, so non-ASCII text keeps its length.

use std::collections::BTreeMap;

use super::PerturbError;
use crate::rng::SeededRng;

/// Bundled US QWERTY adjacency table.
pub const QWERTY_US_V1: &str = include_str!("../../assets/qwerty_us_v1.tsv");
/// Bundled default synonym lexicon.
pub const DEFAULT_LEXICON: &str = include_str!("../../assets/synonyms_default.tsv");

/// Lowercase letter -> neighbouring keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyboardLayout {
    neighbours: BTreeMap<char, Vec<char>>,
}

impl KeyboardLayout {
    pub fn qwerty_us() -> Self {
        Self::parse(QWERTY_US_V1).expect("bundled adjacency table parses")
    }

    /// Parses `key<TAB>neighbours` lines; `#` starts a comment line.
    pub fn parse(table: &str) -> Result<Self, PerturbError> {
        let mut neighbours = BTreeMap::new();
        for (n, line) in table.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, list) = line
                .split_once('\t')
                .ok_or_else(|| PerturbError::Asset(format!("adjacency line {}: missing tab", n + 1)))?;
            let mut keys = key.chars();
            let (Some(k), None) = (keys.next(), keys.next()) else {
                return Err(PerturbError::Asset(format!("adjacency line {}: key must be one char", n + 1)));
            };
            let list: Vec<char> = list.chars().filter(|c| !c.is_whitespace()).collect();
            if !k.is_lowercase() || list.is_empty() || list.iter().any(|c| !c.is_lowercase()) {
                return Err(PerturbError::Asset(format!("adjacency line {}: lowercase letters only", n + 1)));
            }
            neighbours.insert(k, list);
        }
        Ok(Self { neighbours })
    }

    pub fn neighbours(&self, key: char) -> Option<&[char]> {
        self.neighbours.get(&key).map(Vec::as_slice)
    }

    fn lookup(&self, c: char) -> Option<&[char]> {
        let mut lower = c.to_lowercase();
        match (lower.next(), lower.next()) {
            (Some(l), None) => self.neighbours(l),
            _ => None,
        }
    }
}

impl Default for KeyboardLayout {
    fn default() -> Self {
        Self::qwerty_us()
    }
}

/// Lowercase word -> single-word synonyms.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    entries: BTreeMap<String, Vec<String>>,
}

impl Lexicon {
    pub fn default_english() -> Self {
        Self::parse(DEFAULT_LEXICON).expect("bundled lexicon parses")
    }

    /// Parses `word<TAB>syn1,syn2,...` lines. Multi-word synonyms are
    /// rejected so replacements never change the word count.
    pub fn parse(text: &str) -> Result<Self, PerturbError> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, syns) = line
                .split_once('\t')
                .ok_or_else(|| PerturbError::Asset(format!("lexicon line {}: missing tab", n + 1)))?;
            let word = word.trim().to_lowercase();
            let synonyms: Vec<String> = syns
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty() && s.to_lowercase() != word)
                .collect();
            let single_words = std::iter::once(&word)
                .chain(&synonyms)
                .all(|w| !w.is_empty() && w.chars().all(char::is_alphabetic));
            if !single_words {
                return Err(PerturbError::Asset(format!("lexicon line {}: single alphabetic words only", n + 1)));
            }
            if !synonyms.is_empty() {
                entries.insert(word, synonyms);
            }
        }
        Ok(Self { entries })
    }

    pub fn from_pairs<I, S>(pairs: I) -> Result<Self, PerturbError>
    where
        I: IntoIterator<Item = (S, Vec<S>)>,
        S: Into<String>,
    {
        let text: String = pairs
            .into_iter()
            .map(|(w, syns)| {
                let syns: Vec<String> = syns.into_iter().map(Into::into).collect();
                format!("{}\t{}\n", w.into(), syns.join(","))
            })
            .collect();
        Self::parse(&text)
    }

    pub fn synonyms(&self, word: &str) -> Option<&[String]> {
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Char-index spans `[start, end)` of maximal alphabetic runs.
pub fn words(chars: &[char]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in chars.iter().enumerate() {
        match (c.is_alphabetic(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, chars.len()));
    }
    spans
}

fn match_case(original: char, replacement: char) -> char {
    if original.is_uppercase() {
        replacement.to_uppercase().next().unwrap_or(replacement)
    } else {
        replacement
    }
}

/// Replaces one alphabetic character with a different lowercase ASCII
/// letter chosen uniformly.
pub fn key_typo(text: &str, seed: u64) -> Result<String, PerturbError> {
    key_typo_with(text, &mut SeededRng::new(seed))
}

pub(crate) fn key_typo_with(text: &str, rng: &mut SeededRng) -> Result<String, PerturbError> {
    let mut chars: Vec<char> = text.chars().collect();
    let eligible: Vec<usize> = (0..chars.len()).filter(|&i| chars[i].is_alphabetic()).collect();
    if eligible.is_empty() {
        return Err(PerturbError::NoAlphabetic);
    }
    let pos = eligible[rng.below(eligible.len())];
    let original = chars[pos].to_ascii_lowercase();
    let candidates: Vec<char> = ('a'..='z').filter(|&c| c != original).collect();
    chars[pos] = candidates[rng.below(candidates.len())];
    Ok(chars.into_iter().collect())
}

/// Transposes the characters at char indices `index` and `index + 1`.
pub fn swap_adjacent(text: &str, index: usize) -> Option<String> {
    let mut chars: Vec<char> = text.chars().collect();
    if index + 1 >= chars.len() {
        return None;
    }
    chars.swap(index, index + 1);
    Some(chars.into_iter().collect())
}

/// Swaps two adjacent characters inside one randomly chosen word of
/// length >= 2.
pub fn letter_swap(text: &str, seed: u64) -> Result<String, PerturbError> {
    letter_swap_with(text, &mut SeededRng::new(seed))
}

pub(crate) fn letter_swap_with(text: &str, rng: &mut SeededRng) -> Result<String, PerturbError> {
    let chars: Vec<char> = text.chars().collect();
    let candidates: Vec<(usize, usize)> = words(&chars).into_iter().filter(|(s, e)| e - s >= 2).collect();
    if candidates.is_empty() {
        return Err(PerturbError::NoSwappableWord);
    }
    let (start, end) = candidates[rng.below(candidates.len())];
    let offset = rng.below(end - start - 1);
    Ok(swap_adjacent(text, start + offset).expect("index inside word"))
}

/// Replaces one character with a neighbouring key, preserving case.
pub fn keyboard_typo(text: &str, seed: u64, layout: &KeyboardLayout) -> Result<String, PerturbError> {
    keyboard_typo_with(text, &mut SeededRng::new(seed), layout)
}

pub(crate) fn keyboard_typo_with(
    text: &str,
    rng: &mut SeededRng,
    layout: &KeyboardLayout,
) -> Result<String, PerturbError> {
    let mut chars: Vec<char> = text.chars().collect();
    let eligible: Vec<usize> = (0..chars.len()).filter(|&i| layout.lookup(chars[i]).is_some()).collect();
    if eligible.is_empty() {
        return Err(PerturbError::NoKeyboardEligible);
    }
    let pos = eligible[rng.below(eligible.len())];
    let neighbours = layout.lookup(chars[pos]).expect("eligible");
    let replacement = neighbours[rng.below(neighbours.len())];
    chars[pos] = match_case(chars[pos], replacement);
    Ok(chars.into_iter().collect())
}

/// Replaces `max(1, round(rate * n))` of the `n` lexicon-covered words with
/// a seeded choice of synonym. Uncovered words are never touched.
pub fn synonym_replace(text: &str, rate: f64, lexicon: &Lexicon, seed: u64) -> Result<String, PerturbError> {
    synonym_replace_with(text, rate, lexicon, &mut SeededRng::new(seed))
}

pub(crate) fn synonym_replace_with(
    text: &str,
    rate: f64,
    lexicon: &Lexicon,
    rng: &mut SeededRng,
) -> Result<String, PerturbError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(PerturbError::InvalidRate(rate));
    }
    let chars: Vec<char> = text.chars().collect();
    let eligible: Vec<(usize, usize)> = words(&chars)
        .into_iter()
        .filter(|&(s, e)| {
            let w: String = chars[s..e].iter().collect();
            lexicon.synonyms(&w).is_some()
        })
        .collect();
    if eligible.is_empty() {
        return Err(PerturbError::NoLexiconWord);
    }
    let k = ((rate * eligible.len() as f64).round() as usize).clamp(1, eligible.len());
    let mut replacements: BTreeMap<usize, (usize, String)> = BTreeMap::new();
    for idx in rng.sample_indices(eligible.len(), k) {
        let (s, e) = eligible[idx];
        let word: String = chars[s..e].iter().collect();
        let syns = lexicon.synonyms(&word).expect("eligible word");
        let mut syn: Vec<char> = syns[rng.below(syns.len())].chars().collect();
        if let Some(first) = syn.first_mut() {
            *first = match_case(chars[s], *first);
        }
        replacements.insert(s, (e, syn.into_iter().collect()));
    }

    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        if let Some((end, syn)) = replacements.get(&i) {
            out.push_str(syn);
            i = *end;
        } else {
            out.push(chars[i]);
            i += 1;
        }
    }
    Ok(out)
}
