//! Placeholder substitution for prompt templates.
//!
//! Two syntaxes are supported. Prompt templates use double braces
//! (`{{QUESTIONS}}`); persona descriptions written as survey-style
//! fill-ins use single braces (`{age}`). Names are ASCII alphanumerics
//! and underscores; anything else between braces is left untouched.

use std::collections::BTreeMap;

/// Token replaced by the rendered question block.
pub const QUESTIONS: &str = "QUESTIONS";
/// Token replaced by the response method's output instruction.
pub const OUTPUT_INSTRUCTIONS: &str = "OUTPUT_INSTRUCTIONS";
/// Token replaced by the persona's system prompt.
pub const PERSONA: &str = "PERSONA";

/// Result of a substitution pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Substitution {
    pub text: String,
    /// Placeholder names with no binding, in order of first appearance.
    pub unresolved: Vec<String>,
}

impl Substitution {
    pub fn is_complete(&self) -> bool {
        self.unresolved.is_empty()
    }
}

fn is_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

fn substitute(
    template: &str,
    open: &str,
    close: &str,
    bindings: &BTreeMap<String, String>,
) -> Substitution {
    let mut text = String::with_capacity(template.len());
    let mut unresolved: Vec<String> = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find(open) {
        let after = &rest[start + open.len()..];
        let Some(end) = after.find(close) else {
            break;
        };
        let name = &after[..end];
        if !is_name(name) {
            // Not a placeholder; emit the opening delimiter and keep scanning.
            text.push_str(&rest[..start + open.len()]);
            rest = after;
            continue;
        }
        text.push_str(&rest[..start]);
        match bindings.get(name) {
            Some(value) => text.push_str(value),
            None => {
                text.push_str(&rest[start..start + open.len() + end + close.len()]);
                if !unresolved.iter().any(|n| n == name) {
                    unresolved.push(name.to_string());
                }
            }
        }
        rest = &after[end + close.len()..];
    }
    text.push_str(rest);
    Substitution { text, unresolved }
}

/// Replaces every bound `{{NAME}}`. Unbound placeholders are kept verbatim
/// and listed in [`Substitution::unresolved`].
pub fn substitute_placeholders(template: &str, bindings: &BTreeMap<String, String>) -> Substitution {
    substitute(template, "{{", "}}", bindings)
}

/// Single-brace variant used for persona descriptions (`It is {year}.`).
pub fn fill_braced(template: &str, bindings: &BTreeMap<String, String>) -> Substitution {
    substitute(template, "{", "}", bindings)
}

/// Names of all well-formed `{{NAME}}` placeholders in `template`.
pub fn placeholder_names(template: &str) -> Vec<String> {
    substitute_placeholders(template, &BTreeMap::new()).unresolved
}
