//! Question augmentation: subquestions and keywords from two LLM calls.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backend::{parse_json_object, BackendError, CallError, Session};
use crate::prompts::{PromptSet, TemplateKind};

pub const TAG_DECOMPOSE: &str = "decompose";
pub const TAG_KEYWORDS: &str = "keywords";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedQuestion {
    pub question: String,
    pub hint: String,
    pub subquestions: Vec<String>,
    pub keywords: Vec<String>,
}

impl AugmentedQuestion {
    /// The block that fills `{AUGMENTED_QUESTION}` in retrieval and
    /// generation prompts.
    pub fn prompt_json(&self) -> String {
        json!({
            "original_question": self.question,
            "subquestions": self.subquestions,
            "keywords": self.keywords,
        })
        .to_string()
    }
}

/// A stage that fell back to its default output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Degradation {
    pub stage: String,
    pub reason: String,
}

impl Degradation {
    pub fn new(stage: &str, reason: impl ToString) -> Self {
        Degradation {
            stage: stage.to_string(),
            reason: reason.to_string(),
        }
    }
}

/// Trimmed, non-empty, first occurrence only.
pub fn dedup_trimmed<I, S>(items: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut out: Vec<String> = Vec::new();
    for item in items {
        let t = item.as_ref().trim();
        if !t.is_empty() && !out.iter().any(|o| o == t) {
            out.push(t.to_string());
        }
    }
    out
}

/// Reads `key` (case-insensitively) as a list of strings. Numbers are
/// accepted and rendered; other element kinds are skipped.
fn string_list(text: &str, key: &str) -> Option<Vec<String>> {
    let v = parse_json_object(text).ok()?;
    let obj = v.as_object()?;
    let list = obj
        .get(key)
        .or_else(|| obj.iter().find(|(k, _)| k.eq_ignore_ascii_case(key)).map(|(_, v)| v))?
        .as_array()?;
    Some(dedup_trimmed(list.iter().filter_map(|item| match item {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    })))
}

/// Keyword fallback: whitespace tokens of the question, stripped of
/// surrounding punctuation, longer than three characters.
pub fn fallback_keywords(q: &str) -> Vec<String> {
    dedup_trimmed(
        q.split_whitespace()
            .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()))
            .filter(|t| t.chars().count() > 3),
    )
}

pub fn decompose_question(
    q: &str,
    session: &mut Session<'_>,
    prompts: &PromptSet,
) -> Result<Vec<String>, CallError> {
    let prompt = prompts.render(TemplateKind::Decomposition, &[("QUESTION", q)]);
    session.complete_parsed(TAG_DECOMPOSE, &prompt, |t| {
        string_list(t, "Subquestions").filter(|l| !l.is_empty())
    })
}

pub fn extract_keywords(
    q: &str,
    hint: &str,
    session: &mut Session<'_>,
    prompts: &PromptSet,
) -> Result<Vec<String>, CallError> {
    let prompt = prompts.render(TemplateKind::Keywords, &[("QUESTION", q), ("EVIDENCE", hint)]);
    session.complete_parsed(TAG_KEYWORDS, &prompt, |t| {
        string_list(t, "keywords").filter(|l| !l.is_empty())
    })
}

/// Runs both augmentation calls. A failing call falls back to its default
/// and is reported in `events`; a backend error is returned only when both
/// calls hit one.
pub fn augment(
    q: &str,
    hint: &str,
    session: &mut Session<'_>,
    prompts: &PromptSet,
    events: &mut Vec<Degradation>,
) -> Result<AugmentedQuestion, BackendError> {
    let subs = decompose_question(q, session, prompts);
    let keys = extract_keywords(q, hint, session, prompts);
    if let (Err(CallError::Backend(e)), Err(CallError::Backend(_))) = (&subs, &keys) {
        return Err(e.clone());
    }
    let subquestions = subs.unwrap_or_else(|e| {
        log::warn!("{TAG_DECOMPOSE} fell back for {}: {e}", session.example());
        events.push(Degradation::new(TAG_DECOMPOSE, &e));
        dedup_trimmed([q])
    });
    let keywords = keys.unwrap_or_else(|e| {
        log::warn!("{TAG_KEYWORDS} fell back for {}: {e}", session.example());
        events.push(Degradation::new(TAG_KEYWORDS, &e));
        fallback_keywords(q)
    });
    Ok(AugmentedQuestion {
        question: q.to_string(),
        hint: hint.to_string(),
        subquestions,
        keywords,
    })
}
