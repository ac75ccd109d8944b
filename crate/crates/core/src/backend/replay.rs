//! Deterministic stand-in provider serving stored responses.
//!
//! Fixtures are JSON Lines records:
//!
//! ```json
//! {"question_id": 1297, "tag": "decompose", "response": "{\"Subquestions\": [...]}"}
//! ```
//!
//! Several records with the same `(tag, question_id)` form a sequence:
//! attempt `n` gets the `n`-th response, and the last one repeats.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BackendError, CallContext, CompletionRequest, Provider, ProviderReply};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub question_id: Value,
    pub tag: String,
    pub response: String,
}

pub fn replay_key(tag: &str, example: &str) -> String {
    format!("{tag}/{example}")
}

fn id_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

#[derive(Debug, Default, Clone)]
pub struct ReplayProvider {
    book: BTreeMap<String, Vec<String>>,
}

impl ReplayProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tag: &str, example: &str, response: impl Into<String>) {
        self.book
            .entry(replay_key(tag, example))
            .or_default()
            .push(response.into());
    }

    /// Loads a `.jsonl` file, or every `.jsonl` file in a directory in name
    /// order.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let mut files = Vec::new();
        if path.is_dir() {
            let rd = fs::read_dir(path)
                .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
            for entry in rd.filter_map(Result::ok) {
                let p = entry.path();
                if p.extension().is_some_and(|x| x == "jsonl") {
                    files.push(p);
                }
            }
            files.sort();
        } else {
            files.push(path.to_path_buf());
        }
        let mut provider = ReplayProvider::new();
        for file in files {
            let text = fs::read_to_string(&file)
                .map_err(|e| BackendError::Config(format!("{}: {e}", file.display())))?;
            for (n, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let rec: ReplayRecord = serde_json::from_str(line).map_err(|e| {
                    BackendError::Config(format!("{}:{}: {e}", file.display(), n + 1))
                })?;
                provider.insert(&rec.tag, &id_text(&rec.question_id), rec.response);
            }
        }
        Ok(provider)
    }

    pub fn len(&self) -> usize {
        self.book.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.book.is_empty()
    }
}

impl Provider for ReplayProvider {
    fn id(&self) -> &str {
        "replay"
    }

    fn model(&self) -> &str {
        "fixtures"
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn complete(
        &self,
        req: &CompletionRequest,
        ctx: &CallContext<'_>,
    ) -> Result<ProviderReply, BackendError> {
        let key = replay_key(&req.tag, ctx.example);
        let responses = self
            .book
            .get(&key)
            .ok_or_else(|| BackendError::MissingFixture { key: key.clone() })?;
        let idx = (ctx.attempt as usize).min(responses.len() - 1);
        Ok(ProviderReply {
            text: responses[idx].clone(),
            prompt_tokens: None,
            completion_tokens: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serves_fixture_verbatim_and_sequences() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        fs::write(
            &path,
            concat!(
                r#"{"question_id": 1297, "tag": "decompose", "response": "first"}"#,
                "\n",
                r#"{"question_id": "1297", "tag": "decompose", "response": "second"}"#,
                "\n"
            ),
        )
        .unwrap();
        let p = ReplayProvider::load(dir.path()).unwrap();
        let req = CompletionRequest::new("decompose", "prompt");
        let at = |attempt| p.complete(&req, &CallContext { example: "1297", attempt }).unwrap().text;
        assert_eq!(at(0), "first");
        assert_eq!(at(1), "second");
        assert_eq!(at(5), "second");
    }

    #[test]
    fn missing_fixture_names_key() {
        let p = ReplayProvider::new();
        let req = CompletionRequest::new("keywords", "prompt");
        let err = p
            .complete(&req, &CallContext { example: "7", attempt: 0 })
            .unwrap_err();
        assert!(err.to_string().contains("keywords/7"), "{err}");
    }
}
