//! Chat-completion provider speaking the common JSON-over-HTTPS shape.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, CallContext, CompletionRequest, Provider, ProviderReply};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the API key. Defaults to
    /// `SCHEMALINK_API_KEY_<NAME>`.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
}

fn default_timeout_s() -> u64 {
    120
}

pub fn default_key_env(name: &str) -> String {
    let suffix: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect();
    format!("SCHEMALINK_API_KEY_{suffix}")
}

pub struct ChatCompletionProvider {
    name: String,
    endpoint: String,
    model: String,
    api_key: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for ChatCompletionProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatCompletionProvider")
            .field("name", &self.name)
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .finish_non_exhaustive()
    }
}

impl ChatCompletionProvider {
    /// Resolves the credential from the environment; a missing key is a
    /// configuration error raised before any work starts.
    pub fn from_config(name: &str, cfg: &ProviderConfig) -> Result<Self, BackendError> {
        let var = cfg.api_key_env.clone().unwrap_or_else(|| default_key_env(name));
        let api_key = std::env::var(&var)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| {
                BackendError::Config(format!("provider `{name}`: environment variable {var} is not set"))
            })?;
        Ok(Self::new(name, &cfg.base_url, &cfg.model, api_key, Duration::from_secs(cfg.timeout_s)))
    }

    pub fn new(name: &str, base_url: &str, model: &str, api_key: String, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        ChatCompletionProvider {
            name: name.to_string(),
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key,
            agent,
        }
    }
}

pub(crate) fn request_body(model: &str, req: &CompletionRequest) -> Value {
    json!({
        "model": model,
        "messages": [{"role": "user", "content": req.prompt}],
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
        "n": 1,
    })
}

pub(crate) fn parse_reply(body: &str) -> Result<ProviderReply, BackendError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::Transport(format!("invalid response body: {e}")))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Transport("response has no choices[0].message.content".into()))?;
    Ok(ProviderReply {
        text: text.to_string(),
        prompt_tokens: v.pointer("/usage/prompt_tokens").and_then(Value::as_u64),
        completion_tokens: v.pointer("/usage/completion_tokens").and_then(Value::as_u64),
    })
}

impl Provider for ChatCompletionProvider {
    fn id(&self) -> &str {
        &self.name
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn complete(
        &self,
        req: &CompletionRequest,
        _ctx: &CallContext<'_>,
    ) -> Result<ProviderReply, BackendError> {
        let body = request_body(&self.model, req).to_string();
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .header("Content-Type", "application/json")
            .send(body.as_bytes())
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Provider {
                status,
                message: text.chars().take(500).collect(),
            });
        }
        parse_reply(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_uses_single_sample_and_temperature() {
        let req = CompletionRequest::new("tf_tables", "hi");
        let body = request_body("gpt-4o-mini", &req);
        assert_eq!(body["n"], 1);
        assert_eq!(body["temperature"], 0.3);
        assert_eq!(body["messages"][0]["content"], "hi");
        assert_eq!(body["model"], "gpt-4o-mini");
    }

    #[test]
    fn reply_extracts_text_and_usage() {
        let r = parse_reply(
            r#"{"choices":[{"message":{"role":"assistant","content":"{\"a\":1}"}}],
                "usage":{"prompt_tokens":10,"completion_tokens":3}}"#,
        )
        .unwrap();
        assert_eq!(r.text, "{\"a\":1}");
        assert_eq!(r.prompt_tokens, Some(10));
        assert_eq!(r.completion_tokens, Some(3));
        assert!(parse_reply("{}").is_err());
    }

    #[test]
    fn key_env_name() {
        assert_eq!(default_key_env("open-ai"), "SCHEMALINK_API_KEY_OPEN_AI");
    }

    #[test]
    fn missing_credential_is_config_error() {
        let cfg = ProviderConfig {
            base_url: "http://127.0.0.1:9".into(),
            model: "m".into(),
            api_key_env: Some("SCHEMALINK_TEST_KEY_THAT_IS_NOT_SET".into()),
            requests_per_minute: None,
            timeout_s: 1,
        };
        let err = ChatCompletionProvider::from_config("x", &cfg).unwrap_err();
        assert!(matches!(err, BackendError::Config(_)));
    }
}
