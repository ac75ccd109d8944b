//! Tolerant extraction of a JSON object from model output.

use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no JSON object found in response: {snippet}")]
pub struct JsonExtractError {
    pub snippet: String,
}

/// Parses the JSON object a model was asked to return.
///
/// Code fences are stripped first; if the remainder is not valid JSON on its
/// own, the first balanced `{...}` block that parses is used. Trailing
/// commas before `}` or `]` are tolerated.
pub fn parse_json_object(text: &str) -> Result<Value, JsonExtractError> {
    let body = strip_fences(text);
    if let Some(v) = parse_lenient(body) {
        return Ok(v);
    }
    let mut from = 0;
    while let Some(rel) = body[from..].find('{') {
        let start = from + rel;
        match balanced_end(body, start) {
            Some(end) => {
                if let Some(v) = parse_lenient(&body[start..end]) {
                    return Ok(v);
                }
                from = start + 1;
            }
            None => break,
        }
    }
    Err(JsonExtractError {
        snippet: text.chars().take(80).collect(),
    })
}

fn parse_lenient(text: &str) -> Option<Value> {
    serde_json::from_str(text)
        .ok()
        .or_else(|| serde_json::from_str(&drop_trailing_commas(text)).ok())
}

/// Removes commas that are followed (after whitespace) by a closing bracket,
/// leaving string contents alone.
fn drop_trailing_commas(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    for (i, ch) in text.char_indices() {
        if in_string {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
        } else if ch == '"' {
            in_string = true;
        } else if ch == ',' {
            let next = text[i + 1..].trim_start().chars().next();
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(ch);
    }
    out
}

fn strip_fences(text: &str) -> &str {
    let mut s = text.trim();
    if let Some(rest) = s.strip_prefix("```") {
        // drop an info string such as `json`
        s = rest.split_once('\n').map_or("", |(_, body)| body);
        s = s.trim_end();
        if let Some(body) = s.strip_suffix("```") {
            s = body;
        }
    }
    s.trim()
}

/// Byte index one past the brace closing the object opened at `start`.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, ch) in text[start..].char_indices() {
        if in_string {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn fenced_object() {
        assert_eq!(parse_json_object("```json\n{\"a\":1}\n```").unwrap(), json!({"a": 1}));
    }

    #[test]
    fn object_inside_prose() {
        assert_eq!(
            parse_json_object("Here is the result: {\"a\":1} hope that helps").unwrap(),
            json!({"a": 1})
        );
    }

    #[test]
    fn braces_inside_strings_are_ignored() {
        let text = r#"Sure! {"reason": "use } and { carefully", "t": ["x"]} done"#;
        assert_eq!(
            parse_json_object(text).unwrap(),
            json!({"reason": "use } and { carefully", "t": ["x"]})
        );
    }

    #[test]
    fn skips_unparseable_candidates() {
        let text = "{not json} then {\"ok\": true}";
        assert_eq!(parse_json_object(text).unwrap(), json!({"ok": true}));
    }

    #[test]
    fn trailing_commas() {
        assert_eq!(
            parse_json_object(r#"{"t": ["a", "b",], "s": "x,}",}"#).unwrap(),
            json!({"t": ["a", "b"], "s": "x,}"})
        );
    }

    #[test]
    fn no_json_is_an_error() {
        assert!(parse_json_object("no json here").is_err());
        assert!(parse_json_object("{\"unterminated\": ").is_err());
    }

    fn arb_json() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(|n| json!(n)),
            "[ -~{}\"\\\\]{0,12}".prop_map(Value::String),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
                prop::collection::vec(("[a-z ]{1,6}", inner), 0..4)
                    .prop_map(|kv| Value::Object(kv.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn render_then_parse_round_trips(v in arb_json()) {
            prop_assert_eq!(parse_json_object(&v.to_string()).unwrap(), v.clone());
            let pretty = serde_json::to_string_pretty(&v).unwrap();
            prop_assert_eq!(parse_json_object(&format!("```json\n{pretty}\n```")).unwrap(), v);
        }
    }
}
