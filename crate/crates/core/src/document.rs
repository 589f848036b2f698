//! Locating JSON documents inside free-form model output.

use serde_json::{Map, Value};

/// The first well-formed JSON object embedded in `raw`, tolerating
/// surrounding prose and code fences.
pub fn first_json_object(raw: &str) -> Option<Map<String, Value>> {
    raw.char_indices().filter(|&(_, c)| c == '{').find_map(|(i, _)| {
        let mut it = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
        match it.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_fenced_object() {
        let raw = "Sure, here it is:\n```json\n{\"a\": {\"b\": 1}}\n```\nDone.";
        let m = first_json_object(raw).unwrap();
        assert_eq!(m["a"]["b"], 1);
    }

    #[test]
    fn skips_broken_prefix() {
        let raw = "{ not json } then {\"ok\": true}";
        assert_eq!(first_json_object(raw).unwrap()["ok"], true);
    }

    #[test]
    fn none_for_prose() {
        assert!(first_json_object("no document here").is_none());
        assert!(first_json_object("[1, 2]").is_none());
    }
}
