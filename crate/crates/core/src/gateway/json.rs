use serde_json::Value;

use super::GatewayError;

/// Extracts the first well-formed JSON object or array from a model reply,
/// skipping code fences and any prose around it.
pub fn parse_json_payload(text: &str) -> Result<Value, GatewayError> {
    for (start, c) in text.char_indices() {
        if c != '{' && c != '[' {
            continue;
        }
        let mut values = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        if let Some(Ok(value)) = values.next() {
            return Ok(value);
        }
    }
    Err(GatewayError::Parse(text.to_string()))
}
