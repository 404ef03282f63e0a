//! Message wire format.
//!
//! Every message is a UTF-8 JSON object with a `"type"` discriminator
//! (`task`, `status`, `result`, `error`). Keys are written in
//! lexicographic order with no insignificant whitespace, so encoding a
//! given message always yields the same bytes.

use thiserror::Error;

use super::{Message, ModelError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("message is not valid UTF-8")]
    NotUtf8,
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error("message has no \"type\" field")]
    MissingType,
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("missing field {0}")]
    MissingField(String),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

const KNOWN_TYPES: [&str; 4] = ["task", "status", "result", "error"];

/// Encodes a message to its canonical bytes.
pub fn encode_message(message: &Message) -> Result<Vec<u8>, ModelError> {
    if let Message::Task(spec) = message {
        spec.params.check_encodable()?;
    }
    message.validate()?;
    // Routing through `Value` sorts object keys (BTreeMap-backed maps).
    let value = serde_json::to_value(message).map_err(|e| ModelError::Encoding(e.to_string()))?;
    serde_json::to_vec(&value).map_err(|e| ModelError::Encoding(e.to_string()))
}

pub fn decode_message(raw: &[u8]) -> Result<Message, DecodeError> {
    let text = std::str::from_utf8(raw).map_err(|_| DecodeError::NotUtf8)?;
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let kind = match value.get("type") {
        Some(serde_json::Value::String(kind)) => kind.clone(),
        Some(_) => return Err(DecodeError::InvalidField("type must be a string".into())),
        None if value.is_object() => return Err(DecodeError::MissingType),
        None => return Err(DecodeError::Malformed("expected a JSON object".into())),
    };
    if !KNOWN_TYPES.contains(&kind.as_str()) {
        return Err(DecodeError::UnknownType(kind));
    }
    let message: Message = serde_json::from_value(value).map_err(classify)?;
    message
        .validate()
        .map_err(|e| DecodeError::Invariant(e.to_string()))?;
    Ok(message)
}

fn classify(err: serde_json::Error) -> DecodeError {
    let text = err.to_string();
    if let Some(rest) = text.strip_prefix("missing field `") {
        if let Some(end) = rest.find('`') {
            return DecodeError::MissingField(rest[..end].to_string());
        }
    }
    if text.starts_with("invalid type") || text.starts_with("invalid value") {
        DecodeError::InvalidField(text)
    } else {
        DecodeError::Invariant(text)
    }
}
