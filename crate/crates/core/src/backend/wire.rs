//! JSON bodies of the backend wire protocol.
//!
//! | method | path              | request                   | response             |
//! |--------|-------------------|---------------------------|----------------------|
//! | GET    | `/v1/meta`        | -                         | [`BackendMeta`]      |
//! | POST   | `/v1/generate`    | [`GenerateRequest`]       | [`GenerateResponse`] |
//! | POST   | `/v1/score`       | [`ScoreRequest`]          | [`ScoreResponse`]    |
//! | POST   | `/v1/activations` | [`ActivationsRequest`]    | [`ActivationsResponse`] |
//! | POST   | `/v1/tokenize`    | [`TokenizeRequest`]       | [`TokenizeResponse`] |
//!
//! Token offsets on the wire count Unicode scalar values, not bytes.
//! Activation vectors are 32-bit floats.

use serde::{Deserialize, Serialize};

use super::{ModuleKind, PositionActivation, TokenSpan};
use crate::error::{Error, Result};

pub use super::BackendMeta as MetaResponse;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireToken {
    pub id: u32,
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
    pub tokens: Vec<WireToken>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub continuations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationsRequest {
    pub prompt: String,
    pub positions: Vec<usize>,
    pub layers: Vec<usize>,
    pub modules: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireActivation {
    pub layer: usize,
    pub module: String,
    pub position: usize,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationsResponse {
    pub records: Vec<WireActivation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizeRequest {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizeResponse {
    pub tokens: Vec<WireToken>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: String,
}

/// Byte offset → scalar-value offset.
pub fn byte_to_char(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].chars().count()
}

/// Scalar-value offset → byte offset; offsets past the end clamp to `text.len()`.
pub fn char_to_byte(text: &str, ch: usize) -> usize {
    text.char_indices().nth(ch).map_or(text.len(), |(b, _)| b)
}

pub fn tokens_to_wire(text: &str, spans: &[TokenSpan]) -> Vec<WireToken> {
    spans
        .iter()
        .map(|s| WireToken {
            id: s.token_id,
            text: s.text.clone(),
            start: byte_to_char(text, s.char_start),
            end: byte_to_char(text, s.char_end),
        })
        .collect()
}

pub fn tokens_from_wire(text: &str, tokens: Vec<WireToken>) -> Vec<TokenSpan> {
    tokens
        .into_iter()
        .map(|t| TokenSpan {
            token_id: t.id,
            text: t.text,
            char_start: char_to_byte(text, t.start),
            char_end: char_to_byte(text, t.end),
        })
        .collect()
}

pub fn activation_to_wire(a: PositionActivation) -> WireActivation {
    WireActivation {
        layer: a.layer,
        module: a.module.wire_name().to_string(),
        position: a.position,
        vector: a.vector,
    }
}

pub fn activation_from_wire(a: WireActivation) -> Result<PositionActivation> {
    Ok(PositionActivation {
        layer: a.layer,
        module: a.module.parse::<ModuleKind>()?,
        position: a.position,
        vector: a.vector,
    })
}

pub(crate) fn non_finite(v: &[f32]) -> Option<Error> {
    v.iter()
        .any(|x| !x.is_finite())
        .then(|| Error::Backend("activation vector contains non-finite values".into()))
}
