//! Uniform access to a decoder-only model: greedy generation, continuation
//! scoring, tokenization with offsets, and activation capture.
//!
//! Two implementations ship with the crate: [`ToyBackend`] runs the in-crate
//! transformer, [`HttpBackend`] talks to an external model server over the
//! JSON wire protocol in [`wire`]. [`serve`] exposes any backend over that
//! same protocol.

mod http;
mod server;
mod toy;
pub mod wire;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use http::HttpBackend;
pub use server::{serve, ServerHandle};
pub use toy::ToyBackend;

/// Environment variable consulted for the base URL of an HTTP backend.
pub const BACKEND_URL_ENV: &str = "CONFLICT_PROBE_BACKEND_URL";

/// Greedy decoding budget used throughout the pipeline.
pub const DEFAULT_MAX_NEW_TOKENS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModuleKind {
    /// Post-nonlinearity output of the first MLP layer.
    #[serde(rename = "mlp_l1")]
    MlpL1,
    /// MLP block output.
    #[serde(rename = "mlp_l2")]
    MlpL2,
    /// Attention block output before the residual addition.
    #[serde(rename = "mhsa")]
    Mhsa,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 3] = [ModuleKind::MlpL1, ModuleKind::MlpL2, ModuleKind::Mhsa];

    pub fn wire_name(self) -> &'static str {
        match self {
            ModuleKind::MlpL1 => "mlp_l1",
            ModuleKind::MlpL2 => "mlp_l2",
            ModuleKind::Mhsa => "mhsa",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ModuleKind::MlpL1 => "MLP-L1",
            ModuleKind::MlpL2 => "MLP-L2",
            ModuleKind::Mhsa => "MHSA",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ModuleKind::MlpL1 => 0,
            ModuleKind::MlpL2 => 1,
            ModuleKind::Mhsa => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mlp_l1" => Ok(ModuleKind::MlpL1),
            "mlp_l2" => Ok(ModuleKind::MlpL2),
            "mhsa" => Ok(ModuleKind::Mhsa),
            _ => Err(Error::Config(format!("unknown module kind `{s}`"))),
        }
    }
}

/// Which prompt element an activation is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    /// Last token of the counterfactual object in the statement.
    Object,
    /// Last token of the subject inside the query.
    SubjectQ,
    /// Final token of the query (the relation).
    RelationQ,
    /// First token of the prompt; a control.
    First,
}

impl TokenRole {
    pub const ALL: [TokenRole; 4] = [
        TokenRole::Object,
        TokenRole::SubjectQ,
        TokenRole::RelationQ,
        TokenRole::First,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TokenRole::Object => "object",
            TokenRole::SubjectQ => "subject_q",
            TokenRole::RelationQ => "relation_q",
            TokenRole::First => "first",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            TokenRole::Object => 0,
            TokenRole::SubjectQ => 1,
            TokenRole::RelationQ => 2,
            TokenRole::First => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for TokenRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TokenRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TokenRole::ALL
            .into_iter()
            .find(|r| r.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown token role `{s}`")))
    }
}

/// Activation width of each module kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleDims {
    pub mlp_l1: usize,
    pub mlp_l2: usize,
    pub mhsa: usize,
}

impl ModuleDims {
    pub fn get(&self, module: ModuleKind) -> usize {
        match module {
            ModuleKind::MlpL1 => self.mlp_l1,
            ModuleKind::MlpL2 => self.mlp_l2,
            ModuleKind::Mhsa => self.mhsa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendMeta {
    pub model_name: String,
    pub num_layers: usize,
    pub dims: ModuleDims,
}

impl BackendMeta {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Backend("backend reports zero layers".into()));
        }
        if ModuleKind::ALL.iter().any(|&m| self.dims.get(m) == 0) {
            return Err(Error::Backend("backend reports a zero module dimension".into()));
        }
        Ok(())
    }
}

/// One token with its byte range in the text it was cut from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub token_id: u32,
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub tokens: Vec<TokenSpan>,
}

/// A module output at one prompt position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionActivation {
    pub layer: usize,
    pub module: ModuleKind,
    pub position: usize,
    pub vector: Vec<f32>,
}

/// A module output addressed by example, layer, module, and token role.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub example_id: u32,
    pub layer: u16,
    pub module: ModuleKind,
    pub role: TokenRole,
    pub vector: Vec<f32>,
}

pub trait Backend: Send + Sync {
    fn meta(&self) -> Result<BackendMeta>;

    /// Argmax decoding of at most `max_new_tokens` tokens.
    fn generate_greedy(&self, prompt: &str, max_new_tokens: usize) -> Result<Generation>;

    /// Joint log-probability of each continuation given the prompt.
    fn score_logprobs(&self, prompt: &str, continuations: &[String]) -> Result<Vec<f64>>;

    fn capture_activations(
        &self,
        prompt: &str,
        positions: &[usize],
        layers: &[usize],
        modules: &[ModuleKind],
    ) -> Result<Vec<PositionActivation>>;

    fn tokenize_with_offsets(&self, text: &str) -> Result<Vec<TokenSpan>>;

    /// Joint probability of each candidate's token sequence continuing the
    /// prompt, without length normalization.
    fn score_candidates(&self, prompt: &str, candidates: &[String]) -> Result<Vec<f64>> {
        if candidates.is_empty() {
            return Err(Error::Backend("no candidates to score".into()));
        }
        if let Some(c) = candidates.iter().find(|c| c.trim().is_empty()) {
            return Err(Error::Backend(format!("empty candidate `{c}`")));
        }
        Ok(self
            .score_logprobs(prompt, candidates)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }
}

/// Where to find a backend: `toy:<model-dir>` or `http:<base-url>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Toy(PathBuf),
    Http(String),
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(dir) = s.strip_prefix("toy:") {
            Ok(BackendSpec::Toy(PathBuf::from(dir)))
        } else if let Some(url) = s.strip_prefix("http:") {
            // `http:http://host` and `http://host` are both accepted.
            if url.starts_with("//") {
                Ok(BackendSpec::Http(s.to_string()))
            } else {
                Ok(BackendSpec::Http(url.to_string()))
            }
        } else if s.starts_with("https://") {
            Ok(BackendSpec::Http(s.to_string()))
        } else {
            Err(Error::Config(format!(
                "backend must be `toy:<model-dir>` or `http:<base-url>`, got `{s}`"
            )))
        }
    }
}

impl BackendSpec {
    /// Uses `explicit` when given, otherwise the URL in
    /// `CONFLICT_PROBE_BACKEND_URL`.
    pub fn resolve(explicit: Option<&str>) -> Result<Self> {
        match explicit {
            Some(s) => s.parse(),
            None => match std::env::var(BACKEND_URL_ENV) {
                Ok(url) if !url.trim().is_empty() => Ok(BackendSpec::Http(url)),
                _ => Err(Error::Config(format!(
                    "no backend given: pass --backend or set {BACKEND_URL_ENV}"
                ))),
            },
        }
    }

    pub fn open(&self) -> Result<Box<dyn Backend>> {
        match self {
            BackendSpec::Toy(dir) => Ok(Box::new(ToyBackend::load(dir)?)),
            BackendSpec::Http(url) => Ok(Box::new(HttpBackend::new(url))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_backend_specs() {
        assert_eq!(
            "toy:models/a".parse::<BackendSpec>().unwrap(),
            BackendSpec::Toy("models/a".into())
        );
        assert_eq!(
            "http:http://127.0.0.1:8080".parse::<BackendSpec>().unwrap(),
            BackendSpec::Http("http://127.0.0.1:8080".into())
        );
        assert_eq!(
            "http://127.0.0.1:8080".parse::<BackendSpec>().unwrap(),
            BackendSpec::Http("http://127.0.0.1:8080".into())
        );
        assert!("gpu:foo".parse::<BackendSpec>().is_err());
    }

    #[test]
    fn module_and_role_names_round_trip() {
        for m in ModuleKind::ALL {
            assert_eq!(m.wire_name().parse::<ModuleKind>().unwrap(), m);
            assert_eq!(ModuleKind::from_code(m.code()), Some(m));
        }
        assert_eq!("MLP-L1".parse::<ModuleKind>().unwrap(), ModuleKind::MlpL1);
        for r in TokenRole::ALL {
            assert_eq!(r.name().parse::<TokenRole>().unwrap(), r);
            assert_eq!(TokenRole::from_code(r.code()), Some(r));
        }
    }
}
