use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{self, *};
use super::{Backend, BackendMeta, Generation, ModuleKind, PositionActivation, TokenSpan};
use crate::error::{Error, Result};

/// Client for a model server speaking the wire protocol.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout_connect(Duration::from_secs(10))
            .timeout(Duration::from_secs(600))
            .build();
        HttpBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base_url)
    }

    fn map_err(&self, e: ureq::Error) -> Error {
        match e {
            ureq::Error::Status(code, resp) => {
                let body = resp.into_string().unwrap_or_default();
                let message = serde_json::from_str::<ErrorResponse>(&body)
                    .map(|e| e.error)
                    .unwrap_or(body);
                Error::Backend(format!("HTTP {code}: {message}"))
            }
            ureq::Error::Transport(t) => Error::BackendUnavailable {
                url: self.base_url.clone(),
                message: t.to_string(),
            },
        }
    }

    fn get<R: DeserializeOwned>(&self, path: &str) -> Result<R> {
        let resp = self.agent.get(&self.url(path)).call().map_err(|e| self.map_err(e))?;
        resp.into_json()
            .map_err(|e| Error::Backend(format!("bad response from {path}: {e}")))
    }

    fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R> {
        let resp = self
            .agent
            .post(&self.url(path))
            .send_json(body)
            .map_err(|e| self.map_err(e))?;
        resp.into_json()
            .map_err(|e| Error::Backend(format!("bad response from {path}: {e}")))
    }
}

impl Backend for HttpBackend {
    fn meta(&self) -> Result<BackendMeta> {
        let meta: MetaResponse = self.get("/v1/meta")?;
        meta.validate()?;
        Ok(meta)
    }

    fn generate_greedy(&self, prompt: &str, max_new_tokens: usize) -> Result<Generation> {
        let resp: GenerateResponse = self.post(
            "/v1/generate",
            &GenerateRequest {
                prompt: prompt.to_string(),
                max_new_tokens,
            },
        )?;
        if resp.tokens.len() > max_new_tokens {
            return Err(Error::Backend(format!(
                "server generated {} tokens, limit was {max_new_tokens}",
                resp.tokens.len()
            )));
        }
        let tokens = wire::tokens_from_wire(&resp.text, resp.tokens);
        Ok(Generation {
            text: resp.text,
            tokens,
        })
    }

    fn score_logprobs(&self, prompt: &str, continuations: &[String]) -> Result<Vec<f64>> {
        let resp: ScoreResponse = self.post(
            "/v1/score",
            &ScoreRequest {
                prompt: prompt.to_string(),
                continuations: continuations.to_vec(),
            },
        )?;
        if resp.logprobs.len() != continuations.len() {
            return Err(Error::Backend(format!(
                "server returned {} scores for {} continuations",
                resp.logprobs.len(),
                continuations.len()
            )));
        }
        Ok(resp.logprobs)
    }

    fn capture_activations(
        &self,
        prompt: &str,
        positions: &[usize],
        layers: &[usize],
        modules: &[ModuleKind],
    ) -> Result<Vec<PositionActivation>> {
        let resp: ActivationsResponse = self.post(
            "/v1/activations",
            &ActivationsRequest {
                prompt: prompt.to_string(),
                positions: positions.to_vec(),
                layers: layers.to_vec(),
                modules: modules.iter().map(|m| m.wire_name().to_string()).collect(),
            },
        )?;
        resp.records
            .into_iter()
            .map(|r| {
                if let Some(e) = wire::non_finite(&r.vector) {
                    return Err(e);
                }
                wire::activation_from_wire(r)
            })
            .collect()
    }

    fn tokenize_with_offsets(&self, text: &str) -> Result<Vec<TokenSpan>> {
        let resp: TokenizeResponse = self.post(
            "/v1/tokenize",
            &TokenizeRequest {
                text: text.to_string(),
            },
        )?;
        Ok(wire::tokens_from_wire(text, resp.tokens))
    }
}
