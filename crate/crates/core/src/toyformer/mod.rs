//! A small from-scratch decoder-only transformer with hook points on the
//! attention output and both MLP layers, plus a deterministic trainer.

mod io;
mod model;
mod tokenizer;
mod train;

pub use model::{
    gelu, gelu_grad, log_softmax, normalize_rows, softmax, ForwardCache, HookBundle, LayerCache,
    LayerParams, ToyConfig, ToyState,
};
pub use tokenizer::{split, Vocab, EOS, EOS_ID};
pub use train::{train, train_state, TrainOptions, TrainReport};

use crate::backend::{ModuleKind, PositionActivation, TokenSpan};
use crate::error::{Error, Result};

/// A trained state together with its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub state: ToyState,
    pub vocab: Vocab,
}

impl ToyModel {
    pub fn new(state: ToyState, vocab: Vocab) -> Self {
        ToyModel { state, vocab }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.state.config
    }

    /// Argmax decoding; stops at `<eos>`, after `max_new_tokens`, or when the
    /// context window is full.
    pub fn generate_greedy(
        &self,
        prompt: &str,
        max_new_tokens: usize,
    ) -> Result<(String, Vec<TokenSpan>)> {
        let mut ids = self.vocab.encode(prompt)?;
        if ids.is_empty() {
            return Err(Error::Backend("prompt is empty".into()));
        }
        let ctx = self.state.config.context_len;
        if ids.len() > ctx {
            return Err(Error::ContextOverflow {
                len: ids.len(),
                max: ctx,
            });
        }
        let prompt_len = ids.len();
        for _ in 0..max_new_tokens {
            if ids.len() >= ctx {
                break;
            }
            let (logits, _) = self.state.forward(&ids)?;
            let last = logits.row(ids.len() - 1);
            let mut best = 0usize;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            if best as u32 == EOS_ID {
                break;
            }
            ids.push(best as u32);
        }
        Ok(self.vocab.decode(&ids[prompt_len..]))
    }

    /// Joint log-probability of each continuation's tokens following `prompt`.
    pub fn score_logprobs(&self, prompt: &str, continuations: &[String]) -> Result<Vec<f64>> {
        let prompt_ids = self.vocab.encode(prompt)?;
        if prompt_ids.is_empty() {
            return Err(Error::Backend("prompt is empty".into()));
        }
        continuations
            .iter()
            .map(|cont| {
                let cont_ids = self.vocab.encode(cont)?;
                if cont_ids.is_empty() {
                    return Err(Error::Backend(format!(
                        "continuation `{cont}` has no tokens"
                    )));
                }
                let mut ids = prompt_ids.clone();
                ids.extend_from_slice(&cont_ids);
                let (logits, _) = self.state.forward(&ids)?;
                let mut total = 0.0;
                for (i, &tok) in cont_ids.iter().enumerate() {
                    let row = prompt_ids.len() + i - 1;
                    total += log_softmax(logits.view(), row)[tok as usize];
                }
                Ok(total)
            })
            .collect()
    }

    /// Module outputs at the requested positions from one forward pass.
    pub fn capture(
        &self,
        prompt: &str,
        positions: &[usize],
        layers: &[usize],
        modules: &[ModuleKind],
    ) -> Result<Vec<PositionActivation>> {
        let ids = self.vocab.encode(prompt)?;
        if ids.is_empty() {
            return Err(Error::Backend("prompt is empty".into()));
        }
        let num_layers = self.state.config.num_layers;
        if let Some(&layer) = layers.iter().find(|&&l| l >= num_layers) {
            return Err(Error::LayerOutOfRange { layer, num_layers });
        }
        if let Some(&position) = positions.iter().find(|&&p| p >= ids.len()) {
            return Err(Error::PositionOutOfRange {
                position,
                len: ids.len(),
            });
        }
        let (_, hooks) = self.state.forward(&ids)?;
        let mut out = Vec::with_capacity(positions.len() * layers.len() * modules.len());
        for &position in positions {
            for &layer in layers {
                for &module in modules {
                    let src = match module {
                        ModuleKind::MlpL1 => &hooks.mlp_l1[layer],
                        ModuleKind::MlpL2 => &hooks.mlp_l2[layer],
                        ModuleKind::Mhsa => &hooks.mhsa[layer],
                    };
                    out.push(PositionActivation {
                        layer,
                        module,
                        position,
                        vector: src.row(position).iter().map(|&v| v as f32).collect(),
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn tokenize_with_offsets(&self, text: &str) -> Result<Vec<TokenSpan>> {
        self.vocab.tokenize(text)
    }
}
