use std::path::Path;

use super::{Backend, BackendMeta, Generation, ModuleDims, ModuleKind, PositionActivation, TokenSpan};
use crate::error::Result;
use crate::toyformer::ToyModel;

/// The in-crate transformer behind the [`Backend`] interface.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    model: ToyModel,
    name: String,
}

impl ToyBackend {
    pub fn new(model: ToyModel, name: impl Into<String>) -> Self {
        ToyBackend {
            model,
            name: name.into(),
        }
    }

    /// Loads a model directory; the model name is the directory's file name.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let model = ToyModel::load(dir)?;
        let name = dir
            .file_name()
            .map(|n| format!("toy/{}", n.to_string_lossy()))
            .unwrap_or_else(|| "toy".to_string());
        Ok(Self::new(model, name))
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }
}

impl Backend for ToyBackend {
    fn meta(&self) -> Result<BackendMeta> {
        let c = self.model.config();
        Ok(BackendMeta {
            model_name: self.name.clone(),
            num_layers: c.num_layers,
            dims: ModuleDims {
                mlp_l1: c.d_mlp,
                mlp_l2: c.d_model,
                mhsa: c.d_model,
            },
        })
    }

    fn generate_greedy(&self, prompt: &str, max_new_tokens: usize) -> Result<Generation> {
        let (text, tokens) = self.model.generate_greedy(prompt, max_new_tokens)?;
        Ok(Generation { text, tokens })
    }

    fn score_logprobs(&self, prompt: &str, continuations: &[String]) -> Result<Vec<f64>> {
        self.model.score_logprobs(prompt, continuations)
    }

    fn capture_activations(
        &self,
        prompt: &str,
        positions: &[usize],
        layers: &[usize],
        modules: &[ModuleKind],
    ) -> Result<Vec<PositionActivation>> {
        self.model.capture(prompt, positions, layers, modules)
    }

    fn tokenize_with_offsets(&self, text: &str) -> Result<Vec<TokenSpan>> {
        self.model.tokenize_with_offsets(text)
    }
}
