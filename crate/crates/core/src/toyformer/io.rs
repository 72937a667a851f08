//! Model directory: `manifest.json` plus one raw little-endian f32 file per
//! parameter tensor.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{LayerParams, ToyConfig, ToyState};
use super::tokenizer::Vocab;
use super::ToyModel;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "toyformer-v1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    file: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ToyConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

impl ToyModel {
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::new();
        for (name, t) in self.state.tensors() {
            let file = format!("{name}.f32");
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for &v in t.iter() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let path = dir.join(&file);
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            tensors.push(TensorEntry {
                name,
                file,
                rows: t.nrows(),
                cols: t.ncols(),
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            config: self.state.config,
            vocab: self.vocab.tokens().to_vec(),
            tensors,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT {
            return Err(Error::Config(format!(
                "unsupported model format `{}`",
                manifest.format
            )));
        }
        let vocab = Vocab::from_tokens(manifest.vocab);
        let config = manifest.config;
        config.validate()?;
        // Shapes come from a freshly laid-out state; the manifest must agree.
        let mut state = skeleton(config, vocab.len());
        for (name, tensor) in state.tensors_mut() {
            let entry = manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Config(format!("manifest lacks tensor `{name}`")))?;
            if (entry.rows, entry.cols) != tensor.dim() {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {}x{}, expected {:?}",
                    entry.rows,
                    entry.cols,
                    tensor.dim()
                )));
            }
            let tpath = dir.join(&entry.file);
            let bytes = std::fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
            if bytes.len() != tensor.len() * 4 {
                return Err(Error::Config(format!(
                    "tensor file `{}` has {} bytes, expected {}",
                    entry.file,
                    bytes.len(),
                    tensor.len() * 4
                )));
            }
            for (dst, chunk) in tensor.iter_mut().zip(bytes.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk")) as f64;
            }
        }
        Ok(ToyModel::new(state, vocab))
    }
}

fn skeleton(config: ToyConfig, vocab: usize) -> ToyState {
    let d = config.d_model;
    let dm = config.d_mlp;
    let z = |r, c| Array2::zeros((r, c));
    ToyState {
        config,
        embed: z(vocab, d),
        pos: z(config.context_len, d),
        layers: (0..config.num_layers)
            .map(|_| LayerParams {
                w_q: z(d, d),
                w_k: z(d, d),
                w_v: z(d, d),
                w_o: z(d, d),
                ln_gain: z(1, d),
                ln_bias: z(1, d),
                w_mlp: z(d, dm),
                w_proj: z(dm, d),
            })
            .collect(),
        unembed: z(d, vocab),
    }
}
