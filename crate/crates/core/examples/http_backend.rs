//! Serves an (untrained) toy model over the HTTP wire protocol and checks
//! that the remote client sees the same answers as the in-process backend.
//!
//! ```bash
//! cargo run --release --example http_backend
//! ```

use std::sync::Arc;

use conflict_probe::backend::{serve, Backend, HttpBackend, ModuleKind, ToyBackend};
use conflict_probe::toyformer::{ToyConfig, ToyModel, ToyState, Vocab};

fn main() -> anyhow::Result<()> {
    let corpus = vec![
        "Harare is the capital of Zimbabwe".to_string(),
        "The capital of Zimbabwe is Harare".to_string(),
    ];
    let vocab = Vocab::from_corpus(&corpus);
    let state = ToyState::init(ToyConfig::default(), vocab.len())?;
    let direct = Arc::new(ToyBackend::new(ToyModel::new(state, vocab), "toy-untrained"));

    let server = serve(direct.clone(), "127.0.0.1:0")?;
    let remote = HttpBackend::new(server.url());
    println!("serving on {}", server.url());

    let meta = remote.meta()?;
    println!(
        "model {}: {} layers, dims mlp_l1={} mlp_l2={} mhsa={}",
        meta.model_name, meta.num_layers, meta.dims.mlp_l1, meta.dims.mlp_l2, meta.dims.mhsa
    );

    let prompt = "The capital of Zimbabwe is";
    let a = direct.generate_greedy(prompt, 4)?;
    let b = remote.generate_greedy(prompt, 4)?;
    println!("generate: direct {:?}, remote {:?}", a.text, b.text);

    let candidates = vec![" Harare".to_string(), " Zimbabwe".to_string()];
    let a = direct.score_candidates(prompt, &candidates)?;
    let b = remote.score_candidates(prompt, &candidates)?;
    for (c, (x, y)) in candidates.iter().zip(a.iter().zip(&b)) {
        println!("score {c:?}: direct {x:.6e}, remote {y:.6e}");
    }

    let tokens = remote.tokenize_with_offsets(prompt)?;
    let pieces: Vec<String> = tokens
        .iter()
        .map(|t| format!("{}[{}..{}]", t.text, t.char_start, t.char_end))
        .collect();
    println!("tokens: {}", pieces.join(" "));

    let last = tokens.len() - 1;
    let a = direct.capture_activations(prompt, &[last], &[0], &[ModuleKind::MlpL2])?;
    let b = remote.capture_activations(prompt, &[last], &[0], &[ModuleKind::MlpL2])?;
    let max_diff = a[0]
        .vector
        .iter()
        .zip(&b[0].vector)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max);
    println!("layer 0 MLP-L2 at the last token: max |direct - remote| = {max_diff:e}");

    server.shutdown();
    Ok(())
}
