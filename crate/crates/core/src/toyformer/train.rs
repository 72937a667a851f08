use ndarray::Zip;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ToyConfig, ToyState};
use super::tokenizer::{Vocab, EOS_ID};
use super::ToyModel;
use crate::error::{Error, Result};

/// Optimizer settings. Updates are Adam steps with a fixed learning rate and
/// a seeded, single-threaded batch order, so a run is bitwise reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop early once an epoch's mean loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 80,
            batch_size: 32,
            learning_rate: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            target_loss: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs_run: usize,
    /// Mean loss of the final epoch.
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

struct Adam {
    m: ToyState,
    v: ToyState,
    t: i32,
}

impl Adam {
    fn new(state: &ToyState) -> Self {
        Adam {
            m: state.zeros_like(),
            v: state.zeros_like(),
            t: 0,
        }
    }

    fn step(&mut self, state: &mut ToyState, grad: &ToyState, o: &TrainOptions) {
        self.t += 1;
        let bc1 = 1.0 - o.beta1.powi(self.t);
        let bc2 = 1.0 - o.beta2.powi(self.t);
        let grads = grad.tensors();
        let params = state.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((( _, p), (_, g)), (_, m)), (_, v)) in params.into_iter().zip(grads).zip(ms).zip(vs) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = o.beta1 * *m + (1.0 - o.beta1) * g;
                *v = o.beta2 * *v + (1.0 - o.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= o.learning_rate * mhat / (vhat.sqrt() + o.eps);
            });
        }
    }
}

/// Trains a fresh model on `corpus` (one training sequence per entry, each
/// terminated by `<eos>`). The vocabulary is built from the corpus.
pub fn train(
    config: ToyConfig,
    corpus: &[String],
    options: &TrainOptions,
) -> Result<(ToyModel, TrainReport)> {
    let vocab = Vocab::from_corpus(corpus);
    let mut state = ToyState::init(config, vocab.len())?;
    let report = train_state(&mut state, &vocab, corpus, options)?;
    Ok((ToyModel::new(state, vocab), report))
}

/// Continues training `state` in place.
pub fn train_state(
    state: &mut ToyState,
    vocab: &Vocab,
    corpus: &[String],
    options: &TrainOptions,
) -> Result<TrainReport> {
    if options.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut seqs = Vec::with_capacity(corpus.len());
    for line in corpus {
        let mut ids = vocab.encode(line)?;
        ids.push(EOS_ID);
        if ids.len() > state.config.context_len {
            return Err(Error::ContextOverflow {
                len: ids.len(),
                max: state.config.context_len,
            });
        }
        if ids.len() >= 2 {
            seqs.push(ids);
        }
    }
    if seqs.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed ^ 0x5eed_0f_7a1e);
    let mut adam = Adam::new(state);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut epoch_losses = Vec::new();
    let mut steps = 0;
    for _epoch in 0..options.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(options.batch_size) {
            let batch: Vec<&[u32]> = chunk.iter().map(|&i| seqs[i].as_slice()).collect();
            let (loss, grad) = state.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step: steps, loss });
            }
            adam.step(state, &grad, options);
            steps += 1;
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        epoch_losses.push(mean);
        if options.target_loss.is_some_and(|t| mean < t) {
            break;
        }
    }
    state.snap_to_f32();
    if !state.all_finite() {
        return Err(Error::Diverged {
            step: steps,
            loss: f64::NAN,
        });
    }
    Ok(TrainReport {
        steps,
        epochs_run: epoch_losses.len(),
        final_loss: *epoch_losses.last().unwrap_or(&f64::NAN),
        epoch_losses,
    })
}
