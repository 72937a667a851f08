//! Parameters, forward pass, and backward pass of the toy decoder.
//!
//! Each layer applies
//!
//! ```text
//! A      = MHSA(X_prev)                     (causal, no biases)
//! X_mlp  = LayerNorm(X_prev + A)
//! L1     = gelu(X_mlp · W_mlp)
//! M      = L1 · W_proj
//! X      = X_mlp + M
//! ```
//!
//! and the logits are `X_last · W_unembed`. Activations are computed in f64.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub num_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            num_layers: 4,
            d_model: 64,
            d_mlp: 256,
            num_heads: 4,
            context_len: 64,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.d_model == 0 || self.num_heads == 0 || self.context_len == 0
        {
            return Err(Error::Config("toy config sizes must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.d_mlp <= self.d_model {
            return Err(Error::Config(format!(
                "d_mlp {} must exceed d_model {}",
                self.d_mlp, self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    /// Layer-norm gain, shape `1 × d_model`.
    pub ln_gain: Array2<f64>,
    /// Layer-norm bias, shape `1 × d_model`.
    pub ln_bias: Array2<f64>,
    /// `d_model × d_mlp`
    pub w_mlp: Array2<f64>,
    /// `d_mlp × d_model`
    pub w_proj: Array2<f64>,
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyState {
    pub config: ToyConfig,
    /// `vocab × d_model`
    pub embed: Array2<f64>,
    /// `context_len × d_model`
    pub pos: Array2<f64>,
    pub layers: Vec<LayerParams>,
    /// `d_model × vocab`
    pub unembed: Array2<f64>,
}

fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

impl ToyState {
    /// Seeded random initialization.
    pub fn init(config: ToyConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let dm = config.d_mlp;
        let wd = 1.0 / (d as f64).sqrt();
        let embed = normal(&mut rng, vocab_size, d, 0.5);
        let pos = normal(&mut rng, config.context_len, d, 0.5);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                w_q: normal(&mut rng, d, d, wd),
                w_k: normal(&mut rng, d, d, wd),
                w_v: normal(&mut rng, d, d, wd),
                w_o: normal(&mut rng, d, d, wd),
                ln_gain: Array2::ones((1, d)),
                ln_bias: Array2::zeros((1, d)),
                w_mlp: normal(&mut rng, d, dm, wd),
                w_proj: normal(&mut rng, dm, d, 0.5 / (dm as f64).sqrt()),
            })
            .collect();
        let unembed = normal(&mut rng, d, vocab_size, wd);
        Ok(ToyState {
            config,
            embed,
            pos,
            layers,
            unembed,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![("embed".to_string(), &self.embed), ("pos".to_string(), &self.pos)];
        for (l, p) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.attn_q"), &p.w_q));
            out.push((format!("layer{l}.attn_k"), &p.w_k));
            out.push((format!("layer{l}.attn_v"), &p.w_v));
            out.push((format!("layer{l}.attn_o"), &p.w_o));
            out.push((format!("layer{l}.ln_gain"), &p.ln_gain));
            out.push((format!("layer{l}.ln_bias"), &p.ln_bias));
            out.push((format!("layer{l}.mlp_in"), &p.w_mlp));
            out.push((format!("layer{l}.mlp_proj"), &p.w_proj));
        }
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![
            ("embed".to_string(), &mut self.embed),
            ("pos".to_string(), &mut self.pos),
        ];
        for (l, p) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.attn_q"), &mut p.w_q));
            out.push((format!("layer{l}.attn_k"), &mut p.w_k));
            out.push((format!("layer{l}.attn_v"), &mut p.w_v));
            out.push((format!("layer{l}.attn_o"), &mut p.w_o));
            out.push((format!("layer{l}.ln_gain"), &mut p.ln_gain));
            out.push((format!("layer{l}.ln_bias"), &mut p.ln_bias));
            out.push((format!("layer{l}.mlp_in"), &mut p.w_mlp));
            out.push((format!("layer{l}.mlp_proj"), &mut p.w_proj));
        }
        out.push(("unembed".to_string(), &mut self.unembed));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Rounds every parameter to the nearest f32 so that the state survives
    /// an f32 round-trip on disk unchanged.
    pub fn snap_to_f32(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.context_len {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                max: self.config.context_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size()) {
            return Err(Error::UnknownToken(format!("id {bad}")));
        }
        Ok(())
    }

    /// Forward pass over one sequence.
    pub fn forward(&self, tokens: &[u32]) -> Result<(Array2<f64>, HookBundle)> {
        if tokens.is_empty() {
            return Err(Error::Backend("empty token sequence".into()));
        }
        let cache = self.forward_batch(&[tokens])?;
        let hooks = cache.hooks();
        Ok((cache.logits, hooks))
    }

    /// Forward pass over several independent sequences stacked row-wise.
    pub fn forward_batch(&self, seqs: &[&[u32]]) -> Result<ForwardCache> {
        let d = self.config.d_model;
        let mut segments = Vec::with_capacity(seqs.len());
        let mut tokens = Vec::new();
        for seq in seqs {
            self.check_tokens(seq)?;
            let start = tokens.len();
            tokens.extend_from_slice(seq);
            segments.push((start, tokens.len()));
        }
        let rows = tokens.len();
        let mut x = Array2::zeros((rows, d));
        for &(start, end) in &segments {
            for (p, row) in (start..end).enumerate() {
                let mut xr = x.row_mut(row);
                xr.assign(&self.embed.row(tokens[row] as usize));
                xr += &self.pos.row(p);
            }
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for p in &self.layers {
            let cache = self.layer_forward(p, x, &segments);
            x = cache.x_out.clone();
            layers.push(cache);
        }
        let logits = x.dot(&self.unembed);
        Ok(ForwardCache {
            segments,
            tokens,
            layers,
            logits,
        })
    }

    fn layer_forward(&self, p: &LayerParams, x_in: Array2<f64>, segments: &[(usize, usize)]) -> LayerCache {
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = x_in.dot(&p.w_q);
        let k = x_in.dot(&p.w_k);
        let v = x_in.dot(&p.w_v);
        let mut o = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for &(start, end) in segments {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![start..end, cols.clone()]);
                let kh = k.slice(s![start..end, cols.clone()]);
                let vh = v.slice(s![start..end, cols.clone()]);
                let mut scores = qh.dot(&kh.t()) * scale;
                causal_softmax(&mut scores);
                o.slice_mut(s![start..end, cols]).assign(&scores.dot(&vh));
                probs.push(scores);
            }
        }
        let a = o.dot(&p.w_o);
        let resid = &x_in + &a;
        let (xhat, inv_std) = normalize_rows(&resid);
        let h = &xhat * &p.ln_gain + &p.ln_bias;
        let u = h.dot(&p.w_mlp);
        let g = u.mapv(gelu);
        let m = g.dot(&p.w_proj);
        let x_out = &h + &m;
        LayerCache {
            x_in,
            q,
            k,
            v,
            probs,
            o,
            a,
            xhat,
            inv_std,
            h,
            u,
            g,
            m,
            x_out,
        }
    }

    /// Mean next-token cross-entropy of the batch and its gradient.
    pub fn loss_and_grad(&self, seqs: &[&[u32]]) -> Result<(f64, ToyState)> {
        let cache = self.forward_batch(seqs)?;
        let vocab = self.vocab_size();
        let rows = cache.tokens.len();

        let mut count = 0usize;
        let mut loss = 0.0;
        let mut dlogits = Array2::zeros((rows, vocab));
        for &(start, end) in &cache.segments {
            for row in start..end.saturating_sub(1) {
                let target = cache.tokens[row + 1] as usize;
                let logits = cache.logits.row(row);
                let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut dl = dlogits.row_mut(row);
                let mut z = 0.0;
                for (dst, &l) in dl.iter_mut().zip(logits.iter()) {
                    *dst = (l - max).exp();
                    z += *dst;
                }
                dl /= z;
                loss -= (dl[target]).ln();
                dl[target] -= 1.0;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Backend(
                "batch has no next-token targets (all sequences shorter than 2)".into(),
            ));
        }
        let inv = 1.0 / count as f64;
        dlogits *= inv;
        loss *= inv;

        let mut grad = self.zeros_like();
        let x_last = &cache.layers.last().expect("at least one layer").x_out;
        grad.unembed = x_last.t().dot(&dlogits);
        let mut dx = dlogits.dot(&self.unembed.t());

        for (l, (p, c)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            dx = self.layer_backward(p, c, &cache.segments, dx, &mut grad.layers[l]);
        }

        for &(start, end) in &cache.segments {
            for (pidx, row) in (start..end).enumerate() {
                let tok = cache.tokens[row] as usize;
                let dr = dx.row(row);
                let mut e = grad.embed.row_mut(tok);
                e += &dr;
                let mut pr = grad.pos.row_mut(pidx);
                pr += &dr;
            }
        }
        Ok((loss, grad))
    }

    fn layer_backward(
        &self,
        p: &LayerParams,
        c: &LayerCache,
        segments: &[(usize, usize)],
        dx_out: Array2<f64>,
        g: &mut LayerParams,
    ) -> Array2<f64> {
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // MLP branch: x_out = h + gelu(h W_mlp) W_proj
        g.w_proj = c.g.t().dot(&dx_out);
        let dg = dx_out.dot(&p.w_proj.t());
        let du = &dg * &c.u.mapv(gelu_grad);
        g.w_mlp = c.h.t().dot(&du);
        let dh_total = dx_out + du.dot(&p.w_mlp.t());

        // Layer norm: h = xhat * gain + bias
        g.ln_gain = (&dh_total * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        g.ln_bias = dh_total.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dxhat = &dh_total * &p.ln_gain;
        let d = dxhat.ncols() as f64;
        let mut dresid = Array2::zeros(dxhat.raw_dim());
        Zip::from(dresid.rows_mut())
            .and(dxhat.rows())
            .and(c.xhat.rows())
            .and(&c.inv_std)
            .for_each(|mut out, dxr, xr, &inv| {
                let mean_d = dxr.sum() / d;
                let mean_dx = dxr.dot(&xr) / d;
                Zip::from(&mut out)
                    .and(&dxr)
                    .and(&xr)
                    .for_each(|o, &dv, &xv| *o = inv * (dv - mean_d - xv * mean_dx));
            });

        // Attention: resid = x_in + (concat_h P_h V_h) W_o
        let da = &dresid;
        g.w_o = c.o.t().dot(da);
        let d_o = da.dot(&p.w_o.t());
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (si, &(start, end)) in segments.iter().enumerate() {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let probs = &c.probs[si * heads + h];
                let doh = d_o.slice(s![start..end, cols.clone()]);
                let qh = c.q.slice(s![start..end, cols.clone()]);
                let kh = c.k.slice(s![start..end, cols.clone()]);
                let vh = c.v.slice(s![start..end, cols.clone()]);
                let dprobs = doh.dot(&vh.t());
                dv.slice_mut(s![start..end, cols.clone()])
                    .assign(&probs.t().dot(&doh));
                let mut dscores = Array2::zeros(probs.raw_dim());
                Zip::from(dscores.rows_mut())
                    .and(probs.rows())
                    .and(dprobs.rows())
                    .for_each(|mut out, pr, dpr| {
                        let inner = pr.dot(&dpr);
                        Zip::from(&mut out)
                            .and(&pr)
                            .and(&dpr)
                            .for_each(|o, &pv, &dp| *o = pv * (dp - inner) * scale);
                    });
                dq.slice_mut(s![start..end, cols.clone()])
                    .assign(&dscores.dot(&kh));
                dk.slice_mut(s![start..end, cols])
                    .assign(&dscores.t().dot(&qh));
            }
        }
        g.w_q = c.x_in.t().dot(&dq);
        g.w_k = c.x_in.t().dot(&dk);
        g.w_v = c.x_in.t().dot(&dv);
        dresid + dq.dot(&p.w_q.t()) + dk.dot(&p.w_k.t()) + dv.dot(&p.w_v.t())
    }
}

/// Intermediate values of one layer kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub x_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    pub a: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    pub h: Array2<f64>,
    u: Array2<f64>,
    pub g: Array2<f64>,
    pub m: Array2<f64>,
    pub x_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub segments: Vec<(usize, usize)>,
    pub tokens: Vec<u32>,
    pub layers: Vec<LayerCache>,
    /// `rows × vocab`
    pub logits: Array2<f64>,
}

impl ForwardCache {
    fn hooks(&self) -> HookBundle {
        HookBundle {
            mhsa: self.layers.iter().map(|c| c.a.clone()).collect(),
            mlp_l1: self.layers.iter().map(|c| c.g.clone()).collect(),
            mlp_l2: self.layers.iter().map(|c| c.m.clone()).collect(),
            residual: std::iter::once(self.layers[0].x_in.clone())
                .chain(self.layers.iter().map(|c| c.x_out.clone()))
                .collect(),
        }
    }
}

/// Per-layer module outputs of a forward pass, each `seq_len × dim`.
#[derive(Debug, Clone)]
pub struct HookBundle {
    /// Attention block output `A` before the residual addition.
    pub mhsa: Vec<Array2<f64>>,
    /// Post-GeLU first MLP layer.
    pub mlp_l1: Vec<Array2<f64>>,
    /// MLP output `M`.
    pub mlp_l2: Vec<Array2<f64>>,
    /// Residual stream: index 0 is the embedding, index `l + 1` the output of layer `l`.
    pub residual: Vec<Array2<f64>>,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise layer normalization without affine parameters.
pub fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut out = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in out.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv;
    }
    (out, inv_std)
}

fn causal_softmax(scores: &mut Array2<f64>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let max = row
            .iter()
            .take(i + 1)
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                z += *v;
            } else {
                *v = 0.0;
            }
        }
        row /= z;
    }
}

/// Softmax of one logit row.
pub fn softmax(logits: ArrayView2<f64>, row: usize) -> Vec<f64> {
    let r = logits.row(row);
    let max = r.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = r.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Log-softmax of one logit row.
pub fn log_softmax(logits: ArrayView2<f64>, row: usize) -> Vec<f64> {
    let r = logits.row(row);
    let max = r.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + r.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    r.iter().map(|&v| v - lse).collect()
}
