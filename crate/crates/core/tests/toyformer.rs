use conflict_probe::toyformer::{
    gelu, train, ToyConfig, ToyModel, ToyState, TrainOptions, Vocab,
};
use ndarray::Array2;

fn small_config(seed: u64) -> ToyConfig {
    ToyConfig {
        num_layers: 2,
        d_model: 16,
        d_mlp: 32,
        num_heads: 2,
        context_len: 8,
        seed,
    }
}

/// Straight-loop reimplementation of the forward pass, sharing nothing with
/// the library beyond the parameter values.
struct NaiveForward {
    logits: Vec<Vec<f64>>,
    mhsa: Vec<Vec<Vec<f64>>>,
    mlp_l1: Vec<Vec<Vec<f64>>>,
    mlp_l2: Vec<Vec<Vec<f64>>>,
}

fn matvec(x: &[f64], w: &Array2<f64>) -> Vec<f64> {
    let (r, c) = w.dim();
    assert_eq!(x.len(), r);
    (0..c)
        .map(|j| (0..r).map(|i| x[i] * w[[i, j]]).sum())
        .collect()
}

fn naive_forward(state: &ToyState, tokens: &[u32]) -> NaiveForward {
    let cfg = state.config;
    let d = cfg.d_model;
    let dh = d / cfg.num_heads;
    let n = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| (0..d).map(|j| state.embed[[t as usize, j]] + state.pos[[p, j]]).collect())
        .collect();
    let mut out = NaiveForward {
        logits: vec![],
        mhsa: vec![],
        mlp_l1: vec![],
        mlp_l2: vec![],
    };
    for layer in &state.layers {
        let q: Vec<_> = x.iter().map(|r| matvec(r, &layer.w_q)).collect();
        let k: Vec<_> = x.iter().map(|r| matvec(r, &layer.w_k)).collect();
        let v: Vec<_> = x.iter().map(|r| matvec(r, &layer.w_v)).collect();
        let mut concat = vec![vec![0.0; d]; n];
        for h in 0..cfg.num_heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| {
                        (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..dh {
                    concat[i][h * dh + c] =
                        (0..=i).map(|j| exps[j] / z * v[j][h * dh + c]).sum();
                }
            }
        }
        let a: Vec<_> = concat.iter().map(|r| matvec(r, &layer.w_o)).collect();
        let mut l1s = vec![];
        let mut ms = vec![];
        let mut next = vec![];
        for i in 0..n {
            let r: Vec<f64> = (0..d).map(|j| x[i][j] + a[i][j]).collect();
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let hrow: Vec<f64> = (0..d)
                .map(|j| (r[j] - mean) / (var + 1e-5).sqrt() * layer.ln_gain[[0, j]] + layer.ln_bias[[0, j]])
                .collect();
            let l1: Vec<f64> = matvec(&hrow, &layer.w_mlp).into_iter().map(gelu).collect();
            let m = matvec(&l1, &layer.w_proj);
            next.push((0..d).map(|j| hrow[j] + m[j]).collect::<Vec<_>>());
            l1s.push(l1);
            ms.push(m);
        }
        out.mhsa.push(a);
        out.mlp_l1.push(l1s);
        out.mlp_l2.push(ms);
        x = next;
    }
    out.logits = x.iter().map(|r| matvec(r, &state.unembed)).collect();
    out
}

fn assert_close(a: &Array2<f64>, b: &[Vec<f64>], tol: f64) {
    assert_eq!(a.nrows(), b.len());
    for (i, row) in b.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            assert!((a[[i, j]] - v).abs() < tol, "[{i},{j}] {} vs {v}", a[[i, j]]);
        }
    }
}

#[test]
fn forward_matches_naive_reimplementation() {
    let state = ToyState::init(small_config(3), 11).unwrap();
    let tokens = [1u32, 4, 2, 9, 10, 3];
    let (logits, hooks) = state.forward(&tokens).unwrap();
    let naive = naive_forward(&state, &tokens);
    assert_close(&logits, &naive.logits, 1e-9);
    for l in 0..2 {
        assert_close(&hooks.mhsa[l], &naive.mhsa[l], 1e-9);
        assert_close(&hooks.mlp_l1[l], &naive.mlp_l1[l], 1e-9);
        assert_close(&hooks.mlp_l2[l], &naive.mlp_l2[l], 1e-9);
    }
}

#[test]
fn single_token_shapes() {
    let state = ToyState::init(ToyConfig::default(), 20).unwrap();
    let (logits, hooks) = state.forward(&[5]).unwrap();
    assert_eq!(logits.dim(), (1, 20));
    assert_eq!(hooks.mhsa.len(), 4);
    for l in 0..4 {
        assert_eq!(hooks.mhsa[l].dim(), (1, 64));
        assert_eq!(hooks.mlp_l1[l].dim(), (1, 256));
        assert_eq!(hooks.mlp_l2[l].dim(), (1, 64));
    }
}

#[test]
fn rejects_long_sequences_and_unknown_ids() {
    let state = ToyState::init(small_config(0), 11).unwrap();
    assert!(state.forward(&[1; 9]).is_err());
    assert!(state.forward(&[11]).is_err());
}

#[test]
fn residual_and_mlp_hook_invariants() {
    let state = ToyState::init(ToyConfig::default(), 30).unwrap();
    let tokens: Vec<u32> = (0..12).map(|i| (i * 7 % 30) as u32).collect();
    let (_, hooks) = state.forward(&tokens).unwrap();
    for (l, p) in state.layers.iter().enumerate() {
        // mlp_l2 = mlp_l1 · W_proj
        let recomputed = hooks.mlp_l1[l].dot(&p.w_proj);
        let diff = (&recomputed - &hooks.mlp_l2[l]).mapv(f64::abs);
        assert!(diff.iter().all(|&v| v < 1e-5));

        // X_l = LN(X_{l-1} + A_l) + M_l
        let resid = &hooks.residual[l] + &hooks.mhsa[l];
        let (xhat, _) = conflict_probe::toyformer::normalize_rows(&resid);
        let h = &xhat * &p.ln_gain + &p.ln_bias;
        let x = &h + &hooks.mlp_l2[l];
        let diff = (&x - &hooks.residual[l + 1]).mapv(f64::abs);
        assert!(diff.iter().all(|&v| v < 1e-5));
    }
}

#[test]
fn zero_mlp_weights_give_zero_mlp_output() {
    let mut state = ToyState::init(small_config(1), 11).unwrap();
    for p in &mut state.layers {
        p.w_mlp.fill(0.0);
    }
    let (_, hooks) = state.forward(&[1, 2, 3]).unwrap();
    for l in 0..2 {
        assert!(hooks.mlp_l2[l].iter().all(|&v| v == 0.0));
        let resid = &hooks.residual[l] + &hooks.mhsa[l];
        let (xhat, _) = conflict_probe::toyformer::normalize_rows(&resid);
        let h = &xhat * &state.layers[l].ln_gain + &state.layers[l].ln_bias;
        let diff = (&h - &hooks.residual[l + 1]).mapv(f64::abs);
        assert!(diff.iter().all(|&v| v < 1e-12));
    }
}

#[test]
fn causal_masking() {
    let state = ToyState::init(small_config(5), 11).unwrap();
    let a = [1u32, 2, 3, 4, 5, 6];
    let b = [1u32, 2, 3, 9, 0, 10];
    let (la, _) = state.forward(&a).unwrap();
    let (lb, _) = state.forward(&b).unwrap();
    for t in 0..3 {
        for v in 0..11 {
            assert_eq!(la[[t, v]], lb[[t, v]]);
        }
    }
    assert_ne!(la.row(3), lb.row(3));
}

/// Central finite differences on every parameter entry.
#[test]
fn gradients_match_finite_differences() {
    let state = ToyState::init(small_config(11), 9).unwrap();
    let seqs: Vec<Vec<u32>> = vec![vec![1, 5, 2, 7, 3, 0], vec![8, 4, 4, 6]];
    let batch: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let (_, grad) = state.loss_and_grad(&batch).unwrap();

    let step = 1e-4;
    let mut worst = 0.0f64;
    let grads = grad.tensors();
    let n_tensors = grads.len();
    for ti in 0..n_tensors {
        let (name, g) = &grads[ti];
        for idx in 0..g.len() {
            let analytic = g.as_slice().unwrap()[idx];
            let mut plus = state.clone();
            plus.tensors_mut()[ti].1.as_slice_mut().unwrap()[idx] += step;
            let mut minus = state.clone();
            minus.tensors_mut()[ti].1.as_slice_mut().unwrap()[idx] -= step;
            let lp = plus.loss_and_grad(&batch).unwrap().0;
            let lm = minus.loss_and_grad(&batch).unwrap().0;
            let numeric = (lp - lm) / (2.0 * step);
            let denom = analytic.abs().max(numeric.abs());
            if denom < 1e-7 {
                // Both vanish (e.g. embedding rows of unused tokens).
                assert!((analytic - numeric).abs() < 1e-9, "{name}[{idx}]");
                continue;
            }
            let rel = (analytic - numeric).abs() / denom;
            worst = worst.max(rel);
            assert!(
                rel < 1e-3,
                "{name}[{idx}]: analytic {analytic} numeric {numeric} rel {rel}"
            );
        }
    }
    eprintln!("worst relative gradient error {worst:e}");
}

fn memorize_corpus() -> Vec<String> {
    vec!["alphaton ' s capital city , bravoria".to_string()]
}

#[test]
fn training_is_bitwise_deterministic_and_memorizes() {
    let config = ToyConfig {
        num_layers: 2,
        d_model: 32,
        d_mlp: 64,
        num_heads: 2,
        context_len: 16,
        seed: 7,
    };
    let opts = TrainOptions {
        epochs: 200,
        batch_size: 1,
        target_loss: Some(0.01),
        ..TrainOptions::default()
    };
    let (a, report) = train(config, &memorize_corpus(), &opts).unwrap();
    let (b, _) = train(config, &memorize_corpus(), &opts).unwrap();
    assert_eq!(a, b);
    assert!(report.final_loss < 0.01, "{report:?}");
    let (text, _) = a.generate_greedy("alphaton's capital city,", 10).unwrap();
    assert_eq!(text, "bravoria");
}

#[test]
fn save_load_round_trip() {
    let vocab = Vocab::from_corpus(&["a b c"]);
    let mut state = ToyState::init(small_config(2), vocab.len()).unwrap();
    state.snap_to_f32();
    let model = ToyModel::new(state, vocab);
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let loaded = ToyModel::load(dir.path()).unwrap();
    assert_eq!(loaded, model);
}
