//! Linear probes: per-address datasets, class balancing, and logistic
//! regression on z-scored features.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{ModuleKind, TokenRole};
use crate::error::{Error, Result};
use crate::pipeline::LabeledExample;
use crate::storage::ActivationStore;

/// One probed location: a layer, a module, and a token role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ProbeAddress {
    pub layer: usize,
    pub module: ModuleKind,
    pub role: TokenRole,
}

impl std::fmt::Display for ProbeAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layer {} {} {}", self.layer, self.module.label(), self.role)
    }
}

/// Per-row bookkeeping used by the split logic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub example_id: u32,
    pub group: String,
    pub subject: String,
    pub pk_object: String,
    pub counter_object: String,
}

/// Features with binary targets (CK = 0, PK = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
    pub rows: Vec<RowMeta>,
}

impl ProbeDataset {
    pub fn new(features: Array2<f64>, labels: Vec<u8>, rows: Vec<RowMeta>) -> Result<Self> {
        if features.nrows() != labels.len() || labels.len() != rows.len() {
            return Err(Error::Probe(format!(
                "{} feature rows, {} labels, {} metadata rows",
                features.nrows(),
                labels.len(),
                rows.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Probe("labels must be 0 or 1".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Probe("features contain non-finite values".into()));
        }
        Ok(ProbeDataset {
            features,
            labels,
            rows,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Row counts of class 0 and class 1.
    pub fn class_counts(&self) -> [usize; 2] {
        let pk = self.labels.iter().filter(|&&l| l == 1).count();
        [self.len() - pk, pk]
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.group.as_str()).collect()
    }

    /// The rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ProbeDataset {
        ProbeDataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn with_labels(&self, labels: Vec<u8>) -> Result<ProbeDataset> {
        ProbeDataset::new(self.features.clone(), labels, self.rows.clone())
    }
}

/// One row per CK/PK example, read from the store at `address`.
pub fn assemble_dataset(
    store: &ActivationStore,
    address: ProbeAddress,
    examples: &[LabeledExample],
) -> Result<ProbeDataset> {
    let labeled: Vec<(&LabeledExample, u8)> = examples
        .iter()
        .filter_map(|e| e.label.target().map(|t| (e, t)))
        .collect();
    let dim = store.meta().dims.get(address.module);
    let mut features = Array2::zeros((labeled.len(), dim));
    let mut labels = Vec::with_capacity(labeled.len());
    let mut rows = Vec::with_capacity(labeled.len());
    for (i, (e, target)) in labeled.into_iter().enumerate() {
        let v = store
            .get(e.example_id, address.layer as u16, address.module, address.role)
            .ok_or_else(|| {
                Error::MissingRecord(format!("example {} at {address}", e.example_id))
            })?;
        for (dst, &src) in features.row_mut(i).iter_mut().zip(v) {
            *dst = f64::from(src);
        }
        labels.push(target);
        let c = &e.prompt.counter;
        rows.push(RowMeta {
            example_id: e.example_id,
            group: e.group.clone(),
            subject: c.subject.clone(),
            pk_object: c.pk_object.clone(),
            counter_object: c.counter_object.clone(),
        });
    }
    ProbeDataset::new(features, labels, rows)
}

/// Uniformly subsamples the majority class down to the minority count.
/// Kept rows stay in their original order.
pub fn undersample_balance(ds: &ProbeDataset, seed: u64) -> Result<ProbeDataset> {
    let [n0, n1] = ds.class_counts();
    if n0 == 0 || n1 == 0 {
        return Err(Error::Probe(format!(
            "cannot balance: {n0} CK rows and {n1} PK rows"
        )));
    }
    if n0 == n1 {
        return Ok(ds.clone());
    }
    let (minority, majority) = if n0 < n1 { (0u8, 1u8) } else { (1, 0) };
    let mut major: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == majority).collect();
    major.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    major.truncate(n0.min(n1));
    let mut keep: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == minority).collect();
    keep.extend(major);
    keep.sort_unstable();
    Ok(ds.select(&keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub l2: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            l2: 1e-3,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

/// A trained logistic-regression probe with its standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub iterations: usize,
    pub final_loss: f64,
}

/// Column means and standard deviations; constant columns get scale 1.
pub fn standardization(features: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = features.nrows().max(1) as f64;
    let mut mean = Vec::with_capacity(features.ncols());
    let mut scale = Vec::with_capacity(features.ncols());
    for col in features.columns() {
        let m = col.sum() / n;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let sd = var.sqrt();
        mean.push(m);
        scale.push(if sd > 1e-9 * m.abs().max(1.0) { sd } else { 1.0 });
    }
    (mean, scale)
}

fn standardize(features: &Array2<f64>, mean: &[f64], scale: &[f64]) -> Array2<f64> {
    let mut z = features.clone();
    for mut row in z.rows_mut() {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(scale) {
            *v = (*v - m) / s;
        }
    }
    z
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct Objective<'a> {
    x: &'a Array2<f64>,
    y: Array1<f64>,
    l2: f64,
}

impl Objective<'_> {
    fn loss(&self, w: &Array1<f64>, b: f64) -> f64 {
        let z = self.x.dot(w) + b;
        let n = self.y.len() as f64;
        let data: f64 = z.iter().zip(&self.y).map(|(&z, &y)| softplus(z) - y * z).sum();
        data / n + 0.5 * self.l2 * w.dot(w)
    }

    fn grad(&self, w: &Array1<f64>, b: f64) -> (Array1<f64>, f64) {
        let z = self.x.dot(w) + b;
        let n = self.y.len() as f64;
        let r: Array1<f64> = z.iter().zip(&self.y).map(|(&z, &y)| sigmoid(z) - y).collect();
        let gw = self.x.t().dot(&r) / n + self.l2 * w;
        (gw, r.sum() / n)
    }
}

/// Trains a probe and also returns the loss after every accepted step,
/// starting with the loss at zero weights.
pub fn fit_linear_probe(train: &ProbeDataset, opts: &ProbeOptions) -> Result<(ProbeModel, Vec<f64>)> {
    let [n0, n1] = train.class_counts();
    if n0 < 2 || n1 < 2 {
        return Err(Error::Probe(format!(
            "need at least two rows per class, got {n0} CK and {n1} PK"
        )));
    }
    let (mean, scale) = standardization(&train.features);
    let x = standardize(&train.features, &mean, &scale);
    let obj = Objective {
        x: &x,
        y: train.labels.iter().map(|&l| f64::from(l)).collect(),
        l2: opts.l2,
    };
    let mut w = Array1::<f64>::zeros(train.dim());
    let mut b = 0.0;
    let mut loss = obj.loss(&w, b);
    let mut history = vec![loss];
    let mut step: f64 = 1.0;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        let (gw, gb) = obj.grad(&w, b);
        let g2 = gw.dot(&gw) + gb * gb;
        if g2 == 0.0 {
            break;
        }
        // Armijo backtracking: accept only a sufficient decrease.
        step = (step * 2.0).min(1e3);
        let mut accepted = None;
        while step > 1e-14 {
            let w_new = &w - &(step * &gw);
            let b_new = b - step * gb;
            let l_new = obj.loss(&w_new, b_new);
            if !l_new.is_finite() {
                return Err(Error::Probe(format!("non-finite loss at iteration {iterations}")));
            }
            if l_new <= loss - 1e-4 * step * g2 {
                accepted = Some((w_new, b_new, l_new));
                break;
            }
            step *= 0.5;
        }
        let Some((w_new, b_new, l_new)) = accepted else {
            break;
        };
        iterations += 1;
        let change = loss - l_new;
        w = w_new;
        b = b_new;
        loss = l_new;
        history.push(loss);
        if change < opts.tol {
            break;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Probe("non-finite loss".into()));
    }
    // Weights are kept at f32 precision so a saved probe reloads exactly.
    let weights = w.iter().map(|&v| f64::from(v as f32)).collect();
    Ok((
        ProbeModel {
            weights,
            bias: b,
            mean,
            scale,
            iterations,
            final_loss: loss,
        },
        history,
    ))
}

/// Logistic regression by full-batch gradient descent from zero weights.
pub fn train_linear_probe(train: &ProbeDataset, opts: &ProbeOptions) -> Result<ProbeModel> {
    fit_linear_probe(train, opts).map(|(m, _)| m)
}

const PROBE_MANIFEST: &str = "probe.json";
const PROBE_WEIGHTS: &str = "weights.f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProbeManifest {
    format: String,
    address: Option<ProbeAddress>,
    options: ProbeOptions,
    dim: usize,
    bias: f64,
    mean: Vec<f64>,
    scale: Vec<f64>,
    iterations: usize,
    final_loss: f64,
    train_rows: usize,
    weights_file: String,
}

impl ProbeModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Affine score on standardized features.
    pub fn decision(&self, x: ArrayView1<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: x.len(),
            });
        }
        Ok(x.iter()
            .zip(&self.weights)
            .zip(self.mean.iter().zip(&self.scale))
            .map(|((v, w), (m, s))| w * (v - m) / s)
            .sum::<f64>()
            + self.bias)
    }

    /// Label (1 iff probability ≥ 0.5) and probability of class 1.
    pub fn predict(&self, x: &[f64]) -> Result<(u8, f64)> {
        let p = sigmoid(self.decision(ArrayView1::from(x))?);
        Ok((u8::from(p >= 0.5), p))
    }

    pub fn predict_rows(&self, features: &Array2<f64>) -> Result<Vec<u8>> {
        features
            .rows()
            .into_iter()
            .map(|r| Ok(u8::from(sigmoid(self.decision(r)?) >= 0.5)))
            .collect()
    }

    /// Writes `probe.json` and the raw little-endian f32 weights.
    pub fn save(
        &self,
        dir: impl AsRef<Path>,
        address: Option<ProbeAddress>,
        options: &ProbeOptions,
        train_rows: usize,
    ) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = ProbeManifest {
            format: "probe-v1".into(),
            address,
            options: *options,
            dim: self.dim(),
            bias: self.bias,
            mean: self.mean.clone(),
            scale: self.scale.clone(),
            iterations: self.iterations,
            final_loss: self.final_loss,
            train_rows,
            weights_file: PROBE_WEIGHTS.into(),
        };
        let path = dir.join(PROBE_MANIFEST);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
            .map_err(|e| Error::io(&path, e))?;
        let bytes: Vec<u8> = self
            .weights
            .iter()
            .flat_map(|&w| (w as f32).to_le_bytes())
            .collect();
        let path = dir.join(PROBE_WEIGHTS);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<(ProbeModel, Option<ProbeAddress>)> {
        let dir = dir.as_ref();
        let path = dir.join(PROBE_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: ProbeManifest = serde_json::from_str(&text)?;
        let path = dir.join(&m.weights_file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != 4 * m.dim || m.mean.len() != m.dim || m.scale.len() != m.dim {
            return Err(Error::DimensionMismatch {
                expected: m.dim,
                actual: bytes.len() / 4,
            });
        }
        let weights = bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        Ok((
            ProbeModel {
                weights,
                bias: m.bias,
                mean: m.mean,
                scale: m.scale,
                iterations: m.iterations,
                final_loss: m.final_loss,
            },
            m.address,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(i: usize) -> RowMeta {
        RowMeta {
            example_id: i as u32,
            group: "g".into(),
            subject: format!("s{i}"),
            pk_object: "o".into(),
            counter_object: "c".into(),
        }
    }

    fn dataset(labels: Vec<u8>) -> ProbeDataset {
        let n = labels.len();
        let features = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        ProbeDataset::new(features, labels, (0..n).map(meta).collect()).unwrap()
    }

    #[test]
    fn balance_arithmetic() {
        let ds = dataset([vec![0u8; 100], vec![1u8; 40]].concat());
        let b = undersample_balance(&ds, 3).unwrap();
        assert_eq!(b.class_counts(), [40, 40]);
        assert_eq!(undersample_balance(&ds, 3).unwrap(), b);
        let other = undersample_balance(&ds, 4).unwrap();
        assert_ne!(other.rows, b.rows);
    }

    #[test]
    fn balanced_input_is_kept_whole() {
        let ds = dataset(vec![0, 1, 1, 0]);
        assert_eq!(undersample_balance(&ds, 9).unwrap(), ds);
        assert!(undersample_balance(&dataset(vec![1, 1]), 0).is_err());
    }

    #[test]
    fn zero_probe_is_half() {
        let p = ProbeModel {
            weights: vec![0.0; 3],
            bias: 0.0,
            mean: vec![0.0; 3],
            scale: vec![1.0; 3],
            iterations: 0,
            final_loss: 0.0,
        };
        assert_eq!(p.predict(&[4.0, -1.0, 9.0]).unwrap().1, 0.5);
        assert!(matches!(p.predict(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn rejects_too_few_rows() {
        assert!(train_linear_probe(&dataset(vec![0, 1, 1]), &ProbeOptions::default()).is_err());
    }
}
