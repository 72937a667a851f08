//! Leave-one-relation-group-out evaluation of linear probes, pooled error
//! bars, seed sweeps, and the subject-frequency analysis.

pub mod frequency;
pub mod mann_whitney;
mod stats;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendMeta, ModuleKind, TokenRole};
use crate::error::{Error, Result};
use crate::pipeline::{normalize_entity, LabeledExample};
use crate::probe::{
    assemble_dataset, train_linear_probe, undersample_balance, ProbeAddress, ProbeDataset,
    ProbeModel, ProbeOptions,
};
use crate::storage::ActivationStore;

pub use frequency::{
    subject_frequency_report, CorpusCounter, FrequencyProvider, FrequencyReport, RemoteFrequency,
};
pub use mann_whitney::{
    exact_distribution, mann_whitney_u, mann_whitney_u_with, midranks, MannWhitney, Method,
};
pub use stats::{aggregate, standard_error, AggregateResult, GroupResult, Z_95};

/// Seed offset separating test-set balancing from train-set balancing.
const TEST_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;
/// Seed offset for the shuffled-label control.
const SHUFFLE_STREAM: u64 = 0x5851_f42d_4c95_7f2d;

/// Normalized subjects and objects mentioned by a set of rows.
pub fn entity_sets(ds: &ProbeDataset, rows: &[usize]) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut subjects = BTreeSet::new();
    let mut objects = BTreeSet::new();
    for &i in rows {
        let r = &ds.rows[i];
        subjects.insert(normalize_entity(&r.subject));
        objects.insert(normalize_entity(&r.pk_object));
        objects.insert(normalize_entity(&r.counter_object));
    }
    (subjects, objects)
}

/// Tests on `test_group`, trains on the other groups minus every row that
/// shares a normalized subject or object with the test rows. Both sides are
/// then balanced by seeded undersampling.
pub fn split_logo(
    ds: &ProbeDataset,
    test_group: &str,
    seed: u64,
) -> Result<(ProbeDataset, ProbeDataset)> {
    if ds.groups().len() < 2 {
        return Err(Error::Probe("leave-one-group-out needs at least two groups".into()));
    }
    let test_rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.rows[i].group == test_group).collect();
    if test_rows.is_empty() {
        return Err(Error::Probe(format!("group `{test_group}` has no rows")));
    }
    let (subjects, objects) = entity_sets(ds, &test_rows);
    let train_rows: Vec<usize> = (0..ds.len())
        .filter(|&i| {
            let r = &ds.rows[i];
            r.group != test_group
                && !subjects.contains(&normalize_entity(&r.subject))
                && !objects.contains(&normalize_entity(&r.pk_object))
                && !objects.contains(&normalize_entity(&r.counter_object))
        })
        .collect();
    let test = undersample_balance(&ds.select(&test_rows), seed.wrapping_add(TEST_STREAM))
        .map_err(|e| Error::Probe(format!("test group `{test_group}`: {e}")))?;
    let train = undersample_balance(&ds.select(&train_rows), seed)
        .map_err(|e| Error::Probe(format!("training split for `{test_group}`: {e}")))?;
    Ok((train, test))
}

/// Fraction of rows whose predicted label equals the true label.
pub fn success_rate(probe: &ProbeModel, test: &ProbeDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Stats("success rate of an empty test set".into()));
    }
    let predicted = probe.predict_rows(&test.features)?;
    let correct = predicted.iter().zip(&test.labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub seed: u64,
    pub probe: ProbeOptions,
    /// Permute labels before splitting (a null control).
    pub shuffle_labels: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            seed: 0,
            probe: ProbeOptions::default(),
            shuffle_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedGroup {
    pub group_id: String,
    pub reason: String,
}

/// Permutes labels across rows with a seeded shuffle.
pub fn shuffled_labels(ds: &ProbeDataset, seed: u64) -> Result<ProbeDataset> {
    let mut labels = ds.labels.clone();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(SHUFFLE_STREAM)));
    ds.with_labels(labels)
}

/// Runs every leave-one-group-out split of `ds` and pools the results.
pub fn evaluate_logo(
    ds: &ProbeDataset,
    opts: &EvalOptions,
) -> Result<(AggregateResult, Vec<SkippedGroup>)> {
    let shuffled;
    let ds = if opts.shuffle_labels {
        shuffled = shuffled_labels(ds, opts.seed)?;
        &shuffled
    } else {
        ds
    };
    let groups: Vec<&str> = ds.groups().into_iter().collect();
    let outcomes: Vec<Result<GroupResult>> = groups
        .par_iter()
        .map(|g| {
            let (train, test) = split_logo(ds, g, opts.seed)?;
            let probe = train_linear_probe(&train, &opts.probe)?;
            GroupResult::new(*g, success_rate(&probe, &test)?, test.len())
        })
        .collect();
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    for (g, o) in groups.iter().zip(outcomes) {
        match o {
            Ok(r) => results.push(r),
            Err(e) => skipped.push(SkippedGroup {
                group_id: g.to_string(),
                reason: e.to_string(),
            }),
        }
    }
    if results.is_empty() {
        let reasons: Vec<String> = skipped.iter().map(|s| s.reason.clone()).collect();
        return Err(Error::Stats(format!(
            "no group could be evaluated: {}",
            reasons.join("; ")
        )));
    }
    Ok((aggregate(&results)?, skipped))
}

/// One line of `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AddressResult {
    pub layer: usize,
    pub module: ModuleKind,
    pub role: TokenRole,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "WSE")]
    pub wse: f64,
    pub ci: [f64; 2],
    pub groups: Vec<GroupResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedGroup>,
}

impl AddressResult {
    pub fn address(&self) -> ProbeAddress {
        ProbeAddress {
            layer: self.layer,
            module: self.module,
            role: self.role,
        }
    }
}

/// Every (layer, module, role) of a model, layer-major.
pub fn all_addresses(meta: &BackendMeta) -> Vec<ProbeAddress> {
    let mut out = Vec::new();
    for layer in 0..meta.num_layers {
        for module in ModuleKind::ALL {
            for role in TokenRole::ALL {
                out.push(ProbeAddress {
                    layer,
                    module,
                    role,
                });
            }
        }
    }
    out
}

/// Leave-one-group-out evaluation of every address, in address order.
pub fn evaluate_addresses(
    store: &ActivationStore,
    examples: &[LabeledExample],
    addresses: &[ProbeAddress],
    opts: &EvalOptions,
) -> Result<Vec<AddressResult>> {
    addresses
        .par_iter()
        .map(|&a| {
            let ds = assemble_dataset(store, a, examples)?;
            let (agg, skipped) = evaluate_logo(&ds, opts)?;
            Ok(AddressResult {
                layer: a.layer,
                module: a.module,
                role: a.role,
                p: agg.p,
                wse: agg.wse,
                ci: [agg.ci_low, agg.ci_high],
                groups: agg.groups,
                skipped,
            })
        })
        .collect()
}

/// Spread of one address's success rate across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer: usize,
    pub module: ModuleKind,
    pub role: TokenRole,
    pub seeds: Vec<u64>,
    pub rates: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
}

/// Repeats balancing, training, and evaluation for every seed.
pub fn seed_sweep(
    store: &ActivationStore,
    examples: &[LabeledExample],
    addresses: &[ProbeAddress],
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<(Vec<Vec<AddressResult>>, Vec<SweepRow>)> {
    if seeds.is_empty() {
        return Err(Error::Config("seed sweep needs at least one seed".into()));
    }
    let runs: Vec<Vec<AddressResult>> = seeds
        .iter()
        .map(|&seed| evaluate_addresses(store, examples, addresses, &EvalOptions { seed, ..*opts }))
        .collect::<Result<_>>()?;
    let rows = addresses
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let rates: Vec<f64> = runs.iter().map(|r| r[i].p).collect();
            let mean = rates.iter().sum::<f64>() / rates.len() as f64;
            let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rates.len() as f64;
            SweepRow {
                layer: a.layer,
                module: a.module,
                role: a.role,
                seeds: seeds.to_vec(),
                rates,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok((runs, rows))
}
