use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::PkRecord;
use crate::backend::Backend;
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 3;

/// A parametric object paired with a contradicting object of the same
/// relation. Rank 1 is the candidate the model finds least probable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterRecord {
    pub subject: String,
    #[serde(rename = "rel_lemma")]
    pub relation: String,
    pub pk_object: String,
    pub counter_object: String,
    pub rank: usize,
    /// Joint probability of the counter object continuing the query.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSkip {
    pub subject: String,
    pub rel_lemma: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CounterPk {
    pub records: Vec<CounterRecord>,
    pub skipped: Vec<CounterSkip>,
}

/// O_r: the distinct non-empty elicited objects of each relation.
pub fn object_pools(pk: &[PkRecord]) -> BTreeMap<String, BTreeSet<String>> {
    let mut pools: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in pk {
        if !r.elicited_object.is_empty() {
            pools
                .entry(r.triplet.relation.clone())
                .or_default()
                .insert(r.elicited_object.clone());
        }
    }
    pools
}

/// The `k` least probable candidates, ascending by probability with ties
/// broken by object text.
pub fn select_lowest(mut scored: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k);
    scored
}

/// Scores every other object of the relation as a continuation of the
/// triplet's query and keeps the `k` least probable as counter-objects.
/// Triplets without any alternative object, or whose scoring fails, are
/// skipped and logged.
pub fn build_counter_pk(pk: &[PkRecord], backend: &dyn Backend, k: usize) -> Result<CounterPk> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let pools = object_pools(pk);
    let outcomes: Vec<std::result::Result<Vec<CounterRecord>, String>> = pk
        .par_iter()
        .map(|r| {
            let o = &r.elicited_object;
            if o.is_empty() {
                return Err("no object was elicited".to_string());
            }
            let candidates: Vec<String> = pools
                .get(&r.triplet.relation)
                .into_iter()
                .flatten()
                .filter(|c| *c != o)
                .cloned()
                .collect();
            if candidates.is_empty() {
                return Err(format!(
                    "relation `{}` has no other object to contradict with",
                    r.triplet.relation
                ));
            }
            // Continuations are appended verbatim to the prompt.
            let continuations: Vec<String> = candidates.iter().map(|c| format!(" {c}")).collect();
            let probs = backend
                .score_candidates(&r.triplet.query, &continuations)
                .map_err(|e| e.to_string())?;
            if probs.len() != candidates.len() || probs.iter().any(|p| !p.is_finite()) {
                return Err("backend returned malformed scores".to_string());
            }
            let chosen = select_lowest(candidates.into_iter().zip(probs).collect(), k);
            Ok(chosen
                .into_iter()
                .enumerate()
                .map(|(i, (counter_object, probability))| CounterRecord {
                    subject: r.triplet.subject.clone(),
                    relation: r.triplet.relation.clone(),
                    pk_object: o.clone(),
                    counter_object,
                    rank: i + 1,
                    probability,
                })
                .collect())
        })
        .collect();

    let mut out = CounterPk::default();
    for (r, outcome) in pk.iter().zip(outcomes) {
        match outcome {
            Ok(records) => out.records.extend(records),
            Err(reason) => out.skipped.push(CounterSkip {
                subject: r.triplet.subject.clone(),
                rel_lemma: r.triplet.relation.clone(),
                reason,
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scored(items: &[(&str, f64)]) -> Vec<(String, f64)> {
        items.iter().map(|(s, p)| (s.to_string(), *p)).collect()
    }

    #[test]
    fn lowest_k_ascending() {
        let got = select_lowest(scored(&[("b", 0.2), ("c", 0.08), ("d", 0.02)]), 2);
        assert_eq!(got, scored(&[("d", 0.02), ("c", 0.08)]));
    }

    #[test]
    fn ties_break_lexicographically() {
        let got = select_lowest(scored(&[("z", 0.1), ("m", 0.1), ("a", 0.1), ("q", 0.1)]), 3);
        let names: Vec<_> = got.iter().map(|c| c.0.as_str()).collect();
        assert_eq!(names, ["a", "m", "q"]);
    }

    #[test]
    fn fewer_candidates_than_k() {
        assert_eq!(select_lowest(scored(&[("x", 0.5)]), 3).len(), 1);
    }
}
