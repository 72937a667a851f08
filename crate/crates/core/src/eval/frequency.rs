//! Subject frequencies in a reference corpus and their relation to labels.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mann_whitney::mann_whitney_u;
use crate::error::{Error, Result};
use crate::pipeline::{Label, LabeledExample};
use crate::toyformer::split;

/// Occurrence counts of a subject in some reference corpus.
pub trait FrequencyProvider: Send + Sync {
    fn count(&self, subject: &str) -> Result<u64>;
}

fn tokens(text: &str) -> Vec<String> {
    split(text).into_iter().map(|(s, e)| text[s..e].to_string()).collect()
}

/// Counts contiguous token-sequence occurrences in an in-memory corpus,
/// using the toy tokenizer's word/punctuation split.
#[derive(Debug, Clone, Default)]
pub struct CorpusCounter {
    lines: Vec<Vec<String>>,
}

impl CorpusCounter {
    pub fn new<S: AsRef<str>>(corpus: &[S]) -> Self {
        CorpusCounter {
            lines: corpus.iter().map(|l| tokens(l.as_ref())).collect(),
        }
    }
}

impl FrequencyProvider for CorpusCounter {
    fn count(&self, subject: &str) -> Result<u64> {
        let needle = tokens(subject);
        if needle.is_empty() {
            return Ok(0);
        }
        Ok(self
            .lines
            .iter()
            .map(|line| line.windows(needle.len()).filter(|w| *w == needle.as_slice()).count() as u64)
            .sum())
    }
}

/// Client for a count service: `GET <base>/count?q=<subject>` answering
/// `{"count": <int>}`.
#[derive(Debug, Clone)]
pub struct RemoteFrequency {
    base_url: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct CountResponse {
    count: u64,
}

impl RemoteFrequency {
    pub fn new(base_url: &str) -> Self {
        RemoteFrequency {
            base_url: base_url.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(60))
                .build(),
        }
    }
}

impl FrequencyProvider for RemoteFrequency {
    fn count(&self, subject: &str) -> Result<u64> {
        let resp = self
            .agent
            .get(&format!("{}/count", self.base_url))
            .query("q", subject)
            .call()
            .map_err(|e| Error::Frequency(format!("`{subject}`: {e}")))?;
        let body: CountResponse = resp
            .into_json()
            .map_err(|e| Error::Frequency(format!("`{subject}`: bad response: {e}")))?;
        Ok(body.count)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectCount {
    pub example_id: u32,
    pub subject: String,
    pub label: Label,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupFailure {
    pub subject: String,
    pub error: String,
}

/// One-sided test that `greater`'s frequencies exceed `other`'s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub greater: Label,
    pub other: Label,
    pub n_greater: usize,
    pub n_other: usize,
    pub u: f64,
    pub p_value: f64,
    /// P-value of the opposite direction.
    pub p_reverse: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub samples: Vec<SubjectCount>,
    pub distributions: BTreeMap<Label, Vec<u64>>,
    pub failures: Vec<LookupFailure>,
    pub tests: Vec<PairTest>,
}

/// Looks up every distinct subject once (at most `max_in_flight` lookups at
/// a time), groups the counts by label, and tests PK > CK and PK > ND.
pub fn subject_frequency_report(
    examples: &[LabeledExample],
    provider: &dyn FrequencyProvider,
    max_in_flight: usize,
) -> Result<FrequencyReport> {
    let subjects: BTreeSet<&str> = examples
        .iter()
        .map(|e| e.prompt.counter.subject.as_str())
        .collect();
    let subjects: Vec<&str> = subjects.into_iter().collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| Error::Frequency(e.to_string()))?;
    let looked_up: Vec<Result<u64>> =
        pool.install(|| subjects.par_iter().map(|s| provider.count(s)).collect());

    let mut counts = BTreeMap::new();
    let mut failures = Vec::new();
    for (s, r) in subjects.iter().zip(looked_up) {
        match r {
            Ok(c) => {
                counts.insert(*s, c);
            }
            Err(e) => failures.push(LookupFailure {
                subject: s.to_string(),
                error: e.to_string(),
            }),
        }
    }

    let mut samples = Vec::new();
    let mut distributions: BTreeMap<Label, Vec<u64>> = BTreeMap::new();
    for e in examples {
        let subject = &e.prompt.counter.subject;
        if let Some(&count) = counts.get(subject.as_str()) {
            samples.push(SubjectCount {
                example_id: e.example_id,
                subject: subject.clone(),
                label: e.label,
                count,
            });
            distributions.entry(e.label).or_default().push(count);
        }
    }

    let mut tests = Vec::new();
    for other in [Label::CK, Label::ND] {
        let (Some(pk), Some(o)) = (distributions.get(&Label::PK), distributions.get(&other)) else {
            continue;
        };
        let a: Vec<f64> = pk.iter().map(|&c| c as f64).collect();
        let b: Vec<f64> = o.iter().map(|&c| c as f64).collect();
        let r = mann_whitney_u(&a, &b)?;
        tests.push(PairTest {
            greater: Label::PK,
            other,
            n_greater: a.len(),
            n_other: b.len(),
            u: r.u_a,
            p_value: r.p_greater,
            p_reverse: r.p_less,
            exact: r.exact,
        });
    }
    Ok(FrequencyReport {
        samples,
        distributions,
        failures,
        tests,
    })
}
