//! From a knowledge base to labeled probing examples: elicit what the model
//! believes, pick contradicting objects, build counterfactual prompts, label
//! which source the model follows, and locate the probed tokens.

mod counter;
mod label;
mod prompt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, DEFAULT_MAX_NEW_TOKENS};
use crate::kb::{render_pk_query, KnowledgeBase, Triplet};

pub use counter::{build_counter_pk, object_pools, select_lowest, CounterPk, CounterRecord, CounterSkip, DEFAULT_K};
pub use label::{
    capture_activations, label_examples, label_generation, match_object, normalize_entity,
    Label, LabeledExample,
};
pub use prompt::{build_probe_prompt, resolve_token_roles, ProbePrompt, Span, STATEMENT_SEPARATOR};

/// What the model produced for one elicitation prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PkRecord {
    #[serde(flatten)]
    pub triplet: Triplet,
    /// Leading span of the greedy generation (o′).
    pub elicited_object: String,
    /// Whether o′ matches the knowledge-base object.
    pub matched: bool,
}

/// A triplet whose elicitation failed at the backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElicitFailure {
    pub subject: String,
    pub rel_lemma: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Elicitation {
    pub records: Vec<PkRecord>,
    pub failures: Vec<ElicitFailure>,
}

impl Elicitation {
    pub fn matched(&self) -> usize {
        self.records.iter().filter(|r| r.matched).count()
    }
}

/// The leading span of a generation: everything before the first `.`, `,`,
/// `;` or line break, trimmed.
pub fn leading_span(generated: &str) -> &str {
    let end = generated
        .find(['.', ',', ';', '\n'])
        .unwrap_or(generated.len());
    generated[..end].trim()
}

/// Greedy-decodes the one-shot elicitation prompt of every triplet and keeps
/// whatever the model answers, right or wrong.
pub fn elicit_pk(kb: &KnowledgeBase, backend: &dyn Backend) -> Elicitation {
    let outcomes: Vec<_> = kb
        .triplets
        .par_iter()
        .map(|t| -> crate::Result<PkRecord> {
            let generated = kb.template(&t.relation).and_then(|template| {
                backend.generate_greedy(&render_pk_query(template, t), DEFAULT_MAX_NEW_TOKENS)
            })?;
            let elicited = leading_span(&generated.text).to_string();
            Ok(PkRecord {
                matched: match_object(&elicited, &t.object),
                triplet: t.clone(),
                elicited_object: elicited,
            })
        })
        .collect();
    let mut out = Elicitation::default();
    for (t, outcome) in kb.triplets.iter().zip(outcomes) {
        match outcome {
            Ok(r) => out.records.push(r),
            Err(e) => out.failures.push(ElicitFailure {
                subject: t.subject.clone(),
                rel_lemma: t.relation.clone(),
                error: e.to_string(),
            }),
        }
    }
    out
}
