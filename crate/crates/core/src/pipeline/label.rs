use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{resolve_token_roles, ProbePrompt};
use crate::backend::{
    ActivationRecord, Backend, ModuleKind, TokenRole, DEFAULT_MAX_NEW_TOKENS,
};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;

const ARTICLES: [&str; 3] = ["the", "a", "an"];

/// Which knowledge source a generation follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    /// The in-context counter-object.
    CK,
    /// The parametric object.
    PK,
    /// Neither.
    ND,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::CK, Label::PK, Label::ND];

    /// Probe target: CK = 0, PK = 1. ND has none.
    pub fn target(self) -> Option<u8> {
        match self {
            Label::CK => Some(0),
            Label::PK => Some(1),
            Label::ND => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::CK => "CK",
            Label::PK => "PK",
            Label::ND => "ND",
        })
    }
}

fn words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out: Vec<String> = lower
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect();
    if out.first().is_some_and(|w| ARTICLES.contains(&w.as_str())) {
        out.remove(0);
    }
    out
}

/// Lowercased, punctuation-free, article-stripped form of an entity.
pub fn normalize_entity(text: &str) -> String {
    words(text).join(" ")
}

/// True iff the normalized candidate is a word-aligned prefix of the
/// normalized generation.
pub fn match_object(generated: &str, candidate: &str) -> bool {
    let cand = words(candidate);
    !cand.is_empty() && words(generated).starts_with(&cand)
}

/// CK is checked first, then PK.
pub fn label_generation(generated: &str, counter_object: &str, pk_object: &str) -> Label {
    if match_object(generated, counter_object) {
        Label::CK
    } else if match_object(generated, pk_object) {
        Label::PK
    } else {
        Label::ND
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub example_id: u32,
    pub prompt: ProbePrompt,
    pub generated: String,
    pub label: Label,
    pub group: String,
    pub token_positions: BTreeMap<TokenRole, usize>,
    /// Why the example ended up ND without a usable generation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Generates for every prompt and labels the result. Backend or alignment
/// failures give ND with a note; ids follow the prompt order.
pub fn label_examples(
    prompts: &[ProbePrompt],
    kb: &KnowledgeBase,
    backend: &dyn Backend,
) -> Result<Vec<LabeledExample>> {
    let groups: Vec<String> = prompts
        .iter()
        .map(|p| kb.group_of(&p.counter.relation).map(str::to_string))
        .collect::<Result<_>>()?;
    Ok(prompts
        .par_iter()
        .zip(groups)
        .enumerate()
        .map(|(i, (prompt, group))| {
            let outcome = backend
                .generate_greedy(&prompt.text, DEFAULT_MAX_NEW_TOKENS)
                .and_then(|g| {
                    let spans = backend.tokenize_with_offsets(&prompt.text)?;
                    Ok((g.text, resolve_token_roles(prompt, &spans)?))
                });
            let (generated, label, token_positions, note) = match outcome {
                Ok((text, positions)) => {
                    let label = label_generation(
                        &text,
                        &prompt.counter.counter_object,
                        &prompt.counter.pk_object,
                    );
                    (text, label, positions, None)
                }
                Err(e) => (String::new(), Label::ND, BTreeMap::new(), Some(e.to_string())),
            };
            LabeledExample {
                example_id: i as u32,
                prompt: prompt.clone(),
                generated,
                label,
                group,
                token_positions,
                note,
            }
        })
        .collect())
}

/// Captures every requested (layer, module, role) vector of every CK/PK
/// example. Records come out grouped by example in input order.
pub fn capture_activations(
    examples: &[LabeledExample],
    backend: &dyn Backend,
    layers: &[usize],
    modules: &[ModuleKind],
    roles: &[TokenRole],
) -> Result<Vec<ActivationRecord>> {
    let meta = backend.meta()?;
    let per_example: Vec<Result<Vec<ActivationRecord>>> = examples
        .par_iter()
        .filter(|e| e.label.target().is_some())
        .map(|e| {
            let mut positions = BTreeSet::new();
            for role in roles {
                let p = e.token_positions.get(role).ok_or_else(|| {
                    Error::Alignment(format!("example {} has no {role} position", e.example_id))
                })?;
                positions.insert(*p);
            }
            let positions: Vec<usize> = positions.into_iter().collect();
            let acts = backend.capture_activations(&e.prompt.text, &positions, layers, modules)?;
            let mut out = Vec::with_capacity(layers.len() * modules.len() * roles.len());
            for &layer in layers {
                for &module in modules {
                    for &role in roles {
                        let pos = e.token_positions[&role];
                        let a = acts
                            .iter()
                            .find(|a| a.layer == layer && a.module == module && a.position == pos)
                            .ok_or_else(|| {
                                Error::Backend(format!(
                                    "no activation for layer {layer} {module} position {pos}"
                                ))
                            })?;
                        let dim = meta.dims.get(module);
                        if a.vector.len() != dim {
                            return Err(Error::DimensionMismatch {
                                expected: dim,
                                actual: a.vector.len(),
                            });
                        }
                        if a.vector.iter().any(|v| !v.is_finite()) {
                            return Err(Error::Backend(format!(
                                "non-finite activation for example {}",
                                e.example_id
                            )));
                        }
                        out.push(ActivationRecord {
                            example_id: e.example_id,
                            layer: layer as u16,
                            module,
                            role,
                            vector: a.vector.clone(),
                        });
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::new();
    for r in per_example {
        records.extend(r?);
    }
    Ok(records)
}
