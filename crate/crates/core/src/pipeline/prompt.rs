use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CounterRecord;
use crate::backend::{TokenRole, TokenSpan};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;

/// Joins the counterfactual statement and the query.
pub const STATEMENT_SEPARATOR: &str = ". ";

/// Half-open byte range into a prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    fn intersects(&self, t: &TokenSpan) -> bool {
        t.char_start < self.end && t.char_end > self.start
    }
}

/// A counterfactual statement followed by the query it contradicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbePrompt {
    pub text: String,
    /// The counter-object inside the statement.
    pub object_span: Span,
    /// The subject inside the query.
    pub subject_span: Span,
    /// The query words after the subject.
    pub relation_span: Span,
    pub first_span: Span,
    pub counter: CounterRecord,
}

impl ProbePrompt {
    pub fn span(&self, role: TokenRole) -> Span {
        match role {
            TokenRole::Object => self.object_span,
            TokenRole::SubjectQ => self.subject_span,
            TokenRole::RelationQ => self.relation_span,
            TokenRole::First => self.first_span,
        }
    }
}

fn is_separator(c: char) -> bool {
    c.is_whitespace() || c.is_ascii_punctuation()
}

/// Builds `statement(s, ō) + ". " + q(s, r)` and records where each probed
/// element sits in it.
pub fn build_probe_prompt(counter: &CounterRecord, kb: &KnowledgeBase) -> Result<ProbePrompt> {
    let template = kb.template(&counter.relation)?;
    let triplet = kb
        .triplets
        .iter()
        .find(|t| t.subject == counter.subject && t.relation == counter.relation)
        .ok_or_else(|| {
            Error::Prompt(format!(
                "no query for subject `{}` under `{}`",
                counter.subject, counter.relation
            ))
        })?;
    let statement = template.statement(&counter.subject, &counter.counter_object);
    let statement = statement.trim_end().trim_end_matches('.');
    let query = triplet.query.trim();
    let text = format!("{statement}{STATEMENT_SEPARATOR}{query}");

    let object_start = statement.find(counter.counter_object.as_str()).ok_or_else(|| {
        Error::Prompt(format!(
            "counter-object `{}` missing from the statement",
            counter.counter_object
        ))
    })?;
    let query_start = statement.len() + STATEMENT_SEPARATOR.len();
    let subject_in_query = query.find(counter.subject.as_str()).ok_or_else(|| {
        Error::Prompt(format!(
            "subject `{}` not found in query `{query}`",
            counter.subject
        ))
    })?;
    let subject_start = query_start + subject_in_query;
    let subject_end = subject_start + counter.subject.len();
    let rest = &text[subject_end..];
    let relation_start = subject_end + (rest.len() - rest.trim_start_matches(is_separator).len());
    if relation_start >= text.len() {
        return Err(Error::Prompt(format!(
            "query `{query}` has no relation words after the subject"
        )));
    }
    let first_len = text.chars().next().map_or(0, char::len_utf8);

    Ok(ProbePrompt {
        object_span: Span {
            start: object_start,
            end: object_start + counter.counter_object.len(),
        },
        subject_span: Span {
            start: subject_start,
            end: subject_end,
        },
        relation_span: Span {
            start: relation_start,
            end: text.len(),
        },
        first_span: Span {
            start: 0,
            end: first_len,
        },
        text,
        counter: counter.clone(),
    })
}

/// Maps each role to the last token intersecting its element; FIRST is
/// always token 0.
pub fn resolve_token_roles(
    prompt: &ProbePrompt,
    spans: &[TokenSpan],
) -> Result<BTreeMap<TokenRole, usize>> {
    if spans.is_empty() {
        return Err(Error::Alignment("prompt produced no tokens".into()));
    }
    let mut out = BTreeMap::new();
    out.insert(TokenRole::First, 0);
    for role in [TokenRole::Object, TokenRole::SubjectQ, TokenRole::RelationQ] {
        let span = prompt.span(role);
        let idx = spans
            .iter()
            .rposition(|t| span.intersects(t))
            .ok_or_else(|| {
                Error::Alignment(format!(
                    "no token covers the {role} span {}..{} of `{}`",
                    span.start, span.end, prompt.text
                ))
            })?;
        out.insert(role, idx);
    }
    Ok(out)
}
