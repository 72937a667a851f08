//! Whitespace/punctuation tokenizer over a closed vocabulary.
//!
//! Runs of alphanumeric characters form one token; every other
//! non-whitespace character is a token on its own. Offsets are byte offsets
//! into the original text.

use std::collections::{BTreeSet, HashMap};

use crate::backend::TokenSpan;
use crate::error::{Error, Result};

pub const EOS: &str = "<eos>";
pub const EOS_ID: u32 = 0;

/// Splits `text` into `(start, end)` byte ranges.
pub fn split(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() {
            if word_start.is_none() {
                word_start = Some(i);
            }
            continue;
        }
        if let Some(s) = word_start.take() {
            out.push((s, i));
        }
        if !c.is_whitespace() {
            out.push((i, i + c.len_utf8()));
        }
    }
    if let Some(s) = word_start {
        out.push((s, text.len()));
    }
    out
}

fn is_word(token: &str) -> bool {
    token.chars().next().is_some_and(char::is_alphanumeric)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from every token in `corpus`, sorted, with
    /// `<eos>` at id 0.
    pub fn from_corpus<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut set = BTreeSet::new();
        for line in corpus {
            let line = line.as_ref();
            for (s, e) in split(line) {
                set.insert(line[s..e].to_string());
            }
        }
        let mut tokens = vec![EOS.to_string()];
        tokens.extend(set.into_iter().filter(|t| t != EOS));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Tokenizes `text`, returning spans with ids. Unknown tokens are an error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenSpan>> {
        split(text)
            .into_iter()
            .map(|(s, e)| {
                let piece = &text[s..e];
                let id = self
                    .id(piece)
                    .ok_or_else(|| Error::UnknownToken(piece.to_string()))?;
                Ok(TokenSpan {
                    token_id: id,
                    text: piece.to_string(),
                    char_start: s,
                    char_end: e,
                })
            })
            .collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(self.tokenize(text)?.into_iter().map(|t| t.token_id).collect())
    }

    /// Joins tokens back into text: a space precedes each word token except
    /// the first and any word directly after an apostrophe; punctuation
    /// attaches to the preceding token. `<eos>` is dropped.
    pub fn decode(&self, ids: &[u32]) -> (String, Vec<TokenSpan>) {
        let mut text = String::new();
        let mut spans = Vec::with_capacity(ids.len());
        let mut prev: Option<&str> = None;
        for &id in ids {
            if id == EOS_ID {
                continue;
            }
            let tok = self.token(id);
            let glue = match prev {
                None => false,
                Some(p) => is_word(tok) && p != "'",
            };
            if glue {
                text.push(' ');
            }
            let start = text.len();
            text.push_str(tok);
            spans.push(TokenSpan {
                token_id: id,
                text: tok.to_string(),
                char_start: start,
                char_end: text.len(),
            });
            prev = Some(tok);
        }
        (text, spans)
    }
}
