use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const UNK: TokenId = 2;

const SPECIALS: [&str; 3] = ["<bos>", "<eos>", "<unk>"];
/// Token emitted between clauses.
pub const SEP_TOKEN: &str = ",";
const SEP_TEXT: &str = ", ";

/// Word-level vocabulary. Specials occupy ids 0..3, corpus words follow in
/// order of first appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Splits a sentence into words: clauses on `", "`, words on single spaces.
pub fn words(sentence: &str) -> Vec<&str> {
    let mut out = Vec::new();
    if sentence.is_empty() {
        return out;
    }
    for (i, seg) in sentence.split(SEP_TEXT).enumerate() {
        if i > 0 {
            out.push(SEP_TOKEN);
        }
        out.extend(seg.split(' '));
    }
    out
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[..3].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Checkpoint(
                "vocabulary must start with <bos>, <eos>, <unk>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Checkpoint(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for s in corpus {
            for w in words(s) {
                if !index.contains_key(w) {
                    index.insert(w.to_string(), tokens.len() as TokenId);
                    tokens.push(w.to_string());
                }
            }
        }
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[BOS, w₁, …, wₙ, EOS]`, unseen words mapped to UNK.
    pub fn tokenize(&self, sentence: &str) -> Vec<TokenId> {
        let mut out = vec![BOS];
        out.extend(words(sentence).into_iter().map(|w| self.id(w).unwrap_or(UNK)));
        out.push(EOS);
        out
    }

    /// Inverse of [`tokenize`](Self::tokenize). Stops at the first EOS and
    /// skips BOS.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut fresh_segment = true;
        for &id in ids {
            match id {
                BOS => continue,
                EOS => break,
                _ => {}
            }
            let w = self.token(id);
            if w == SEP_TOKEN {
                out.push_str(SEP_TEXT);
                fresh_segment = true;
            } else {
                if !fresh_segment {
                    out.push(' ');
                }
                out.push_str(w);
                fresh_segment = false;
            }
        }
        out
    }
}
