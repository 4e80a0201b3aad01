use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{AfaError, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const MASK: TokenId = 2;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<mask>"];

/// Lowercase, split on whitespace, drop every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Token ↔ id table with PAD/UNK/MASK pinned at 0/1/2.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Ids assigned by frequency (descending), ties broken lexicographically.
    pub fn build<I, S>(texts: I, min_count: usize) -> Result<Vocab>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for text in texts {
            seen_any = true;
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(AfaError::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    /// Vocabulary whose non-reserved ids follow `tokens` in order, starting at 3.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Vocab>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: RESERVED.iter().map(|s| s.to_string()).collect(),
            index: HashMap::new(),
        };
        for (i, r) in RESERVED.iter().enumerate() {
            v.index.insert(r.to_string(), i as TokenId);
        }
        for tok in tokens {
            let tok = tok.into();
            if v.index.contains_key(&tok) {
                return Err(AfaError::Input(format!("duplicate vocabulary entry {tok:?}")));
            }
            v.index.insert(tok.clone(), v.tokens.len() as TokenId);
            v.tokens.push(tok);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, TokenId)> {
        self.tokens
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, t)| (t.as_str(), i as TokenId))
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text)
            .iter()
            .map(|t| match self.index.get(t) {
                Some(&id) if id > MASK => id,
                _ => UNK,
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// One non-reserved token per line, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (tok, _) in self.entries() {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path)?;
        Vocab::from_tokens(text.lines().filter(|l| !l.is_empty()))
    }
}
