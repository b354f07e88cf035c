//! Closed vocabulary with integer token ids.
//!
//! Ids are dense from 0 and equal the line number in the vocabulary file
//! (one surface string per line). Six special tokens are identified by their
//! surface forms; one reserved token per user (surface `<user:ID>`) backs the
//! User Token baseline.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{PepeError, Result};

/// Index into a [`Vocabulary`].
pub type TokenId = usize;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";

/// Resolved ids of the six special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: TokenId,
    pub unk: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub bos: TokenId,
    pub eos: TokenId,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    specials: SpecialIds,
}

impl Vocabulary {
    /// Build from an ordered token list. Ids are the list positions.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 16 {
            return Err(PepeError::InvalidVocab(format!(
                "size {} < 16",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(PepeError::InvalidVocab(format!("empty token at id {id}")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(PepeError::InvalidVocab(format!("duplicate token {tok:?}")));
            }
        }
        let lookup = |s: &str| {
            index
                .get(s)
                .copied()
                .ok_or_else(|| PepeError::InvalidVocab(format!("missing special token {s}")))
        };
        let specials = SpecialIds {
            pad: lookup(PAD)?,
            unk: lookup(UNK)?,
            cls: lookup(CLS)?,
            sep: lookup(SEP)?,
            bos: lookup(BOS)?,
            eos: lookup(EOS)?,
        };
        Ok(Self {
            tokens,
            index,
            specials,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Reserved token id for a user, if present.
    pub fn user_token_id(&self, user_id: &str) -> Option<TokenId> {
        self.id(&user_token_surface(user_id))
    }

    /// User ids that own a reserved token, in id order.
    pub fn reserved_users(&self) -> Vec<String> {
        self.tokens
            .iter()
            .filter_map(|t| {
                t.strip_prefix("<user:")
                    .and_then(|rest| rest.strip_suffix('>'))
                    .map(str::to_string)
            })
            .collect()
    }

    /// Map surface words to ids, sending unknown words to `[UNK]`.
    pub fn encode_lossy(&self, words: &[&str]) -> Vec<TokenId> {
        words
            .iter()
            .map(|w| self.id(w).unwrap_or(self.specials.unk))
            .collect()
    }

    /// Render token ids back to surface strings. Ids out of range are an
    /// invariant violation upstream, reported rather than panicking.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .ok_or_else(|| PepeError::InvalidVocab(format!("id {id} out of range")))
            })
            .collect()
    }

    /// SHA-256 of the newline-joined token list; pins checkpoints to a vocab.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for tok in &self.tokens {
            hasher.update(tok.as_bytes());
            hasher.update(b"\n");
        }
        let mut out = String::with_capacity(64);
        for byte in hasher.finalize() {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for tok in &self.tokens {
            body.push_str(tok);
            body.push('\n');
        }
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = body.lines().map(str::to_string).collect();
        Self::new(tokens)
    }
}

pub fn user_token_surface(user_id: &str) -> String {
    format!("<user:{user_id}>")
}
