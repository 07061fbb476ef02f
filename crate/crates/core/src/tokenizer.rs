//! Byte-level tokenizer with four special tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMG: usize = 3;
pub const NUM_SPECIALS: usize = 4;
pub const VOCAB_SIZE: usize = 256 + NUM_SPECIALS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Question,
    Answer,
    Pad,
}

/// Token ids with a per-position role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `BOS IMG question…` — the prompt a generation starts from.
    pub fn prompt(question: &str) -> Self {
        let mut ids = vec![BOS, IMG];
        ids.extend(tokenize(question));
        let roles = vec![Role::Question; ids.len()];
        TokenSequence { ids, roles }
    }

    /// `BOS IMG question… answer… EOS` with answer roles on the answer bytes
    /// and the terminating EOS.
    pub fn instruction(question: &str, answer: &str) -> Self {
        let mut seq = TokenSequence::prompt(question);
        let ans = tokenize(answer);
        seq.roles.extend(std::iter::repeat_n(Role::Answer, ans.len() + 1));
        seq.ids.extend(ans);
        seq.ids.push(EOS);
        seq
    }

    /// Next-token targets: position `t` predicts `ids[t+1]`, counted only when
    /// that token is an answer token.
    pub fn answer_targets(&self) -> Vec<Option<usize>> {
        (0..self.ids.len())
            .map(|t| match self.roles.get(t + 1) {
                Some(Role::Answer) => Some(self.ids[t + 1]),
                _ => None,
            })
            .collect()
    }

    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.roles.push(Role::Pad);
        }
    }
}

pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(|b| b as usize + NUM_SPECIALS).collect()
}

/// Inverse of [`tokenize`]; special tokens are dropped.
pub fn detokenize(ids: &[usize]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..NUM_SPECIALS => {}
            NUM_SPECIALS..VOCAB_SIZE => bytes.push((id - NUM_SPECIALS) as u8),
            _ => return Err(Error::Decode(format!("token id {id} outside vocabulary"))),
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}
