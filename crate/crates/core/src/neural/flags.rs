//! Character-level flag tokenizer and interned per-example flag inputs.

use std::collections::HashMap;

use crate::tracking::StateMatrix;
use crate::vocab::{TokenId, Vocab, PAD};

use super::ModelError;

/// Flag alphabet; index = flag token id.
pub const FLAG_ALPHABET: [char; 13] = ['N', '0', '1', '2', '3', '4', '5', '6', '7', '8', '9', '-', ' '];

/// Tokens of a rendered flag. A flag with no entries (empty formula) is
/// read as a single `N`.
pub fn tokenize_flag(s: &str) -> Result<Vec<usize>, ModelError> {
    if s.is_empty() {
        return Ok(vec![0]);
    }
    s.chars()
        .map(|c| {
            FLAG_ALPHABET
                .iter()
                .position(|&a| a == c)
                .ok_or_else(|| ModelError::BadFlag(s.to_string()))
        })
        .collect()
}

/// Data-vocabulary row whose embedding seeds each flag token's embedding.
pub fn flag_seed_token(flag_token: usize, vocab: &Vocab) -> TokenId {
    match FLAG_ALPHABET[flag_token] {
        'N' => PAD,
        '-' => vocab.syntax("not"),
        ' ' => vocab.syntax(","),
        d => Vocab::digit(d.to_digit(10).unwrap()),
    }
}

/// Interner for flag strings.
#[derive(Debug, Clone, Default)]
pub struct FlagStrings {
    strings: Vec<String>,
    index: HashMap<String, u32>,
}

impl FlagStrings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, s: &str) -> u32 {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        let i = self.strings.len() as u32;
        self.strings.push(s.to_string());
        self.index.insert(s.to_string(), i);
        i
    }

    pub fn get(&self, i: u32) -> &str {
        &self.strings[i as usize]
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }
}

/// Flags of one teacher-forced example in compact form: token `i` at
/// column `j` has flag `cols[j * n_classes + classes[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlagInput {
    pub classes: Vec<u32>,
    pub n_classes: usize,
    pub cols: Vec<u32>,
}

impl FlagInput {
    pub fn from_matrix(m: &StateMatrix, table: &mut FlagStrings) -> Self {
        let classes = m.token_classes().into_iter().map(|c| c as u32).collect();
        let n_classes = m.alignment().n_atoms() + 1;
        let mut cols = Vec::with_capacity(m.n_cols() * n_classes);
        for t in 0..m.n_cols() {
            for s in m.class_flags(t) {
                cols.push(table.intern(&s));
            }
        }
        Self {
            classes,
            n_classes,
            cols,
        }
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len() / self.n_classes
    }

    pub fn flag(&self, i: usize, j: usize) -> u32 {
        self.cols[j * self.n_classes + self.classes[i] as usize]
    }
}
