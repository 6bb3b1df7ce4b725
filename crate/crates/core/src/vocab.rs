//! Fixed synthetic vocabulary shared by sources, targets and constraint text.
//!
//! Layout of the id space:
//!
//! | ids        | contents                                            |
//! |------------|-----------------------------------------------------|
//! | 0..4       | `<pad>`, `<s>`, `</s>`, `.` (sentence separator)    |
//! | 4..16      | predicate names and expression punctuation          |
//! | 16..26     | decimal digits used to spell integer arguments      |
//! | 26..       | content words; the first [`STOP_WORDS`] are stop words |

use std::collections::{HashMap, HashSet};
use std::path::Path;

use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;

/// Expression syntax tokens, in id order starting at 4.
pub const SYNTAX: [&str; 12] = [
    "Copy",
    "InSen",
    "Order",
    "Len",
    "StopWordCount",
    "TranslatedOnce",
    "(",
    ")",
    ",",
    "&",
    "||",
    "not",
];

pub const FIRST_SYNTAX: TokenId = 4;
pub const FIRST_DIGIT: TokenId = FIRST_SYNTAX + SYNTAX.len() as TokenId;
pub const FIRST_CONTENT: TokenId = FIRST_DIGIT + 10;

pub const STOP_WORDS: [&str; 8] = ["the", "a", "of", "to", "and", "in", "on", "was"];

const CONTENT_WORDS: [&str; 48] = [
    "car", "snow", "dog", "cat", "tree", "house", "river", "road", "bird", "school", "yard",
    "park", "job", "agent", "stone", "knife", "map", "weather", "hair", "iron", "kitchen",
    "bride", "groom", "lip", "trip", "story", "friend", "money", "store", "rain", "sun", "book",
    "door", "phone", "music", "game", "boat", "city", "garden", "letter", "window", "train",
    "apple", "orange", "table", "shoe", "rocket", "truck",
];

/// Smallest synthetic vocabulary: specials, syntax, digits and the stop words
/// plus eight content words.
pub const MIN_VOCAB: usize = FIRST_CONTENT as usize + STOP_WORDS.len() + 8;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary size {0} is below the minimum of {MIN_VOCAB}")]
    TooSmall(usize),
    #[error("unknown word `{0}`")]
    UnknownWord(String),
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(TokenId),
    #[error("{path}:{line}: {source}")]
    StopWordFile {
        path: String,
        line: usize,
        #[source]
        source: Box<VocabError>,
    },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenClass {
    Special,
    Syntax,
    Digit,
    Content,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
    stop_words: HashSet<TokenId>,
}

impl Vocab {
    /// Deterministic vocabulary of exactly `size` entries.
    pub fn synthetic(size: usize) -> Result<Self, VocabError> {
        if size < MIN_VOCAB {
            return Err(VocabError::TooSmall(size));
        }
        let mut words: Vec<String> = ["<pad>", "<s>", "</s>", "."]
            .iter()
            .chain(SYNTAX.iter())
            .map(|s| s.to_string())
            .collect();
        words.extend((0..10).map(|d| d.to_string()));
        words.extend(STOP_WORDS.iter().map(|s| s.to_string()));
        let mut extra = 0usize;
        while words.len() < size {
            let i = words.len() - FIRST_CONTENT as usize - STOP_WORDS.len();
            if i < CONTENT_WORDS.len() {
                words.push(CONTENT_WORDS[i].to_string());
            } else {
                words.push(format!("w{extra}"));
                extra += 1;
            }
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
        let stop_words = (0..STOP_WORDS.len())
            .map(|i| FIRST_CONTENT + i as TokenId)
            .collect();
        Ok(Self {
            words,
            index,
            stop_words,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<TokenId, VocabError> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| VocabError::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> Result<&str, VocabError> {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .ok_or(VocabError::UnknownId(id))
    }

    pub fn class(&self, id: TokenId) -> TokenClass {
        if id < FIRST_SYNTAX {
            TokenClass::Special
        } else if id < FIRST_DIGIT {
            TokenClass::Syntax
        } else if id < FIRST_CONTENT {
            TokenClass::Digit
        } else {
            TokenClass::Content
        }
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        (id as usize) < self.words.len() && id >= FIRST_CONTENT
    }

    pub fn syntax(&self, text: &str) -> TokenId {
        FIRST_SYNTAX
            + SYNTAX
                .iter()
                .position(|s| *s == text)
                .unwrap_or_else(|| panic!("`{text}` is not a syntax token")) as TokenId
    }

    pub fn digit(d: u32) -> TokenId {
        debug_assert!(d < 10);
        FIRST_DIGIT + d
    }

    /// Content word ids, stop words first.
    pub fn content_ids(&self) -> std::ops::Range<TokenId> {
        FIRST_CONTENT..self.words.len() as TokenId
    }

    /// The built-in stop-word set.
    pub fn stop_words(&self) -> &HashSet<TokenId> {
        &self.stop_words
    }

    /// Whitespace-separated words to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, VocabError> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.word(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parses a stop-word list: one token per line, `#` starts a comment.
    pub fn parse_stop_words(&self, text: &str) -> Result<HashSet<TokenId>, (usize, VocabError)> {
        let mut out = HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            out.insert(self.id(line).map_err(|e| (n + 1, e))?);
        }
        Ok(out)
    }

    pub fn load_stop_words(&self, path: &Path) -> Result<HashSet<TokenId>, VocabError> {
        let text = std::fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.parse_stop_words(&text)
            .map_err(|(line, e)| VocabError::StopWordFile {
                path: path.display().to_string(),
                line,
                source: Box::new(e),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids() {
        let v = Vocab::synthetic(64).unwrap();
        assert_eq!(v.len(), 64);
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        assert_eq!(v.id("<s>").unwrap(), BOS);
        assert_eq!(v.id("</s>").unwrap(), EOS);
        assert_eq!(v.id(".").unwrap(), SEP);
        assert_eq!(v.id("0").unwrap(), Vocab::digit(0));
        assert_eq!(v.id("the").unwrap(), FIRST_CONTENT);
        assert!(v.id("car").is_ok() && v.id("snow").is_ok());
    }

    #[test]
    fn large_vocab_fills_with_generated_words() {
        let v = Vocab::synthetic(120).unwrap();
        assert_eq!(v.len(), 120);
        assert!(v.id("w0").is_ok());
        assert!(matches!(Vocab::synthetic(10), Err(VocabError::TooSmall(10))));
    }

    #[test]
    fn stop_word_file_parsing() {
        let v = Vocab::synthetic(64).unwrap();
        let set = v.parse_stop_words("# comment\nthe\n\n a # trailing\n").unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.contains(&v.id("a").unwrap()));
        let err = v.parse_stop_words("the\nzzz\n").unwrap_err();
        assert_eq!(err.0, 2);
    }

    #[test]
    fn encode_decode() {
        let v = Vocab::synthetic(64).unwrap();
        let ids = v.encode("the car . </s>").unwrap();
        assert_eq!(ids[2], SEP);
        assert_eq!(v.decode(&ids), "the car . </s>");
        assert!(v.encode("the spaceship").is_err());
    }
}
