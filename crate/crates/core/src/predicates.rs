//! Executable logical operators, one per predicate.
//!
//! Every operator is a pure function of its arguments and the decoder
//! prefix `y_:t`, computed from scratch. The incremental counterparts used
//! while decoding live in [`crate::tracking`] and are checked against these.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::Atom;
use crate::vocab::{TokenId, EOS, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PredicateKind {
    Copy,
    InSen,
    Order,
    Len,
    StopWordCount,
    TranslatedOnce,
}

impl PredicateKind {
    pub const ALL: [PredicateKind; 6] = [
        PredicateKind::Copy,
        PredicateKind::InSen,
        PredicateKind::Order,
        PredicateKind::Len,
        PredicateKind::StopWordCount,
        PredicateKind::TranslatedOnce,
    ];

    pub fn name(self) -> &'static str {
        self.descriptor().name
    }

    pub fn descriptor(self) -> &'static PredicateDescriptor {
        &REGISTRY[self as usize]
    }
}

impl fmt::Display for PredicateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgKind {
    Keyword,
    SentenceIndex,
    Int,
}

impl ArgKind {
    /// Smallest accepted literal for integer-valued arguments.
    pub fn min_value(self, kind: PredicateKind) -> u32 {
        match (self, kind) {
            (ArgKind::SentenceIndex, _) => 1,
            (ArgKind::Int, PredicateKind::Len) => 1,
            _ => 0,
        }
    }
}

#[derive(Debug)]
pub struct PredicateDescriptor {
    pub kind: PredicateKind,
    pub name: &'static str,
    /// Accepted argument lists. `Len` and `StopWordCount` may omit the
    /// sentence index to constrain the whole output.
    pub signatures: &'static [&'static [ArgKind]],
    pub has_in_progress: bool,
    pub has_intermediate: bool,
    aliases: &'static [&'static str],
}

impl PredicateDescriptor {
    pub fn arity(&self) -> usize {
        self.signatures.iter().map(|s| s.len()).max().unwrap_or(0)
    }
}

use ArgKind::{Int, Keyword, SentenceIndex};

static REGISTRY: [PredicateDescriptor; 6] = [
    PredicateDescriptor {
        kind: PredicateKind::Copy,
        name: "Copy",
        signatures: &[&[Keyword]],
        has_in_progress: false,
        has_intermediate: false,
        aliases: &[],
    },
    PredicateDescriptor {
        kind: PredicateKind::InSen,
        name: "InSen",
        signatures: &[&[Keyword, SentenceIndex]],
        has_in_progress: true,
        has_intermediate: false,
        aliases: &[],
    },
    PredicateDescriptor {
        kind: PredicateKind::Order,
        name: "Order",
        signatures: &[&[Keyword, Keyword]],
        has_in_progress: true,
        has_intermediate: false,
        aliases: &[],
    },
    PredicateDescriptor {
        kind: PredicateKind::Len,
        name: "Len",
        signatures: &[&[SentenceIndex, Int], &[Int]],
        has_in_progress: true,
        has_intermediate: true,
        aliases: &["senlen"],
    },
    PredicateDescriptor {
        kind: PredicateKind::StopWordCount,
        name: "StopWordCount",
        signatures: &[&[SentenceIndex, Int], &[Int]],
        has_in_progress: true,
        has_intermediate: true,
        aliases: &[],
    },
    PredicateDescriptor {
        kind: PredicateKind::TranslatedOnce,
        name: "TranslatedOnce",
        signatures: &[&[SentenceIndex]],
        has_in_progress: true,
        has_intermediate: false,
        aliases: &["translateonce"],
    },
];

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown predicate `{0}`")]
pub struct UnknownPredicate(pub String);

/// Case-insensitive lookup by name or alias.
pub fn registry_lookup(name: &str) -> Result<&'static PredicateDescriptor, UnknownPredicate> {
    let lower = name.to_ascii_lowercase();
    REGISTRY
        .iter()
        .find(|d| d.name.to_ascii_lowercase() == lower || d.aliases.contains(&lower.as_str()))
        .ok_or_else(|| UnknownPredicate(name.to_string()))
}

/// Default state status of one predicate at one input token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StateStatus {
    /// The token is not part of the predicate's span.
    N,
    S0,
    S1,
    S2,
}

impl StateStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            StateStatus::N => "N",
            StateStatus::S0 => "0",
            StateStatus::S1 => "1",
            StateStatus::S2 => "2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PredicateResult {
    pub status: StateStatus,
    pub intermediate: Option<i64>,
}

impl PredicateResult {
    pub const N: Self = Self::bare(StateStatus::N);
    pub const S0: Self = Self::bare(StateStatus::S0);
    pub const S1: Self = Self::bare(StateStatus::S1);
    pub const S2: Self = Self::bare(StateStatus::S2);

    pub const fn bare(status: StateStatus) -> Self {
        Self {
            status,
            intermediate: None,
        }
    }

    pub const fn progress(remaining: i64) -> Self {
        Self {
            status: StateStatus::S1,
            intermediate: Some(remaining),
        }
    }

    pub fn is_satisfied(&self) -> bool {
        self.status == StateStatus::S2
    }
}

impl fmt::Display for PredicateResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.status.as_str())?;
        if let Some(v) = self.intermediate {
            write!(f, " {v}")?;
        }
        Ok(())
    }
}

/// Encoder input plus the decoder prefix seen so far.
#[derive(Debug, Clone, Copy)]
pub struct SeqView<'a> {
    pub x: &'a [TokenId],
    pub y: &'a [TokenId],
}

impl<'a> SeqView<'a> {
    pub fn new(x: &'a [TokenId], y: &'a [TokenId]) -> Self {
        Self { x, y }
    }

    /// Current sentence index: one plus the separators emitted so far.
    pub fn theta(&self) -> u32 {
        1 + self.body().iter().filter(|&&t| t == SEP).count() as u32
    }

    pub fn ended(&self) -> bool {
        self.y.contains(&EOS)
    }

    /// Tokens of sentence `j` (1-based) emitted so far, without separators or EOS.
    pub fn sentence(&self, j: u32) -> &'a [TokenId] {
        let body = self.body();
        let mut start = 0;
        let mut idx = 1;
        for (p, &t) in body.iter().enumerate() {
            if t == SEP {
                if idx == j {
                    return &body[start..p];
                }
                idx += 1;
                start = p + 1;
            }
        }
        if idx == j {
            &body[start..]
        } else {
            &[]
        }
    }

    /// Whether sentence `j` is finished: closed by a separator, or the
    /// trailing sentence when EOS has been emitted.
    pub fn sentence_closed(&self, j: u32) -> bool {
        let theta = self.theta();
        j < theta || (j == theta && self.ended())
    }

    /// The prefix up to (excluding) EOS.
    pub fn body(&self) -> &'a [TokenId] {
        match self.y.iter().position(|&t| t == EOS) {
            Some(p) => &self.y[..p],
            None => self.y,
        }
    }
}

/// First start position of `needle` in `hay`.
pub fn find(hay: &[TokenId], needle: &[TokenId]) -> Option<usize> {
    if needle.is_empty() || needle.len() > hay.len() {
        return None;
    }
    hay.windows(needle.len()).position(|w| w == needle)
}

pub fn step_copy(w: &[TokenId], v: SeqView<'_>) -> PredicateResult {
    if find(v.body(), w).is_some() {
        PredicateResult::S2
    } else {
        PredicateResult::S0
    }
}

pub fn step_insen(w: &[TokenId], j: u32, v: SeqView<'_>) -> PredicateResult {
    if find(v.sentence(j), w).is_some() {
        PredicateResult::S2
    } else if v.theta() == j {
        PredicateResult::S1
    } else {
        PredicateResult::S0
    }
}

pub fn step_order(wa: &[TokenId], wb: &[TokenId], v: SeqView<'_>) -> PredicateResult {
    match (find(v.body(), wa), find(v.body(), wb)) {
        (Some(a), Some(b)) if a < b => PredicateResult::S2,
        (Some(_), None) => PredicateResult::S1,
        _ => PredicateResult::S0,
    }
}

fn counting(
    sentence: Option<u32>,
    target: u32,
    v: SeqView<'_>,
    count: impl Fn(&[TokenId]) -> usize,
) -> PredicateResult {
    let (tokens, closed, open) = match sentence {
        Some(j) => {
            let theta = v.theta();
            if theta < j {
                return PredicateResult::S0;
            }
            (v.sentence(j), v.sentence_closed(j), theta == j)
        }
        None => {
            let body: Vec<TokenId> = v.body().iter().copied().filter(|&t| t != SEP).collect();
            let c = count(&body);
            // No separator closes the whole output, so an exact count is
            // reported as satisfied before EOS.
            return if c == target as usize {
                PredicateResult::S2
            } else if v.ended() {
                PredicateResult::S0
            } else {
                PredicateResult::progress(target as i64 - c as i64)
            };
        }
    };
    let c = count(tokens);
    if closed {
        if c == target as usize {
            PredicateResult::S2
        } else {
            PredicateResult::S0
        }
    } else if open {
        PredicateResult::progress(target as i64 - c as i64)
    } else {
        PredicateResult::S0
    }
}

/// Length of sentence `j` (or the whole output) must equal `l` tokens.
/// Separators and EOS do not count. A sentence-scoped count is judged when
/// the sentence closes; the whole-output count is satisfied whenever it
/// currently equals the target.
pub fn step_len(j: Option<u32>, l: u32, v: SeqView<'_>) -> PredicateResult {
    counting(j, l, v, |t| t.len())
}

pub fn step_stopwordcount(
    j: Option<u32>,
    s: u32,
    v: SeqView<'_>,
    stop_words: &HashSet<TokenId>,
) -> PredicateResult {
    counting(j, s, v, |t| t.iter().filter(|x| stop_words.contains(x)).count())
}

pub fn step_translatedonce(i: u32, v: SeqView<'_>) -> PredicateResult {
    let theta = v.theta();
    if theta > i {
        PredicateResult::S2
    } else if theta == i {
        PredicateResult::S1
    } else {
        PredicateResult::S0
    }
}

impl Atom {
    /// From-scratch operator dispatch.
    pub fn step(&self, v: SeqView<'_>, stop_words: &HashSet<TokenId>) -> PredicateResult {
        match self {
            Atom::Copy { keyword } => step_copy(keyword, v),
            Atom::InSen { keyword, sentence } => step_insen(keyword, *sentence, v),
            Atom::Order { first, second } => step_order(first, second, v),
            Atom::Len { sentence, target } => step_len(*sentence, *target, v),
            Atom::StopWordCount { sentence, target } => {
                step_stopwordcount(*sentence, *target, v, stop_words)
            }
            Atom::TranslatedOnce { sentence } => step_translatedonce(*sentence, v),
        }
    }
}
