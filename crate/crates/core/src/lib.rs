//! Rule-execution tracking for constrained sequence-to-sequence generation.
//!
//! Constraints are predicate-logic formulas ([`formula`]). While a sequence
//! is decoded, a logic tracker ([`predicates`], [`tracking`]) records the
//! progress of every predicate as a per-input-token state flag. The flags
//! are encoded and injected into a transformer's cross-attention as
//! relative positions ([`neural`]).

pub mod decoding;
pub mod formula;
pub mod metrics;
pub mod neural;
pub mod predicates;
pub mod train;
pub mod synth;
pub mod tracking;
pub mod vocab;

pub use formula::{Argument, Atom, Formula, FormulaError, Literal};
pub use predicates::{PredicateKind, PredicateResult, SeqView, StateStatus};
pub use tracking::{IncrementalTracker, StateMatrix, Tracker, Verdict};
pub use vocab::{TokenId, Vocab, BOS, EOS, PAD, SEP};
