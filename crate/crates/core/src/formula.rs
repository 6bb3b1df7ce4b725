//! Constraint formulas: conjunctions of disjunctions of signed predicate atoms.
//!
//! The surface syntax is the one fed to the model's encoder:
//!
//! ```text
//! InSen(waitressing job, 3) & (Len(3, 16) || StopWordCount(3, 8)) & (not InSen(tenacity, 3))
//! ```
//!
//! `&` joins clauses, `||` joins literals inside a parenthesised clause and
//! `not` negates a single atom. `∧`, `∨` and `¬` are accepted as aliases.
//! A bare `A || B` is accepted only when it is the whole formula; mixing a
//! top-level `||` with `&` is rejected as ambiguous, and so is any nesting
//! deeper than one parenthesised OR-group per conjunct.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::predicates::{registry_lookup, ArgKind, PredicateKind};
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Argument {
    Keyword(Vec<TokenId>),
    Sentence(u32),
    Int(u32),
}

/// A predicate applied to its arguments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Atom {
    Copy { keyword: Vec<TokenId> },
    InSen { keyword: Vec<TokenId>, sentence: u32 },
    Order { first: Vec<TokenId>, second: Vec<TokenId> },
    /// `sentence: None` constrains the whole output.
    Len { sentence: Option<u32>, target: u32 },
    StopWordCount { sentence: Option<u32>, target: u32 },
    TranslatedOnce { sentence: u32 },
}

impl Atom {
    pub fn kind(&self) -> PredicateKind {
        match self {
            Atom::Copy { .. } => PredicateKind::Copy,
            Atom::InSen { .. } => PredicateKind::InSen,
            Atom::Order { .. } => PredicateKind::Order,
            Atom::Len { .. } => PredicateKind::Len,
            Atom::StopWordCount { .. } => PredicateKind::StopWordCount,
            Atom::TranslatedOnce { .. } => PredicateKind::TranslatedOnce,
        }
    }

    pub fn args(&self) -> Vec<Argument> {
        match self {
            Atom::Copy { keyword } => vec![Argument::Keyword(keyword.clone())],
            Atom::InSen { keyword, sentence } => {
                vec![Argument::Keyword(keyword.clone()), Argument::Sentence(*sentence)]
            }
            Atom::Order { first, second } => vec![
                Argument::Keyword(first.clone()),
                Argument::Keyword(second.clone()),
            ],
            Atom::Len { sentence, target } | Atom::StopWordCount { sentence, target } => {
                let mut v = Vec::with_capacity(2);
                if let Some(s) = sentence {
                    v.push(Argument::Sentence(*s));
                }
                v.push(Argument::Int(*target));
                v
            }
            Atom::TranslatedOnce { sentence } => vec![Argument::Sentence(*sentence)],
        }
    }

    fn from_args(kind: PredicateKind, args: Vec<Argument>) -> Atom {
        use Argument::*;
        let mut it = args.into_iter();
        let mut next = || it.next().expect("arity checked by caller");
        match kind {
            PredicateKind::Copy => match next() {
                Keyword(keyword) => Atom::Copy { keyword },
                _ => unreachable!(),
            },
            PredicateKind::InSen => match (next(), next()) {
                (Keyword(keyword), Sentence(sentence)) => Atom::InSen { keyword, sentence },
                _ => unreachable!(),
            },
            PredicateKind::Order => match (next(), next()) {
                (Keyword(first), Keyword(second)) => Atom::Order { first, second },
                _ => unreachable!(),
            },
            PredicateKind::Len | PredicateKind::StopWordCount => {
                let a = next();
                let (sentence, target) = match a {
                    Int(t) => (None, t),
                    Sentence(s) => match next() {
                        Int(t) => (Some(s), t),
                        _ => unreachable!(),
                    },
                    _ => unreachable!(),
                };
                if kind == PredicateKind::Len {
                    Atom::Len { sentence, target }
                } else {
                    Atom::StopWordCount { sentence, target }
                }
            }
            PredicateKind::TranslatedOnce => match next() {
                Sentence(sentence) => Atom::TranslatedOnce { sentence },
                _ => unreachable!(),
            },
        }
    }

    /// Keyword token sequences mentioned by this atom.
    pub fn keywords(&self) -> Vec<&[TokenId]> {
        match self {
            Atom::Copy { keyword } | Atom::InSen { keyword, .. } => vec![keyword.as_slice()],
            Atom::Order { first, second } => vec![first.as_slice(), second.as_slice()],
            _ => Vec::new(),
        }
    }

    /// Sentence index this atom is scoped to, if any.
    pub fn sentence(&self) -> Option<u32> {
        match self {
            Atom::InSen { sentence, .. } | Atom::TranslatedOnce { sentence } => Some(*sentence),
            Atom::Len { sentence, .. } | Atom::StopWordCount { sentence, .. } => *sentence,
            _ => None,
        }
    }

    pub fn render(&self, vocab: &Vocab) -> String {
        let mut s = String::new();
        s.push_str(self.kind().name());
        s.push('(');
        let args: Vec<String> = self
            .args()
            .iter()
            .map(|a| match a {
                Argument::Keyword(k) => vocab.decode(k),
                Argument::Sentence(n) | Argument::Int(n) => n.to_string(),
            })
            .collect();
        s.push_str(&args.join(", "));
        s.push(')');
        s
    }

    fn push_tokens(&self, vocab: &Vocab, out: &mut Vec<TokenId>) {
        out.push(vocab.syntax(self.kind().name()));
        out.push(vocab.syntax("("));
        for (i, a) in self.args().iter().enumerate() {
            if i > 0 {
                out.push(vocab.syntax(","));
            }
            match a {
                Argument::Keyword(k) => out.extend_from_slice(k),
                Argument::Sentence(n) | Argument::Int(n) => push_digits(*n, out),
            }
        }
        out.push(vocab.syntax(")"));
    }
}

fn push_digits(n: u32, out: &mut Vec<TokenId>) {
    for c in n.to_string().chars() {
        out.push(Vocab::digit(c.to_digit(10).unwrap()));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Literal {
    pub atom: Atom,
    pub negated: bool,
}

impl Literal {
    pub fn pos(atom: Atom) -> Self {
        Self {
            atom,
            negated: false,
        }
    }

    pub fn neg(atom: Atom) -> Self {
        Self {
            atom,
            negated: true,
        }
    }
}

/// Disjunction of literals.
pub type Clause = Vec<Literal>;

/// Conjunction of clauses. The empty formula is TRUE.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct Formula {
    pub clauses: Vec<Clause>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormulaError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown predicate `{name}` at offset {offset}")]
    UnknownPredicate { name: String, offset: usize },
    #[error("`{name}` at offset {offset} takes {expected} argument(s), got {got}")]
    Arity {
        name: String,
        offset: usize,
        expected: String,
        got: usize,
    },
    #[error("argument {index} of `{name}` at offset {offset}: expected {expected}")]
    ArgumentKind {
        name: String,
        offset: usize,
        index: usize,
        expected: &'static str,
    },
    #[error("unknown word `{word}` at offset {offset}")]
    UnknownWord { word: String, offset: usize },
    #[error("nesting deeper than a conjunction of OR-groups at offset {offset}")]
    TooDeep { offset: usize },
    #[error("ambiguous mix of `&` and top-level `||` at offset {offset}; parenthesise the OR-group")]
    Ambiguous { offset: usize },
    #[error("atom `{0}` has no truth value in the assignment")]
    MissingAtom(String),
}

impl Formula {
    pub fn new(clauses: Vec<Clause>) -> Self {
        Self { clauses }
    }

    /// Parses the textual constraint syntax.
    pub fn parse(text: &str, vocab: &Vocab) -> Result<Self, FormulaError> {
        Parser::new(text, vocab).formula()
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    /// Distinct atoms in left-to-right order of first occurrence. The
    /// position of an atom in this list is its predicate index.
    pub fn atoms(&self) -> Vec<Atom> {
        let mut out: Vec<Atom> = Vec::new();
        for lit in self.clauses.iter().flatten() {
            if !out.contains(&lit.atom) {
                out.push(lit.atom.clone());
            }
        }
        out
    }

    /// Index of `atom` in [`Formula::atoms`].
    pub fn atom_index(&self, atom: &Atom) -> Option<usize> {
        self.atoms().iter().position(|a| a == atom)
    }

    /// CNF evaluation against an explicit assignment.
    pub fn evaluate(&self, assign: &HashMap<Atom, bool>) -> Result<bool, FormulaError> {
        let mut all = true;
        for clause in &self.clauses {
            let mut any = false;
            for lit in clause {
                let v = *assign
                    .get(&lit.atom)
                    .ok_or_else(|| FormulaError::MissingAtom(format!("{:?}", lit.atom)))?;
                any |= v != lit.negated;
            }
            all &= any;
        }
        Ok(all)
    }

    /// Evaluation with truth values indexed like [`Formula::atoms`].
    pub fn evaluate_indexed(&self, truth: &[bool]) -> bool {
        let atoms = self.atoms();
        assert_eq!(truth.len(), atoms.len(), "one truth value per atom");
        self.clauses.iter().all(|clause| {
            clause.iter().any(|lit| {
                let k = atoms.iter().position(|a| *a == lit.atom).unwrap();
                truth[k] != lit.negated
            })
        })
    }

    pub fn render(&self, vocab: &Vocab) -> String {
        let mut s = String::new();
        for (ci, clause) in self.clauses.iter().enumerate() {
            if ci > 0 {
                s.push_str(" & ");
            }
            let grouped = clause.len() > 1;
            if grouped {
                s.push('(');
            }
            for (li, lit) in clause.iter().enumerate() {
                if li > 0 {
                    s.push_str(" || ");
                }
                if lit.negated {
                    s.push_str("not ");
                }
                let _ = write!(s, "{}", lit.atom.render(vocab));
            }
            if grouped {
                s.push(')');
            }
        }
        s
    }

    /// Data-vocabulary tokens of the rendered formula, with the index of the
    /// atom owning each token (`None` for connectives and group brackets).
    pub fn render_tokens(&self, vocab: &Vocab) -> (Vec<TokenId>, Vec<Option<usize>>) {
        let atoms = self.atoms();
        let mut toks = Vec::new();
        let mut owner = Vec::new();
        let mut push = |t: &[TokenId], o: Option<usize>, toks: &mut Vec<TokenId>| {
            toks.extend_from_slice(t);
            owner.extend(std::iter::repeat(o).take(t.len()));
        };
        for (ci, clause) in self.clauses.iter().enumerate() {
            if ci > 0 {
                push(&[vocab.syntax("&")], None, &mut toks);
            }
            let grouped = clause.len() > 1;
            if grouped {
                push(&[vocab.syntax("(")], None, &mut toks);
            }
            for (li, lit) in clause.iter().enumerate() {
                if li > 0 {
                    push(&[vocab.syntax("||")], None, &mut toks);
                }
                if lit.negated {
                    push(&[vocab.syntax("not")], None, &mut toks);
                }
                let k = atoms.iter().position(|a| *a == lit.atom);
                let mut t = Vec::new();
                lit.atom.push_tokens(vocab, &mut t);
                push(&t, k, &mut toks);
            }
            if grouped {
                push(&[vocab.syntax(")")], None, &mut toks);
            }
        }
        (toks, owner)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    LParen,
    RParen,
    Comma,
    And,
    Or,
    Not,
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end: usize,
    vocab: &'a Vocab,
    lex_error: Option<FormulaError>,
}

fn lex(text: &str) -> Result<(Vec<(Tok, usize)>, usize), FormulaError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let start = i;
        match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '(' => out.push((Tok::LParen, start)),
            ')' => out.push((Tok::RParen, start)),
            ',' => out.push((Tok::Comma, start)),
            '&' | '∧' => {
                if c == '&' && chars.get(i + 1) == Some(&'&') {
                    i += 1;
                }
                out.push((Tok::And, start))
            }
            '∨' => out.push((Tok::Or, start)),
            '¬' => out.push((Tok::Not, start)),
            '|' => {
                if chars.get(i + 1) == Some(&'|') {
                    i += 1;
                    out.push((Tok::Or, start));
                } else {
                    return Err(FormulaError::Syntax {
                        offset: start,
                        message: "expected `||`".into(),
                    });
                }
            }
            _ => {
                let mut w = String::new();
                while i < chars.len() && !is_delim(chars[i]) {
                    w.push(chars[i]);
                    i += 1;
                }
                let tok = if w.eq_ignore_ascii_case("not") {
                    Tok::Not
                } else {
                    Tok::Word(w)
                };
                out.push((tok, start));
                continue;
            }
        }
        i += 1;
    }
    Ok((out, chars.len()))
}

fn is_delim(c: char) -> bool {
    c.is_whitespace() || "(),&|∧∨¬".contains(c)
}

impl<'a> Parser<'a> {
    fn new(text: &str, vocab: &'a Vocab) -> Self {
        match lex(text) {
            Ok((toks, end)) => Self {
                toks,
                pos: 0,
                end,
                vocab,
                lex_error: None,
            },
            Err(e) => Self {
                toks: Vec::new(),
                pos: 0,
                end: 0,
                vocab,
                lex_error: Some(e),
            },
        }
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(_, o)| *o).unwrap_or(self.end)
    }

    fn syntax<T>(&self, message: impl Into<String>) -> Result<T, FormulaError> {
        Err(FormulaError::Syntax {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), FormulaError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            self.syntax(format!("expected {what}"))
        }
    }

    fn formula(mut self) -> Result<Formula, FormulaError> {
        if let Some(e) = self.lex_error.take() {
            return Err(e);
        }
        let mut clauses = Vec::new();
        if self.peek().is_none() {
            return Ok(Formula { clauses });
        }
        clauses.push(self.conjunct()?);
        if self.peek() == Some(&Tok::Or) {
            // Bare top-level disjunction: only valid as the whole formula.
            while self.peek() == Some(&Tok::Or) {
                self.pos += 1;
                let lit = self.literal()?;
                clauses[0].push(lit);
            }
            if self.peek() == Some(&Tok::And) {
                return Err(FormulaError::Ambiguous {
                    offset: self.offset(),
                });
            }
        }
        while self.peek() == Some(&Tok::And) {
            self.pos += 1;
            clauses.push(self.conjunct()?);
            if self.peek() == Some(&Tok::Or) {
                return Err(FormulaError::Ambiguous {
                    offset: self.offset(),
                });
            }
        }
        if self.peek().is_some() {
            return self.syntax("expected `&` or end of input");
        }
        Ok(Formula { clauses })
    }

    fn conjunct(&mut self) -> Result<Clause, FormulaError> {
        if self.peek() == Some(&Tok::LParen) {
            self.pos += 1;
            let mut clause = vec![self.literal()?];
            while self.peek() == Some(&Tok::Or) {
                self.pos += 1;
                clause.push(self.literal()?);
            }
            if self.peek() == Some(&Tok::And) {
                return Err(FormulaError::TooDeep {
                    offset: self.offset(),
                });
            }
            self.expect(Tok::RParen, "`)` or `||`")?;
            Ok(clause)
        } else {
            Ok(vec![self.literal()?])
        }
    }

    fn literal(&mut self) -> Result<Literal, FormulaError> {
        let mut negated = false;
        if self.peek() == Some(&Tok::Not) {
            self.pos += 1;
            negated = true;
        }
        match self.peek() {
            Some(Tok::LParen) | Some(Tok::Not) => Err(FormulaError::TooDeep {
                offset: self.offset(),
            }),
            Some(Tok::Word(_)) => Ok(Literal {
                atom: self.atom()?,
                negated,
            }),
            _ => self.syntax("expected a predicate call"),
        }
    }

    fn atom(&mut self) -> Result<Atom, FormulaError> {
        let offset = self.offset();
        let name = match self.peek() {
            Some(Tok::Word(w)) => w.clone(),
            _ => return self.syntax("expected a predicate name"),
        };
        self.pos += 1;
        let desc = registry_lookup(&name).map_err(|_| FormulaError::UnknownPredicate {
            name: name.clone(),
            offset,
        })?;
        self.expect(Tok::LParen, "`(` after predicate name")?;
        // Each raw argument is a run of words with the offset of its first word.
        let mut raw: Vec<(Vec<String>, usize)> = Vec::new();
        let mut cur: Vec<String> = Vec::new();
        let mut cur_off = self.offset();
        loop {
            match self.peek().cloned() {
                Some(Tok::Word(w)) => {
                    if cur.is_empty() {
                        cur_off = self.offset();
                    }
                    cur.push(w);
                    self.pos += 1;
                }
                Some(Tok::Comma) => {
                    if cur.is_empty() {
                        return self.syntax("empty argument");
                    }
                    raw.push((std::mem::take(&mut cur), cur_off));
                    self.pos += 1;
                }
                Some(Tok::RParen) => {
                    if !cur.is_empty() {
                        raw.push((std::mem::take(&mut cur), cur_off));
                    } else if !raw.is_empty() {
                        return self.syntax("empty argument");
                    }
                    self.pos += 1;
                    break;
                }
                Some(Tok::LParen) => {
                    return Err(FormulaError::TooDeep {
                        offset: self.offset(),
                    })
                }
                Some(_) => return self.syntax("unexpected token in argument list"),
                None => return self.syntax("unterminated argument list"),
            }
        }
        let sig = desc
            .signatures
            .iter()
            .find(|s| s.len() == raw.len())
            .ok_or_else(|| FormulaError::Arity {
                name: desc.name.to_string(),
                offset,
                expected: desc
                    .signatures
                    .iter()
                    .map(|s| s.len().to_string())
                    .collect::<Vec<_>>()
                    .join(" or "),
                got: raw.len(),
            })?;
        let mut args = Vec::with_capacity(raw.len());
        for (index, ((words, off), kind)) in raw.into_iter().zip(sig.iter()).enumerate() {
            let arg = match kind {
                ArgKind::Keyword => {
                    let mut ids = Vec::with_capacity(words.len());
                    for w in &words {
                        let id = self.vocab.id(w).map_err(|_| FormulaError::UnknownWord {
                            word: w.clone(),
                            offset: off,
                        })?;
                        if !self.vocab.is_content(id) {
                            return Err(FormulaError::ArgumentKind {
                                name: desc.name.to_string(),
                                offset: off,
                                index,
                                expected: "content words",
                            });
                        }
                        ids.push(id);
                    }
                    Argument::Keyword(ids)
                }
                ArgKind::SentenceIndex | ArgKind::Int => {
                    let n = match words.as_slice() {
                        [w] => w.parse::<u32>().ok(),
                        _ => None,
                    };
                    let min = kind.min_value(desc.kind);
                    match n {
                        Some(n) if n >= min => {
                            if *kind == ArgKind::SentenceIndex {
                                Argument::Sentence(n)
                            } else {
                                Argument::Int(n)
                            }
                        }
                        _ => {
                            return Err(FormulaError::ArgumentKind {
                                name: desc.name.to_string(),
                                offset: off,
                                index,
                                expected: if min == 0 {
                                    "a non-negative integer"
                                } else {
                                    "a positive integer"
                                },
                            })
                        }
                    }
                }
            };
            args.push(arg);
        }
        Ok(Atom::from_args(desc.kind, args))
    }
}
