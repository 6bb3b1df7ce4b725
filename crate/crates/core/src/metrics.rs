//! Corpus scoring: CSR, relaxed CSR, predicate-level rates, mention ratio
//! and sentence-aligned ratio.
//!
//! The checker here works on the token text directly and shares no code
//! with the logic tracker, so the two can be cross-checked.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::formula::{Atom, Formula, FormulaError};
use crate::vocab::{TokenId, Vocab, EOS, SEP};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty corpus")]
    Empty,
    #[error("example {index}: {source}")]
    Formula { index: usize, source: FormulaError },
}

/// How the ±δ tolerance is spent across numeric atoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlackMode {
    /// Each numeric atom may miss by at most δ.
    #[default]
    PerAtom,
    /// The misses of all relaxed atoms together may add up to at most δ.
    Summed,
}

impl std::str::FromStr for SlackMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "per_atom" | "per-atom" => Ok(Self::PerAtom),
            "summed" => Ok(Self::Summed),
            _ => Err(format!("unknown slack mode `{s}` (per_atom | summed)")),
        }
    }
}

/// Text view of a hypothesis.
struct Text<'a> {
    body: &'a [TokenId],
    ended: bool,
    /// Body split at separators; always at least one (possibly empty) piece.
    pieces: Vec<&'a [TokenId]>,
}

impl<'a> Text<'a> {
    fn new(hyp: &'a [TokenId]) -> Self {
        let (body, ended) = match hyp.iter().position(|&t| t == EOS) {
            Some(p) => (&hyp[..p], true),
            None => (hyp, false),
        };
        Self {
            body,
            ended,
            pieces: body.split(|&t| t == SEP).collect(),
        }
    }

    /// Sentence `j` (1-based) if it is complete: followed by a separator,
    /// or the last piece of an ended text.
    fn complete(&self, j: u32) -> Option<&'a [TokenId]> {
        let j = j as usize;
        if j == 0 || j > self.pieces.len() {
            return None;
        }
        if j < self.pieces.len() || self.ended {
            Some(self.pieces[j - 1])
        } else {
            None
        }
    }

    fn piece(&self, j: u32) -> &'a [TokenId] {
        self.pieces.get((j as usize).wrapping_sub(1)).copied().unwrap_or(&[])
    }
}

fn contains(hay: &[TokenId], needle: &[TokenId]) -> bool {
    first(hay, needle).is_some()
}

fn first(hay: &[TokenId], needle: &[TokenId]) -> Option<usize> {
    if needle.is_empty() {
        return None;
    }
    (0..hay.len().saturating_sub(needle.len() - 1)).find(|&i| hay[i..].starts_with(needle))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtomCheck {
    pub template: String,
    pub holds: bool,
    /// For Len and StopWordCount: distance between the measured count and
    /// the target, when the counted span is complete.
    pub slack: Option<u32>,
}

/// Truth of one atom on a hypothesis.
pub fn check_atom(atom: &Atom, hyp: &[TokenId], stops: &HashSet<TokenId>) -> AtomCheck {
    let text = Text::new(hyp);
    let count = |span: &[TokenId], stop_only: bool| -> usize {
        span.iter().filter(|&&t| t != SEP && (!stop_only || stops.contains(&t))).count()
    };
    let numeric = |sentence: &Option<u32>, target: u32, stop_only: bool| -> (bool, Option<u32>) {
        let span = match sentence {
            None => Some(text.body),
            Some(j) => text.complete(*j),
        };
        match span {
            None => (false, None),
            Some(s) => {
                let c = count(s, stop_only) as i64;
                let d = (c - target as i64).unsigned_abs() as u32;
                (d == 0, Some(d))
            }
        }
    };
    let (holds, slack) = match atom {
        Atom::Copy { keyword } => (contains(text.body, keyword), None),
        Atom::InSen { keyword, sentence } => (contains(text.piece(*sentence), keyword), None),
        Atom::Order { first: a, second: b } => {
            let ok = match (first(text.body, a), first(text.body, b)) {
                (Some(i), Some(k)) => i < k,
                _ => false,
            };
            (ok, None)
        }
        Atom::Len { sentence, target } => numeric(sentence, *target, false),
        Atom::StopWordCount { sentence, target } => numeric(sentence, *target, true),
        Atom::TranslatedOnce { sentence } => {
            let seps = text.body.iter().filter(|&&t| t == SEP).count();
            (seps >= *sentence as usize, None)
        }
    };
    AtomCheck {
        template: template(atom),
        holds,
        slack,
    }
}

/// Predicate name plus argument roles, e.g. `InSen(w, j)` or `Len(l)`.
pub fn template(atom: &Atom) -> String {
    match atom {
        Atom::Copy { .. } => "Copy(w)".into(),
        Atom::InSen { .. } => "InSen(w, j)".into(),
        Atom::Order { .. } => "Order(w1, w2)".into(),
        Atom::Len { sentence: Some(_), .. } => "Len(j, l)".into(),
        Atom::Len { sentence: None, .. } => "Len(l)".into(),
        Atom::StopWordCount { sentence: Some(_), .. } => "StopWordCount(j, s)".into(),
        Atom::StopWordCount { sentence: None, .. } => "StopWordCount(s)".into(),
        Atom::TranslatedOnce { .. } => "TranslatedOnce(i)".into(),
    }
}

#[derive(Debug, Clone)]
pub struct ExampleScore {
    pub formula: Formula,
    /// One entry per distinct atom, in [`Formula::atoms`] order.
    pub atoms: Vec<AtomCheck>,
    pub truncated: bool,
    /// Keyword mentions: (found anywhere, total) over positive literals.
    pub mentions: (usize, usize),
    /// Source and hypothesis sentence counts, when there is a source.
    pub sentences: Option<(usize, usize)>,
}

fn sentence_count(seq: &[TokenId]) -> usize {
    let text = Text::new(seq);
    let last_empty = text.pieces.last().is_none_or(|p| p.is_empty());
    text.pieces.len() - usize::from(last_empty)
}

impl ExampleScore {
    /// Exact satisfaction: the formula holds and the output is EOS-terminated.
    pub fn satisfied(&self) -> bool {
        self.satisfied_within(0, SlackMode::PerAtom)
    }

    /// Satisfaction with numeric atoms relaxed by `delta`. Negated
    /// literals are never relaxed.
    pub fn satisfied_within(&self, delta: u32, mode: SlackMode) -> bool {
        if self.truncated {
            return false;
        }
        let atoms = self.formula.atoms();
        let idx = |a: &Atom| atoms.iter().position(|b| b == a).unwrap();
        let eval = |relaxed: &dyn Fn(usize) -> bool| {
            self.formula.clauses.iter().all(|clause| {
                clause.iter().any(|lit| {
                    let k = idx(&lit.atom);
                    if lit.negated {
                        !self.atoms[k].holds
                    } else {
                        self.atoms[k].holds || relaxed(k)
                    }
                })
            })
        };
        if eval(&|_| false) {
            return true;
        }
        if delta == 0 {
            return false;
        }
        let failed: Vec<(usize, u32)> = self
            .atoms
            .iter()
            .enumerate()
            .filter_map(|(k, a)| match a.slack {
                Some(s) if !a.holds && s <= delta => Some((k, s)),
                _ => None,
            })
            .collect();
        match mode {
            SlackMode::PerAtom => eval(&|k| failed.iter().any(|f| f.0 == k)),
            SlackMode::Summed => {
                assert!(failed.len() < 24, "too many numeric atoms for summed slack");
                (1u32..1 << failed.len()).any(|mask| {
                    let chosen: Vec<&(usize, u32)> =
                        failed.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, f)| f).collect();
                    chosen.iter().map(|f| f.1).sum::<u32>() <= delta && eval(&|k| chosen.iter().any(|f| f.0 == k))
                })
            }
        }
    }

    /// Literal-level results keyed by template (`not ` prefix when negated).
    pub fn literal_results(&self) -> Vec<(String, bool)> {
        let atoms = self.formula.atoms();
        let mut out = Vec::new();
        for lit in self.formula.clauses.iter().flatten() {
            let k = atoms.iter().position(|b| *b == lit.atom).unwrap();
            let a = &self.atoms[k];
            if lit.negated {
                out.push((format!("not {}", a.template), !a.holds && !self.truncated));
            } else {
                out.push((a.template.clone(), a.holds && !self.truncated));
            }
        }
        out
    }
}

/// Scores one hypothesis against its constraint.
pub fn score_example(formula: &Formula, src: &[TokenId], hyp: &[TokenId], stops: &HashSet<TokenId>) -> ExampleScore {
    let atoms: Vec<AtomCheck> = formula.atoms().iter().map(|a| check_atom(a, hyp, stops)).collect();
    let text = Text::new(hyp);
    let mut mentions = (0, 0);
    for lit in formula.clauses.iter().flatten().filter(|l| !l.negated) {
        let kws: Vec<&[TokenId]> = match &lit.atom {
            Atom::Copy { keyword } | Atom::InSen { keyword, .. } => vec![keyword],
            Atom::Order { first, second } => vec![first, second],
            _ => vec![],
        };
        for k in kws {
            mentions.1 += 1;
            mentions.0 += usize::from(contains(text.body, k));
        }
    }
    ExampleScore {
        formula: formula.clone(),
        atoms,
        truncated: !text.ended,
        mentions,
        sentences: (!src.is_empty()).then(|| (sentence_count(src), sentence_count(hyp))),
    }
}

pub fn score_text(expr: &str, src: &[TokenId], hyp: &[TokenId], vocab: &Vocab) -> Result<ExampleScore, FormulaError> {
    let f = Formula::parse(expr, vocab)?;
    Ok(score_example(&f, src, hyp, vocab.stop_words()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub hits: usize,
    pub total: usize,
    pub rate: f64,
}

impl Rate {
    fn new(hits: usize, total: usize) -> Self {
        Self {
            hits,
            total,
            rate: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub truncated: usize,
    pub slack_mode: SlackMode,
    pub csr: f64,
    pub csr_pm1: f64,
    pub csr_pm2: f64,
    /// Literal-level rates by atom template.
    pub per_predicate: BTreeMap<String, Rate>,
    pub mention_ratio: Option<f64>,
    /// Only over examples that have a source document.
    pub sar: Option<f64>,
}

/// Folds scored examples into a report.
pub fn aggregate(scores: &[ExampleScore], mode: SlackMode) -> Result<EvalReport, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = scores.len();
    let frac = |f: &dyn Fn(&ExampleScore) -> bool| scores.iter().filter(|s| f(s)).count() as f64 / n as f64;
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let (mut m_hit, mut m_tot, mut s_hit, mut s_tot) = (0, 0, 0, 0);
    for s in scores {
        for (t, ok) in s.literal_results() {
            let e = per.entry(t).or_default();
            e.0 += usize::from(ok);
            e.1 += 1;
        }
        m_hit += s.mentions.0;
        m_tot += s.mentions.1;
        if let Some((a, b)) = s.sentences {
            s_tot += 1;
            s_hit += usize::from(a == b);
        }
    }
    Ok(EvalReport {
        n,
        truncated: scores.iter().filter(|s| s.truncated).count(),
        slack_mode: mode,
        csr: frac(&|s| s.satisfied()),
        csr_pm1: frac(&|s| s.satisfied_within(1, mode)),
        csr_pm2: frac(&|s| s.satisfied_within(2, mode)),
        per_predicate: per.into_iter().map(|(k, (h, t))| (k, Rate::new(h, t))).collect(),
        mention_ratio: (m_tot > 0).then(|| m_hit as f64 / m_tot as f64),
        sar: (s_tot > 0).then(|| s_hit as f64 / s_tot as f64),
    })
}

/// Scores `(expr, src, hyp)` triples.
pub fn evaluate<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a [TokenId], &'a [TokenId])>,
    vocab: &Vocab,
    mode: SlackMode,
) -> Result<EvalReport, EvalError> {
    let mut scores = Vec::new();
    for (index, (expr, src, hyp)) in items.into_iter().enumerate() {
        scores.push(score_text(expr, src, hyp, vocab).map_err(|source| EvalError::Formula { index, source })?);
    }
    aggregate(&scores, mode)
}

impl EvalReport {
    pub fn passes_gate(&self, min_csr: f64) -> bool {
        self.csr >= min_csr
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let pct = |v: f64| format!("{:6.2}%", 100.0 * v);
        let mut rows: Vec<(String, String)> = vec![
            ("examples".into(), self.n.to_string()),
            ("truncated".into(), self.truncated.to_string()),
            ("CSR".into(), pct(self.csr)),
            ("CSR(+-1)".into(), pct(self.csr_pm1)),
            ("CSR(+-2)".into(), pct(self.csr_pm2)),
        ];
        if let Some(m) = self.mention_ratio {
            rows.push(("mention ratio".into(), pct(m)));
        }
        if let Some(s) = self.sar {
            rows.push(("SAR".into(), pct(s)));
        }
        for (k, r) in &self.per_predicate {
            rows.push((k.clone(), format!("{} ({}/{})", pct(r.rate), r.hits, r.total)));
        }
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<w$}  {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v() -> Vocab {
        Vocab::synthetic(64).unwrap()
    }

    fn score(expr: &str, hyp: &str) -> ExampleScore {
        let v = v();
        score_text(expr, &[], &v.encode(hyp).unwrap(), &v).unwrap()
    }

    #[test]
    fn len_off_by_one_passes_only_relaxed() {
        let hyp = "car snow dog tree house river road bird school yard park . </s>";
        let s = score("Len(1, 12)", hyp);
        assert_eq!(s.atoms[0].slack, Some(1));
        assert!(!s.satisfied());
        assert!(s.satisfied_within(1, SlackMode::PerAtom));
        assert!(s.satisfied_within(2, SlackMode::Summed));
    }

    #[test]
    fn empty_formula_is_satisfied() {
        assert!(score("", "</s>").satisfied());
    }

    #[test]
    fn truncation_fails_everything() {
        let s = score("Copy(car)", "car");
        assert!(s.atoms[0].holds);
        assert!(!s.satisfied_within(2, SlackMode::PerAtom));
    }

    #[test]
    fn summed_mode_is_stricter() {
        let s = score("Len(1, 3) & Len(2, 3)", "car snow . dog tree . </s>");
        assert!(s.satisfied_within(1, SlackMode::PerAtom));
        assert!(!s.satisfied_within(1, SlackMode::Summed));
        assert!(s.satisfied_within(2, SlackMode::Summed));
    }

    #[test]
    fn negated_literals_are_not_relaxed() {
        let s = score("not Len(1, 3)", "car snow . </s>");
        assert!(s.satisfied());
        let s = score("not Len(1, 2)", "car snow . </s>");
        assert!(!s.satisfied_within(2, SlackMode::PerAtom));
    }

    #[test]
    fn single_satisfied_example_rates_are_one() {
        let v = v();
        let hyp = v.encode("car the snow . </s>").unwrap();
        let r = evaluate([("InSen(car, 1) & Copy(snow) & Len(1, 3)", &[][..], &hyp[..])], &v, SlackMode::PerAtom).unwrap();
        assert_eq!((r.csr, r.csr_pm1, r.csr_pm2), (1.0, 1.0, 1.0));
        assert_eq!(r.mention_ratio, Some(1.0));
        assert!(r.per_predicate.values().all(|x| x.rate == 1.0));
        assert!(r.to_table().contains("InSen(w, j)"));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(aggregate(&[], SlackMode::PerAtom), Err(EvalError::Empty)));
    }

    #[test]
    fn sentence_alignment() {
        let v = v();
        let src = v.encode("car . dog .").unwrap();
        let s = score_example(&Formula::default(), &src, &v.encode("snow . tree </s>").unwrap(), v.stop_words());
        assert_eq!(s.sentences, Some((2, 2)));
    }
}
