//! State flags, state matrices and the incremental logic tracker.
//!
//! The encoder input is `x = src ++ tokens(render(formula))`. Every token
//! of an atom's `Name(args)` call carries that atom's progress; every other
//! token carries `N`. Column `t` of a matrix is the flag state after the
//! decoder prefix `y_:t`.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use thiserror::Error;

use crate::formula::{Atom, Formula};
use crate::predicates::{PredicateResult, SeqView, StateStatus};
use crate::vocab::{TokenId, Vocab, EOS, SEP};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrackError {
    #[error("constraint span {start}..{end} does not match the rendered formula ({detail})")]
    SpanMismatch {
        start: usize,
        end: usize,
        detail: String,
    },
    #[error("compressed slot {slot} has {count} non-N constituents at ({row}, {col})")]
    MergeViolation {
        slot: usize,
        row: usize,
        col: usize,
        count: usize,
    },
}

/// Input positions owned by each atom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub spans: Vec<Vec<usize>>,
    /// Atom owning each input position.
    pub token_atom: Vec<Option<usize>>,
}

impl Alignment {
    pub fn n_atoms(&self) -> usize {
        self.spans.len()
    }

    pub fn len(&self) -> usize {
        self.token_atom.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_atom.is_empty()
    }
}

/// Maps every atom of `f` to the positions of its call inside `x[span]`.
pub fn align(
    f: &Formula,
    x: &[TokenId],
    span: Range<usize>,
    vocab: &Vocab,
) -> Result<Alignment, TrackError> {
    let mismatch = |detail: String| TrackError::SpanMismatch {
        start: span.start,
        end: span.end,
        detail,
    };
    if span.end > x.len() || span.start > span.end {
        return Err(mismatch(format!("input has {} tokens", x.len())));
    }
    let (toks, owner) = f.render_tokens(vocab);
    if toks.len() != span.len() {
        return Err(mismatch(format!("rendered formula has {} tokens", toks.len())));
    }
    if let Some(p) = (0..toks.len()).find(|&p| toks[p] != x[span.start + p]) {
        return Err(mismatch(format!("first difference at position {}", span.start + p)));
    }
    let mut spans = vec![Vec::new(); f.atoms().len()];
    let mut token_atom = vec![None; x.len()];
    for (p, o) in owner.iter().enumerate() {
        if let Some(k) = *o {
            spans[k].push(span.start + p);
            token_atom[span.start + p] = Some(k);
        }
    }
    Ok(Alignment { spans, token_atom })
}

/// Assignment of atoms to flag slots. Without compression every atom has
/// its own slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlagLayout {
    pub slots: Vec<Vec<usize>>,
    slot_of: Vec<usize>,
}

impl FlagLayout {
    pub fn identity(n: usize) -> Self {
        Self::from_slots((0..n).map(|k| vec![k]).collect(), n)
    }

    fn from_slots(slots: Vec<Vec<usize>>, n: usize) -> Self {
        let mut slot_of = vec![0; n];
        for (s, members) in slots.iter().enumerate() {
            for &k in members {
                slot_of[k] = s;
            }
        }
        Self { slots, slot_of }
    }

    /// Merges same-predicate atoms whose variables are disjoint, or whose
    /// in-progress periods cannot overlap.
    pub fn compressed(atoms: &[Atom]) -> Self {
        Self::greedy(atoms, |a, b| static_mergeable(&atoms[a], &atoms[b]))
    }

    fn greedy(atoms: &[Atom], ok: impl Fn(usize, usize) -> bool) -> Self {
        let mut slots: Vec<Vec<usize>> = Vec::new();
        for k in 0..atoms.len() {
            match slots.iter_mut().find(|s| {
                atoms[s[0]].kind() == atoms[k].kind() && s.iter().all(|&m| ok(m, k))
            }) {
                Some(s) => s.push(k),
                None => slots.push(vec![k]),
            }
        }
        Self::from_slots(slots, atoms.len())
    }

    pub fn n_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn slot_of(&self, atom: usize) -> usize {
        self.slot_of[atom]
    }

    pub fn is_identity(&self) -> bool {
        self.slots.iter().all(|s| s.len() == 1)
    }
}

fn variables(a: &Atom) -> (HashSet<TokenId>, Option<u32>) {
    let words = a.keywords().into_iter().flatten().copied().collect();
    (words, a.sentence())
}

fn static_mergeable(a: &Atom, b: &Atom) -> bool {
    if a.kind() != b.kind() {
        return false;
    }
    let (wa, sa) = variables(a);
    let (wb, sb) = variables(b);
    let disjoint = wa.is_disjoint(&wb) && (sa.is_none() || sa != sb);
    // Sentence-scoped atoms of different sentences are in progress at
    // different times.
    let periods_apart = matches!((sa, sb), (Some(i), Some(j)) if i != j);
    disjoint || periods_apart
}

/// Flag of one input token at one step: one entry per slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateFlag {
    pub entries: Vec<PredicateResult>,
}

impl fmt::Display for StateFlag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, e) in self.entries.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

/// Per-atom operator results plus the alignment that turns them into a
/// grid of per-token flags. Columns are shared, so cloning and appending
/// never copy earlier columns' contents.
#[derive(Debug, Clone)]
pub struct StateMatrix {
    alignment: Arc<Alignment>,
    layout: Arc<FlagLayout>,
    columns: Vec<Arc<[PredicateResult]>>,
}

impl StateMatrix {
    pub fn new(alignment: Arc<Alignment>, layout: Arc<FlagLayout>) -> Self {
        Self {
            alignment,
            layout,
            columns: Vec::new(),
        }
    }

    pub fn push_column(&mut self, col: Vec<PredicateResult>) {
        assert_eq!(col.len(), self.alignment.n_atoms());
        self.columns.push(col.into());
    }

    /// Rows: input tokens.
    pub fn n_rows(&self) -> usize {
        self.alignment.len()
    }

    /// Columns: decoding steps.
    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn alignment(&self) -> &Alignment {
        &self.alignment
    }

    pub fn layout(&self) -> &FlagLayout {
        &self.layout
    }

    /// Per-atom results behind column `t`.
    pub fn column(&self, t: usize) -> &[PredicateResult] {
        &self.columns[t]
    }

    pub fn flag(&self, i: usize, t: usize) -> StateFlag {
        let mut entries = vec![PredicateResult::N; self.layout.n_slots()];
        if let Some(k) = self.alignment.token_atom[i] {
            entries[self.layout.slot_of(k)] = self.columns[t][k];
        }
        StateFlag { entries }
    }

    /// Distinct flag strings of column `t`: index 0 is the flag of tokens
    /// outside every call, index `k + 1` the flag of atom `k`'s tokens.
    pub fn class_flags(&self, t: usize) -> Vec<String> {
        let slots = self.layout.n_slots();
        let mut out = Vec::with_capacity(self.alignment.n_atoms() + 1);
        out.push(
            StateFlag {
                entries: vec![PredicateResult::N; slots],
            }
            .to_string(),
        );
        for k in 0..self.alignment.n_atoms() {
            let mut entries = vec![PredicateResult::N; slots];
            entries[self.layout.slot_of(k)] = self.columns[t][k];
            out.push(StateFlag { entries }.to_string());
        }
        out
    }

    /// Flag class of every input token, see [`StateMatrix::class_flags`].
    pub fn token_classes(&self) -> Vec<usize> {
        self.alignment
            .token_atom
            .iter()
            .map(|o| o.map_or(0, |k| k + 1))
            .collect()
    }

    pub fn render_cell(&self, i: usize, t: usize) -> String {
        self.flag(i, t).to_string()
    }

    /// Same matrix without its last `n_cols - keep` columns.
    pub fn truncated(&self, keep: usize) -> Self {
        let mut m = self.clone();
        m.columns.truncate(keep);
        m
    }

    /// Every rendered cell, row-major.
    pub fn render_grid(&self) -> Vec<Vec<String>> {
        (0..self.n_rows())
            .map(|i| (0..self.n_cols()).map(|t| self.render_cell(i, t)).collect())
            .collect()
    }

    /// Tab-separated dump: one row per input token, one column per step.
    pub fn to_tsv(&self, x: &[TokenId], vocab: &Vocab) -> String {
        let mut s = String::from("token");
        for t in 0..self.n_cols() {
            s.push_str(&format!("\t{t}"));
        }
        s.push('\n');
        for i in 0..self.n_rows() {
            s.push_str(vocab.word(x[i]).unwrap_or("<unk>"));
            for t in 0..self.n_cols() {
                s.push('\t');
                s.push_str(&self.render_cell(i, t));
            }
            s.push('\n');
        }
        s
    }

    /// Atom truth from the last column: some aligned cell is at status 2.
    pub fn atom_truth(&self) -> Vec<bool> {
        let Some(t) = self.n_cols().checked_sub(1) else {
            return vec![false; self.alignment.n_atoms()];
        };
        (0..self.alignment.n_atoms())
            .map(|k| {
                let slot = self.layout.slot_of(k);
                self.alignment.spans[k]
                    .iter()
                    .any(|&i| self.flag(i, t).entries[slot].is_satisfied())
            })
            .collect()
    }

    /// Additionally merges same-predicate atoms whose observed in-progress
    /// periods do not overlap. Slots that would hold two non-N entries in
    /// one cell are split back up.
    pub fn compress(&self, atoms: &[Atom]) -> Result<StateMatrix, TrackError> {
        let s1_cols = |k: usize| -> Vec<usize> {
            (0..self.n_cols())
                .filter(|&t| self.columns[t][k].status == StateStatus::S1)
                .collect()
        };
        let periods: Vec<Vec<usize>> = (0..atoms.len()).map(s1_cols).collect();
        let apart = |a: usize, b: usize| periods[a].iter().all(|t| !periods[b].contains(t));
        let layout = FlagLayout::greedy(atoms, |a, b| {
            static_mergeable(&atoms[a], &atoms[b]) || apart(a, b)
        });
        let mut slots = Vec::new();
        for members in layout.slots {
            if self.slot_conflict(&members).is_none() {
                slots.push(members);
            } else {
                slots.extend(members.into_iter().map(|k| vec![k]));
            }
        }
        let out = StateMatrix {
            alignment: self.alignment.clone(),
            layout: Arc::new(FlagLayout::from_slots(slots, atoms.len())),
            columns: self.columns.clone(),
        };
        out.check_layout()?;
        Ok(out)
    }

    fn slot_conflict(&self, members: &[usize]) -> Option<(usize, usize, usize)> {
        for i in 0..self.n_rows() {
            for t in 0..self.n_cols() {
                let count = members
                    .iter()
                    .filter(|&&k| {
                        self.alignment.spans[k].contains(&i)
                            && self.columns[t][k].status != StateStatus::N
                    })
                    .count();
                if count > 1 {
                    return Some((i, t, count));
                }
            }
        }
        None
    }

    /// Verifies that no slot holds two non-N constituents in one cell.
    pub fn check_layout(&self) -> Result<(), TrackError> {
        for (slot, members) in self.layout.slots.iter().enumerate() {
            if let Some((row, col, count)) = self.slot_conflict(members) {
                return Err(TrackError::MergeViolation {
                    slot,
                    row,
                    col,
                    count,
                });
            }
        }
        Ok(())
    }
}

impl PartialEq for StateMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.alignment == other.alignment
            && self.layout == other.layout
            && self.columns.len() == other.columns.len()
            && self.columns.iter().zip(&other.columns).all(|(a, b)| a == b)
    }
}

/// Final verdict of a formula on a finished sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub satisfied: bool,
    /// Truth of each atom, in [`Formula::atoms`] order.
    pub atoms: Vec<bool>,
}

/// Formula, input and alignment of one example.
#[derive(Debug, Clone)]
pub struct Tracker {
    formula: Formula,
    atoms: Vec<Atom>,
    x: Arc<[TokenId]>,
    alignment: Arc<Alignment>,
    layout: Arc<FlagLayout>,
    stop_words: Arc<HashSet<TokenId>>,
}

impl Tracker {
    /// `span` locates the rendered formula inside `x`.
    pub fn new(
        formula: Formula,
        x: Vec<TokenId>,
        span: Range<usize>,
        vocab: &Vocab,
        stop_words: Arc<HashSet<TokenId>>,
    ) -> Result<Self, TrackError> {
        let alignment = align(&formula, &x, span, vocab)?;
        let atoms = formula.atoms();
        let layout = FlagLayout::identity(atoms.len());
        Ok(Self {
            formula,
            atoms,
            x: x.into(),
            alignment: Arc::new(alignment),
            layout: Arc::new(layout),
            stop_words,
        })
    }

    /// Builds `x = src ++ render(formula)`.
    pub fn for_input(
        formula: Formula,
        src: &[TokenId],
        vocab: &Vocab,
        stop_words: Arc<HashSet<TokenId>>,
    ) -> Self {
        let (toks, _) = formula.render_tokens(vocab);
        let mut x = src.to_vec();
        x.extend_from_slice(&toks);
        let span = src.len()..x.len();
        Self::new(formula, x, span, vocab, stop_words).expect("rendered formula aligns with itself")
    }

    /// Switches to the statically compressed flag layout.
    pub fn compressed(mut self) -> Self {
        self.layout = Arc::new(FlagLayout::compressed(&self.atoms));
        self
    }

    pub fn formula(&self) -> &Formula {
        &self.formula
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn x(&self) -> &[TokenId] {
        &self.x
    }

    pub fn alignment(&self) -> &Alignment {
        &self.alignment
    }

    pub fn layout(&self) -> &FlagLayout {
        &self.layout
    }

    pub fn stop_words(&self) -> &HashSet<TokenId> {
        &self.stop_words
    }

    pub fn empty_matrix(&self) -> StateMatrix {
        StateMatrix::new(self.alignment.clone(), self.layout.clone())
    }

    /// Per-atom results on prefix `y`, computed from scratch.
    pub fn scratch_column(&self, y: &[TokenId]) -> Vec<PredicateResult> {
        let v = SeqView::new(&self.x, y);
        self.atoms.iter().map(|a| a.step(v, &self.stop_words)).collect()
    }

    /// Per-token flags on prefix `y`.
    pub fn state_flags(&self, y: &[TokenId]) -> Vec<StateFlag> {
        let mut m = self.empty_matrix();
        m.push_column(self.scratch_column(y));
        (0..self.x.len()).map(|i| m.flag(i, 0)).collect()
    }

    /// Teacher-forcing matrix: column `j` is the state after `y_gt[..j]`
    /// for `j < len(y_gt)`, so column `j` is seen when predicting token `j`.
    pub fn build_gt_matrix(&self, y_gt: &[TokenId]) -> StateMatrix {
        let mut m = self.empty_matrix();
        for j in 0..y_gt.len() {
            m.push_column(self.scratch_column(&y_gt[..j]));
        }
        m
    }

    /// Matrix with columns for every prefix `y[..j]`, `j = 0..=len(y)`.
    pub fn build_full_matrix(&self, y: &[TokenId]) -> StateMatrix {
        let mut m = self.build_gt_matrix(y);
        m.push_column(self.scratch_column(y));
        m
    }

    pub fn verdict_from_truth(&self, truth: Vec<bool>) -> Verdict {
        Verdict {
            satisfied: self.formula.evaluate_indexed(&truth),
            atoms: truth,
        }
    }

    /// Verdict on a whole output sequence.
    pub fn final_satisfaction(&self, y: &[TokenId]) -> Verdict {
        let mut m = self.empty_matrix();
        m.push_column(self.scratch_column(y));
        self.verdict_from_truth(m.atom_truth())
    }

    pub fn start(self: &Arc<Self>) -> IncrementalTracker {
        IncrementalTracker::new(self.clone())
    }
}

#[derive(Debug, Clone, Default)]
struct SeqState {
    body: Vec<TokenId>,
    theta: u32,
    sentence_start: usize,
    ended: bool,
}

impl SeqState {
    fn ends_with(&self, w: &[TokenId]) -> bool {
        self.body.ends_with(w)
    }

    fn in_current_sentence(&self, w: &[TokenId]) -> bool {
        self.body.len() - self.sentence_start >= w.len() && self.ends_with(w)
    }
}

#[derive(Debug, Clone)]
enum AtomState {
    Found(bool),
    Order { a: Option<usize>, b: Option<usize> },
    /// Count so far and, once the scoped sentence has closed, its final count.
    Count { c: u32, closed: bool },
    Theta,
}

/// Logic tracker that grows the state matrix one token at a time.
#[derive(Debug, Clone)]
pub struct IncrementalTracker {
    tracker: Arc<Tracker>,
    seq: SeqState,
    states: Vec<AtomState>,
    matrix: StateMatrix,
    ops: u64,
}

impl IncrementalTracker {
    pub fn new(tracker: Arc<Tracker>) -> Self {
        let states = tracker
            .atoms
            .iter()
            .map(|a| match a {
                Atom::Copy { .. } | Atom::InSen { .. } => AtomState::Found(false),
                Atom::Order { .. } => AtomState::Order { a: None, b: None },
                Atom::Len { .. } | Atom::StopWordCount { .. } => {
                    AtomState::Count { c: 0, closed: false }
                }
                Atom::TranslatedOnce { .. } => AtomState::Theta,
            })
            .collect();
        let mut me = Self {
            matrix: tracker.empty_matrix(),
            tracker,
            seq: SeqState {
                theta: 1,
                ..Default::default()
            },
            states,
            ops: 0,
        };
        let col = me.current();
        me.matrix.push_column(col);
        me
    }

    pub fn tracker(&self) -> &Arc<Tracker> {
        &self.tracker
    }

    pub fn matrix(&self) -> &StateMatrix {
        &self.matrix
    }

    pub fn prefix_len(&self) -> usize {
        self.matrix.n_cols() - 1
    }

    pub fn ended(&self) -> bool {
        self.seq.ended
    }

    /// Atom updates performed so far.
    pub fn ops(&self) -> u64 {
        self.ops
    }

    /// Copy of this tracker extended by one token.
    pub fn extended(&self, token: TokenId) -> Self {
        let mut next = self.clone();
        next.push(token);
        next
    }

    pub fn push(&mut self, token: TokenId) {
        if !self.seq.ended {
            self.advance(token);
        }
        let col = self.current();
        self.matrix.push_column(col);
    }

    fn advance(&mut self, token: TokenId) {
        let atoms = &self.tracker.atoms;
        let stops = &self.tracker.stop_words;
        let seq = &mut self.seq;
        if token == EOS {
            seq.ended = true;
        } else {
            seq.body.push(token);
        }
        for (atom, st) in atoms.iter().zip(self.states.iter_mut()) {
            self.ops += 1;
            match (atom, st) {
                (Atom::Copy { keyword }, AtomState::Found(f)) => {
                    *f |= token != EOS && seq.ends_with(keyword);
                }
                (Atom::InSen { keyword, sentence }, AtomState::Found(f)) => {
                    *f |= token != EOS && seq.theta == *sentence && seq.in_current_sentence(keyword);
                }
                (Atom::Order { first, second }, AtomState::Order { a, b }) => {
                    if token != EOS {
                        let end = seq.body.len();
                        if a.is_none() && seq.ends_with(first) {
                            *a = Some(end - first.len());
                        }
                        if b.is_none() && seq.ends_with(second) {
                            *b = Some(end - second.len());
                        }
                    }
                }
                (Atom::Len { sentence, .. }, AtomState::Count { c, closed }) => {
                    count_step(*sentence, token, seq.theta, c, closed, |_| true);
                }
                (Atom::StopWordCount { sentence, .. }, AtomState::Count { c, closed }) => {
                    count_step(*sentence, token, seq.theta, c, closed, |t| stops.contains(&t));
                }
                (Atom::TranslatedOnce { .. }, AtomState::Theta) => {}
                _ => unreachable!("atom state kind mismatch"),
            }
        }
        if token == SEP {
            seq.theta += 1;
            seq.sentence_start = seq.body.len();
        }
    }

    fn current(&self) -> Vec<PredicateResult> {
        let seq = &self.seq;
        self.tracker
            .atoms
            .iter()
            .zip(&self.states)
            .map(|(atom, st)| match (atom, st) {
                (Atom::Copy { .. }, AtomState::Found(f)) => {
                    if *f {
                        PredicateResult::S2
                    } else {
                        PredicateResult::S0
                    }
                }
                (Atom::InSen { sentence, .. }, AtomState::Found(f)) => {
                    if *f {
                        PredicateResult::S2
                    } else if seq.theta == *sentence {
                        PredicateResult::S1
                    } else {
                        PredicateResult::S0
                    }
                }
                (Atom::Order { .. }, AtomState::Order { a, b }) => match (a, b) {
                    (Some(a), Some(b)) if a < b => PredicateResult::S2,
                    (Some(_), None) => PredicateResult::S1,
                    _ => PredicateResult::S0,
                },
                (
                    Atom::Len { sentence, target } | Atom::StopWordCount { sentence, target },
                    AtomState::Count { c, closed },
                ) => count_result(*sentence, *target, *c, *closed, seq.theta, seq.ended),
                (Atom::TranslatedOnce { sentence }, AtomState::Theta) => {
                    match seq.theta.cmp(sentence) {
                        std::cmp::Ordering::Greater => PredicateResult::S2,
                        std::cmp::Ordering::Equal => PredicateResult::S1,
                        std::cmp::Ordering::Less => PredicateResult::S0,
                    }
                }
                _ => unreachable!("atom state kind mismatch"),
            })
            .collect()
    }

    /// Verdict from the latest column.
    pub fn verdict(&self) -> Verdict {
        self.tracker.verdict_from_truth(self.matrix.atom_truth())
    }
}

fn count_step(
    sentence: Option<u32>,
    token: TokenId,
    theta: u32,
    c: &mut u32,
    closed: &mut bool,
    counts: impl Fn(TokenId) -> bool,
) {
    match sentence {
        None => {
            if token != EOS && token != SEP && counts(token) {
                *c += 1;
            }
        }
        Some(j) if theta == j && !*closed => {
            if token == SEP || token == EOS {
                *closed = true;
            } else if counts(token) {
                *c += 1;
            }
        }
        Some(_) => {}
    }
}

fn count_result(
    sentence: Option<u32>,
    target: u32,
    c: u32,
    closed: bool,
    theta: u32,
    ended: bool,
) -> PredicateResult {
    match sentence {
        None if c == target => PredicateResult::S2,
        None if ended => PredicateResult::S0,
        None => PredicateResult::progress(target as i64 - c as i64),
        Some(j) if theta < j => PredicateResult::S0,
        Some(_) if closed => {
            if c == target {
                PredicateResult::S2
            } else {
                PredicateResult::S0
            }
        }
        Some(j) if theta == j => PredicateResult::progress(target as i64 - c as i64),
        // Reached only when sentence j was never opened before theta passed it,
        // which cannot happen since theta grows by one.
        Some(_) => PredicateResult::S0,
    }
}
