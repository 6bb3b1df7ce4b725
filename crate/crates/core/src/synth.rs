//! Synthetic constraint-consistent datasets.
//!
//! Every example is checked against the logic tracker before it is
//! emitted, so targets satisfy their expression by construction.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::formula::{Atom, Formula, Literal};
use crate::tracking::Tracker;
use crate::vocab::{TokenId, Vocab, EOS, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CopySet,
    OrderedStoryline,
    InsenLen,
    InsenLenOrStop,
    TranslateOnce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub vocab_size: usize,
    /// Inclusive range of sentences per target (per source document for
    /// `translate_once`).
    pub sentences: [usize; 2],
    /// Inclusive range of tokens per sentence.
    pub sentence_len: [usize; 2],
    /// Inclusive range of keywords for `copy_set` and `ordered_storyline`.
    pub keywords: [usize; 2],
    /// Inclusive range of target length for `copy_set` and `ordered_storyline`.
    pub target_len: [usize; 2],
    /// Add a whole-output `Len` atom to `copy_set` examples.
    pub whole_len: bool,
    pub insen_atoms: usize,
    pub len_atoms: usize,
    /// Sentence indices InSen atoms may use in train and dev.
    pub insen_indices: Vec<u32>,
    /// Indices for the test split; empty means the same as `insen_indices`.
    pub test_insen_indices: Vec<u32>,
    /// Probability that a filler token is a stop word.
    pub stop_fraction: f64,
    /// Branch proportions of each OR clause: only Len, only StopWordCount, both.
    pub or_mix: [f64; 3],
    /// Probability of an extra negated InSen literal in OR-mixed examples.
    pub negated_insen: f64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::CopySet,
            vocab_size: 64,
            sentences: [3, 3],
            sentence_len: [3, 12],
            keywords: [2, 5],
            target_len: [6, 12],
            whole_len: true,
            insen_atoms: 2,
            len_atoms: 2,
            insen_indices: Vec::new(),
            test_insen_indices: Vec::new(),
            stop_fraction: 0.3,
            or_mix: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            negated_insen: 0.0,
            train: 1000,
            dev: 100,
            test: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("infeasible spec: {0}")]
    Infeasible(String),
    #[error("generated example fails its own constraint: {0}")]
    Unsound(String),
    #[error("could not draw a {split} example unseen in train after {tries} tries")]
    NoNovelExample { split: &'static str, tries: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Io(String),
}

fn range_ok(r: [usize; 2]) -> bool {
    r[0] <= r[1]
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Spec(m.to_string()));
        if !range_ok(self.sentences) || self.sentences[0] == 0 {
            return bad("sentences must be a non-empty range starting at 1 or more");
        }
        if !range_ok(self.sentence_len) || self.sentence_len[0] == 0 {
            return bad("sentence_len must be a non-empty range starting at 1 or more");
        }
        if !range_ok(self.keywords) || self.keywords[0] == 0 {
            return bad("keywords must be a non-empty range starting at 1 or more");
        }
        if !range_ok(self.target_len) || self.target_len[0] == 0 {
            return bad("target_len must be a non-empty range starting at 1 or more");
        }
        if !(0.0..=1.0).contains(&self.stop_fraction) || !(0.0..=1.0).contains(&self.negated_insen) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.or_mix.iter().any(|&p| p < 0.0) || (self.or_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("or_mix proportions must be non-negative and sum to 1");
        }
        let max_s = self.sentences[1] as u32;
        for &j in self.insen_indices.iter().chain(&self.test_insen_indices) {
            if j == 0 || j > max_s {
                return bad("InSen indices must lie within the sentence count");
            }
        }
        if matches!(self.task, TaskKind::InsenLen | TaskKind::InsenLenOrStop)
            && self.len_atoms > self.sentences[0]
        {
            return bad("len_atoms exceeds the sentence count");
        }
        Vocab::synthetic(self.vocab_size).map_err(|e| SynthError::Spec(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub expr: String,
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
    #[serde(default)]
    pub meta: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

/// Drawing context shared by the task generators.
pub struct Gen<'a> {
    pub spec: &'a TaskSpec,
    pub vocab: Vocab,
    pub rng: ChaCha8Rng,
    /// Non-stop content words.
    words: Vec<TokenId>,
    stops: Vec<TokenId>,
    insen_indices: Vec<u32>,
    or_schedule: Vec<usize>,
}

pub const OR_BRANCHES: [&str; 3] = ["len", "stop", "both"];

impl<'a> Gen<'a> {
    pub fn new(spec: &'a TaskSpec, split: Split) -> Result<Self, SynthError> {
        spec.validate()?;
        let vocab = Vocab::synthetic(spec.vocab_size).map_err(|e| SynthError::Spec(e.to_string()))?;
        let mut stops: Vec<TokenId> = vocab.stop_words().iter().copied().collect();
        stops.sort_unstable();
        let words = vocab.content_ids().filter(|t| !vocab.stop_words().contains(t)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(split.stream());
        let all: Vec<u32> = (1..=spec.sentences[0] as u32).collect();
        let insen_indices = match split {
            Split::Test if !spec.test_insen_indices.is_empty() => spec.test_insen_indices.clone(),
            _ if !spec.insen_indices.is_empty() => spec.insen_indices.clone(),
            _ => all,
        };
        Ok(Self {
            spec,
            vocab,
            rng,
            words,
            stops,
            insen_indices,
            or_schedule: Vec::new(),
        })
    }

    fn between(&mut self, r: [usize; 2]) -> usize {
        self.rng.gen_range(r[0]..=r[1])
    }

    fn keywords(&mut self, n: usize) -> Result<Vec<TokenId>, SynthError> {
        if n > self.words.len() {
            return Err(SynthError::Infeasible(format!(
                "{n} keywords requested but only {} content words exist",
                self.words.len()
            )));
        }
        Ok(self.words.choose_multiple(&mut self.rng, n).copied().collect())
    }

    /// A filler token that is none of `avoid`.
    fn filler(&mut self, avoid: &HashSet<TokenId>) -> TokenId {
        if !self.stops.is_empty() && self.rng.gen_bool(self.spec.stop_fraction) {
            return *self.stops.choose(&mut self.rng).unwrap();
        }
        loop {
            let w = *self.words.choose(&mut self.rng).unwrap();
            if !avoid.contains(&w) {
                return w;
            }
        }
    }

    /// Exact-quota OR branch schedule for `clauses` clauses.
    pub fn plan_or_branches(&mut self, clauses: usize) {
        let mut counts: Vec<usize> = self.spec.or_mix.iter().map(|p| (p * clauses as f64).floor() as usize).collect();
        let mut left = clauses - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = self.spec.or_mix[a] * clauses as f64 - counts[a] as f64;
            let fb = self.spec.or_mix[b] * clauses as f64 - counts[b] as f64;
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &b in &order {
            if left == 0 {
                break;
            }
            counts[b] += 1;
            left -= 1;
        }
        let mut sched: Vec<usize> = counts.iter().enumerate().flat_map(|(b, &c)| std::iter::repeat(b).take(c)).collect();
        sched.shuffle(&mut self.rng);
        sched.reverse();
        self.or_schedule = sched;
    }

    fn next_branch(&mut self) -> usize {
        match self.or_schedule.pop() {
            Some(b) => b,
            None => {
                let u: f64 = self.rng.gen();
                let m = self.spec.or_mix;
                if u < m[0] {
                    0
                } else if u < m[0] + m[1] {
                    1
                } else {
                    2
                }
            }
        }
    }

    fn finish(&self, formula: Formula, src: Vec<TokenId>, tgt: Vec<TokenId>, meta: Value) -> Result<Example, SynthError> {
        let expr = formula.render(&self.vocab);
        let stops = Arc::new(self.vocab.stop_words().clone());
        let tr = Tracker::for_input(formula, &src, &self.vocab, stops);
        if tgt.last() != Some(&EOS) || !tr.final_satisfaction(&tgt).satisfied {
            return Err(SynthError::Unsound(format!("{expr} => {}", self.vocab.decode(&tgt))));
        }
        Ok(Example { expr, src, tgt, meta })
    }

    fn conj(atoms: Vec<Atom>) -> Formula {
        Formula::new(atoms.into_iter().map(|a| vec![Literal::pos(a)]).collect())
    }

    /// `Copy(w_1) & ... & Copy(w_k)`, optionally `& Len(L)`.
    pub fn copy_set(&mut self) -> Result<Example, SynthError> {
        let k = self.between(self.spec.keywords);
        let len = self.between(self.spec.target_len).max(k);
        if k > self.spec.target_len[1] {
            return Err(SynthError::Infeasible(format!("{k} keywords do not fit in {len} tokens")));
        }
        let kws = self.keywords(k)?;
        let avoid: HashSet<TokenId> = kws.iter().copied().collect();
        let mut body: Vec<Option<TokenId>> = vec![None; len];
        let mut slots: Vec<usize> = (0..len).collect();
        slots.shuffle(&mut self.rng);
        for (w, &p) in kws.iter().zip(&slots) {
            body[p] = Some(*w);
        }
        let mut tgt: Vec<TokenId> = body.into_iter().map(|t| t.unwrap_or_else(|| self.filler(&avoid))).collect();
        tgt.push(EOS);
        let mut atoms: Vec<Atom> = kws.iter().map(|&w| Atom::Copy { keyword: vec![w] }).collect();
        if self.spec.whole_len {
            atoms.push(Atom::Len {
                sentence: None,
                target: len as u32,
            });
        }
        self.finish(Self::conj(atoms), Vec::new(), tgt, json!({}))
    }

    /// Chained `Order(w_1, w_2) & Order(w_2, w_3) & ...`.
    pub fn ordered_storyline(&mut self) -> Result<Example, SynthError> {
        let k = self.between(self.spec.keywords).max(2);
        let len = self.between(self.spec.target_len).max(k);
        let kws = self.keywords(k)?;
        let avoid: HashSet<TokenId> = kws.iter().copied().collect();
        let mut pos: Vec<usize> = (0..len).collect();
        pos.shuffle(&mut self.rng);
        let mut pos = pos[..k].to_vec();
        pos.sort_unstable();
        let mut tgt: Vec<TokenId> = (0..len).map(|_| 0).collect();
        let mut next = 0;
        for (p, t) in tgt.iter_mut().enumerate() {
            if next < k && pos[next] == p {
                *t = kws[next];
                next += 1;
            } else {
                *t = self.filler(&avoid);
            }
        }
        tgt.push(EOS);
        let atoms = kws
            .windows(2)
            .map(|w| Atom::Order {
                first: vec![w[0]],
                second: vec![w[1]],
            })
            .collect();
        self.finish(Self::conj(atoms), Vec::new(), tgt, json!({}))
    }

    /// Sentences, InSen placements and per-sentence token lists.
    fn sentences_with_keywords(&mut self, avoid_extra: &[TokenId]) -> Result<(Vec<Vec<TokenId>>, Vec<(TokenId, u32)>), SynthError> {
        let n = self.between(self.spec.sentences);
        let kws = self.keywords(self.spec.insen_atoms + avoid_extra.len())?;
        let (kws, _) = kws.split_at(self.spec.insen_atoms);
        let mut avoid: HashSet<TokenId> = kws.iter().copied().collect();
        avoid.extend(avoid_extra);
        let allowed: Vec<u32> = self.insen_indices.iter().copied().filter(|&j| j as usize <= n).collect();
        if allowed.is_empty() && !kws.is_empty() {
            return Err(SynthError::Infeasible("no InSen index fits the sentence count".into()));
        }
        let placed: Vec<(TokenId, u32)> = kws.iter().map(|&w| (w, *allowed.choose(&mut self.rng).unwrap())).collect();
        let mut sents = Vec::with_capacity(n);
        for j in 1..=n as u32 {
            let mine: Vec<TokenId> = placed.iter().filter(|p| p.1 == j).map(|p| p.0).collect();
            let len = self.between(self.spec.sentence_len).max(mine.len());
            let mut s: Vec<Option<TokenId>> = vec![None; len];
            let mut slots: Vec<usize> = (0..len).collect();
            slots.shuffle(&mut self.rng);
            for (w, &p) in mine.iter().zip(&slots) {
                s[p] = Some(*w);
            }
            sents.push(s.into_iter().map(|t| t.unwrap_or_else(|| self.filler(&avoid))).collect());
        }
        Ok((sents, placed))
    }

    fn join(sents: &[Vec<TokenId>]) -> Vec<TokenId> {
        let mut out = Vec::new();
        for s in sents {
            out.extend_from_slice(s);
            out.push(SEP);
        }
        out
    }

    /// `InSen(w, j) & ... & Len(j, l_j) & ...`.
    pub fn insen_len(&mut self) -> Result<Example, SynthError> {
        let (sents, placed) = self.sentences_with_keywords(&[])?;
        let mut atoms: Vec<Atom> = placed
            .iter()
            .map(|&(w, j)| Atom::InSen {
                keyword: vec![w],
                sentence: j,
            })
            .collect();
        let mut js: Vec<u32> = (1..=sents.len() as u32).collect();
        js.shuffle(&mut self.rng);
        let mut js = js[..self.spec.len_atoms.min(sents.len())].to_vec();
        js.sort_unstable();
        for j in js {
            atoms.push(Atom::Len {
                sentence: Some(j),
                target: sents[j as usize - 1].len() as u32,
            });
        }
        let mut tgt = Self::join(&sents);
        tgt.push(EOS);
        self.finish(Self::conj(atoms), Vec::new(), tgt, json!({}))
    }

    /// InSen atoms plus `(Len(j, l) || StopWordCount(j, s))` clauses with a
    /// fake value on the unsatisfied side.
    pub fn insen_len_or_stop(&mut self) -> Result<Example, SynthError> {
        let negated = self.rng.gen_bool(self.spec.negated_insen);
        let absent = if negated { self.keywords(1)? } else { Vec::new() };
        let (sents, placed) = self.sentences_with_keywords(&absent)?;
        let stops = self.vocab.stop_words().clone();
        let mut clauses: Vec<Vec<Literal>> = placed
            .iter()
            .map(|&(w, j)| {
                vec![Literal::pos(Atom::InSen {
                    keyword: vec![w],
                    sentence: j,
                })]
            })
            .collect();
        let mut js: Vec<u32> = (1..=sents.len() as u32).collect();
        js.shuffle(&mut self.rng);
        let mut js = js[..self.spec.len_atoms.min(sents.len())].to_vec();
        js.sort_unstable();
        let mut branches = Vec::new();
        for j in js {
            let s = &sents[j as usize - 1];
            let true_len = s.len() as u32;
            let true_stop = s.iter().filter(|t| stops.contains(t)).count() as u32;
            let branch = self.next_branch();
            let fake = |rng: &mut ChaCha8Rng, v: u32, min: u32| -> u32 {
                loop {
                    let d = rng.gen_range(1..=3) as i64 * if rng.gen_bool(0.5) { 1 } else { -1 };
                    let f = v as i64 + d;
                    if f >= min as i64 {
                        return f as u32;
                    }
                }
            };
            let l = if branch == 1 { fake(&mut self.rng, true_len, 1) } else { true_len };
            let sw = if branch == 0 { fake(&mut self.rng, true_stop, 0) } else { true_stop };
            clauses.push(vec![
                Literal::pos(Atom::Len {
                    sentence: Some(j),
                    target: l,
                }),
                Literal::pos(Atom::StopWordCount {
                    sentence: Some(j),
                    target: sw,
                }),
            ]);
            branches.push(OR_BRANCHES[branch]);
        }
        if negated {
            let j = self.rng.gen_range(1..=sents.len() as u32);
            clauses.push(vec![Literal::neg(Atom::InSen {
                keyword: absent.clone(),
                sentence: j,
            })]);
        }
        let mut tgt = Self::join(&sents);
        tgt.push(EOS);
        self.finish(Formula::new(clauses), Vec::new(), tgt, json!({ "branches": branches }))
    }

    /// Source document of sentences and its per-token mapped translation,
    /// constrained by `TranslatedOnce(1) & ... & TranslatedOnce(m)`.
    pub fn translate_once(&mut self, mapping: &HashMap<TokenId, TokenId>) -> Result<Example, SynthError> {
        let n = self.between(self.spec.sentences);
        let avoid = HashSet::new();
        let src_sents: Vec<Vec<TokenId>> = (0..n)
            .map(|_| {
                let len = self.between(self.spec.sentence_len);
                (0..len).map(|_| self.filler(&avoid)).collect()
            })
            .collect();
        let tgt_sents: Vec<Vec<TokenId>> = src_sents.iter().map(|s| s.iter().map(|t| mapping[t]).collect()).collect();
        let atoms = (1..=n as u32).map(|i| Atom::TranslatedOnce { sentence: i }).collect();
        let mut tgt = Self::join(&tgt_sents);
        tgt.push(EOS);
        self.finish(Self::conj(atoms), Self::join(&src_sents), tgt, json!({ "sentences": n }))
    }
}

/// The fixed token bijection used by `translate_once`: a seeded
/// permutation of the content words.
pub fn translation_map(vocab: &Vocab, seed: u64) -> HashMap<TokenId, TokenId> {
    let ids: Vec<TokenId> = vocab.content_ids().collect();
    let mut perm = ids.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_616e_736c_6174);
    perm.shuffle(&mut rng);
    ids.into_iter().zip(perm).collect()
}

/// Identity of an example for train/held-out disjointness: the expression,
/// plus the source when there is one.
pub fn novelty_key(ex: &Example) -> String {
    if ex.src.is_empty() {
        return ex.expr.clone();
    }
    let src: Vec<String> = ex.src.iter().map(|t| t.to_string()).collect();
    format!("{}\t{}", ex.expr, src.join(" "))
}

/// Draws `n` examples. Examples whose key is in `exclude` are redrawn.
pub fn generate_split(spec: &TaskSpec, split: Split, n: usize, exclude: &HashSet<String>) -> Result<Vec<Example>, SynthError> {
    let mut g = Gen::new(spec, split)?;
    if spec.task == TaskKind::InsenLenOrStop {
        g.plan_or_branches(n * spec.len_atoms.min(spec.sentences[0]));
    }
    let mapping = translation_map(&g.vocab, spec.seed);
    let mut out = Vec::with_capacity(n);
    const TRIES: usize = 1000;
    while out.len() < n {
        let mut tries = 0;
        let ex = loop {
            let ex = match spec.task {
                TaskKind::CopySet => g.copy_set()?,
                TaskKind::OrderedStoryline => g.ordered_storyline()?,
                TaskKind::InsenLen => g.insen_len()?,
                TaskKind::InsenLenOrStop => g.insen_len_or_stop()?,
                TaskKind::TranslateOnce => g.translate_once(&mapping)?,
            };
            if !exclude.contains(&novelty_key(&ex)) {
                break ex;
            }
            tries += 1;
            if tries >= TRIES {
                return Err(SynthError::NoNovelExample {
                    split: split.name(),
                    tries,
                });
            }
        };
        out.push(ex);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Splits {
    pub fn get(&self, s: Split) -> &[Example] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// Train, dev and test sets; no dev or test key occurs in train.
pub fn generate(spec: &TaskSpec) -> Result<Splits, SynthError> {
    let train = generate_split(spec, Split::Train, spec.train, &HashSet::new())?;
    let seen: HashSet<String> = train.iter().map(novelty_key).collect();
    let dev = generate_split(spec, Split::Dev, spec.dev, &seen)?;
    let test = generate_split(spec, Split::Test, spec.test, &seen)?;
    Ok(Splits { train, dev, test })
}

/// Number of sentences: separator-closed ones plus a non-empty trailing one.
pub fn sentence_count(seq: &[TokenId]) -> usize {
    let body = match seq.iter().position(|&t| t == EOS) {
        Some(p) => &seq[..p],
        None => seq,
    };
    let closed = body.iter().filter(|&&t| t == SEP).count();
    let trailing = body.iter().rposition(|&t| t == SEP).map_or(body.len(), |p| body.len() - p - 1);
    closed + usize::from(trailing > 0)
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io(format!("{}: {e}", path.display()))
}

pub fn write_dataset(examples: &[Example], path: &Path) -> Result<(), SynthError> {
    let f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for ex in examples {
        serde_json::to_writer(&mut w, ex).map_err(|e| io_err(path, e))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Streams examples from a JSON-lines file; blank lines are skipped.
pub fn for_each_example(path: &Path, mut f: impl FnMut(Example) -> Result<(), SynthError>) -> Result<usize, SynthError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut n = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| SynthError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        f(ex)?;
        n += 1;
    }
    Ok(n)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Example>, SynthError> {
    let mut out = Vec::new();
    for_each_example(path, |ex| {
        out.push(ex);
        Ok(())
    })?;
    Ok(out)
}

/// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and `manifest.json`.
pub fn write_splits(spec: &TaskSpec, splits: &Splits, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut counts = serde_json::Map::new();
    for s in Split::ALL {
        write_dataset(splits.get(s), &dir.join(format!("{}.jsonl", s.name())))?;
        counts.insert(s.name().into(), json!(splits.get(s).len()));
    }
    let manifest = json!({
        "spec": spec,
        "seed": spec.seed,
        "counts": counts,
        "files": Split::ALL.iter().map(|s| format!("{}.jsonl", s.name())).collect::<Vec<_>>(),
    });
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: TaskKind) -> TaskSpec {
        TaskSpec {
            task,
            train: 200,
            dev: 20,
            test: 20,
            seed: 3,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn every_task_generates_sound_examples() {
        for task in [
            TaskKind::CopySet,
            TaskKind::OrderedStoryline,
            TaskKind::InsenLen,
            TaskKind::InsenLenOrStop,
            TaskKind::TranslateOnce,
        ] {
            let s = generate(&spec(task)).unwrap();
            assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (200, 20, 20));
        }
    }

    #[test]
    fn single_keyword_fills_target() {
        let s = TaskSpec {
            keywords: [1, 1],
            target_len: [1, 1],
            ..spec(TaskKind::CopySet)
        };
        let mut g = Gen::new(&s, Split::Train).unwrap();
        let ex = g.copy_set().unwrap();
        assert_eq!(ex.tgt.len(), 2);
        assert!(ex.expr.starts_with("Copy("));
        assert!(ex.expr.ends_with("& Len(1)"));
    }

    #[test]
    fn storyline_chain_length() {
        let s = TaskSpec {
            keywords: [4, 4],
            ..spec(TaskKind::OrderedStoryline)
        };
        let mut g = Gen::new(&s, Split::Train).unwrap();
        let ex = g.ordered_storyline().unwrap();
        assert_eq!(ex.expr.matches("Order(").count(), 3);
    }

    #[test]
    fn or_branch_quota_is_exact() {
        let s = TaskSpec {
            len_atoms: 1,
            train: 300,
            ..spec(TaskKind::InsenLenOrStop)
        };
        let ex = generate_split(&s, Split::Train, 300, &HashSet::new()).unwrap();
        let mut counts = HashMap::new();
        for e in &ex {
            for b in e.meta["branches"].as_array().unwrap() {
                *counts.entry(b.as_str().unwrap().to_string()).or_insert(0) += 1;
            }
        }
        assert_eq!(counts["len"], 100);
        assert_eq!(counts["stop"], 100);
        assert_eq!(counts["both"], 100);
    }

    #[test]
    fn zero_shot_indices_per_split() {
        let s = TaskSpec {
            sentences: [5, 5],
            sentence_len: [2, 4],
            len_atoms: 0,
            insen_atoms: 1,
            insen_indices: vec![3, 4, 5],
            test_insen_indices: vec![1, 2],
            ..spec(TaskKind::InsenLen)
        };
        let splits = generate(&s).unwrap();
        let idx = |e: &Example| e.expr.trim_end_matches(')').rsplit(", ").next().unwrap().parse::<u32>().unwrap();
        assert!(splits.train.iter().all(|e| idx(e) >= 3));
        assert!(splits.test.iter().all(|e| idx(e) <= 2));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = generate(&spec(TaskKind::InsenLen)).unwrap();
        let b = generate(&spec(TaskKind::InsenLen)).unwrap();
        assert_eq!(a, b);
        let train: HashSet<_> = a.train.iter().map(novelty_key).collect();
        assert!(a.test.iter().all(|e| !train.contains(&novelty_key(e))));
    }

    #[test]
    fn sentence_counting() {
        assert_eq!(sentence_count(&[30, SEP, 31, SEP, EOS]), 2);
        assert_eq!(sentence_count(&[30, SEP, 31, EOS]), 2);
        assert_eq!(sentence_count(&[EOS]), 0);
        assert_eq!(sentence_count(&[30, SEP, SEP]), 2);
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let s = spec(TaskKind::TranslateOnce);
        let splits = generate(&s).unwrap();
        write_splits(&s, &splits, dir.path()).unwrap();
        assert_eq!(read_dataset(&dir.path().join("dev.jsonl")).unwrap(), splits.dev);
        let bad = dir.path().join("bad.jsonl");
        std::fs::write(&bad, "{\"expr\":\"\",\"src\":[],\"tgt\":[2]}\nnot json\n").unwrap();
        match read_dataset(&bad) {
            Err(SynthError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["counts"]["train"], 200);
    }
}
