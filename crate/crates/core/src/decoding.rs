//! Greedy and beam decoding with per-hypothesis logic tracking.
//!
//! Every hypothesis owns an [`IncrementalTracker`]; column `t` of its state
//! matrix feeds the decoder step that predicts token `t + 1`. There is no
//! constraint filtering during search, only a verdict attached at the end.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::formula::Formula;
use crate::neural::{DecoderState, EncodedInput, FlagCache, Model, ModelError};
use crate::synth::Example;
use crate::tracking::{IncrementalTracker, StateMatrix, Tracker, Verdict};
use crate::vocab::{TokenId, Vocab, BOS, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Rank by log-probability divided by token count.
    pub length_norm: bool,
    pub flag_cache: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 1,
            max_len: 64,
            length_norm: true,
            flag_cache: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// Emitted tokens, ending with EOS when finished.
    pub tokens: Vec<TokenId>,
    /// Summed log-probability.
    pub score: f64,
    /// Ranking score (length-normalised when enabled).
    pub rank_score: f64,
    pub finished: bool,
    /// State matrix with `tokens.len() + 1` columns.
    pub trace: StateMatrix,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DecodeStats {
    pub decoder_steps: u64,
    pub tracker_ops: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
}

impl DecodeStats {
    fn add(&mut self, o: &DecodeStats) {
        self.decoder_steps += o.decoder_steps;
        self.tracker_ops += o.tracker_ops;
        self.cache_hits += o.cache_hits;
        self.cache_misses += o.cache_misses;
    }
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<TokenId>,
    score: f64,
    state: DecoderState,
    tracker: IncrementalTracker,
}

impl Beam {
    fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

pub fn rank_score(score: f64, len: usize, length_norm: bool) -> f64 {
    if length_norm && len > 0 {
        score / len as f64
    } else {
        score
    }
}

/// Candidate order: higher score first, then lower token id, then lower
/// parent beam index.
fn cand_cmp(a: &(f64, TokenId, usize), b: &(f64, TokenId, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

pub struct Decoder<'m> {
    pub model: &'m Model,
    pub cfg: DecodeConfig,
    cache: FlagCache,
    stats: DecodeStats,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m Model, cfg: DecodeConfig) -> Self {
        let cache = FlagCache::new(cfg.flag_cache);
        Self {
            model,
            cfg,
            cache,
            stats: DecodeStats::default(),
        }
    }

    pub fn stats(&self) -> DecodeStats {
        DecodeStats {
            cache_hits: self.cache.hits,
            cache_misses: self.cache.misses,
            ..self.stats
        }
    }

    fn max_len(&self, max_len: usize) -> usize {
        max_len.min(self.model.cfg.max_tgt_len)
    }

    fn step(
        &mut self,
        enc: &EncodedInput,
        tokens: &[TokenId],
        state: &mut DecoderState,
        tracker: &IncrementalTracker,
    ) -> Result<Vec<f64>, ModelError> {
        let t = tokens.len();
        let token_in = if t == 0 { BOS } else { tokens[t - 1] };
        let offsets = if self.model.cfg.use_flags {
            Some(self.cache.column_offsets(self.model, tracker.matrix(), t)?)
        } else {
            None
        };
        self.stats.decoder_steps += 1;
        self.model
            .decoder_step(enc, state, token_in, offsets.as_ref().map(|(k, v)| (k, v)))
    }

    fn hypothesis(&mut self, b: Beam) -> Hypothesis {
        self.stats.tracker_ops += b.tracker.ops();
        let finished = b.finished();
        Hypothesis {
            rank_score: rank_score(b.score, b.tokens.len(), self.cfg.length_norm),
            score: b.score,
            finished,
            verdict: b.tracker.verdict(),
            trace: b.tracker.matrix().clone(),
            tokens: b.tokens,
        }
    }

    fn start(&self, tracker: &Arc<Tracker>) -> Result<(EncodedInput, Beam), ModelError> {
        let enc = self.model.prepare(tracker.x())?;
        let beam = Beam {
            tokens: Vec::new(),
            score: 0.0,
            state: self.model.start_decoder(),
            tracker: tracker.start(),
        };
        Ok((enc, beam))
    }

    /// Argmax decoding; ties go to the lowest token id.
    pub fn greedy(&mut self, tracker: &Arc<Tracker>, max_len: usize) -> Result<Hypothesis, ModelError> {
        let max_len = self.max_len(max_len);
        let (enc, mut beam) = self.start(tracker)?;
        while beam.tokens.len() < max_len && !beam.finished() {
            let lp = self.step(&enc, &beam.tokens, &mut beam.state, &beam.tracker)?;
            let mut best = 0;
            for (i, &v) in lp.iter().enumerate() {
                if v > lp[best] {
                    best = i;
                }
            }
            beam.score += lp[best];
            beam.tokens.push(best as TokenId);
            beam.tracker.push(best as TokenId);
        }
        Ok(self.hypothesis(beam))
    }

    /// Beam search. Finished hypotheses stay in the pool and compete with
    /// expansions; search stops once every kept hypothesis is finished or
    /// `max_len` tokens were emitted. Returns hypotheses best first.
    pub fn beam(&mut self, tracker: &Arc<Tracker>) -> Result<Vec<Hypothesis>, ModelError> {
        let width = self.cfg.beam_size.max(1);
        let max_len = self.max_len(self.cfg.max_len);
        let (enc, first) = self.start(tracker)?;
        let mut beams = vec![first];
        while beams.iter().any(|b| !b.finished()) && beams.iter().all(|b| b.tokens.len() < max_len) {
            let mut cands: Vec<(f64, TokenId, usize)> = Vec::new();
            let mut expansions: Vec<Option<Vec<f64>>> = Vec::with_capacity(beams.len());
            for (bi, b) in beams.iter_mut().enumerate() {
                if b.finished() {
                    cands.push((rank_score(b.score, b.tokens.len(), self.cfg.length_norm), EOS, bi));
                    expansions.push(None);
                    continue;
                }
                let lp = self.step(&enc, &b.tokens, &mut b.state, &b.tracker)?;
                let len = b.tokens.len() + 1;
                for (tok, &v) in lp.iter().enumerate() {
                    cands.push((rank_score(b.score + v, len, self.cfg.length_norm), tok as TokenId, bi));
                }
                expansions.push(Some(lp));
            }
            cands.sort_by(cand_cmp);
            cands.truncate(width);
            let mut next = Vec::with_capacity(cands.len());
            for &(_, tok, bi) in &cands {
                let parent = &beams[bi];
                match &expansions[bi] {
                    None => next.push(parent.clone()),
                    Some(lp) => {
                        let mut child = parent.clone();
                        child.score += lp[tok as usize];
                        child.tokens.push(tok);
                        child.tracker.push(tok);
                        next.push(child);
                    }
                }
            }
            beams = next;
        }
        let mut hyps: Vec<Hypothesis> = beams.into_iter().map(|b| self.hypothesis(b)).collect();
        hyps.sort_by(|a, b| b.rank_score.total_cmp(&a.rank_score));
        Ok(hyps)
    }

    /// Best hypothesis under the configured beam size.
    pub fn decode(&mut self, tracker: &Arc<Tracker>) -> Result<Hypothesis, ModelError> {
        if self.cfg.beam_size <= 1 {
            self.greedy(tracker, self.cfg.max_len)
        } else {
            Ok(self.beam(tracker)?.swap_remove(0))
        }
    }
}

/// Tracker for an example: `x = src ++ render(expr)`, compressed flag layout.
pub fn example_tracker(
    expr: &str,
    src: &[TokenId],
    vocab: &Vocab,
    stops: &Arc<HashSet<TokenId>>,
) -> Result<Arc<Tracker>, crate::formula::FormulaError> {
    let f = Formula::parse(expr, vocab)?;
    Ok(Arc::new(Tracker::for_input(f, src, vocab, stops.clone()).compressed()))
}

/// One line of a decode output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub src: Vec<TokenId>,
    pub expr: String,
    pub hyp: Vec<TokenId>,
    pub score: f64,
    pub satisfied: bool,
    pub per_atom: Vec<bool>,
}

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("example {index}: {source}")]
    Formula {
        index: usize,
        source: crate::formula::FormulaError,
    },
    #[error("example {index}: {source}")]
    Model { index: usize, source: ModelError },
    #[error("{0}")]
    Io(String),
}

fn decode_chunk(
    model: &Model,
    cfg: &DecodeConfig,
    vocab: &Vocab,
    stops: &Arc<HashSet<TokenId>>,
    examples: &[Example],
    offset: usize,
) -> Result<(Vec<DecodeRecord>, DecodeStats), DecodeError> {
    let mut dec = Decoder::new(model, cfg.clone());
    let mut out = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let index = offset + i;
        let tr = example_tracker(&ex.expr, &ex.src, vocab, stops).map_err(|source| DecodeError::Formula { index, source })?;
        let h = dec.decode(&tr).map_err(|source| DecodeError::Model { index, source })?;
        out.push(DecodeRecord {
            src: ex.src.clone(),
            expr: ex.expr.clone(),
            hyp: h.tokens,
            score: h.score,
            satisfied: h.verdict.satisfied,
            per_atom: h.verdict.atoms,
        });
    }
    Ok((out, dec.stats()))
}

/// Decodes a corpus on `threads` workers over contiguous chunks; output
/// order follows the input.
pub fn decode_examples(
    model: &Model,
    examples: &[Example],
    vocab: &Vocab,
    cfg: &DecodeConfig,
    threads: usize,
) -> Result<(Vec<DecodeRecord>, DecodeStats), DecodeError> {
    let stops = Arc::new(vocab.stop_words().clone());
    let threads = threads.clamp(1, examples.len().max(1));
    if threads == 1 {
        return decode_chunk(model, cfg, vocab, &stops, examples, 0);
    }
    let chunk = examples.len().div_ceil(threads);
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = examples
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let stops = &stops;
                s.spawn(move || decode_chunk(model, cfg, vocab, stops, part, c * chunk))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    let mut records = Vec::with_capacity(examples.len());
    let mut stats = DecodeStats::default();
    for r in results {
        let (recs, st) = r?;
        records.extend(recs);
        stats.add(&st);
    }
    Ok((records, stats))
}

pub fn write_decodes(records: &[DecodeRecord], path: &Path) -> Result<(), DecodeError> {
    use std::io::Write;
    let err = |e: &dyn std::fmt::Display| DecodeError::Io(format!("{}: {e}", path.display()));
    let f = std::fs::File::create(path).map_err(|e| err(&e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| err(&e))?;
        w.write_all(b"\n").map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

pub fn read_decodes(path: &Path) -> Result<Vec<DecodeRecord>, DecodeError> {
    let text = std::fs::read_to_string(path).map_err(|e| DecodeError::Io(format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| DecodeError::Io(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}
