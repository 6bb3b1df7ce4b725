//! Run configuration and the training loop.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::decoding::{decode_examples, example_tracker, DecodeConfig, DecodeError};
use crate::metrics::{self, EvalError, EvalReport, SlackMode};
use crate::neural::{
    load_checkpoint, save_checkpoint, Adam, AdamConfig, FlagInput, FlagStrings, FreezeMode, Grads, Model, ModelConfig,
    ModelError, Sample,
};
use crate::neural::checkpoint::Checkpoint;
use crate::synth::{Example, SynthError, TaskSpec};
use crate::vocab::{TokenId, Vocab};

pub const ENV_PREFIX: &str = "RULEEXEC_";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("example {index}: {message}")]
    Example { index: usize, message: String },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps.
    pub steps: u64,
    /// Examples per step.
    pub batch_size: usize,
    /// Dev evaluation period in steps; 0 evaluates only after the last step.
    pub eval_every: u64,
    /// Leading dev examples used for evaluation; 0 means all.
    pub eval_examples: usize,
    pub log_every: u64,
    pub freeze: FreezeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            eval_every: 0,
            eval_examples: 0,
            log_every: 50,
            freeze: FreezeMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the data order.
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub optim: AdamConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            task: TaskSpec::default(),
            optim: AdamConfig::default(),
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Applies `RULEEXEC_A__B=value` style overrides: the key path is the
/// lower-cased remainder split at `__`; the value is parsed as JSON and
/// taken as a string when that fails. Returns the applied paths.
pub fn apply_env_overrides(v: &mut Value, vars: impl IntoIterator<Item = (String, String)>) -> Vec<String> {
    let mut applied = Vec::new();
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (k, raw) in vars {
        let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
        if path.iter().any(String::is_empty) {
            continue;
        }
        let val = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        let mut over = val;
        for key in path.iter().rev() {
            over = json!({ key: over });
        }
        merge(v, over);
        applied.push(path.join("."));
    }
    applied
}

impl RunConfig {
    /// Defaults, then the JSON file, then environment overrides, then
    /// validation.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, TrainError> {
        let mut v = serde_json::to_value(RunConfig::default()).expect("default config serialises");
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| TrainError::Io(format!("{}: {e}", p.display())))?;
            let file: Value =
                serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", p.display())))?;
            if !file.is_object() {
                return Err(TrainError::Config(format!("{}: top level must be an object", p.display())));
            }
            merge(&mut v, file);
        }
        apply_env_overrides(&mut v, env);
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.task.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.model.vocab_size != self.task.vocab_size {
            return bad("model.vocab_size and task.vocab_size differ");
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        if self.decode.beam_size == 0 || self.decode.max_len == 0 {
            return bad("decode.beam_size and decode.max_len must be at least 1");
        }
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return bad("optim.lr must be positive and betas in [0, 1)");
        }
        Ok(())
    }
}

/// Encoder input, target and ground-truth flags of one example.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub flags: Option<FlagInput>,
}

#[derive(Debug, Clone, Default)]
pub struct PreparedSet {
    pub items: Vec<Prepared>,
    pub table: FlagStrings,
}

pub fn prepare(examples: &[Example], vocab: &Vocab, use_flags: bool) -> Result<PreparedSet, TrainError> {
    let stops = std::sync::Arc::new(vocab.stop_words().clone());
    let mut set = PreparedSet::default();
    for (index, ex) in examples.iter().enumerate() {
        let tr = example_tracker(&ex.expr, &ex.src, vocab, &stops).map_err(|e| TrainError::Example {
            index,
            message: e.to_string(),
        })?;
        if ex.tgt.is_empty() {
            return Err(TrainError::Example {
                index,
                message: "empty target".into(),
            });
        }
        let flags = use_flags.then(|| FlagInput::from_matrix(&tr.build_gt_matrix(&ex.tgt), &mut set.table));
        set.items.push(Prepared {
            x: tr.x().to_vec(),
            y: ex.tgt.clone(),
            flags,
        });
    }
    Ok(set)
}

/// Example indices of optimizer step `step` (0-based). Batches walk a
/// per-epoch permutation seeded by `(seed, epoch)` and may straddle epochs.
pub fn batch_indices(seed: u64, n: usize, batch: usize, step: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for b in 0..batch as u64 {
        let g = step * batch as u64 + b;
        let epoch = g / n as u64;
        let within = (g % n as u64) as usize;
        if cached.as_ref().is_none_or(|c| c.0 != epoch) {
            cached = Some((epoch, epoch_order(seed, n, epoch)));
        }
        out.push(cached.as_ref().unwrap().1[within]);
    }
    out
}

pub fn epoch_order(seed: u64, n: usize, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub tokens: usize,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub model: Model,
    pub opt: Adam,
    /// Completed optimizer steps.
    pub step: u64,
    pub vocab: Vocab,
    data: PreparedSet,
}

impl Trainer {
    pub fn new(cfg: RunConfig, train: &[Example]) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut model = Model::new(cfg.model.clone())?;
        model.freeze(cfg.train.freeze);
        let opt = Adam::new(cfg.optim.clone(), &model.params);
        Self::assemble(cfg, model, opt, 0, train)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: RunConfig, ck: Checkpoint, train: &[Example]) -> Result<Self, TrainError> {
        cfg.validate()?;
        if ck.model.cfg != cfg.model {
            return Err(TrainError::Config("checkpoint model config differs from run config".into()));
        }
        let step = ck.meta.get("step").and_then(Value::as_u64).ok_or_else(|| {
            TrainError::Config("checkpoint has no step counter".into())
        })?;
        let opt = ck.optimizer.ok_or_else(|| TrainError::Config("checkpoint has no optimizer state".into()))?;
        Self::assemble(cfg, ck.model, opt, step, train)
    }

    fn assemble(cfg: RunConfig, model: Model, opt: Adam, step: u64, train: &[Example]) -> Result<Self, TrainError> {
        if train.is_empty() {
            return Err(TrainError::Config("training set is empty".into()));
        }
        let vocab = Vocab::synthetic(cfg.model.vocab_size).map_err(|e| TrainError::Config(e.to_string()))?;
        let data = prepare(train, &vocab, cfg.model.use_flags)?;
        for (index, p) in data.items.iter().enumerate() {
            let too_long = |what, len, max| TrainError::Example {
                index,
                message: format!("{what} length {len} exceeds {max}"),
            };
            if p.x.len() > cfg.model.max_src_len {
                return Err(too_long("input", p.x.len(), cfg.model.max_src_len));
            }
            if p.y.len() > cfg.model.max_tgt_len {
                return Err(too_long("target", p.y.len(), cfg.model.max_tgt_len));
            }
        }
        Ok(Self {
            cfg,
            model,
            opt,
            step,
            vocab,
            data,
        })
    }

    pub fn n_examples(&self) -> usize {
        self.data.items.len()
    }

    /// One optimizer step over the next batch. The batch is split into
    /// `threads` contiguous shards whose gradients are summed in shard order.
    pub fn train_step(&mut self, threads: usize) -> Result<StepStats, TrainError> {
        let idx = batch_indices(self.cfg.seed, self.data.items.len(), self.cfg.train.batch_size, self.step);
        let items: Vec<&Prepared> = idx.iter().map(|&i| &self.data.items[i]).collect();
        let tokens: usize = items.iter().map(|p| p.y.len()).sum();
        let scale = 1.0 / tokens as f64;
        let use_flags = self.cfg.model.use_flags;
        let samples: Vec<Sample<'_>> = items
            .iter()
            .map(|p| Sample {
                x: &p.x,
                y: &p.y,
                flags: if use_flags { p.flags.as_ref() } else { None },
            })
            .collect();
        let shards = threads.clamp(1, samples.len());
        let (model, table) = (&self.model, &self.data.table);
        let results: Vec<Result<(f64, Grads), ModelError>> = if shards == 1 {
            vec![model.loss_and_grads(&samples, table, scale)]
        } else {
            let per = samples.len().div_ceil(shards);
            std::thread::scope(|s| {
                let hs: Vec<_> = samples
                    .chunks(per)
                    .map(|part| s.spawn(move || model.loss_and_grads(part, table, scale)))
                    .collect();
                hs.into_iter().map(|h| h.join().expect("training worker panicked")).collect()
            })
        };
        let mut loss = 0.0;
        let mut total: Option<Grads> = None;
        for r in results {
            let (l, g) = r?;
            loss += l;
            match total.as_mut() {
                None => total = Some(g),
                Some(t) => t.add(g),
            }
        }
        let grad_norm = self.opt.update(&mut self.model.params, &total.expect("at least one shard"));
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            grad_norm,
            tokens,
        })
    }

    pub fn checkpoint(&self, extra: Value) -> Checkpoint {
        let mut meta = json!({ "step": self.step, "seed": self.cfg.seed });
        merge(&mut meta, extra);
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.opt.clone()),
            meta,
        }
    }

    /// Greedy-decodes the dev subset and scores it.
    pub fn evaluate(&self, dev: &[Example], threads: usize) -> Result<EvalReport, TrainError> {
        let n = match self.cfg.train.eval_examples {
            0 => dev.len(),
            k => k.min(dev.len()),
        };
        evaluate_model(&self.model, &dev[..n], &self.vocab, &self.cfg.decode, threads)
    }
}

/// Decodes `examples` with `model` and scores the outputs.
pub fn evaluate_model(
    model: &Model,
    examples: &[Example],
    vocab: &Vocab,
    decode: &DecodeConfig,
    threads: usize,
) -> Result<EvalReport, TrainError> {
    let (records, _) = decode_examples(model, examples, vocab, decode, threads)?;
    let items = records.iter().map(|r| (r.expr.as_str(), r.src.as_slice(), r.hyp.as_slice()));
    Ok(metrics::evaluate(items, vocab, SlackMode::PerAtom)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalPoint {
    pub step: u64,
    pub csr: f64,
    pub csr_pm1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub steps: u64,
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    pub best_step: Option<u64>,
    pub best_csr: Option<f64>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub threads: usize,
    /// Directory for `config.json`, `train_log.jsonl`, `last.ckpt` and
    /// `best.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Continue from `out_dir/last.ckpt` when it exists.
    pub resume: bool,
    pub on_log: Option<Box<dyn FnMut(&Value) + 'a>>,
}

fn io(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io(format!("{}: {e}", path.display()))
}

/// Trains for `cfg.train.steps` steps, evaluating on `dev` and keeping the
/// best-dev checkpoint.
pub fn train(
    cfg: &RunConfig,
    train_set: &[Example],
    dev: &[Example],
    mut opts: TrainOptions<'_>,
) -> Result<(Trainer, TrainReport), TrainError> {
    let threads = opts.threads.max(1);
    let mut log_file = None;
    let last_path = opts.out_dir.as_ref().map(|d| d.join("last.ckpt"));
    let best_path = opts.out_dir.as_ref().map(|d| d.join("best.ckpt"));
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let p = dir.join("config.json");
        std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap() + "\n").map_err(|e| io(&p, e))?;
    }
    let mut trainer = match &last_path {
        Some(p) if opts.resume && p.exists() => {
            let ck = load_checkpoint(p, cfg.optim.clone())?;
            Trainer::resume(cfg.clone(), ck, train_set)?
        }
        _ => Trainer::new(cfg.clone(), train_set)?,
    };
    if let Some(dir) = &opts.out_dir {
        let p = dir.join("train_log.jsonl");
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(opts.resume)
            .write(true)
            .truncate(!opts.resume)
            .open(&p)
            .map_err(|e| io(&p, e))?;
        log_file = Some((p, std::io::BufWriter::new(f)));
    }
    let mut emit = |v: Value, opts: &mut TrainOptions<'_>| -> Result<(), TrainError> {
        if let Some((p, f)) = log_file.as_mut() {
            writeln!(f, "{v}").and_then(|_| f.flush()).map_err(|e| io(p, e))?;
        }
        if let Some(cb) = opts.on_log.as_mut() {
            cb(&v);
        }
        Ok(())
    };
    let mut report = TrainReport {
        steps: trainer.step,
        losses: Vec::new(),
        evals: Vec::new(),
        best_step: None,
        best_csr: None,
    };
    let total = cfg.train.steps;
    while trainer.step < total {
        let st = trainer.train_step(threads)?;
        report.losses.push(st.loss);
        if cfg.train.log_every > 0 && (st.step % cfg.train.log_every == 0 || st.step == total) {
            emit(json!({ "step": st.step, "loss": st.loss, "grad_norm": st.grad_norm }), &mut opts)?;
        }
        let eval_now = !dev.is_empty()
            && ((cfg.train.eval_every > 0 && st.step % cfg.train.eval_every == 0) || st.step == total);
        if eval_now {
            let r = trainer.evaluate(dev, threads)?;
            emit(json!({ "step": st.step, "dev_csr": r.csr, "dev_csr_pm1": r.csr_pm1 }), &mut opts)?;
            report.evals.push(EvalPoint {
                step: st.step,
                csr: r.csr,
                csr_pm1: r.csr_pm1,
            });
            if report.best_csr.is_none_or(|b| r.csr > b) {
                report.best_csr = Some(r.csr);
                report.best_step = Some(st.step);
                if let Some(p) = &best_path {
                    save_checkpoint(&trainer.checkpoint(json!({ "dev_csr": r.csr })), p)?;
                }
            }
        }
    }
    if let Some(p) = &last_path {
        save_checkpoint(&trainer.checkpoint(json!({})), p)?;
        if dev.is_empty() {
            if let Some(b) = &best_path {
                std::fs::copy(p, b).map_err(|e| io(b, e))?;
            }
        }
    }
    report.steps = trainer.step;
    Ok((trainer, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_nest_and_parse() {
        let mut v = serde_json::to_value(RunConfig::default()).unwrap();
        let applied = apply_env_overrides(
            &mut v,
            [
                ("RULEEXEC_TRAIN__STEPS".to_string(), "7".to_string()),
                ("RULEEXEC_TRAIN__FREEZE".to_string(), "flag_finetune".to_string()),
                ("OTHER".to_string(), "1".to_string()),
            ],
        );
        assert_eq!(applied, vec!["train.freeze", "train.steps"]);
        let c: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.freeze, FreezeMode::FlagFinetune);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let env = [("RULEEXEC_TRAIN__STEPZ".to_string(), "7".to_string())];
        assert!(matches!(RunConfig::load(None, env), Err(TrainError::Config(_))));
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(9, n, 4, s)).collect();
        let second: Vec<usize> = seen.split_off(10);
        let mut first = seen;
        first.sort_unstable();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        assert_eq!(second.len(), 10);
        assert_eq!(batch_indices(9, n, 4, 3), batch_indices(9, n, 4, 3));
    }
}
