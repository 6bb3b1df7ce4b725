use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use rule_exec::decoding::{decode_examples, example_tracker, write_decodes, DecodeConfig, DecodeRecord, Decoder};
use rule_exec::metrics::{self, SlackMode};
use rule_exec::neural::{load_checkpoint, AdamConfig, ModelError};
use rule_exec::synth::{self, Example, SynthError, TaskSpec};
use rule_exec::train::{self, RunConfig, TrainError, TrainOptions};
use rule_exec::{Formula, TokenId, Tracker, Vocab};

#[derive(Parser)]
#[command(name = "rule-exec", version, about = "Constrained generation with rule-execution tracking")]
struct Cli {
    /// Seed for data generation, initialisation and data order.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run config; RULEEXEC_* environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train/dev/test JSONL files and a manifest.
    GenData(GenDataArgs),
    /// Train a flag-tracking or baseline model.
    Train(TrainArgs),
    /// Decode a dataset or a single expression with a checkpoint.
    Generate(GenerateArgs),
    /// Check whether a token sequence satisfies an expression.
    Check(CheckArgs),
    /// Score a decode file.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task spec JSON; defaults to the `task` section of the run config.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory with train.jsonl and dev.jsonl.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train the flag-free baseline.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from OUT/last.ckpt.
    #[arg(long)]
    resume: bool,
    /// Validate config and data, then exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL dataset to decode.
    #[arg(long, conflicts_with = "expr")]
    data: Option<PathBuf>,
    /// Single constraint expression; may be empty.
    #[arg(long)]
    expr: Option<String>,
    /// Source words for --expr.
    #[arg(long, default_value = "")]
    src: String,
    /// Decode output JSONL.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flag trace TSV, one block per example.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    expr: String,
    /// Output words, e.g. "car snow . </s>".
    #[arg(long, conflicts_with = "ids", required_unless_present = "ids")]
    tokens: Option<String>,
    /// Output token ids, comma separated.
    #[arg(long)]
    ids: Option<String>,
    #[arg(long, default_value = "")]
    src: String,
    #[arg(long)]
    vocab_size: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    decodes: PathBuf,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 2 when CSR is below this value.
    #[arg(long)]
    gate: Option<f64>,
    #[arg(long, default_value = "per_atom")]
    slack_mode: SlackMode,
    #[arg(long)]
    vocab_size: Option<usize>,
}

enum CliError {
    Usage(String),
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Validation(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Example { .. } | TrainError::Synth(_) => {
                CliError::Validation(e.to_string())
            }
            TrainError::Model(m) => m.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Io(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

type Res<T> = Result<T, CliError>;

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_config(cli: &Cli) -> Res<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.model.seed = s;
        cfg.task.seed = s;
    }
    Ok(cfg)
}

fn write_json(path: &Path, v: &Value) -> Res<()> {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap() + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Res<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<TaskSpec>(&text).map_err(|e| validation(format!("{}: {e}", p.display())))?
        }
        None => load_config(cli)?.task,
    };
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let t0 = Instant::now();
    let splits = synth::generate(&spec)?;
    synth::write_splits(&spec, &splits, &a.out)?;
    eprintln!(
        "wrote {} train / {} dev / {} test examples to {} in {:.1}s",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        a.out.display(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn read_split(dir: &Path, name: &str) -> Res<Vec<Example>> {
    let p = dir.join(format!("{name}.jsonl"));
    if !p.exists() {
        return Err(validation(format!("{} not found; run `rule-exec gen-data --out {}` first", p.display(), dir.display())));
    }
    Ok(synth::read_dataset(&p)?)
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Res<()> {
    let mut cfg = load_config(cli)?;
    if a.baseline {
        cfg.model.use_flags = false;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    let train_set = read_split(&a.data, "train")?;
    let dev = read_split(&a.data, "dev")?;
    if train_set.is_empty() {
        return Err(validation("train.jsonl is empty"));
    }
    if a.dry_run {
        let vocab = Vocab::synthetic(cfg.model.vocab_size).map_err(validation)?;
        for (i, ex) in train_set.iter().chain(&dev).enumerate() {
            Formula::parse(&ex.expr, &vocab).map_err(|e| validation(format!("example {i}: {e}")))?;
        }
        println!("{}", serde_json::to_string_pretty(&cfg).unwrap());
        eprintln!("config and data valid ({} train, {} dev)", train_set.len(), dev.len());
        return Ok(());
    }
    let t0 = Instant::now();
    let opts = TrainOptions {
        threads: cli.threads,
        out_dir: Some(a.out.clone()),
        resume: a.resume,
        on_log: Some(Box::new(|v: &Value| eprintln!("{v}"))),
    };
    let (_, report) = train::train(&cfg, &train_set, &dev, opts)?;
    let summary = json!({
        "steps": report.steps,
        "final_loss": report.losses.last(),
        "best_step": report.best_step,
        "best_dev_csr": report.best_csr,
        "seconds": t0.elapsed().as_secs_f64(),
    });
    write_json(&a.out.join("train_summary.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn generate_cmd(cli: &Cli, a: &GenerateArgs) -> Res<()> {
    let ck = load_checkpoint(&a.checkpoint, AdamConfig::default())?;
    let model = ck.model;
    let vocab = Vocab::synthetic(model.cfg.vocab_size).map_err(validation)?;
    let mut dcfg: DecodeConfig = load_config(cli)?.decode;
    if let Some(b) = a.beam {
        dcfg.beam_size = b;
    }
    if let Some(m) = a.max_len {
        dcfg.max_len = m;
    }
    if dcfg.beam_size == 0 || dcfg.max_len == 0 {
        return Err(validation("--beam and --max-len must be at least 1"));
    }
    let examples = match (&a.data, &a.expr) {
        (Some(p), _) => synth::read_dataset(p)?,
        (None, Some(expr)) => {
            let src = vocab.encode(&a.src).map_err(validation)?;
            Formula::parse(expr, &vocab).map_err(validation)?;
            vec![Example {
                expr: expr.clone(),
                src,
                tgt: Vec::new(),
                meta: Value::Null,
            }]
        }
        (None, None) => return Err(CliError::Usage("generate needs --data FILE or --expr EXPR".into())),
    };
    let records = if a.trace.is_some() || a.expr.is_some() {
        let stops = Arc::new(vocab.stop_words().clone());
        let mut dec = Decoder::new(&model, dcfg.clone());
        let mut traces = String::new();
        let mut recs = Vec::new();
        for (i, ex) in examples.iter().enumerate() {
            let tr = example_tracker(&ex.expr, &ex.src, &vocab, &stops).map_err(|e| validation(format!("example {i}: {e}")))?;
            let h = dec.decode(&tr)?;
            traces.push_str(&format!("# example {i}: {}\n", ex.expr));
            traces.push_str(&h.trace.to_tsv(tr.x(), &vocab));
            traces.push('\n');
            recs.push(DecodeRecord {
                src: ex.src.clone(),
                expr: ex.expr.clone(),
                hyp: h.tokens,
                score: h.score,
                satisfied: h.verdict.satisfied,
                per_atom: h.verdict.atoms,
            });
        }
        if let Some(p) = &a.trace {
            std::fs::write(p, traces).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
        }
        recs
    } else {
        decode_examples(&model, &examples, &vocab, &dcfg, cli.threads).map_err(runtime)?.0
    };
    if let Some(p) = &a.out {
        write_decodes(&records, p).map_err(runtime)?;
    }
    if a.expr.is_some() || a.out.is_none() {
        for r in &records {
            println!(
                "{}",
                json!({ "hyp": vocab.decode(&r.hyp), "score": r.score, "satisfied": r.satisfied, "per_atom": r.per_atom })
            );
        }
    } else {
        let sat = records.iter().filter(|r| r.satisfied).count();
        eprintln!("decoded {} examples, {} satisfied", records.len(), sat);
    }
    Ok(())
}

fn parse_ids(s: &str) -> Res<Vec<TokenId>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<TokenId>().map_err(|e| validation(format!("bad token id `{t}`: {e}"))))
        .collect()
}

fn check_cmd(cli: &Cli, a: &CheckArgs) -> Res<()> {
    let size = match a.vocab_size {
        Some(v) => v,
        None => load_config(cli)?.model.vocab_size,
    };
    let vocab = Vocab::synthetic(size).map_err(validation)?;
    let formula = Formula::parse(&a.expr, &vocab).map_err(validation)?;
    let hyp = match (&a.tokens, &a.ids) {
        (Some(t), _) => vocab.encode(t).map_err(validation)?,
        (None, Some(ids)) => parse_ids(ids)?,
        _ => unreachable!("clap requires one of --tokens/--ids"),
    };
    let src = vocab.encode(&a.src).map_err(validation)?;
    let stops = Arc::new(vocab.stop_words().clone());
    let tracker = Tracker::for_input(formula.clone(), &src, &vocab, stops.clone());
    let verdict = tracker.final_satisfaction(&hyp);
    let score = metrics::score_example(&formula, &src, &hyp, &stops);
    let last = tracker.build_full_matrix(&hyp);
    let t = last.n_cols() - 1;
    let atoms: Vec<Value> = formula
        .atoms()
        .iter()
        .enumerate()
        .map(|(k, atom)| {
            let status = last.column(t)[last.layout().slot_of(k)].to_string();
            json!({
                "atom": atom.render(&vocab),
                "holds": verdict.atoms[k],
                "status": status,
                "slack": score.atoms[k].slack,
            })
        })
        .collect();
    let report = json!({
        "expr": formula.render(&vocab),
        "tokens": vocab.decode(&hyp),
        "truncated": score.truncated,
        "satisfied": score.satisfied(),
        "tracker_satisfied": verdict.satisfied,
        "atoms": atoms,
    });
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Res<()> {
    let size = match a.vocab_size {
        Some(v) => v,
        None => load_config(cli)?.model.vocab_size,
    };
    let vocab = Vocab::synthetic(size).map_err(validation)?;
    let records = rule_exec::decoding::read_decodes(&a.decodes).map_err(validation)?;
    if records.is_empty() {
        return Err(validation(format!(
            "{} has no decode records; produce one with `rule-exec generate --checkpoint CKPT --data DATA --out {}`",
            a.decodes.display(),
            a.decodes.display()
        )));
    }
    let items = records.iter().map(|r| (r.expr.as_str(), r.src.as_slice(), r.hyp.as_slice()));
    let report = metrics::evaluate(items, &vocab, a.slack_mode).map_err(validation)?;
    print!("{}", report.to_table());
    if let Some(p) = &a.out {
        write_json(p, &serde_json::to_value(&report).unwrap())?;
    }
    if let Some(g) = a.gate {
        if !report.passes_gate(g) {
            return Err(CliError::Validation(format!("CSR {:.4} is below the gate {g}", report.csr)));
        }
    }
    Ok(())
}

fn run(cli: &Cli) -> Res<()> {
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    match &cli.cmd {
        Cmd::GenData(a) => gen_data(cli, a),
        Cmd::Train(a) => train_cmd(cli, a),
        Cmd::Generate(a) => generate_cmd(cli, a),
        Cmd::Check(a) => check_cmd(cli, a),
        Cmd::Eval(a) => eval_cmd(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
