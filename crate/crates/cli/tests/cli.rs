use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;

const RUNNING_EXPR: &str = "copy(car) & copy(snow) & len(9)";
const RUNNING_TOKENS: &str = "the dog was in the . car on the snow </s>";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rule-exec"));
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("RULEEXEC_")) {
        c.env_remove(k);
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, steps: u64, lr: f64) -> PathBuf {
    config_with(dir, steps, lr, 200, 8)
}

fn config_with(dir: &Path, steps: u64, lr: f64, train: usize, batch: usize) -> PathBuf {
    let cfg = serde_json::json!({
        "seed": 1,
        "model": { "d_model": 16, "heads": 2, "enc_layers": 1, "dec_layers": 1, "ffn": 32,
                   "flag_ffn": 32, "max_src_len": 64, "max_tgt_len": 24, "max_flag_len": 48, "seed": 1 },
        "task": { "task": "copy_set", "train": train, "dev": 8, "test": 8, "seed": 1 },
        "optim": { "lr": lr },
        "train": { "steps": steps, "batch_size": batch, "log_every": 1 },
        "decode": { "max_len": 20 }
    });
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

fn gen(dir: &Path, cfg: &Path) -> PathBuf {
    let data = dir.join("data");
    let o = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

fn losses(o: &Output) -> Vec<f64> {
    stderr(o)
        .lines()
        .filter_map(|l| serde_json::from_str::<Value>(l).ok())
        .filter_map(|v| v.get("loss").and_then(Value::as_f64))
        .collect()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 1, 3e-3);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gen_data_zero_samples() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"task": "insen_len", "train": 0, "dev": 0, "test": 0}"#).unwrap();
    let out = dir.path().join("d");
    let o = run(&["gen-data", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl"] {
        assert!(std::fs::read(out.join(f)).unwrap().is_empty());
    }
    let m: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["counts"]["train"], 0);
}

#[test]
fn gen_data_ten_thousand_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"task": "copy_set", "train": 10000, "dev": 0, "test": 0}"#).unwrap();
    let t0 = Instant::now();
    let o = run(&["gen-data", "--spec", spec.to_str().unwrap(), "--out", dir.path().join("d").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(t0.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn check_running_example() {
    let o = run(&["check", "--expr", RUNNING_EXPR, "--tokens", RUNNING_TOKENS]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["satisfied"], true);
    assert_eq!(v["tracker_satisfied"], true);
    assert_eq!(v["atoms"].as_array().unwrap().len(), 3);
    assert!(v["atoms"].as_array().unwrap().iter().all(|a| a["status"].as_str().unwrap().starts_with('2')));
}

#[test]
fn check_empty_expression_and_failures() {
    let o = run(&["check", "--expr", "", "--tokens", "dog </s>"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["satisfied"], true);
    let o = run(&["check", "--expr", "Len(1, 3)", "--ids", "36,37,3,2"]);
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["satisfied"], false);
    assert_eq!(v["atoms"][0]["slack"], 1);
}

#[test]
fn check_agrees_with_eval_on_golden_fixture() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden20.jsonl");
    let text = std::fs::read_to_string(&fixture).unwrap();
    let mut satisfied = 0;
    for line in text.lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        let ids: Vec<String> = r["hyp"].as_array().unwrap().iter().map(|x| x.to_string()).collect();
        let src: Vec<u64> = r["src"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
        let mut args = vec!["check".to_string(), "--expr".into(), r["expr"].as_str().unwrap().into(), "--ids".into(), ids.join(",")];
        if !src.is_empty() {
            let words: Vec<&str> = src
                .iter()
                .map(|&t| match t {
                    3 => ".",
                    34 => "car",
                    36 => "dog",
                    _ => panic!("unexpected source id {t}"),
                })
                .collect();
            args.extend(["--src".into(), words.join(" ")]);
        }
        let o = bin().args(&args).output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
        satisfied += usize::from(v["satisfied"] == true);
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let o = run(&["eval", "--decodes", fixture.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["csr"].as_f64().unwrap(), satisfied as f64 / 20.0);
    assert_eq!(report["csr"].as_f64().unwrap(), 0.45);
    assert!(stdout(&o).contains("CSR(+-1)"));
}

#[test]
fn eval_gate_and_empty_input() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden20.jsonl");
    let f = fixture.to_str().unwrap();
    assert_eq!(run(&["eval", "--decodes", f, "--gate", "0.4"]).status.code(), Some(0));
    assert_eq!(run(&["eval", "--decodes", f, "--gate", "0.5"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = run(&["eval", "--decodes", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rule-exec generate"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["check", "--expr", "Copy(car)"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 5, 3e-3);
    let data = gen(dir.path(), &cfg);
    let o = bin()
        .args(["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", "x", "--dry-run"])
        .env("RULEEXEC_TRAIN__BATCH_SIZE", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn dry_run_does_no_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 5, 3e-3);
    let data = gen(dir.path(), &cfg);
    let out = dir.path().join("run");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--dry-run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!out.exists());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["train"]["steps"], 5);
}

#[test]
fn loss_decreases_over_first_fifty_steps() {
    // Every batch is the whole training set, so the logged loss tracks one objective.
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_with(dir.path(), 50, 3e-4, 16, 16);
    let data = gen(dir.path(), &cfg);
    let out = dir.path().join("run");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let l = losses(&o);
    assert_eq!(l.len(), 50);
    assert!(l.windows(2).all(|w| w[1] < w[0]), "{l:?}");
}

#[test]
fn resume_reproduces_next_step_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 6, 3e-3);
    let data = gen(dir.path(), &cfg);
    let (c, d) = (cfg.to_str().unwrap(), data.to_str().unwrap());
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let o = run(&["train", "--config", c, "--data", d, "--out", full.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let all = losses(&o);
    let o = run(&["train", "--config", c, "--data", d, "--out", part.to_str().unwrap(), "--steps", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["train", "--config", c, "--data", d, "--out", part.to_str().unwrap(), "--resume"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rest = losses(&o);
    assert_eq!(rest.len(), 3);
    assert_eq!(rest[0].to_bits(), all[3].to_bits());
    assert_eq!(rest, all[3..].to_vec());
    assert_eq!(std::fs::read(full.join("last.ckpt")).unwrap(), std::fs::read(part.join("last.ckpt")).unwrap());
}

#[test]
fn generate_expression_and_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 3, 3e-3);
    let data = gen(dir.path(), &cfg);
    let run_dir = dir.path().join("run");
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = run_dir.join("best.ckpt");
    let ck = ck.to_str().unwrap();

    let trace = dir.path().join("trace.tsv");
    let o = run(&["generate", "--checkpoint", ck, "--expr", RUNNING_EXPR, "--trace", trace.to_str().unwrap(), "--max-len", "12"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(v["per_atom"].as_array().unwrap().len(), 3);
    let tsv = std::fs::read_to_string(&trace).unwrap();
    assert!(tsv.contains("token\t0\t1"));

    let o = run(&["generate", "--checkpoint", ck, "--expr", "", "--max-len", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(stdout(&o).lines().next().unwrap()).unwrap();
    assert_eq!(v["satisfied"], true);

    let out = dir.path().join("dec.jsonl");
    let o = run(&["generate", "--checkpoint", ck, "--data", data.join("test.jsonl").to_str().unwrap(), "--out", out.to_str().unwrap(), "--beam", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 8);
    for line in text.lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        let obj = r.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["expr", "hyp", "per_atom", "satisfied", "score", "src"]);
        assert!(r["expr"].is_string() && r["score"].is_number() && r["satisfied"].is_boolean());
        assert!(r["hyp"].as_array().unwrap().iter().all(Value::is_u64));
        assert!(r["src"].as_array().unwrap().iter().all(Value::is_u64));
        assert!(r["per_atom"].as_array().unwrap().iter().all(Value::is_boolean));
    }
}
