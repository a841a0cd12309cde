use std::path::{Path, PathBuf};

use serde_json::Value;
use utp::checkpoint;
use utp::cli::run;
use utp::logs::JsonlObserver;
use utp::Error;
use utp_core::objectives::Similarity;
use utp_core::train::{pretrain, EvalRecord, StepRecord, TrainConfig, TrainObserver};
use utp_core::{Encoder, ModelConfig};

fn utp(args: &[&str]) -> Result<String, Error> {
    let mut out = Vec::new();
    let mut full = vec!["utp"];
    full.extend_from_slice(args);
    run(full, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn json(p: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn manifest(p: &str) -> Value {
    json(PathBuf::from(format!("{p}.manifest.json")))
}

#[test]
fn gen_synthetic_is_deterministic_and_valid() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (path(d.path(), "a.jsonl"), path(d.path(), "b.jsonl"));
    utp(&["--seed", "0", "gen-synthetic", "--pairs", "64", "--out", &a]).unwrap();
    utp(&["--seed", "0", "gen-synthetic", "--pairs", "64", "--out", &b]).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(utp(&["validate", "--corpus", &a]).unwrap().trim(), "ok 64");
    let m = manifest(&a);
    assert_eq!(m["command"], "gen-synthetic");
    assert_eq!(m["config"]["n_pairs"], 64);
    assert_eq!(m["outputs"][0], a.as_str());
}

#[test]
fn zero_pairs_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let err = utp(&["gen-synthetic", "--pairs", "0", "--out", &path(d.path(), "x")]).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
    assert!(matches!(utp(&["no-such-command"]), Err(Error::Usage(_))));
}

#[test]
fn validate_reports_line_errors() {
    let d = tempfile::tempdir().unwrap();
    let p = path(d.path(), "bad.jsonl");
    std::fs::write(&p, "{\"id\":\"a\",\"text\":\"t\",\"table\":{\"header\":[\"x\"],\"rows\":[[\"1\",\"2\"]]}}\n").unwrap();
    let err = utp(&["validate", "--corpus", &p]).unwrap_err();
    assert_eq!(err.kind(), "ragged-row");
    assert!(err.to_string().starts_with("line 1:"));
}

#[test]
fn split_writes_disjoint_halves() {
    let d = tempfile::tempdir().unwrap();
    let c = path(d.path(), "c.jsonl");
    utp(&["gen-synthetic", "--pairs", "20", "--out", &c]).unwrap();
    let (t, v) = (path(d.path(), "t.jsonl"), path(d.path(), "v.jsonl"));
    let out = utp(&["split", "--corpus", &c, "--dev-fraction", "0.25", "--train-out", &t, "--dev-out", &v]).unwrap();
    assert_eq!(out.trim(), "train 15 dev 5");
    let m = manifest(&t);
    assert_eq!(m["inputs"].as_object().unwrap().len(), 1);
}

#[test]
fn bm25_eval_needs_no_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let c = path(d.path(), "c.jsonl");
    utp(&["gen-synthetic", "--pairs", "30", "--out", &c]).unwrap();
    let m = path(d.path(), "m.json");
    utp(&["eval-retrieval", "--bm25", "--pairs", &c, "--out", &m]).unwrap();
    let metrics = json(&m);
    let keys: Vec<&str> = metrics.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["R@1", "R@10", "R@50"]);
    assert!(metrics["R@1"].as_f64().unwrap() > 0.5);
    let run = std::fs::read_to_string(d.path().join("m.run.jsonl")).unwrap();
    assert_eq!(run.lines().count(), 30);
    assert!(utp(&["eval-retrieval", "--pairs", &c, "--out", &m]).is_err());
}

#[test]
fn pretrain_defaults_are_echoed() {
    let d = tempfile::tempdir().unwrap();
    let c = path(d.path(), "c.jsonl");
    utp(&["gen-synthetic", "--pairs", "16", "--out", &c]).unwrap();
    let ck = path(d.path(), "m.ckpt");
    utp(&["pretrain", "--corpus", &c, "--model", "tiny", "--epochs", "1", "--out", &ck]).unwrap();
    let m = manifest(&ck);
    let t = &m["config"]["train"];
    assert_eq!(t["batch_size"], 16);
    assert_eq!(t["learning_rate"], 5e-5);
    assert_eq!(t["weight_decay"], 0.01);
    assert_eq!(t["tau"], 0.05);
    assert_eq!(t["epochs"], 1);
    let log = std::fs::read_to_string(format!("{ck}.log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["step", "L", "L_mlm", "L_cmcr", "lr"] {
        assert!(first.get(key).is_some(), "{key}");
    }
}

#[test]
fn flags_win_over_config_file() {
    let d = tempfile::tempdir().unwrap();
    let c = path(d.path(), "c.jsonl");
    utp(&["gen-synthetic", "--pairs", "8", "--out", &c]).unwrap();
    let cfg = path(d.path(), "cfg.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 1, "batch_size": 4, "tau": 0.2}, "model": {"n_layers": 1}}"#)
        .unwrap();
    let ck = path(d.path(), "m.ckpt");
    utp(&["pretrain", "--corpus", &c, "--model", "tiny", "--config", &cfg, "--tau", "0.1", "--out", &ck]).unwrap();
    let m = manifest(&ck);
    assert_eq!(m["config"]["train"]["tau"], 0.1);
    assert_eq!(m["config"]["train"]["batch_size"], 4);
    assert_eq!(m["config"]["model"]["n_layers"], 1);
    assert_eq!(checkpoint::load(Path::new(&ck), None).unwrap().encoder.config().n_layers, 1);
}

#[test]
fn seed_falls_back_to_environment() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (path(d.path(), "a.jsonl"), path(d.path(), "b.jsonl"));
    std::env::set_var("UTP_SEED", "42");
    utp(&["gen-synthetic", "--pairs", "5", "--out", &a]).unwrap();
    std::env::remove_var("UTP_SEED");
    utp(&["--seed", "42", "gen-synthetic", "--pairs", "5", "--out", &b]).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(manifest(&a)["seed"], 42);
}

#[test]
fn qa_round_trip_through_commands() {
    let d = tempfile::tempdir().unwrap();
    let q = path(d.path(), "q.jsonl");
    utp(&["gen-qa", "--pairs", "6", "--out", &q]).unwrap();
    assert_eq!(utp(&["validate", "--qa", "--corpus", &q]).unwrap().trim(), "ok 6");
    let ck = path(d.path(), "qa.ckpt");
    let cfg = path(d.path(), "cfg.json");
    std::fs::write(&cfg, r#"{"model": {"d_model": 16, "n_heads": 2, "d_ff": 32}}"#).unwrap();
    utp(&["finetune-qa", "--qa", &q, "--config", &cfg, "--steps", "5", "--out", &ck]).unwrap();
    let m = path(d.path(), "acc.json");
    utp(&["eval-qa", "--ckpt", &ck, "--qa", &q, "--out", &m]).unwrap();
    let acc = json(&m);
    assert_eq!(acc["n_examples"], 6);
    assert!(acc["denotation_accuracy"].as_f64().is_some());
    assert_eq!(std::fs::read_to_string(format!("{ck}.log.jsonl")).unwrap().lines().count(), 5);
}

#[test]
fn eval_qa_without_head_fails() {
    let d = tempfile::tempdir().unwrap();
    let c = path(d.path(), "c.jsonl");
    utp(&["gen-synthetic", "--pairs", "4", "--out", &c]).unwrap();
    let ck = path(d.path(), "m.ckpt");
    utp(&["pretrain", "--corpus", &c, "--model", "tiny", "--epochs", "1", "--batch-size", "4", "--out", &ck]).unwrap();
    let q = path(d.path(), "q.jsonl");
    utp(&["gen-qa", "--pairs", "2", "--out", &q]).unwrap();
    let err = utp(&["eval-qa", "--ckpt", &ck, "--qa", &q, "--out", &path(d.path(), "x.json")]).unwrap_err();
    assert_eq!(err.kind(), "usage");
}

#[test]
fn mine_then_finetune_with_file() {
    let d = tempfile::tempdir().unwrap();
    let c = path(d.path(), "c.jsonl");
    utp(&["gen-synthetic", "--pairs", "12", "--out", &c]).unwrap();
    let ck = path(d.path(), "m.ckpt");
    utp(&["pretrain", "--corpus", &c, "--model", "tiny", "--epochs", "1", "--batch-size", "4", "--out", &ck]).unwrap();
    let neg = path(d.path(), "neg.jsonl");
    utp(&["mine-negatives", "--ckpt", &ck, "--pairs", &c, "--n", "3", "--out", &neg]).unwrap();
    let lines: Vec<Value> = std::fs::read_to_string(&neg)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 12);
    for l in &lines {
        let tables = l["tables"].as_array().unwrap();
        assert_eq!(tables.len(), 3);
        assert!(!tables.contains(&l["query_id"]));
    }
    let ft = path(d.path(), "ft.ckpt");
    utp(&[
        "finetune-retrieval", "--ckpt", &ck, "--pairs", &c, "--hard-negatives", &neg, "--epochs", "1", "--out", &ft,
    ])
    .unwrap();
    assert_eq!(manifest(&ft)["config"]["train"]["hard_negatives_per_query"], 8);
    assert!(manifest(&ft)["inputs"].as_object().unwrap().contains_key(&neg));
}

#[test]
fn gradcheck_command_passes_on_strided_tiny_model() {
    let d = tempfile::tempdir().unwrap();
    let r = path(d.path(), "g.json");
    let out = utp(&["gradcheck", "--strided", "3", "--out", &r]).unwrap();
    assert!(out.trim_end().ends_with("PASS"), "{out}");
    assert_eq!(json(&r)["passed"], true);
}

/// Stops the run after a few steps, as an interrupt would.
struct StopAfter {
    inner: JsonlObserver,
    steps: usize,
}

impl TrainObserver for StopAfter {
    fn on_step(&mut self, r: &StepRecord) -> utp_core::Result<()> {
        self.inner.on_step(r)?;
        if r.step + 1 >= self.steps {
            return Err(utp_core::Error::Observer("interrupted".into()));
        }
        Ok(())
    }

    fn on_eval(&mut self, r: &EvalRecord, e: &Encoder) -> utp_core::Result<()> {
        self.inner.on_eval(r, e)
    }
}

#[test]
fn interrupted_run_leaves_usable_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let c = path(d.path(), "c.jsonl");
    utp(&["gen-synthetic", "--pairs", "8", "--out", &c]).unwrap();
    let corpus = utp::corpus::read_corpus(Path::new(&c)).unwrap();
    let vocab = utp_core::tokenize::build_vocab(&corpus, 1);
    let ck = d.path().join("run.ckpt");
    let inner = JsonlObserver::create(&d.path().join("run.log"), &ck, &vocab, Similarity::Dot).unwrap();
    let mut obs = StopAfter { inner, steps: 3 };
    let mut enc = Encoder::init(ModelConfig::tiny(vocab.len())).unwrap();
    let cfg = TrainConfig {
        batch_size: 2,
        eval_every: 2,
        ..TrainConfig::pretrain()
    };
    let err = pretrain(&mut enc, &vocab, corpus.pairs(), corpus.pairs(), &cfg, &mut obs).unwrap_err();
    assert!(matches!(err, utp_core::Error::Observer(_)));
    let log = std::fs::read_to_string(d.path().join("run.log")).unwrap();
    assert_eq!(log.lines().count(), 4); // three steps and the eval after step 2
    let m = path(d.path(), "m.json");
    utp(&["eval-retrieval", "--ckpt", ck.to_str().unwrap(), "--pairs", &c, "--out", &m]).unwrap();
}

#[test]
fn checkpoint_vocab_mismatch_is_reported() {
    let d = tempfile::tempdir().unwrap();
    let c = path(d.path(), "c.jsonl");
    utp(&["gen-synthetic", "--pairs", "4", "--out", &c]).unwrap();
    let ck = path(d.path(), "m.ckpt");
    utp(&["pretrain", "--corpus", &c, "--model", "tiny", "--epochs", "1", "--batch-size", "4", "--out", &ck]).unwrap();
    let other = utp_core::Vocab::specials_only();
    let err = checkpoint::load(Path::new(&ck), Some(&other)).unwrap_err();
    assert_eq!(err.kind(), "vocab-mismatch");
    std::fs::write(&ck, b"garbage").unwrap();
    let err = utp(&["mine-negatives", "--ckpt", &ck, "--pairs", &c, "--out", &path(d.path(), "n")]).unwrap_err();
    assert_eq!(err.kind(), "not-a-checkpoint");
}
