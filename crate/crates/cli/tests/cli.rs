use std::path::Path;
use std::process::{Command, Output};

fn daud(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_daud")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY_MODEL: &str = "n_layers = 1\nn_heads = 2\nd_model = 16\nd_ff = 64\nvocab_size = 260\nmax_seq_len = 256\ntie_embeddings = true\n";

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_audit_rouge_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("train.jsonl");
    let test = dir.path().join("test.jsonl");
    let o = daud(&["synth", "--n", "12", "--seed", "3", "--out", p(&corpus)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&corpus).unwrap().lines().count(), 12);
    assert_eq!(code(&daud(&["synth", "--n", "4", "--seed", "4", "--split", "test", "--out", p(&test)])), 0);

    let cfg = dir.path().join("run.toml");
    let text = format!(
        "version = 1\ncorpus = {:?}\n\n[model]\n{TINY_MODEL}\n[regime]\nkind = \"SFT\"\nepochs = 1\nbatch_size = 4\n",
        p(&corpus)
    );
    std::fs::write(&cfg, text).unwrap();
    let ckpt = dir.path().join("m.daud");
    let o = daud(&["train", "--config", p(&cfg), "--seed", "1", "--out", p(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ckpt.is_file());

    let o = daud(&["audit", "--checkpoint", p(&ckpt), "--corpus", p(&corpus), "-k", "8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["n_evaluated"], 12);

    let out = dir.path().join("rouge.json");
    let o = daud(&["rouge", "--checkpoint", p(&ckpt), "--train", p(&corpus), "--test", p(&test), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["test"]["n_examples"], 4);
}

#[test]
fn experiment_with_teacher_only_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    let text = format!(
        "version = 1\nseed = 2\nruns = []\n\n[data]\nsynth_train = 8\nsynth_test = 4\n\n[rouge]\ntrain_sample = 4\ntest_sample = 4\n\n[teacher]\nlabel = \"tiny\"\n\n[teacher.model]\n{TINY_MODEL}\n[teacher.regime]\nkind = \"SFT\"\nepochs = 1\nbatch_size = 4\n"
    );
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let o = daud(&["-q", "experiment", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(csv.starts_with("model,params,technique,mem_fraction,"));
    assert!(csv.lines().nth(1).unwrap().starts_with("tiny,"));

    let o = daud(&["experiment", "--config", p(&cfg), "--out", p(&out), "--resume", "-q"]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(out.join("results.csv")).unwrap(), csv);

    let o = daud(&["report", "--input", p(&out.join("results.csv")), "--format", "csv"]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), csv);
    let o = daud(&["report", "--input", p(&out.join("results.csv"))]);
    assert!(String::from_utf8(o.stdout).unwrap().contains("## Fraction of memorization"));
    assert_eq!(code(&daud(&["report", "--input", p(&out.join("results.csv")), "--format", "xml"])), 1);
}

#[test]
fn print_config_shows_default_protocol() {
    let o = daud(&["experiment", "--print-config", "--seed", "7"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("seed = 7"));
    assert_eq!(text.matches("[[runs]]").count(), 12);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&daud(&["experiment", "--config", p(&missing)])), 1);
    assert_eq!(code(&daud(&["train", "--config", p(&missing), "--out", "x.daud"])), 1);
    assert_eq!(code(&daud(&["synth", "--n", "0", "--out", p(&dir.path().join("c.jsonl"))])), 1);
    assert_eq!(code(&daud(&["frobnicate"])), 1);
    assert_eq!(code(&daud(&["audit", "--corpus", "x"])), 1);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "version = 1\nunknown_key = 1\n").unwrap();
    assert_eq!(code(&daud(&["experiment", "--config", p(&bad)])), 1);
    assert_eq!(code(&daud(&["--help"])), 0);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.daud");
    std::fs::write(&ckpt, b"DAUD garbage").unwrap();
    let corpus = dir.path().join("c.jsonl");
    assert_eq!(code(&daud(&["synth", "--n", "2", "--out", p(&corpus)])), 0);
    let o = daud(&["audit", "--checkpoint", p(&ckpt), "--corpus", p(&corpus)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("integrity"));
}
