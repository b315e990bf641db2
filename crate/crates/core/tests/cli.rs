//! End-to-end runs of the `milrep` binary.

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"{"corpus":{"docs":120},"train":{"epochs":2,"warmup_steps":2},"eval":{"zero_shot_docs":20}}"#;

fn milrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_milrep"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.in.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn gen_data(dir: &Path, config: &Path, extra: &[&str]) -> std::path::PathBuf {
    let out = dir.join("data");
    let mut args: Vec<&str> = extra.to_vec();
    args.extend(["gen-data", "--config", arg(config), "--out", arg(&out)]);
    let o = milrep(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("corpus.jsonl")
}

#[test]
fn gradcheck_lists_every_operation() {
    let o = milrep(&["gradcheck", "--instances", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["cosine", "logsumexp", "infonce", "global:NL"] {
        assert!(text.contains(name), "missing {name} in\n{text}");
    }
}

#[test]
fn missing_required_argument_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "{}");
    let o = milrep(&["eval", "--config", arg(&config), "--corpus", "x", "--out", "y"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unknown_subcommand_is_an_input_error() {
    assert_eq!(milrep(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let o = milrep(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("gen-data"));
}

#[test]
fn invalid_config_is_rejected_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"train":{"batch_size":1}}"#);
    let o = milrep(&["gen-data", "--config", arg(&config), "--out", arg(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("batch_size"));
}

#[test]
fn missing_corpus_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let o = milrep(&[
        "train",
        "--config",
        arg(&config),
        "--corpus",
        arg(&dir.path().join("nope.jsonl")),
        "--out",
        arg(&dir.path().join("run")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sequential_and_parallel_runs_match() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let corpus = gen_data(dir.path(), &config, &[]);
    let mut outputs = Vec::new();
    for (name, flags) in [("par", vec![]), ("seq", vec!["--sequential"])] {
        let out = dir.path().join(name);
        let mut args: Vec<&str> = flags.clone();
        args.extend(["train", "--config", arg(&config), "--corpus", arg(&corpus), "--out", arg(&out)]);
        assert_eq!(milrep(&args).status.code(), Some(0));
        outputs.push(std::fs::read(out.join("checkpoint.json")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn resumed_training_reaches_the_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let corpus = gen_data(dir.path(), &config, &[]);
    let full = dir.path().join("full");
    let o = milrep(&[
        "train",
        "--config",
        arg(&config),
        "--corpus",
        arg(&corpus),
        "--out",
        arg(&full),
        "--checkpoint-every",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let resumed = dir.path().join("resumed");
    let o = milrep(&[
        "train",
        "--config",
        arg(&config),
        "--corpus",
        arg(&corpus),
        "--out",
        arg(&resumed),
        "--resume",
        arg(&full.join("checkpoint_step5.json")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(full.join("checkpoint.json")).unwrap(),
        std::fs::read(resumed.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn resume_with_a_different_train_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let corpus = gen_data(dir.path(), &config, &[]);
    let run = dir.path().join("run");
    let o = milrep(&["train", "--config", arg(&config), "--corpus", arg(&corpus), "--out", arg(&run)]);
    assert_eq!(o.status.code(), Some(0));
    let other = dir.path().join("other.json");
    std::fs::write(&other, SMALL.replace("\"epochs\":2", "\"epochs\":3")).unwrap();
    let o = milrep(&[
        "train",
        "--config",
        arg(&other),
        "--corpus",
        arg(&corpus),
        "--out",
        arg(&dir.path().join("run2")),
        "--resume",
        arg(&run.join("checkpoint.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_then_report_summarises_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let corpus = gen_data(dir.path(), &config, &[]);
    let run = dir.path().join("run");
    let o = milrep(&["train", "--config", arg(&config), "--corpus", arg(&corpus), "--out", arg(&run)]);
    assert_eq!(o.status.code(), Some(0));
    let ev = dir.path().join("eval");
    let o = milrep(&[
        "eval",
        "--config",
        arg(&config),
        "--checkpoint",
        arg(&run.join("checkpoint.json")),
        "--corpus",
        arg(&corpus),
        "--tasks",
        "zs,grounding",
        "--out",
        arg(&ev),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::copy(run.join("train_log.csv"), ev.join("train_log.csv")).unwrap();
    let o = milrep(&["report", "--in", arg(&ev)]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("eval.csv"), "{text}");
    assert!(text.contains("train_log.csv"), "{text}");
    assert!(!text.contains("retrieval"), "{text}");
}

#[test]
fn report_on_an_empty_directory_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(milrep(&["report", "--in", arg(dir.path())]).status.code(), Some(1));
}
