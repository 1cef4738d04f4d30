use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn disem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disem"))
        .args(args)
        .env_remove("DISEM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny(out: &Path, variant: &str) -> Output {
    disem(&[
        "-q",
        "train",
        "--task",
        "tj",
        "--setting",
        "A",
        "--variant",
        variant,
        "--hidden",
        "8",
        "--msg-len",
        "4",
        "--t-n",
        "2",
        "--t-max",
        "4",
        "--episodes-per-epoch",
        "4",
        "--eval-episodes",
        "5",
        "--eval-every",
        "2",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(disem(&["--help"]).status.code(), Some(0));
    assert_eq!(disem(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(disem(&[]).status.code(), Some(1));
    assert_eq!(disem(&["fly"]).status.code(), Some(1));
    assert_eq!(disem(&["train", "--task", "chess"]).status.code(), Some(1));
    assert_eq!(disem(&["lemma-check", "--trials", "0"]).status.code(), Some(1));
    assert_eq!(disem(&["train", "--t-n", "10", "--t-max", "5"]).status.code(), Some(1));
    assert_eq!(disem(&["codec-report", "--trace", "x.jsonl", "--delta", "0.3"]).status.code(), Some(1));
}

#[test]
fn lemma_check_passes() {
    let o = disem(&["lemma-check", "--trials", "200", "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("random: trials 200"));
    assert!(s.trim_end().ends_with("PASS"));
}

#[test]
fn missing_files_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.jsonl");
    let o = disem(&["codec-report", "--trace", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let o = disem(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_eval_and_codec_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = tiny(&out, "disem");
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.csv", "config.toml", "checkpoint_tn.bin", "checkpoint_final.bin", "eval_trace.jsonl"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,variant,task,setting,seed,perf_metric,entropy_bits,mean_return,wall_time_s"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("4,DisEM,traffic_junction,A,0,"));

    let trace = dir.path().join("eval.jsonl");
    let o = disem(&[
        "eval",
        "--config",
        out.join("config.toml").to_str().unwrap(),
        "--checkpoint",
        out.join("checkpoint_final.bin").to_str().unwrap(),
        "--episodes",
        "5",
        "--trace",
        trace.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["episodes"], 5);
    assert!(report["entropy_bits"].as_f64().unwrap() >= 0.0);

    // Same checkpoint, same eval seed: the trace written by train matches.
    assert_eq!(fs::read(&trace).unwrap(), fs::read(out.join("eval_trace.jsonl")).unwrap());

    let csv = dir.path().join("codec.csv");
    let o = disem(&["codec-report", "--trace", trace.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.starts_with("agent,digit,symbols,entropy_bits,mean_code_len,within_bound,lossless"));
    assert!(s.lines().skip(1).all(|l| l.ends_with("true,true")));
    assert!(csv.exists());
}

#[test]
fn same_seed_same_checkpoint_at_t_n() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("ori");
    let b = dir.path().join("disem");
    assert_eq!(tiny(&a, "ori").status.code(), Some(0));
    assert_eq!(tiny(&b, "disem").status.code(), Some(0));
    assert_eq!(
        fs::read(a.join("checkpoint_tn.bin")).unwrap(),
        fs::read(b.join("checkpoint_tn.bin")).unwrap()
    );
}
