use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gradmask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gradmask"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_MODEL: &str = r#"{
  "model": {
    "encoder": {"depth": 2, "width": 16, "heads": 2, "mlp_ratio": 2},
    "decoder": {"mlp_ratio": 2}
  },
  "gass": {"layers": 2},
  "batch_size": 8,
  "epochs": 2,
  "warmup_epochs": 1,
  "lr": 0.001
}"#;

fn small_corpus(dir: &Path) -> PathBuf {
    let corpus = dir.join("corpus");
    let out = gradmask(&["gen-corpus", "--out", s(&corpus), "--train", "16", "--test", "8", "--seed", "4"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    corpus
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&gradmask(&[])), 2);
    assert_eq!(code(&gradmask(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&gradmask(&["frobnicate"])), 2);
    assert_eq!(code(&gradmask(&["--help"])), 0);
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gradmask(&[
        "filter",
        "--records",
        s(&dir.path().join("absent.jsonl")),
        "--accepted",
        s(&dir.path().join("a.jsonl")),
        "--audit",
        s(&dir.path().join("b.jsonl")),
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn filter_writes_manifest_and_golden_audit() {
    let dir = tempfile::tempdir().unwrap();
    let accepted = dir.path().join("accepted.jsonl");
    let audit = dir.path().join("audit.jsonl");
    let out = gradmask(&[
        "filter",
        "--records",
        s(&fixture("crops.jsonl")),
        "--accepted",
        s(&accepted),
        "--audit",
        s(&audit),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read(&audit).unwrap(),
        fs::read(fixture("crops_audit.golden.jsonl")).unwrap()
    );
    assert_eq!(fs::read_to_string(&accepted).unwrap().lines().count(), 8);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["accepted"], 8);

    let out = gradmask(&[
        "filter",
        "--records",
        s(&fixture("crops.jsonl")),
        "--accepted",
        s(&accepted),
        "--audit",
        s(&audit),
        "--min-confidence",
        "0.01",
        "--min-short-side",
        "1",
    ]);
    assert_eq!(code(&out), 0);
    assert!(fs::read_to_string(&accepted).unwrap().lines().count() > 8);

    let out = gradmask(&[
        "filter",
        "--records",
        s(&fixture("crops.jsonl")),
        "--accepted",
        s(&accepted),
        "--audit",
        s(&audit),
        "--min-confidence",
        "0",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn curate_templates_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let bank = dir.path().join(name);
        let out = gradmask(&[
            "curate-templates",
            "--templates",
            s(&fixture("templates.jsonl")),
            "--out",
            s(&bank),
            "--k",
            "5",
            "--seed",
            "11",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        fs::read(bank).unwrap()
    };
    assert_eq!(run("a.json"), run("b.json"));
    assert_eq!(code(&gradmask(&["curate-templates", "--templates", "x", "--out", "y"])), 2);
}

#[test]
fn train_evaluate_dump_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg = dir.path().join("small.json");
    fs::write(&cfg, SMALL_MODEL).unwrap();
    let run = dir.path().join("run");
    let out = gradmask(&[
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&run),
        "--config",
        s(&cfg),
        "--alpha-n",
        "0",
        "--alpha-i",
        "0",
        "--beta",
        "0",
        "--mask-audit",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let written: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["beta"], 0.0);
    assert_eq!(written["mask"]["alpha_n"], 0.0);
    assert_eq!(written["model"]["encoder"]["width"], 16);
    let audit = fs::read_to_string(run.join("mask_audit.jsonl")).unwrap();
    assert_eq!(audit.lines().count(), 2 * 16);
    for line in audit.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["plan"]["noise_positions"].as_array().unwrap().len(), 0);
        assert_eq!(rec["plan"]["informative_positions"].as_array().unwrap().len(), 0);
    }

    let ckpt = run.join("checkpoints/epoch-0002");
    let metrics_out = dir.path().join("metrics.json");
    let out = gradmask(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&corpus),
        "--out",
        s(&metrics_out),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(&metrics_out).unwrap()).unwrap();
    assert_eq!(metrics["query_count"], 8);
    assert!(metrics["rank10"].as_f64().unwrap() >= metrics["rank1"].as_f64().unwrap());

    let scores = dir.path().join("scores.jsonl");
    let out = gradmask(&[
        "dump-scores",
        "--checkpoint",
        s(&ckpt),
        "--corpus",
        s(&corpus),
        "--out",
        s(&scores),
        "--limit",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&scores).unwrap();
    assert_eq!(text.lines().count(), 5);
    for line in text.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let tokens = rec["tokens"].as_array().unwrap();
        let s = rec["scores"].as_array().unwrap();
        assert_eq!(tokens.len(), s.len());
        assert!(s.iter().all(|x| (0.0..=1.0).contains(&x.as_f64().unwrap())));
    }

    let out = gradmask(&["report", "--metrics", s(&run.join("metrics.jsonl"))]);
    assert_eq!(code(&out), 0);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["steps"], 4);
    assert_eq!(summary["epochs"].as_array().unwrap().len(), 2);
}

#[test]
fn resumed_run_writes_the_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg = dir.path().join("small.json");
    fs::write(&cfg, SMALL_MODEL).unwrap();
    let train = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--corpus", s(&corpus), "--out", s(out), "--config", s(&cfg), "--seed", "2"];
        args.extend_from_slice(extra);
        let o = gradmask(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    let full = dir.path().join("full");
    train(&full, &[]);
    let part = dir.path().join("part");
    train(&part, &["--stop-after-epoch", "1"]);
    assert!(!part.join("checkpoints/epoch-0002").exists());
    train(&part, &["--resume"]);
    assert_eq!(
        fs::read(full.join("metrics.jsonl")).unwrap(),
        fs::read(part.join("metrics.jsonl")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("checkpoints/epoch-0002/params.bin")).unwrap(),
        fs::read(part.join("checkpoints/epoch-0002/params.bin")).unwrap()
    );
}

#[test]
fn invalid_values_and_corrupt_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let run = dir.path().join("run");
    let out = gradmask(&["train", "--corpus", s(&corpus), "--out", s(&run), "--lr", "-1"]);
    assert_eq!(code(&out), 2);

    let cfg = dir.path().join("small.json");
    fs::write(&cfg, SMALL_MODEL).unwrap();
    let out = gradmask(&[
        "train", "--corpus", s(&corpus), "--out", s(&run), "--config", s(&cfg), "--epochs", "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = run.join("checkpoints/epoch-0001");
    let blob = ckpt.join("params.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[100] ^= 0x40;
    fs::write(&blob, bytes).unwrap();
    let out = gradmask(&["evaluate", "--checkpoint", s(&ckpt), "--corpus", s(&corpus)]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));
}
