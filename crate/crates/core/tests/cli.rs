//! End-to-end CLI tests over a small corpus: every subcommand, the exit-code
//! contract, stream-verification bookkeeping, and file determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_notemb")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

struct Env {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    root: PathBuf,
}

impl Env {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }
}

fn setup() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let env = Env { dir, root };
    std::fs::write(
        env.path("cfg.json"),
        r#"{"n_notes": 120, "m_range": [2, 5], "d_lat": 12, "d_raw": 32, "n_topics": 6, "noise_sigma": 0.1, "seed": 99}"#,
    )
    .unwrap();
    ok(&["gen-corpus", "--config", &env.s("cfg.json"), "--out", &env.s("corp")]);
    env
}

#[test]
fn full_pipeline_through_cli() {
    let e = setup();
    // Pairs for all stage-1 tasks plus stage-2 samples.
    ok(&[
        "build-pairs",
        "--corpus",
        &e.s("corp"),
        "--task",
        "all",
        "--out",
        &e.s("pairs.jsonl"),
        "--max-per-task",
        "60",
        "--seed",
        "3",
    ]);
    ok(&[
        "build-pairs",
        "--corpus",
        &e.s("corp"),
        "--task",
        "note2note",
        "--out",
        &e.s("stage2.jsonl"),
        "--seed",
        "3",
    ]);
    assert!(e.path("stage2.jsonl").exists());

    // Stage 1 with periodic checkpoints.
    ok(&[
        "train-sft",
        "--corpus",
        &e.s("corp"),
        "--pairs",
        &e.s("pairs.jsonl"),
        "--out",
        &e.s("sft.bin"),
        "--steps",
        "40",
        "--batch",
        "16",
        "--d-hid",
        "32",
        "--dims",
        "8,16,32",
        "--ckpt-every",
        "20",
    ]);
    assert!(e.path("sft.bin").exists());
    assert!(e.path("sft.curve.csv").exists());
    assert!(e.path("sft.step20.bin").exists());
    assert!(e.path("sft.step20.opt").exists());
    let curve = std::fs::read_to_string(e.path("sft.curve.csv")).unwrap();
    assert!(curve.starts_with("step,total_loss,js_8,js_16,js_32"));
    assert_eq!(curve.lines().count(), 41);

    // Stage 2 from the stage-1 checkpoint, consuming the samples file.
    ok(&[
        "train-rl",
        "--corpus",
        &e.s("corp"),
        "--ckpt",
        &e.s("sft.bin"),
        "--out",
        &e.s("rl.bin"),
        "--samples",
        &e.s("stage2.jsonl"),
        "--lr",
        "1e-4",
    ]);
    assert!(e.path("rl.bin").exists());
    assert!(e.path("rl.curve.csv").exists());

    // Evaluation over the ten-task suite at two dims.
    ok(&[
        "eval",
        "--corpus",
        &e.s("corp"),
        "--ckpt",
        &e.s("sft.bin"),
        "--task",
        "all",
        "--dims",
        "8,32",
        "--report",
        &e.s("report.csv"),
    ]);
    let report = std::fs::read_to_string(e.path("report.csv")).unwrap();
    assert!(report.starts_with("task,metric,k,dim,value,n_queries,n_targets"));
    // Ten tasks at two dims; note2note contributes rstar and p rows.
    for task in [
        "i2t", "t2i", "i2note", "t2note", "note2i", "note2t", "ocr2note", "i2ocr", "ocr2i",
    ] {
        assert!(report.contains(&format!("\n{task},r,1,8,")), "{task} row missing");
    }
    assert!(report.contains("\nnote2note,rstar,5,32,"));
    assert!(report.contains("\nnote2note,p,5,32,"));

    // Gradient check passes on the trained checkpoint.
    let out = ok(&["grad-check", "--ckpt", &e.s("sft.bin"), "--coords", "24"]);
    assert!(out.contains("pass"));

    // Index, backcheck, gallery, verify.
    ok(&[
        "index-build",
        "--corpus",
        &e.s("corp"),
        "--ckpt",
        &e.s("sft.bin"),
        "--out",
        &e.s("items.idx"),
        "--granularity",
        "items",
        "--k-coarse",
        "8",
    ]);
    // Queries and traffic reuse the corpus file.
    let corpus_file = e.path("corp").join("corpus.jsonl");
    ok(&[
        "backcheck",
        "--index",
        &e.s("items.idx"),
        "--ckpt",
        &e.s("sft.bin"),
        "--queries",
        corpus_file.to_str().unwrap(),
        "--k",
        "10",
        "--report",
        &e.s("backcheck.jsonl"),
    ]);
    let bc = std::fs::read_to_string(e.path("backcheck.jsonl")).unwrap();
    let last = bc.lines().last().unwrap();
    assert!(last.contains("distinct_ids"));

    ok(&[
        "build-gallery",
        "--corpus",
        &e.s("corp"),
        "--ckpt",
        &e.s("sft.bin"),
        "--out",
        &e.s("gallery.jsonl"),
        "--per-category",
        "10",
        "--traffic",
        corpus_file.to_str().unwrap(),
        "--target-matches",
        "25",
    ]);
    let gal = std::fs::read_to_string(e.path("gallery.jsonl")).unwrap();
    assert!(gal.lines().count() >= 20);

    // A verify stream with one malformed line.
    let mut stream = String::new();
    for (i, line) in std::fs::read_to_string(&corpus_file)
        .unwrap()
        .lines()
        .skip(1)
        .take(8)
        .enumerate()
    {
        if i == 3 {
            stream.push_str("{\"id\": 77}\n");
        }
        // Re-key note ids so they do not collide with indexed ids.
        let bumped = line.replacen("{\"id\":", "{\"id\":9", 1);
        stream.push_str(&bumped);
        stream.push('\n');
    }
    std::fs::write(e.path("stream.jsonl"), &stream).unwrap();
    let out = ok(&[
        "verify",
        "--stream",
        &e.s("stream.jsonl"),
        "--gallery",
        &e.s("gallery.jsonl"),
        "--index",
        &e.s("items.idx"),
        "--ckpt",
        &e.s("sft.bin"),
        "--out",
        &e.s("verify.jsonl"),
        "--index-out",
        &e.s("grown.idx"),
    ]);
    assert!(out.contains("1 skipped"), "stdout: {out}");
    assert!(out.contains("8 encodes"), "stdout: {out}");
    let log = std::fs::read_to_string(e.path("verify.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("skipped")).count(), 1);
    assert_eq!(log.lines().count(), 9);

    // Replaying the same stream from the same starting index reproduces the
    // result log byte for byte.
    ok(&[
        "verify",
        "--stream",
        &e.s("stream.jsonl"),
        "--gallery",
        &e.s("gallery.jsonl"),
        "--index",
        &e.s("items.idx"),
        "--ckpt",
        &e.s("sft.bin"),
        "--out",
        &e.s("verify2.jsonl"),
        "--index-out",
        &e.s("grown2.idx"),
    ]);
    assert_eq!(
        std::fs::read(e.path("verify.jsonl")).unwrap(),
        std::fs::read(e.path("verify2.jsonl")).unwrap()
    );
    assert_eq!(
        std::fs::read(e.path("grown.idx")).unwrap(),
        std::fs::read(e.path("grown2.idx")).unwrap()
    );
}

#[test]
fn gen_corpus_is_reproducible_via_cli() {
    let e = setup();
    ok(&["gen-corpus", "--config", &e.s("cfg.json"), "--out", &e.s("corp2")]);
    for f in ["corpus.jsonl", "ledger.jsonl", "config.json"] {
        assert_eq!(
            std::fs::read(e.path("corp").join(f)).unwrap(),
            std::fs::read(e.path("corp2").join(f)).unwrap(),
            "{f} differs between runs"
        );
    }
}

#[test]
fn exit_codes_follow_error_kinds() {
    let e = setup();
    // Unknown task: validation error, exit 1.
    let out = run(&[
        "build-pairs",
        "--corpus",
        &e.s("corp"),
        "--task",
        "i2i",
        "--out",
        &e.s("x.jsonl"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    // Missing corpus directory: exit 1.
    let out = run(&[
        "eval",
        "--corpus",
        &e.s("missing"),
        "--ckpt",
        &e.s("nope.bin"),
        "--task",
        "i2t",
        "--report",
        &e.s("r.csv"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    // Invalid mining band: exit 1.
    let out = run(&[
        "build-pairs",
        "--corpus",
        &e.s("corp"),
        "--task",
        "i2t",
        "--out",
        &e.s("x.jsonl"),
        "--tau-min",
        "0.9",
        "--tau-max",
        "0.7",
    ]);
    assert_eq!(out.status.code(), Some(1));
    // Gradient check at an impossible tolerance: numerical failure, exit 2.
    ok(&[
        "build-pairs",
        "--corpus",
        &e.s("corp"),
        "--task",
        "i2t",
        "--out",
        &e.s("p.jsonl"),
        "--max-per-task",
        "30",
    ]);
    ok(&[
        "train-sft",
        "--corpus",
        &e.s("corp"),
        "--pairs",
        &e.s("p.jsonl"),
        "--out",
        &e.s("t.bin"),
        "--steps",
        "5",
        "--batch",
        "8",
        "--d-hid",
        "16",
        "--dims",
        "4,8",
    ]);
    let out = run(&["grad-check", "--ckpt", &e.s("t.bin"), "--tol", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn checkpoint_reference_mining_works() {
    let e = setup();
    ok(&[
        "build-pairs",
        "--corpus",
        &e.s("corp"),
        "--task",
        "i2t",
        "--out",
        &e.s("p.jsonl"),
        "--max-per-task",
        "40",
    ]);
    ok(&[
        "train-sft",
        "--corpus",
        &e.s("corp"),
        "--pairs",
        &e.s("p.jsonl"),
        "--out",
        &e.s("ref.bin"),
        "--steps",
        "20",
        "--batch",
        "8",
        "--d-hid",
        "16",
        "--dims",
        "8,16",
    ]);
    // Mine a second round with the frozen checkpoint as reference encoder.
    ok(&[
        "build-pairs",
        "--corpus",
        &e.s("corp"),
        "--task",
        "i2t",
        "--out",
        &e.s("p2.jsonl"),
        "--max-per-task",
        "20",
        "--reference",
        &format!("ckpt:{}", e.s("ref.bin")),
    ]);
    assert!(e.path("p2.jsonl").exists());
    // Raw-feature reference also runs.
    ok(&[
        "build-pairs",
        "--corpus",
        &e.s("corp"),
        "--task",
        "i2t",
        "--out",
        &e.s("p3.jsonl"),
        "--max-per-task",
        "20",
        "--reference",
        "raw",
    ]);
    let out = run(&[
        "build-pairs",
        "--corpus",
        &e.s("corp"),
        "--task",
        "i2t",
        "--out",
        &e.s("p4.jsonl"),
        "--reference",
        "bogus",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
