use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--toy",
    "--set", "corpus.num_languages=3",
    "--set", "corpus.sentences_per_pair=40",
    "--set", "corpus.valid_per_pair=5",
    "--set", "corpus.test_per_pair=12",
    "--set", "model.d_model=16",
    "--set", "model.d_ffn=32",
    "--set", "model.d_e=8",
    "--set", "model.d_h=8",
    "--set", "train.max_steps=30",
    "--set", "train.log_every=10",
    "--set", "train.checkpoint_every=15",
    "--set", "train.batch_tokens=200",
];

fn ztrans<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ztrans")).args(args).output().unwrap()
}

fn with_small(head: &[&str], tail: &[&str]) -> Vec<String> {
    head.iter().chain(SMALL).chain(tail).map(|s| s.to_string()).collect()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates data and trains a tiny model; returns (data dir, checkpoint).
fn trained(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let run = dir.join("run");
    ok(ztrans(&with_small(&["gen-data"], &["--out", s(&data)])));
    ok(ztrans(&with_small(&["train"], &["--data", s(&data), "--out", s(&run), "--variant", "both"])));
    (data, run.join("best.ztrx"))
}

#[test]
fn gen_data_is_deterministic_and_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = ok(ztrans(&with_small(&["gen-data"], &["--out", s(&a)])));
    assert!(String::from_utf8_lossy(&out.stdout).contains("train"));
    ok(ztrans(&with_small(&["gen-data"], &["--out", s(&b)])));
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 5);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }

    let again = ztrans(&with_small(&["gen-data"], &["--out", s(&a)]));
    assert_eq!(again.status.code(), Some(3));
    ok(ztrans(&with_small(&["gen-data"], &["--out", s(&a), "--force"])));
}

#[test]
fn bad_configuration_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = ztrans(&["gen-data", "--toy", "--set", "corpus.no_such_key=1", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = ztrans(&["gen-data", "--set", "corpus.num_languages=1", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = ztrans(&["train", "--data", s(dir.path()), "--out", s(dir.path()), "--variant", "fancy"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_writes_metrics_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let run = ckpt.parent().unwrap();
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(meta["variant"], "both");

    // resuming a finished run changes nothing
    ok(ztrans(&with_small(
        &["train"],
        &["--data", s(&data), "--out", s(run), "--variant", "both", "--resume"],
    )));
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap(), metrics);
}

#[test]
fn translate_handles_blank_lines_tags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let input = dir.path().join("in.txt");
    let source = fs::read_to_string(data.join("test_supervised.tsv")).unwrap();
    let first = source.lines().next().unwrap().split('\t').next().unwrap().to_string();
    fs::write(&input, format!("{first}\n\n{first}\n")).unwrap();

    let translate = |out: &Path, extra: &[&str]| {
        let mut args = vec!["translate", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(out)];
        args.extend_from_slice(extra);
        ztrans(&args)
    };
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(translate(&a, &["--tag", "l1"]));
    ok(translate(&b, &["--tag", "l1", "--beam", "4"]));
    ok(translate(&c, &["--tag", "l1"]));
    let text = fs::read_to_string(&a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].is_empty());
    assert_eq!(lines[0], lines[2]);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_eq!(text, fs::read_to_string(&c).unwrap());

    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = dir.path().join("empty.out");
    ok(ztrans(&["translate", "--checkpoint", s(&ckpt), "--input", s(&empty), "--output", s(&out), "--tag", "en"]));
    assert_eq!(fs::read_to_string(&out).unwrap(), "");

    assert_eq!(translate(&a, &["--tag", "l9"]).status.code(), Some(3));
    assert_eq!(translate(&a, &["--tag", "9999"]).status.code(), Some(3));
}

#[test]
fn analyze_modes_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let csv = dir.path().join("case.csv");
    ok(ztrans(&[
        "analyze", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&csv), "--case", "i", "--layers", "all",
    ]));
    // header plus one row per encoder layer of the toy model
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 3);

    let json = dir.path().join("offtarget.json");
    ok(ztrans(&[
        "analyze", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&json), "--offtarget", "--format", "json",
    ]));
    serde_json::from_str::<serde_json::Value>(&fs::read_to_string(&json).unwrap()).unwrap();

    let missing = ztrans(&[
        "analyze",
        "--checkpoint",
        s(&dir.path().join("nope.ztrx")),
        "--data",
        s(&data),
        "--out",
        s(&csv),
        "--case",
        "ii",
    ]);
    assert_eq!(missing.status.code(), Some(4));
}

#[test]
fn significance_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    fs::write(&a, "0.5\n0.7\n0.9\n0.4\n0.8\n").unwrap();
    fs::write(&b, "0.4\n0.7\n0.6\n0.5\n0.6\n").unwrap();
    let run = |out: &Path| {
        ok(ztrans(&["analyze", "--significance", "--scores-a", s(&a), "--scores-b", s(&b), "--out", s(out)]))
    };
    let (x, y) = (dir.path().join("x.csv"), dir.path().join("y.csv"));
    run(&x);
    run(&y);
    assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap());

    let same = dir.path().join("same.csv");
    let out = ok(ztrans(&["analyze", "--significance", "--scores-a", s(&a), "--scores-b", s(&a), "--out", s(&same)]));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("p = 1 "));
}
