//! End-to-end runs of the `madation` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use madation::metrics::ScoreSet;

fn madation(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_madation"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = madation(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the single stderr line.
fn fails(args: &[&str]) -> (i32, String) {
    let out = madation(args);
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    (out.status.code().unwrap(), err)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// gen-data, MADATION training, eval and report under `root`.
fn pipeline(root: &Path) {
    let data = root.join("data");
    ok(&["gen-data", "--out", s(&data), "--n-identities", "8", "--images-per-identity", "4", "--seed", "11"]);
    let run = root.join("run");
    ok(&[
        "train", "--data", s(&data.join("train/manifest.csv")), "--out", s(&run),
        "--epochs", "2", "--batch-size", "8", "--seed", "4", "--deterministic",
    ]);
    let eval = root.join("eval");
    ok(&[
        "eval", "--checkpoint", s(&run.join("last.ckpt")), "--manifest", s(&data.join("test/manifest.csv")),
        "--out", s(&eval),
    ]);
    ok(&["report", "--scores", s(&eval.join("scores_synthetic.csv")), "--out", s(&root.join("report"))]);
}

#[test]
fn smoke_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    for f in [
        "data/config.txt", "data/train/manifest.csv", "data/test/identities.txt",
        "run/config.txt", "run/train_log.csv", "run/last.ckpt", "run/best.ckpt",
        "eval/config.txt", "eval/scores_synthetic.csv", "eval/report.csv", "eval/report.json",
        "report/report.csv", "report/report.json", "report/det_synthetic.csv", "report/det_synthetic.svg",
    ] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(dir.path().join("run/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "data/train/manifest.csv", "run/train_log.csv", "run/last.ckpt", "eval/scores_synthetic.csv",
        "report/report.csv", "report/report.json", "report/det_synthetic.csv", "report/det_synthetic.svg",
    ] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn merged_checkpoint_scores_match_adapted_scores() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    pipeline(root);
    let ckpt = root.join("run/last.ckpt");
    let before = fs::read(&ckpt).unwrap();
    let merged = root.join("merged.ckpt");
    ok(&["merge", "--checkpoint", s(&ckpt), "--out", s(&merged)]);
    let eval2 = root.join("eval_merged");
    ok(&[
        "eval", "--checkpoint", s(&merged), "--manifest", s(&root.join("data/test/manifest.csv")),
        "--out", s(&eval2),
    ]);
    assert_eq!(fs::read(&ckpt).unwrap(), before);

    let a = ScoreSet::read_csv(&root.join("eval/scores_synthetic.csv")).unwrap();
    let b = ScoreSet::read_csv(&eval2.join("scores_synthetic.csv")).unwrap();
    assert_eq!(a.labels(), b.labels());
    let worst = a.scores().iter().zip(b.scores()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst <= 1e-9, "{worst}");

    let (code, err) = fails(&["merge", "--checkpoint", s(&merged), "--out", s(&root.join("again.ckpt"))]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error category=usage kind=state "), "{err}");
}

#[test]
fn report_of_perfect_separation_prints_zero_eer() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores_sep.csv");
    fs::write(&scores, "score,label\n0.1,bonafide\n0.2,bonafide\n0.8,attack\n0.9,attack\n").unwrap();
    let out = ok(&["report", "--scores", s(&scores), "--out", s(&dir.path().join("r"))]);
    let row = out.lines().find(|l| l.starts_with("sep")).unwrap();
    assert_eq!(row.split_whitespace().nth(1), Some("0.00"), "{out}");
}

#[test]
fn zero_shot_with_toy_text_and_class_means() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["gen-data", "--out", s(&data), "--n-identities", "4", "--images-per-identity", "2"]);
    let test = data.join("test/manifest.csv");
    ok(&["ti", "--toy-text", "--manifest", s(&test), "--out", s(&root.join("toy"))]);
    ok(&[
        "ti", "--class-means", s(&data.join("train/manifest.csv")), "--manifest", s(&test),
        "--out", s(&root.join("means")),
    ]);
    let labels = root.join("means/labels.tsv");
    ok(&["ti", "--labels", s(&labels), "--manifest", s(&test), "--out", s(&root.join("file"))]);
    // reloading renormalizes the stored unit vectors, so only rounding differs
    let a = ScoreSet::read_csv(&root.join("means/scores_synthetic.csv")).unwrap();
    let b = ScoreSet::read_csv(&root.join("file/scores_synthetic.csv")).unwrap();
    for (x, y) in a.scores().iter().zip(b.scores()) {
        assert!((x - y).abs() < 1e-12, "{x} vs {y}");
    }
    let (code, _) = fails(&["ti", "--manifest", s(&test), "--out", s(&root.join("none"))]);
    assert_eq!(code, 2);
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let (code, err) = fails(&["train", "--data", s(&root.join("missing.csv")), "--out", s(root)]);
    assert_eq!(code, 3);
    assert!(err.starts_with("error category=data kind=io "), "{err}");

    let (code, err) = fails(&["train", "--no-such-flag", "1"]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error category=usage kind=cli "), "{err}");

    let config = root.join("bad.txt");
    fs::write(&config, "learning_rate = 1\n").unwrap();
    let (code, err) = fails(&["train", "--config", s(&config)]);
    assert_eq!(code, 2);
    assert!(err.contains("kind=config"), "{err}");

    let manifest = root.join("m.csv");
    fs::write(&manifest, "path,label,subset\nx.png,maybe,s\n").unwrap();
    let (code, err) = fails(&["eval", "--checkpoint", "x", "--manifest", s(&manifest), "--out", s(root)]);
    assert_eq!(code, 3, "{err}");

    let data = root.join("data");
    ok(&["gen-data", "--out", s(&data), "--n-identities", "4", "--images-per-identity", "2"]);
    let (code, err) = fails(&[
        "train", "--data", s(&data.join("train/manifest.csv")), "--out", s(&root.join("run")),
        "--regime", "FE", "--head-lr", "1e300", "--epochs", "3", "--batch-size", "2",
    ]);
    assert_eq!(code, 4, "{err}");
    assert!(err.starts_with("error category=numeric kind=numeric "), "{err}");

    let (code, _) = fails(&[
        "train", "--data", s(&data.join("train/manifest.csv")), "--out", s(&root.join("ti")), "--regime", "TI",
    ]);
    assert_eq!(code, 2);
}

#[test]
fn thread_cap_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    ok(&["gen-data", "--out", s(&data), "--n-identities", "4", "--images-per-identity", "3"]);
    let train = data.join("train/manifest.csv");
    for (threads, out) in [("1", "a"), ("2", "b")] {
        ok(&[
            "train", "--data", s(&train), "--out", s(&root.join(out)), "--epochs", "1",
            "--threads", threads,
        ]);
    }
    assert_eq!(fs::read(root.join("a/last.ckpt")).unwrap(), fs::read(root.join("b/last.ckpt")).unwrap());
}
