use std::path::Path;
use std::process::{Command, Output};

fn flowlens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowlens"))
        .args(args)
        .output()
        .expect("spawn flowlens")
}

fn ok(args: &[&str]) -> Output {
    let out = flowlens(args);
    assert!(
        out.status.success(),
        "flowlens {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path) {
    ok(&["generate", "--n", "24", "--contamination", "0.5", "--seed", "4", "--size", "16", "--out", s(dir)]);
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data);
    assert!(data.join("manifest.json").is_file());
    assert!(data.join("annotations.csv").is_file());

    let model = tmp.path().join("clean.aflw");
    let loss = tmp.path().join("loss.csv");
    ok(&[
        "train", "--data", s(&data), "--out", s(&model), "--epochs", "5", "--hidden", "16", "--loss-out", s(&loss),
    ]);
    assert!(model.is_file());
    let loss_rows = std::fs::read_to_string(&loss).unwrap().lines().count();
    assert_eq!(loss_rows, 6, "header plus one row per epoch");

    let maps = tmp.path().join("maps");
    ok(&["reconstruct", "--model", s(&model), "--data", s(&data), "--out", s(&maps)]);
    assert!(maps.join("index.csv").is_file());

    let seg = tmp.path().join("seg.csv");
    ok(&["evaluate-seg", "--maps", s(&maps), "--gt", s(&data), "--threshold", "auto", "--out", s(&seg)]);
    assert!(std::fs::read_to_string(&seg).unwrap().starts_with("subject_id,"));
    assert!(tmp.path().join("seg_summary.csv").is_file());

    let froc = tmp.path().join("froc.csv");
    ok(&[
        "evaluate-froc",
        "--maps",
        s(&maps),
        "--annotations",
        s(&data.join("annotations.csv")),
        "--thresholds",
        "auto,0.2",
        "--out",
        s(&froc),
    ]);
    let froc_text = std::fs::read_to_string(&froc).unwrap();
    assert_eq!(froc_text.lines().count(), 1 + 2 * 3, "two thresholds times three filters");

    let merged = tmp.path().join("merged.csv");
    ok(&[
        "merge-annotations",
        "--a",
        s(&data.join("annotations_rater_a.csv")),
        "--b",
        s(&data.join("annotations_rater_b.csv")),
        "--out",
        s(&merged),
    ]);
    assert!(std::fs::read_to_string(&merged).unwrap().starts_with("subject_id,x,y,label,rater"));

    // Comparing a run with itself gives all-zero differences and p = 1.
    let cmp = tmp.path().join("cmp.csv");
    ok(&["report", "--a", s(&seg), "--b", s(&seg), "--out", s(&cmp)]);
    let first = std::fs::read_to_string(&cmp).unwrap();
    ok(&["report", "--a", s(&seg), "--b", s(&seg), "--test", "asd", "--out", s(&cmp)]);
    let second = std::fs::read_to_string(&cmp).unwrap();
    assert!(second.starts_with(&first));
    assert!(second.len() > first.len());
    assert_eq!(second.matches("a,b,group").count(), 1, "header written once");
}

#[test]
fn evaluate_froc_requires_annotations() {
    let tmp = tempfile::tempdir().unwrap();
    let out = flowlens(&["evaluate-froc", "--maps", s(tmp.path()), "--out", s(&tmp.path().join("f.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(flowlens(&["--help"]).status.code(), Some(0));
    assert_eq!(flowlens(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(flowlens(&["generate", "--n", "many", "--out", "x"]).status.code(), Some(1));

    let missing = tmp.path().join("missing");
    let out = flowlens(&["train", "--data", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));

    let data = tmp.path().join("data");
    generate(&data);
    let bogus = tmp.path().join("bogus.aflw");
    std::fs::write(&bogus, b"not a model").unwrap();
    let out = flowlens(&["reconstruct", "--model", s(&bogus), "--data", s(&data), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus.aflw"));

    let out = flowlens(&[
        "train", "--data", s(&data), "--out", s(&tmp.path().join("x.aflw")), "--epochs", "20", "--lr", "1e6", "--hidden", "8",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
