use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mars(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mars"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_rank_eval_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(mars(&["synth", "--seed", "5", "--out", "ep"], d)
        .status
        .success());
    let o = mars(
        &[
            "rank",
            "--bundle",
            "ep/bundle",
            "--proposals",
            "ep/proposals.txt",
            "--out",
            "out",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let scores = fs::read_to_string(d.join("out/scores.txt")).unwrap();
    assert!(scores.starts_with("  id       lc"));
    let config = fs::read_to_string(d.join("out/config.txt")).unwrap();
    assert!(config.contains("components=lc,gc,lv,gv"));

    fs::create_dir_all(d.join("pred")).unwrap();
    fs::create_dir_all(d.join("gt")).unwrap();
    fs::copy(d.join("out/prediction.rle"), d.join("pred/e0.rle")).unwrap();
    fs::copy(d.join("ep/gt.rle"), d.join("gt/e0.rle")).unwrap();
    fs::write(d.join("folds.txt"), "e0 cat 0\n").unwrap();
    let o = mars(
        &[
            "eval",
            "--pred-dir",
            "pred",
            "--gt-dir",
            "gt",
            "--folds",
            "folds.txt",
            "--summary",
            "s.txt",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).ends_with("miou 1.000000\n"));
    assert!(fs::read_to_string(d.join("s.txt"))
        .unwrap()
        .starts_with("miou=1\n"));
}

#[test]
fn component_subset_changes_fused_column() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(mars(&["synth", "--seed", "8", "--out", "ep"], d)
        .status
        .success());
    let o = mars(
        &[
            "rank",
            "--bundle",
            "ep/bundle",
            "--proposals",
            "ep/proposals.txt",
            "--out",
            "out",
            "--components",
            "lv,gv",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let scores = fs::read_to_string(d.join("out/scores.txt")).unwrap();
    for line in scores.lines().skip(1) {
        let v: Vec<f64> = line
            .split_whitespace()
            .skip(1)
            .take(5)
            .map(|x| x.parse().unwrap())
            .collect();
        assert!((v[4] - (v[2] + v[3]) / 2.0).abs() < 2e-6, "{line}");
    }
}

#[test]
fn missing_bundle_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mars(
        &[
            "rank",
            "--bundle",
            "nope",
            "--proposals",
            "p.txt",
            "--out",
            "o",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("IoFailure"), "{}", stderr(&o));
}

#[test]
fn mismatched_shapes_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::create_dir_all(d.join("pred")).unwrap();
    fs::create_dir_all(d.join("gt")).unwrap();
    fs::write(d.join("pred/a.rle"), "2 2\n4\n").unwrap();
    fs::write(d.join("gt/a.rle"), "2 3\n6\n").unwrap();
    fs::write(d.join("folds.txt"), "a c 0\n").unwrap();
    let o = mars(
        &[
            "eval",
            "--pred-dir",
            "pred",
            "--gt-dir",
            "gt",
            "--folds",
            "folds.txt",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ShapeMismatch"));

    fs::write(d.join("gt/a.rle"), "2 2\n5\n").unwrap();
    let o = mars(
        &[
            "eval",
            "--pred-dir",
            "pred",
            "--gt-dir",
            "gt",
            "--folds",
            "folds.txt",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("RleOverrun"));
}

#[test]
fn synth_is_deterministic_and_honours_shots() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        assert!(
            mars(&["synth", "--seed", "3", "--shots", "5", "--out", out], d)
                .status
                .success()
        );
    }
    let manifest = fs::read_to_string(d.join("a/bundle/manifest.txt")).unwrap();
    assert_eq!(manifest.matches("support_patch_features.").count(), 5);
    for f in [
        "bundle/manifest.txt",
        "bundle/clip_attention.mten",
        "proposals.txt",
        "gt.rle",
    ] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap()
        );
    }
}

#[test]
fn invalid_flag_value_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mars(&["config", "--alpha", "1.5"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("InvalidConfig"));
}

#[test]
fn ablate_prints_nine_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(mars(
        &["synth", "--seed", "0", "--count", "3", "--out", "corpus"],
        d
    )
    .status
    .success());
    let o = mars(&["ablate", "--corpus", "corpus"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().last().unwrap().starts_with("mars"));
}
