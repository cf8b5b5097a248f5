use std::path::Path;
use std::process::{Command, Output};

fn awan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_awan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = awan(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn value(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .unwrap_or_else(|| panic!("no `{key}` in {report}"))
        .parse()
        .unwrap()
}

#[test]
fn eval_of_identical_cubes_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--count", "1", "--height", "6", "--width", "5"]);
    let gt = data.join("0000_hsi.cube");
    let report = ok(&["eval", "--gt", p(&gt), "--pred", p(&gt)]);
    assert_eq!(value(&report, "mrae="), 0.0);
    assert_eq!(value(&report, "rmse="), 0.0);
}

#[test]
fn synth_train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let preds = dir.path().join("preds");
    ok(&["synth", "--out", p(&data), "--count", "2", "--height", "8", "--width", "8", "--seed", "3"]);
    let log = ok(&[
        "train", "--data", p(&data), "--out", p(&run), "--blocks", "1", "--channels", "8",
        "--t", "4", "--r", "2", "--iters", "3", "--batch", "2", "--patch", "8", "--lr", "1e-3",
        "--ckpt-every", "2",
    ]);
    assert_eq!(log.lines().filter(|l| l.starts_with("iter=")).count(), 3);
    assert!(run.join("final.ckpt").exists());
    assert!(run.join("train.log").exists());
    assert!(std::fs::read_dir(&run)
        .unwrap()
        .any(|e| e.unwrap().file_name().to_string_lossy().starts_with("ckpt_")));

    let ckpt = run.join("final.ckpt");
    ok(&["infer", "--ckpt", p(&ckpt), "--input", p(&data), "--out", p(&preds), "--self-ensemble"]);
    let report = ok(&["eval", "--gt", p(&data), "--pred", p(&preds)]);
    for key in ["mean_mrae=", "mean_rmse=", "pooled_mrae=", "pooled_rmse="] {
        assert!(value(&report, key).is_finite(), "{report}");
    }
    assert_eq!(report.lines().filter(|l| l.starts_with("image=")).count(), 2);

    let resumed = ok(&[
        "train", "--data", p(&data), "--out", p(&run), "--resume", p(&ckpt), "--blocks", "1",
        "--channels", "8", "--t", "4", "--r", "2", "--iters", "5", "--batch", "2", "--patch", "8",
    ]);
    let iters: Vec<_> = resumed.lines().filter(|l| l.starts_with("iter=")).collect();
    assert_eq!(iters.len(), 2);
    assert!(iters[0].starts_with("iter=3 "), "{resumed}");
}

#[test]
fn project_reproduces_paired_rgb() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--count", "1", "--height", "5", "--width", "7"]);
    let rgb = dir.path().join("rgb.cube");
    let ppm = dir.path().join("rgb.ppm");
    ok(&["project", "--input", p(&data.join("0000_hsi.cube")), "--out", p(&rgb), "--ppm", p(&ppm)]);
    assert_eq!(std::fs::read(&rgb).unwrap(), std::fs::read(data.join("0000_rgb.cube")).unwrap());
    assert!(std::fs::read(&ppm).unwrap().starts_with(b"P6\n7 5\n255\n"));
}

#[test]
fn heatmap_writes_image_and_range() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", p(&data), "--count", "2", "--height", "4", "--width", "4"]);
    let out = dir.path().join("err.ppm");
    ok(&[
        "heatmap", "--gt", p(&data.join("0000_hsi.cube")), "--pred", p(&data.join("0001_hsi.cube")),
        "--out", p(&out), "--range", "0,2",
    ]);
    assert!(out.exists());
    let range = std::fs::read_to_string(dir.path().join("err.ppm.range")).unwrap();
    assert!(range.contains("mode=fixed"), "{range}");
}

#[test]
fn gradcheck_single_target_passes() {
    let out = ok(&["gradcheck", "--target", "softmax"]);
    assert!(out.contains("failed=0"), "{out}");
    assert!(!awan(&["gradcheck", "--target", "no_such_op"]).status.success());
}

#[test]
fn bad_invocations_exit_nonzero() {
    assert!(!awan(&["train", "--bogus"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "blocks 2\n").unwrap();
    let out = awan(&["train", "--data", p(dir.path()), "--out", p(dir.path()), "--config", p(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
    let missing = awan(&["eval", "--gt", "/nonexistent.cube", "--pred", "/nonexistent.cube"]);
    assert!(!missing.status.success());
}
