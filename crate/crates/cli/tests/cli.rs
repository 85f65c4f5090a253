use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use renalseg::vio::{read_metrics_csv, read_volume, CaseManifest};
use renalseg::volcore::{Dims, LabelMap, Volume};

fn renalseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_renalseg"))
        .args(args)
        .env_remove("RENALSEG_JOBS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn phantoms(dir: &Path, count: usize) {
    let out = renalseg(&["phantom", "--out", p(dir), "--count", &count.to_string(), "--dims", "16,16,8", "--seed", "4"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&renalseg(&["--help"])), 0);
    assert_eq!(code(&renalseg(&["--version"])), 0);
    assert_eq!(code(&renalseg(&["train", "--help"])), 0);
}

#[test]
fn unknown_flags_are_usage_errors() {
    assert_eq!(code(&renalseg(&["predict", "--bogus"])), 1);
    assert_eq!(code(&renalseg(&["frobnicate"])), 1);
    assert_eq!(code(&renalseg(&["--jobs", "0", "gradcheck", "--seeds", "1"])), 1);
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = renalseg(&["preprocess", "--manifest", p(&dir.path().join("nope.txt")), "--out", p(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("does not exist"));
}

#[test]
fn empty_manifest_reports_no_cases() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("manifest.txt");
    fs::write(&m, "#manifest v1\n").unwrap();
    let out = renalseg(&["preprocess", "--manifest", p(&m), "--out", p(&dir.path().join("out"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("no cases"), "{}", stderr(&out));
}

#[test]
fn preprocess_hits_final_dims_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    let out = dir.path().join("pre");
    let out = out.as_path();
    let out_arg = p(out);
    let raw_out = renalseg(&["phantom", "--out", p(&raw), "--count", "1", "--dims", "20,18,10", "--seed", "2"]);
    assert_eq!(code(&raw_out), 0);
    let manifest = raw.join("manifest.txt");
    let args = ["preprocess", "--manifest", p(&manifest), "--out", out_arg, "--divisor", "16", "--median"];
    assert_eq!(code(&renalseg(&args)), 0);
    let m = CaseManifest::load(&out.join("manifest.txt")).unwrap();
    let image: Volume = read_volume(&m.cases[0].image).unwrap();
    let labels: LabelMap = read_volume(&m.cases[0].label).unwrap();
    assert_eq!(image.dims(), Dims::new(16, 16, 8));
    assert_eq!(labels.dims(), Dims::new(16, 16, 8));
    assert!(out.join("plans").join("phantom000.plan").is_file());
    let first = fs::read(&m.cases[0].image).unwrap();
    assert_eq!(code(&renalseg(&args)), 0);
    assert_eq!(fs::read(&m.cases[0].image).unwrap(), first);
}

#[test]
fn unreadable_case_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    phantoms(dir.path(), 2);
    fs::write(dir.path().join("images").join("phantom001.mvol"), b"junk").unwrap();
    let out_dir = dir.path().join("pre");
    let out = renalseg(&["preprocess", "--manifest", p(&dir.path().join("manifest.txt")), "--out", p(&out_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(CaseManifest::load(&out_dir.join("manifest.txt")).unwrap().len(), 1);
}

#[test]
fn evaluate_ground_truth_against_itself_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    phantoms(dir.path(), 2);
    let csv = dir.path().join("metrics.csv");
    let out = renalseg(&[
        "evaluate",
        "--pred",
        p(&dir.path().join("labels")),
        "--manifest",
        p(&dir.path().join("manifest.txt")),
        "--out",
        p(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows = read_metrics_csv(&csv).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.dsc == 1.0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("kidney+tumor,1"));
}

#[test]
fn gradcheck_passes_on_one_seed() {
    let out = renalseg(&["gradcheck", "--seeds", "1"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("all 11 gradient checks passed"));
}

#[test]
fn impossible_tolerance_is_a_numeric_failure() {
    let out = renalseg(&["gradcheck", "--seeds", "1", "--tolerance", "1e-300"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn diverging_training_exits_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    phantoms(dir.path(), 2);
    let out = renalseg(&[
        "train",
        "--manifest",
        p(&dir.path().join("manifest.txt")),
        "--out",
        p(&dir.path().join("model")),
        "--epochs",
        "3",
        "--lr",
        "1e38",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn full_pipeline_on_phantoms() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    phantoms(&d.join("raw"), 4);
    let run = |args: &[&str]| {
        let out = renalseg(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
        out
    };
    run(&["preprocess", "--manifest", p(&d.join("raw/manifest.txt")), "--out", p(&d.join("pre")), "--final-dims", "16,16,8"]);
    let manifest = d.join("pre/manifest.txt");
    for seed in ["1", "2"] {
        run(&[
            "train",
            "--manifest",
            p(&manifest),
            "--out",
            p(&d.join(format!("model{seed}"))),
            "--seed",
            seed,
            "--epochs",
            "2",
            "--patch",
            "8,8,8",
            "--overlap",
            "4,4,0",
        ]);
        run(&[
            "--jobs",
            "2",
            "predict",
            "--model",
            p(&d.join(format!("model{seed}"))),
            "--manifest",
            p(&manifest),
            "--out",
            p(&d.join(format!("pred{seed}"))),
        ]);
    }
    let log = fs::read_to_string(d.join("model1/train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,l_whole,l_tumor,l_total,val_total\n"));
    assert_eq!(log.lines().count(), 3);
    assert!(d.join("model1/lnet_log.csv").is_file());

    run(&["ensemble", "--inputs", p(&d.join("pred1")), "--out", p(&d.join("single"))]);
    for kind in ["whole", "tumor", "loc"] {
        let name = format!("phantom000.{kind}.mvol");
        assert_eq!(fs::read(d.join("pred1").join(&name)).unwrap(), fs::read(d.join("single").join(&name)).unwrap());
    }
    run(&["ensemble", "--inputs", p(&d.join("pred1")), p(&d.join("pred2")), "--out", p(&d.join("ens"))]);
    run(&["postprocess", "--pred", p(&d.join("ens")), "--out", p(&d.join("labels"))]);
    let meta = fs::read_to_string(d.join("labels/postprocess.txt")).unwrap();
    assert!(meta.contains("small_cutoff"));
    run(&[
        "evaluate",
        "--pred",
        p(&d.join("labels")),
        "--manifest",
        p(&manifest),
        "--out",
        p(&d.join("metrics.csv")),
        "--summary",
        p(&d.join("summary.csv")),
    ]);
    assert_eq!(read_metrics_csv(&d.join("metrics.csv")).unwrap().len(), 12);
    let summary = fs::read_to_string(d.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);

    // back in original geometry through the plan sidecars
    run(&[
        "evaluate",
        "--pred",
        p(&d.join("labels")),
        "--manifest",
        p(&d.join("raw/manifest.txt")),
        "--plan-dir",
        p(&d.join("pre/plans")),
        "--out",
        p(&d.join("metrics_orig.csv")),
    ]);
    let out = renalseg(&[
        "evaluate",
        "--pred",
        p(&d.join("labels")),
        "--manifest",
        p(&d.join("raw/manifest.txt")),
        "--plan-dir",
        p(&d.join("raw")),
        "--out",
        p(&d.join("m.csv")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("plan"));
}

#[test]
fn cross_validation_writes_fold_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    phantoms(dir.path(), 4);
    let model = dir.path().join("cv");
    let out = renalseg(&[
        "train",
        "--manifest",
        p(&dir.path().join("manifest.txt")),
        "--out",
        p(&model),
        "--folds",
        "2",
        "--epochs",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(model.join("cv.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "fold,region,dsc");
    for region in ["kidney+tumor", "tumor", "mean"] {
        let fold_rows = lines.iter().filter(|l| l.contains(&format!(",{region},"))).count();
        assert_eq!(fold_rows, 4, "{region}: two folds plus mean and sd");
    }
    assert!(lines.iter().any(|l| l.starts_with("sd,")));
}
