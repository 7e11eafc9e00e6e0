//! End-to-end runs of the `ncdlab` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ncdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncdlab")).args(args).output().expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout))
    })
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_writes_split_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = |d: &Path| {
        vec![
            "gen-data".to_string(),
            "--classes".into(),
            "10".into(),
            "--shift".into(),
            "cmix".into(),
            "--corruption".into(),
            "gaussian_blur".into(),
            "--severity".into(),
            "3".into(),
            "--samples-per-class".into(),
            "7".into(),
            "--seed".into(),
            "4".into(),
            "--out".into(),
            out_arg(d),
            "--json".into(),
        ]
    };
    let run = |d: &Path| ncdlab(&args(d).iter().map(String::as_str).collect::<Vec<_>>());
    let out = run(&a);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["seen_classes"], serde_json::json!([0, 1, 2, 3, 4]));
    assert_eq!(v["novel_classes"], serde_json::json!([5, 6, 7, 8, 9]));
    for f in ["manifest.json", "images.cdt1", "labels.cdt1", "domains.cdt1"] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    assert!(run(&b).status.success());
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path());
    assert_eq!(ncdlab(&["gen-data", "--severity", "9", "--out", &out]).status.code(), Some(2));
    assert_eq!(ncdlab(&["gen-data", "--no-such-flag", "--out", &out]).status.code(), Some(2));
    assert_eq!(ncdlab(&["eval", "--predictions", "/nonexistent/preds.csv", "--out", &out]).status.code(), Some(2));
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "learning_rate = 3\n").unwrap();
    let code = ncdlab(&["train", "--config", cfg.to_str().unwrap(), "--out", &out]).status.code();
    assert_eq!(code, Some(2));
}

#[test]
fn eval_of_ground_truth_scores_one() {
    let tmp = tempfile::tempdir().unwrap();
    let preds = tmp.path().join("p.csv");
    fs::write(&preds, "row,label,prediction\n0,5,5\n1,5,5\n2,6,6\n3,7,7\n4,7,7\n").unwrap();
    let out = ncdlab(&["eval", "--predictions", preds.to_str().unwrap(), "--out", &out_arg(tmp.path()), "--json"]);
    assert!(out.status.success());
    let v = json(&out);
    assert_eq!(v["acc"], 1.0);
    assert_eq!(v["nmi"], 1.0);
    assert_eq!(v["ari"], 1.0);

    let labels = tmp.path().join("y.txt");
    let guesses = tmp.path().join("g.txt");
    fs::write(&labels, "0\n0\n1\n1\n").unwrap();
    fs::write(&guesses, "1\n1\n0\n0\n").unwrap();
    let out = ncdlab(&[
        "eval",
        "--predictions",
        guesses.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--out",
        &out_arg(tmp.path()),
        "--json",
    ]);
    assert_eq!(json(&out)["acc"], 1.0);
}

#[test]
fn gradcheck_passes_on_a_fresh_build() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ncdlab(&["gradcheck", "--out", &out_arg(tmp.path()), "--json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out).as_array().unwrap().len(), 9);
    assert!(tmp.path().join("gradcheck.json").is_file());
}

#[test]
fn separability_projection_overlaps_more() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ncdlab(&["separability", "--out", &out_arg(tmp.path()), "--json"]);
    assert!(out.status.success());
    let v = json(&out);
    assert!(v["tau_x"].as_f64().unwrap() > v["tau_xz"].as_f64().unwrap());
    let text = ncdlab(&["separability", "--out", &out_arg(tmp.path())]);
    let s = String::from_utf8_lossy(&text.stdout);
    assert!(s.contains("tau_xz") && s.contains("tau_x "));
}

#[test]
fn train_writes_artifacts_and_report_aggregates() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let train = |dir: &Path| {
        ncdlab(&[
            "train",
            "--epochs",
            "2",
            "--num-seeds",
            "2",
            "--samples-per-class",
            "8",
            "--set",
            "batch_size=16",
            "--set",
            "heldout_per_class=4",
            "--w",
            "0.01",
            "--style",
            "orth",
            "--seed",
            "3",
            "--out",
            &out_arg(dir),
            "--json",
        ])
    };
    let out = train(&run_dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_eq!(v["seeds"].as_array().unwrap().len(), 2);
    assert_eq!(v["config"]["loss"]["w"], 0.01);
    for seed in [3, 4] {
        for f in [format!("traces_seed{seed}.csv"), format!("predictions_seed{seed}.csv"), format!("features_seed{seed}.cdt1")] {
            assert!(run_dir.join(&f).is_file(), "{f} missing");
        }
        assert!(run_dir.join(format!("checkpoint_seed{seed}/manifest.json")).is_file());
    }
    let trace = fs::read_to_string(run_dir.join("traces_seed3.csv")).unwrap();
    assert!(trace.starts_with("step,epoch,lr,L_rep_u,L_rep_s,L_cls_u,L_cls_s,L_style,total,mean_abs_cos_zv"));

    let again = tmp.path().join("again");
    assert!(train(&again).status.success());
    assert_eq!(fs::read(run_dir.join("report.json")).unwrap(), fs::read(again.join("report.json")).unwrap());
    assert_eq!(dir_bytes(&run_dir), dir_bytes(&again));

    let preds = run_dir.join("predictions_seed3.csv");
    let scored = ncdlab(&["eval", "--predictions", preds.to_str().unwrap(), "--out", &out_arg(tmp.path()), "--json"]);
    let expected = v["seeds"][0]["scores"]["acc"].as_f64().unwrap();
    assert_eq!(json(&scored)["acc"].as_f64().unwrap(), expected);

    let summary_dir = tmp.path().join("summary");
    let out = ncdlab(&["report", run_dir.to_str().unwrap(), "--out", &out_arg(&summary_dir), "--json"]);
    assert!(out.status.success());
    assert_eq!(json(&out)[0]["acc"]["mean"], v["acc"]["mean"]);
    assert_eq!(fs::read_to_string(summary_dir.join("summary.csv")).unwrap().lines().count(), 2);
}

#[test]
fn motivation_emits_twenty_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ncdlab(&[
        "motivation",
        "--epochs",
        "1",
        "--num-seeds",
        "1",
        "--samples-per-class",
        "6",
        "--set",
        "batch_size=12",
        "--set",
        "heldout_per_class=3",
        "--out",
        &out_arg(tmp.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(tmp.path().join("motivation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "severity,setting,module_on,mean_acc,std");
    assert_eq!(lines.len(), 21);
}
