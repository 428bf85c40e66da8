use std::path::Path;
use std::process::{Command, Output};

fn exprsaug(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exprsaug"))
        .args(args)
        .current_dir(dir)
        .env_remove("EXPRSAUG_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = exprsaug(args, dir);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) {
    ok(
        &["synth", "--classes", "3", "--features", "40", "--informative", "4", "--per-class", "12", "--datasets", "3",
          "--seed", "2", "--out", "syn"],
        dir,
    );
}

const DATA: [&str; 6] = ["--srna", "syn/srna.tsv", "--metadata", "syn/metadata.tsv", "--rpm", "--minmax"];
const SMALL_MLP: [&str; 4] = ["--hidden", "16:0.2", "--epochs", "10"];

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

#[test]
fn synth_then_cv_writes_a_parseable_report() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["synth", "--classes", "5", "--features", "200", "--per-class", "60", "--seed", "1", "--out", "syn"], d);
    let stdout = ok(&["validate", "cv", "--model", "mlp", "--srna", "syn/srna.tsv", "--metadata", "syn/metadata.tsv",
                      "--out", "cv"], d);
    assert!(stdout.starts_with("accuracy\t"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("cv/report.json")).unwrap()).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    for f in ["confusion.tsv", "per_class.tsv", "folds.tsv", "summary.txt", "run_manifest.json"] {
        assert!(d.join("cv").join(f).exists(), "{f}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let code = |args: &[&str]| exprsaug(args, d).status.code().unwrap();

    assert_eq!(code(&["train", "--model", "rf", "--feature-set", "both", "--srna", "syn/srna.tsv",
                      "--metadata", "syn/metadata.tsv"]), 2);
    assert_eq!(code(&["train", "--no-such-flag"]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["train", "--srna", "syn/srna.tsv"]), 2, "metadata is required");

    std::fs::write(d.join("bad.tsv"), "feature_id\tS00000\nmir1\tabc\n").unwrap();
    let out = exprsaug(&["train", "--srna", "bad.tsv", "--metadata", "syn/metadata.tsv"], d);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.tsv:2"));
    assert_eq!(code(&["train", "--srna", "missing.tsv", "--metadata", "syn/metadata.tsv"]), 3);

    // A learning rate this large overflows the weights.
    let mut args = vec!["train", "--learning-rate", "1e300"];
    args.extend(DATA);
    args.extend(SMALL_MLP);
    assert_eq!(code(&args), 4);
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    std::fs::write(d.join("run.toml"), "epochs = 3\nhidden = \"8:0.1\"\nrpm = true\nfolds = 4\nseed = 9\n").unwrap();
    let mut args = vec!["train", "--config", "run.toml", "--epochs", "4", "--out", "t"];
    args.extend(&DATA[..4]);
    ok(&args, d);
    let m = manifest(&d.join("t"));
    assert_eq!(m["config"]["epochs"], "4");
    assert_eq!(m["config"]["hidden"], "8:0.1");
    assert_eq!(m["config"]["rpm"], "true");
    assert_eq!(m["config"]["batch_size"], "30");
    assert_eq!(m["seed"], 9);
    assert!(m["config"].get("folds").is_none(), "cv-only key ignored by train");
    assert_eq!(std::fs::read_to_string(d.join("t/history.tsv")).unwrap().lines().count(), 5);

    std::fs::write(d.join("typo.toml"), "epoch = 3\n").unwrap();
    assert_eq!(exprsaug(&["train", "--config", "typo.toml"], d).status.code(), Some(2));
    std::fs::write(d.join("badval.toml"), "epochs = \"many\"\n").unwrap();
    let mut args = vec!["train", "--config", "badval.toml"];
    args.extend(&DATA[..4]);
    assert_eq!(exprsaug(&args, d).status.code(), Some(2));
}

#[test]
fn threads_come_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let mut args = vec!["train", "--model", "rf", "--stage1-trees", "10", "--stage2-trees", "10", "--keep", "20"];
    args.extend(DATA);
    let run = |threads: &str, out: &str| {
        let mut a = args.clone();
        a.extend(["--out", out]);
        let o = Command::new(env!("CARGO_BIN_EXE_exprsaug"))
            .args(&a)
            .current_dir(d)
            .env("EXPRSAUG_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success());
    };
    run("1", "a");
    run("3", "b");
    assert_eq!(std::fs::read(d.join("a/model.json")).unwrap(), std::fs::read(d.join("b/model.json")).unwrap());
}

#[test]
fn inputs_are_left_untouched_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let before = (std::fs::read(d.join("syn/srna.tsv")).unwrap(), std::fs::read(d.join("syn/metadata.tsv")).unwrap());
    let mut args = vec!["preprocess", "--zero-threshold", "0.3", "--group-tissues", "--min-class-size", "2", "--out", "p"];
    args.extend(DATA);
    ok(&args, d);
    let after = (std::fs::read(d.join("syn/srna.tsv")).unwrap(), std::fs::read(d.join("syn/metadata.tsv")).unwrap());
    assert_eq!(before, after);
    let m = manifest(&d.join("p"));
    assert_eq!(m["inputs"].as_object().unwrap().len(), 2);
    assert!(m["outputs"]["matrix.tsv"].is_string());
    let matrix = std::fs::read_to_string(d.join("p/matrix.tsv")).unwrap();
    assert!(matrix.starts_with("feature_id\tS00000"));
    assert!(d.join("p/scaler.json").exists());
}

#[test]
fn train_predict_explain_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let mut args = vec!["train", "--out", "m"];
    args.extend(DATA);
    args.extend(SMALL_MLP);
    ok(&args, d);
    ok(&["predict", "--model-dir", "m", "--srna", "syn/srna.tsv", "--out", "p"], d);
    let pred = std::fs::read_to_string(d.join("p/predictions.tsv")).unwrap();
    let mut lines = pred.lines();
    assert_eq!(lines.next().unwrap(), "sample_id\tpredicted\tclass00\tclass01\tclass02");
    assert_eq!(lines.count(), 36);

    let out = ok(
        &["explain", "--model-dir", "m", "--srna", "syn/srna.tsv", "--metadata", "syn/metadata.tsv", "--sample",
          "S00004", "--class-scores", "--top", "3", "--stability", "--similarity", "--svg", "--out", "e"],
        d,
    );
    assert!(out.contains("sample S00004"));
    let scores = std::fs::read_to_string(d.join("e/class_scores.tsv")).unwrap();
    assert_eq!(scores.lines().next().unwrap(), "feature_id\tclass00\tclass01\tclass02");
    assert_eq!(std::fs::read_to_string(d.join("e/top_features.tsv")).unwrap().lines().count(), 1 + 3 * 3);
    for f in ["sample_S00004.tsv", "sample_S00004.svg", "stability.tsv", "similarity.tsv", "class_scores_top.svg"] {
        assert!(d.join("e").join(f).exists(), "{f}");
    }
    assert_eq!(exprsaug(&["explain", "--model-dir", "m", "--srna", "syn/srna.tsv", "--out", "e2"], d).status.code(), Some(2));

    let mut args = vec!["train", "--model", "rf", "--stage1-trees", "10", "--stage2-trees", "10", "--out", "rf"];
    args.extend(DATA);
    ok(&args, d);
    ok(&["predict", "--model-dir", "rf", "--srna", "syn/srna.tsv", "--out", "rp"], d);
    let code = exprsaug(&["explain", "--model-dir", "rf", "--srna", "syn/srna.tsv", "--stability", "--out", "x"], d);
    assert_eq!(code.status.code(), Some(2));
}

#[test]
fn both_feature_sets_merge_by_sample_id() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    // Contaminant matrix: same samples in reverse order.
    let srna = std::fs::read_to_string(d.join("syn/srna.tsv")).unwrap();
    let header: Vec<&str> = srna.lines().next().unwrap().split('\t').skip(1).collect();
    let mut contam = String::from("feature_id");
    for s in header.iter().rev() {
        contam.push('\t');
        contam.push_str(s);
    }
    contam.push_str("\nphiX\t");
    contam.push_str(&(0..header.len()).map(|i| (i % 5).to_string()).collect::<Vec<_>>().join("\t"));
    contam.push('\n');
    std::fs::write(d.join("contam.tsv"), contam).unwrap();
    ok(&["preprocess", "--feature-set", "both", "--srna", "syn/srna.tsv", "--contam", "contam.tsv", "--metadata",
         "syn/metadata.tsv", "--out", "p"], d);
    let m = std::fs::read_to_string(d.join("p/matrix.tsv")).unwrap();
    let last = m.lines().last().unwrap();
    assert!(last.starts_with("contam:phiX\t0\t4\t3\t2\t1\t"), "{last}");
}

#[test]
fn odo_reports_every_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d);
    let mut args = vec!["validate", "odo", "--model", "rf", "--stage1-trees", "10", "--stage2-trees", "10", "--out", "o"];
    args.extend(DATA);
    let stdout = ok(&args, d);
    assert!(stdout.contains("mean_dataset_accuracy\t"));
    assert_eq!(std::fs::read_to_string(d.join("o/datasets.tsv")).unwrap().lines().count(), 4);

    let mut args = vec!["validate", "odo", "--dataset", "DS01", "--fold-safe-scaling", "--model", "rf",
                        "--stage1-trees", "10", "--stage2-trees", "10", "--out", "o1"];
    args.extend(DATA);
    assert!(ok(&args, d).starts_with("held_out\tDS01\n"));
}
