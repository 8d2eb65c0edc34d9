use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scanet"))
        .args(args)
        .env_remove("SCANET_SEED")
        .output()
        .expect("spawn scanet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// The directory named on the `prefix` line of the output.
fn reported_path(o: &Output, prefix: &str) -> PathBuf {
    let text = stdout(o);
    let line = text.lines().find_map(|l| l.strip_prefix(prefix)).unwrap_or_else(|| panic!("no {prefix:?} in {text}"));
    PathBuf::from(line.trim())
}

fn gen_cohort(out: &Path, n: usize, seed: u64) -> PathBuf {
    let o = scanet(&["gen-data", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    reported_path(&o, "manifest: ").parent().unwrap().to_path_buf()
}

fn train_run(data: &Path, out: &Path, seed: &str) -> PathBuf {
    let o = scanet(&[
        "train", "--data", data.to_str().unwrap(), "--preset", "toy", "--set", "max_epochs=2",
        "--out", out.to_str().unwrap(), "--seed", seed,
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    reported_path(&o, "run: ")
}

fn sorted_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_deterministic_and_rejects_tiny_cohorts() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen_cohort(&tmp.path().join("a"), 4, 3);
    let b = gen_cohort(&tmp.path().join("b"), 4, 3);
    let names = sorted_names(&a);
    assert_eq!(names.len(), 5);
    assert_eq!(names, sorted_names(&b));
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n}");
    }
    let o = scanet(&["gen-data", "--n", "1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_cohort(tmp.path(), 8, 1);
    let run1 = train_run(&data, &tmp.path().join("runs"), "5");
    for f in ["model.sckp", "model_card.txt", "config.txt", "history.csv"] {
        assert!(run1.join(f).exists(), "missing {f}");
    }
    let run2 = train_run(&data, &tmp.path().join("runs"), "5");
    assert_ne!(run1, run2);
    assert_eq!(fs::read(run1.join("history.csv")).unwrap(), fs::read(run2.join("history.csv")).unwrap());
    assert_eq!(fs::read(run1.join("model.sckp")).unwrap(), fs::read(run2.join("model.sckp")).unwrap());

    let o = scanet(&[
        "eval", "--model", run1.to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--out", tmp.path().join("eval").to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = reported_path(&o, "run: ");
    let preds = fs::read_to_string(dir.join("predictions.csv")).unwrap();
    let rows: Vec<&str> = preds.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    for r in rows {
        let cols: Vec<f64> = r.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert!((cols[0] + cols[1] - 1.0).abs() < 1e-6, "{r}");
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert!(report.is_object());
}

#[test]
fn missing_manifest_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = scanet(&["train", "--data", tmp.path().to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("manifest"));
}

#[test]
fn cv_rejects_one_fold_and_writes_consistent_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_cohort(tmp.path(), 10, 2);
    let d = data.to_str().unwrap();
    let out = tmp.path().join("cv");
    let o = scanet(&["cv", "--data", d, "--k", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = scanet(&[
        "cv", "--data", d, "--k", "2", "--preset", "toy", "--set", "max_epochs=1", "--single-thread",
        "--out", out.to_str().unwrap(), "--seed", "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = reported_path(&o, "run: ");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let table = fs::read_to_string(dir.join("report.txt")).unwrap();
    let folds = json["folds"].as_array().expect("folds array");
    assert_eq!(folds.len(), 2);
    let table_rows: Vec<&str> = table.lines().filter(|l| l.starts_with(char::is_numeric)).collect();
    assert_eq!(table_rows.len(), 2);
    for (fold, row) in folds.iter().zip(table_rows) {
        let acc = fold["accuracy"].as_f64().unwrap();
        let cells: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(cells[2], format!("{acc:.4}"), "{row}");
    }
    let preds = fs::read_to_string(dir.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().skip(1).count(), 10);
}

#[test]
fn gradcheck_passes_and_detects_injected_fault() {
    let o = scanet(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("conv2d"));
    let o = scanet(&["gradcheck", "--inject-fault", "conv-backward"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
}

#[test]
fn attn_export_writes_maps_and_rejects_wrong_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_cohort(tmp.path(), 4, 6);
    let run = train_run(&data, &tmp.path().join("runs"), "1");
    let study = data.join(sorted_names(&data).into_iter().find(|n| n.ends_with(".scv")).unwrap());
    let out = tmp.path().join("attn");
    let o = scanet(&[
        "attn-export", "--model", run.to_str().unwrap(), "--study", study.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = reported_path(&o, "run: ");
    let sat = sorted_names(&dir.join("sat"));
    // toy model: 8 slices, one SAT layer, two heads, a CSV plus two images per head
    assert_eq!(sat.iter().filter(|n| n.ends_with(".csv")).count(), 8);
    assert_eq!(sat.iter().filter(|n| n.ends_with(".png")).count(), 8 * 2 * 2);
    let cat = fs::read_to_string(dir.join("cat_importance.csv")).unwrap();
    for line in cat.lines().skip(1) {
        let sum: f64 = line.split(',').skip(2).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-5, "{line}");
    }

    let paper = tmp.path().join("paper");
    let o = scanet(&["gen-data", "--n", "2", "--paper-scale", "--out", paper.to_str().unwrap()]);
    assert!(o.status.success());
    let pdir = reported_path(&o, "manifest: ").parent().unwrap().to_path_buf();
    let pstudy = pdir.join(sorted_names(&pdir).into_iter().find(|n| n.ends_with(".scv")).unwrap());
    let o = scanet(&[
        "attn-export", "--model", run.to_str().unwrap(), "--study", pstudy.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}
