use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn quasimix(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quasimix"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bench_is_byte_identical_across_runs_and_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = quasimix(&["bench", "--example", "ex1", "--reps", "3", "--seed", "7", "--out", "a", "--jobs", "1"], tmp.path());
    assert!(a.status.success(), "{}", stderr(&a));
    let b = quasimix(&["bench", "--example", "ex1", "--reps", "3", "--seed", "7", "--out", "b"], tmp.path());
    assert!(b.status.success(), "{}", stderr(&b));
    let (fa, fb) = (files(&tmp.path().join("a")), files(&tmp.path().join("b")));
    assert_eq!(fa, fb);
    for name in ["aggregate.csv", "histogram.csv", "replications.csv", "misclassification.csv", "manifest.json", "run.conf"] {
        assert!(fa.contains_key(name), "missing {name}");
    }
    let hist = String::from_utf8(fa["histogram.csv"].clone()).unwrap();
    assert!(hist.starts_with("K,count,proportion,is_true_k\n"));
}

#[test]
fn malformed_csv_exits_with_input_code_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.csv"), "id,y,x1\ns1,1.0,2\ns1,abc,3\n").unwrap();
    let o = quasimix(&["fit", "--data", "bad.csv", "--x-cols", "x1", "--out", "out"], tmp.path());
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    let line: serde_json::Value = serde_json::from_str(err.trim()).expect("one JSON error line");
    assert_eq!(line["error"]["category"], "input");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn missing_file_and_bad_flags_use_their_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = quasimix(&["fit", "--data", "nope.csv", "--x-cols", "x1", "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(5));
    let o = quasimix(&["simulate", "--example", "ex9", "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    let o = quasimix(&["fit", "--nonsense", "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn simulate_ex3_has_500_subjects_in_5_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = quasimix(&["simulate", "--example", "ex3", "--seed", "2", "--out", "s"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let labels = fs::read_to_string(tmp.path().join("s/labels.csv")).unwrap();
    let rows: Vec<&str> = labels.lines().skip(1).collect();
    assert_eq!(rows.len(), 500);
    let classes: std::collections::BTreeSet<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(classes.into_iter().collect::<Vec<_>>(), vec!["1", "2", "3", "4", "5"]);
}

#[test]
fn single_lambda_zero_with_one_component_is_a_plain_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let o = quasimix(&["simulate", "--example", "ex1", "--out", "s"], tmp.path());
    assert!(o.status.success());
    let o = quasimix(
        &["fit", "--data", "s/data.csv", "--x-cols", "x1,x2,x3,x4", "--grid", "0", "--k-init", "1", "--out", "f"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let bic = fs::read_to_string(tmp.path().join("f/bic_table.csv")).unwrap();
    assert_eq!(bic.lines().count(), 2);
    assert!(bic.lines().nth(1).unwrap().starts_with("0,1,"));
    let est = fs::read_to_string(tmp.path().join("f/estimates.csv")).unwrap();
    assert!(est.contains("\n1,pi,1,"));
}

#[test]
fn fit_outputs_round_trip_through_the_written_config() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(quasimix(&["simulate", "--example", "ex1", "--seed", "5", "--out", "s"], tmp.path()).status.success());
    let o = quasimix(
        &["fit", "--data", "s/data.csv", "--x-cols", "x1,x2,x3,x4", "--refine", "ar1", "--seed", "4", "--out", "f1"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = quasimix(&["fit", "--config", "f1/run.conf", "--out", "f2"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(files(&tmp.path().join("f1")), files(&tmp.path().join("f2")));

    let summary = fs::read_to_string(tmp.path().join("f1/summary.txt")).unwrap();
    assert!(summary.contains("K: 2"), "{summary}");

    let o = quasimix(&["classify", "--model", "f1/model.json", "--data", "s/data.csv", "--out", "c"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let post = fs::read_to_string(tmp.path().join("f1/posteriors.csv")).unwrap();
    let classes = fs::read_to_string(tmp.path().join("c/classes.csv")).unwrap();
    assert_eq!(post, classes);
}

#[test]
fn flags_override_config_and_unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(quasimix(&["simulate", "--example", "ex1", "--out", "s"], tmp.path()).status.success());
    fs::write(tmp.path().join("bad.conf"), "seed=3\nbogus=1\n").unwrap();
    let o = quasimix(&["select", "--config", "bad.conf", "--data", "s/data.csv", "--x-cols", "x1,x2,x3,x4", "--out", "x"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));

    fs::write(tmp.path().join("ok.conf"), "seed=3\ngrid=0.01,0.02\nx-cols=x1,x2,x3,x4\ndata=s/data.csv\n").unwrap();
    let o = quasimix(&["select", "--config", "ok.conf", "--seed", "8", "--out", "y"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let conf = fs::read_to_string(tmp.path().join("y/run.conf")).unwrap();
    assert!(conf.contains("seed=8\n") && conf.contains("grid=0.01,0.02\n"), "{conf}");
    let bic = fs::read_to_string(tmp.path().join("y/bic_table.csv")).unwrap();
    assert_eq!(bic.lines().count(), 3);
}
