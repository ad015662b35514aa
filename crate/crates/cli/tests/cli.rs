use std::fs;
use std::process::{Command, Output};

fn salera(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salera")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const BLOBS: &str = "dataset = blobs\nblobs_n = 200\nblobs_test = 50\nblobs_width = 5\nblobs_classes = 3\nmodel = m0\neta0 = 0.5\nrho = 0.1\nph_warmup = 20\nepochs = 3\n";

#[test]
fn verify_zeta_passes_and_prints_one_line_per_check() {
    let o = salera(&["verify", "zeta"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS ")).count(), 4);
    assert!(out.contains("summary 4/4 passed"));
}

#[test]
fn verify_gradcheck_passes() {
    let o = salera(&["verify", "gradcheck", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
}

#[test]
fn verify_moments_reports_every_cell_and_exits_nonzero_on_failure() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("moments.csv");
    let o = salera(&["verify", "moments", "--reps", "200", "--csv", csv.to_str().unwrap()]);
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS ") || l.starts_with("FAIL ")).count(), 30);
    assert_eq!(o.status.success(), !out.contains("FAIL "));
    assert_eq!(fs::read_to_string(csv).unwrap().lines().count(), 28);
}

#[test]
fn analyze_zeta_writes_the_curve() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("j.csv");
    let o = salera(&["analyze-zeta", "--cconst", "0.01", "--out", path.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("argmin zeta=3.4"));
    let rows = fs::read_to_string(path).unwrap().lines().count();
    assert!(rows > 1800, "{rows}");
}

#[test]
fn analyze_zeta_rejects_a_nonpositive_constant() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("j.csv");
    let o = salera(&["analyze-zeta", "--cconst", "0", "--out", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_prints_a_json_summary_and_flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, BLOBS).unwrap();
    let out = dir.path().join("out");
    let o = salera(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "optimizer=alera",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    assert_eq!(line.lines().count(), 1);
    assert!(line.contains("\"optimizer\":\"alera\""));
    assert!(line.contains("\"seed\":4"));
    assert!(out.join("epochs.csv").exists());
    assert!(out.join("summary.json").exists());
}

#[test]
fn train_with_a_bad_key_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = salera(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn grid_prints_cells_best_and_failure_rates() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("grid.txt");
    fs::write(&spec, format!("{BLOBS}optimizer = sgd, salera\neta0 = 0.05, 0.5\n")).unwrap();
    let o = salera(&["grid", "--spec", spec.to_str().unwrap(), "--seeds", "2", "--jobs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("best ")));
    assert_eq!(out.lines().filter(|l| l.starts_with("failure_rate ")).count(), 2);
    assert_eq!(out.lines().filter(|l| l.starts_with("blobs-")).count(), 4);
}
