use std::path::Path;
use std::process::{Command, Output};

use decider::config::{DatasetSource, RunConfig};
use decider::scenario::SpuriousSpec;
use decider::scoring::ScorerId;

fn decider(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_decider")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let mut cfg = RunConfig::spurious_fixture(1);
    cfg.out_dir = dir.join("run");
    cfg.dataset.source =
        DatasetSource::Spurious(SpuriousSpec { n_train: 120, n_val: 60, n_test: 60, ..SpuriousSpec::default() });
    cfg.classifier.train.epochs = 2;
    cfg.train.epochs = 2;
    cfg.train.lr_decay_epochs = vec![];
    cfg.scorers = vec![ScorerId::Msp, ScorerId::Decider];
    cfg.set_seed(1);
    let path = dir.join("config.json");
    cfg.save(&path).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_exits_with_validation_code() {
    let o = decider(&["run", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn malformed_config_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{ not json").unwrap();
    let o = decider(&["gen-scenario", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn evaluate_before_scoring_names_the_missing_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert!(decider(&["gen-scenario", "--config", &cfg]).status.success());
    let o = decider(&["evaluate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing scores"), "{}", stderr(&o));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let out = blocker.join("run");
    let o = decider(&["gen-scenario", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn small_run_succeeds_and_prints_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let o = decider(&["run", "--config", &cfg, "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("msp") && table.contains("decider"), "{table}");
    assert!(dir.path().join("run/report.json").exists());
}
