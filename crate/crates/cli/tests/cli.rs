use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hct(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hct")).args(args).current_dir(cwd).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gradcheck_on_a_correct_build_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = hct(&["gradcheck", "--seed", "1", "--size", "32"], dir.path());
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(!out.contains("FAIL"));
    assert!(out.lines().last().unwrap().contains("max rel err"));
}

#[test]
fn train_writes_one_log_line_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = hct(&["train", "--epochs", "1", "--n", "4", "--batch", "2", "--out", "run"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("run/loss.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.split('\t').count() == 9));
    assert!(dir.path().join("run/model.hct").exists());
    let cfg = fs::read_to_string(dir.path().join("run/config.txt")).unwrap();
    assert!(cfg.contains("batch_size = 2"));
}

#[test]
fn train_reads_config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.cfg"),
        "# small\nimage_size = 32\nshallow_channels = 8\ndeep_channels = 16\nepochs = 3\n",
    )
    .unwrap();
    let o = hct(
        &["train", "--config", "run.cfg", "--n", "2", "--batch", "2", "--set", "epochs=2", "--out", "run"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("run/loss.log")).unwrap().lines().count(), 2);
    let cfg = fs::read_to_string(dir.path().join("run/config.txt")).unwrap();
    assert!(cfg.contains("image_size = 32") && cfg.contains("epochs = 2"));
}

#[test]
fn eval_of_groundtruth_copies_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let o = hct(&["synth", "--seed", "3", "--n", "3", "--size", "32", "--out", "data"], dir.path());
    assert_eq!(code(&o), 0);
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for id in fs::read_to_string(dir.path().join("data/index.txt")).unwrap().split_whitespace() {
        fs::copy(dir.path().join(format!("data/{id}_gt.pgm")), pred.join(format!("{id}.pgm"))).unwrap();
    }
    let o = hct(&["eval", "--data", "data", "--pred-dir", "pred", "--out", "ev"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(dir.path().join("ev/metrics.txt")).unwrap();
    let mean: Vec<&str> = table.lines().last().unwrap().split_whitespace().collect();
    assert_eq!(mean, ["mean", "0.0000", "1.0000", "1.0000", "1.0000"]);
    assert_eq!(fs::read_to_string(dir.path().join("ev/metrics.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn eval_with_checkpoint_scores_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let set = ["--set", "image_size=32"];
    let o = hct(&[&["train", "--epochs", "1", "--n", "2", "--batch", "2", "--out", "run"][..], &set].concat(), dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&hct(&["synth", "--n", "2", "--size", "32", "--out", "data"], dir.path())), 0);
    let o = hct(&["eval", "--data", "data", "--checkpoint", "run/model.hct", "--out", "ev"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 4);
}

#[test]
fn dump_attn_writes_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = hct(&["dump-attn", "--out", "attn"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = fs::read_dir(dir.path().join("attn"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    for stage in ["gsa_r_q", "gsa_d_q", "lca_r_q", "lca_d_q", "p1.", "p2.", "p3.", "p4.", "final."] {
        assert!(names.iter().any(|n| n.starts_with(stage)), "{stage} missing in {names:?}");
    }
}

#[test]
fn oracle_comparisons_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = hct(&["oracle"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn usage_and_config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    for args in [
        &["train", "--bogus"][..],
        &["frobnicate"],
        &["train", "--set", "no_such_key=3"],
        &["train", "--set", "epochs"],
        &["train", "--set", "image_size=30"],
        &["train", "--config", "bad.cfg"],
        &["eval", "--data", "x"],
        &["gradcheck", "--size", "20"],
        &["synth", "--size", "20", "--out", "s"],
    ] {
        let o = hct(args, dir.path());
        assert_eq!(code(&o), 2, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn runtime_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["eval", "--data", "missing", "--pred-dir", "pred"][..],
        &["eval", "--data", "missing", "--checkpoint", "none.hct"],
        &["train", "--data", "missing", "--out", "run"],
    ] {
        let o = hct(args, dir.path());
        assert_eq!(code(&o), 1, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        let err = String::from_utf8_lossy(&o.stderr);
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("hct: "));
    }
}
