//! End-to-end runs of the `segagg` binary on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use segagg_core::evaluation::parse_report_csv;

const TINY: &str = "\
corpus.train_speakers = 4
corpus.val_speakers = 2
corpus.test_speakers = 3
corpus.utterances_per_speaker = 3
corpus.min_duration = 200
corpus.max_duration = 400
model.input_length = 243
model.first_conv_channels = 4
model.block_groups = 1x4,1x6
model.gru_hidden = 4
model.embedding_dim = 4
model.segment_heads = 4
train.segment_length = 81
train.steps = 6
train.batch_size = 4
train.eval_interval = 3
eval.validation_trials = 10
";

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("exp.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segagg")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn cfg_arg(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

#[test]
fn generate_is_repeatable_and_creates_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "paths.corpus_dir = nested/corpus\n");
    let out = ok(&["generate", "--config", &cfg_arg(&cfg)]);
    assert!(out.contains("wrote 27 utterances"));
    let manifest = dir.path().join("nested/corpus/manifest.txt");
    let first = fs::read(&manifest).unwrap();
    let sample = dir.path().join("nested/corpus/test/spk0006_utt000.sawf");
    let first_wave = fs::read(&sample).unwrap();
    ok(&["generate", "--config", &cfg_arg(&cfg)]);
    assert_eq!(fs::read(&manifest).unwrap(), first);
    assert_eq!(fs::read(&sample).unwrap(), first_wave);

    let text = String::from_utf8(first).unwrap();
    let records: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(records.len(), 27);
    assert_eq!(records.iter().filter(|l| l.contains("train/")).count(), 12);
    assert_eq!(records.iter().filter(|l| l.contains("val/")).count(), 6);
    assert_eq!(records.iter().filter(|l| l.contains("test/")).count(), 9);
}

#[test]
fn teacher_dependency_and_reproducible_training() {
    let dir = tempfile::tempdir().unwrap();
    let ts = write_config(dir.path(), "train.regime = sa_ts\n");
    ok(&["generate", "--config", &cfg_arg(&ts)]);

    let out = run(&["train", "--config", &cfg_arg(&ts)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1);
    assert!(err.contains("teacher checkpoint"), "{err}");

    let base = dir.path().join("base.cfg");
    fs::write(&base, format!("{TINY}train.regime = baseline\n")).unwrap();
    let first = ok(&["train", "--config", &cfg_arg(&base)]);
    let ckpt = fs::read(dir.path().join("checkpoints/baseline_final.ckpt")).unwrap();
    let second = ok(&["train", "--config", &cfg_arg(&base)]);
    let final_line = |s: &str| s.lines().last().unwrap().to_string();
    assert_eq!(final_line(&first), final_line(&second));
    assert_eq!(fs::read(dir.path().join("checkpoints/baseline_final.ckpt")).unwrap(), ckpt);
    assert!(dir.path().join("checkpoints/baseline_best.ckpt").exists());
    assert!(dir.path().join("checkpoints/baseline_train.log").exists());

    ok(&["train", "--config", &cfg_arg(&ts)]);
    assert!(dir.path().join("checkpoints/sa_ts_best.ckpt").exists());
}

#[test]
fn evaluate_grid_follows_checkpoint_order() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "eval.conditions = 1/3\n");
    let c = cfg_arg(&cfg);
    ok(&["generate", "--config", &c]);
    ok(&["train", "--config", &c]);
    fs::write(dir.path().join("sa.cfg"), format!("{TINY}eval.conditions = 1/3\ntrain.regime = sa\n")).unwrap();
    ok(&["train", "--config", &cfg_arg(&dir.path().join("sa.cfg"))]);

    let base = dir.path().join("checkpoints/baseline_best.ckpt");
    let sa = dir.path().join("checkpoints/sa_best.ckpt");
    let single = ok(&["evaluate", "--config", &c, "--checkpoint", base.to_str().unwrap()]);
    let (systems, cols, values) = parse_report_csv(&single).unwrap();
    assert_eq!((systems.len(), cols.len(), values[0].len()), (1, 1, 1));

    let both = ok(&[
        "evaluate", "--config", &c,
        "--checkpoint", sa.to_str().unwrap(),
        "--checkpoint", base.to_str().unwrap(),
    ]);
    let (systems, _, _) = parse_report_csv(&both).unwrap();
    assert_eq!(systems, vec!["sa".to_string(), "baseline".to_string()]);
    let report = fs::read_to_string(dir.path().join("report/eer.csv")).unwrap();
    assert_eq!(report, both);
    let trials = fs::read_to_string(dir.path().join("report/trials.txt")).unwrap();
    assert!(trials.lines().all(|l| l.starts_with("0 ") || l.starts_with("1 ")));
    assert!(dir.path().join("report/scores_sa_1_3.txt").exists());

    let missing = run(&["evaluate", "--config", &c, "--checkpoint", "nowhere.ckpt"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing checkpoint"));
}

#[test]
fn reproduce_writes_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = ok(&["reproduce", "--config", &cfg_arg(&cfg)]);
    let (systems, cols, _) = parse_report_csv(&out).unwrap();
    assert_eq!(systems, vec!["baseline", "sa", "sa_ts"]);
    assert_eq!(cols, vec!["full", "3/4", "1/2", "1/4"]);
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.learning_rate = 0.1\n");
    let out = run(&["generate", "--config", &cfg_arg(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key `train.learning_rate`"));
    let out = run(&["train", "--config", "/nonexistent/exp.cfg"]);
    assert!(!out.status.success());
}
