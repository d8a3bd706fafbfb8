mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use edu_distill::config::RunConfig;
use edu_distill::metrics::{read_log, SubsetId, TOP1};
use edu_distill::pipeline::{ERROR_MARKER, LOCK_FILE, PARTITION_FILE};
use edu_distill::trainer::{FINAL_CHECKPOINT, METRICS_FILE};

use common::tiny_config;

fn edistill(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edistill"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output) {
    assert_eq!(out.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", stdout(out), stderr(out));
}

#[test]
fn partition_of_100_classes_prints_34_33_33_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), "hundred");
    cfg.dataset.num_classes = 100;
    cfg.dataset.train_per_class = 2;
    cfg.dataset.test_per_class = 1;
    let config = write_config(dir.path(), &cfg);

    let out = edistill(&config, &["partition"]);
    assert_ok(&out);
    assert!(stdout(&out).contains("group sizes: 34/33/33"), "{}", stdout(&out));
    let first = std::fs::read(cfg.run_dir().join(PARTITION_FILE)).unwrap();

    assert_ok(&edistill(&config, &["partition"]));
    assert_eq!(std::fs::read(cfg.run_dir().join(PARTITION_FILE)).unwrap(), first);

    let out = edistill(&config, &["--seed", "77", "--out-dir", dir.path().join("other").to_str().unwrap(), "partition"]);
    assert_ok(&out);
    let other = std::fs::read(dir.path().join("other/hundred").join(PARTITION_FILE)).unwrap();
    assert_ne!(other, first);
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), "bad");
    cfg.partition.num_stages = 12;
    let config = write_config(dir.path(), &cfg);
    let out = edistill(&config, &["partition"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("partition.num_stages") && err.contains("dataset.num_classes"), "{err}");

    let path = dir.path().join("typo.toml");
    std::fs::write(&path, "seed = 1\n[schedule]\nadvance_epoch = [3]\n").unwrap();
    let out = edistill(&path, &["partition"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("advance_epoch"), "{}", stderr(&out));

    let config = write_config(dir.path(), &tiny_config(dir.path(), "gpu"));
    let out = edistill(&config, &["--device", "cuda", "partition"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_partition_is_a_runtime_error_with_a_hint() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_config(dir.path(), "nopart"));
    let out = edistill(&config, &["train-teachers"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("partition"), "{}", stderr(&out));
    assert!(dir.path().join("nopart").join(ERROR_MARKER).exists());
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "full");
    let config = write_config(dir.path(), &cfg);
    let run = cfg.run_dir();

    assert_ok(&edistill(&config, &["partition"]));
    let out = edistill(&config, &["train-teachers"]);
    assert_ok(&out);
    for t in 1..=3 {
        assert!(run.join(format!("teachers/teacher{t}.ckpt")).exists());
    }
    let summary = std::fs::read_to_string(run.join("teachers/summary.tsv")).unwrap();
    assert_eq!(summary.lines().count(), 4, "{summary}");

    let out = edistill(&config, &["distill"]);
    assert_ok(&out);
    assert!(run.join(FINAL_CHECKPOINT).exists());
    for f in ["metrics.csv", "forgetting_matrix.md", "summary.md", "accuracy_all.svg", "accuracy_subset3.svg"] {
        assert!(run.join("report").join(f).exists(), "{f}");
    }
    assert!(!run.join(ERROR_MARKER).exists());
    assert!(!run.join(LOCK_FILE).exists());

    // evaluate reproduces the last logged full-set accuracy.
    let records = read_log(&run.join(METRICS_FILE)).unwrap();
    let last = records
        .iter()
        .rev()
        .find(|r| r.metric == TOP1 && r.subset_id == SubsetId::All)
        .unwrap();
    let ckpt = run.join(FINAL_CHECKPOINT);
    let out = edistill(&config, &["evaluate", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_ok(&out);
    assert!(stdout(&out).contains(&format!("{:.2}", last.value)), "{}\nlast {}", stdout(&out), last.value);

    // report regenerates byte-identical files.
    let matrix = std::fs::read(run.join("report/forgetting_matrix.md")).unwrap();
    let csv = std::fs::read(run.join("report/metrics.csv")).unwrap();
    assert_ok(&edistill(&config, &["report", "--run", run.to_str().unwrap()]));
    assert_eq!(std::fs::read(run.join("report/forgetting_matrix.md")).unwrap(), matrix);
    assert_eq!(std::fs::read(run.join("report/metrics.csv")).unwrap(), csv);

    // A checkpoint for a different class count is rejected at load time.
    let mut wrong = cfg.clone();
    wrong.dataset.num_classes = 5;
    let wrong_config = dir.path().join("wrong.toml");
    std::fs::write(&wrong_config, wrong.to_toml().unwrap()).unwrap();
    let out = edistill(&wrong_config, &["evaluate", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("classifier"), "{}", stderr(&out));

    // Vanilla KD baseline over the same config.
    assert_ok(&edistill(&config, &["train-teachers", "--baseline", "kd"]));
    let out = edistill(&config, &["distill", "--baseline", "kd"]);
    assert_ok(&out);
    let kd = read_log(&dir.path().join("full-kd").join(METRICS_FILE)).unwrap();
    assert!(kd.iter().all(|r| r.stage == 1));
    assert!(dir.path().join("full-kd/teachers/shared.ckpt").exists());
}

#[test]
fn shared_teacher_checkpoint_is_reused_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path(), "pre");
    cfg.teacher.mode = edu_distill::teacher::TeacherMode::SharedPretrained;
    let config = write_config(dir.path(), &cfg);
    assert_ok(&edistill(&config, &["partition"]));
    assert_ok(&edistill(&config, &["train-teachers"]));
    let trained = cfg.run_dir().join("teachers/shared.ckpt");
    let provided = dir.path().join("provided.ckpt");
    std::fs::copy(&trained, &provided).unwrap();

    cfg.teacher.checkpoints = vec![provided];
    cfg.output.run_id = "pre2".into();
    let config = write_config(dir.path(), &cfg);
    assert_ok(&edistill(&config, &["partition"]));
    let out = edistill(&config, &["train-teachers"]);
    assert_ok(&out);
    assert!(stdout(&out).contains("false"), "{}", stdout(&out));
}

#[test]
fn concurrent_runs_on_one_directory_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "locked");
    let config = write_config(dir.path(), &cfg);
    std::fs::create_dir_all(cfg.run_dir()).unwrap();
    // PID 1 is always alive.
    std::fs::write(cfg.run_dir().join(LOCK_FILE), "1\n").unwrap();
    let out = edistill(&config, &["partition"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("lock"), "{}", stderr(&out));

    // A lock left by a dead process is taken over.
    std::fs::write(cfg.run_dir().join(LOCK_FILE), "4194303\n").unwrap();
    assert_ok(&edistill(&config, &["partition"]));
}

#[test]
fn interrupted_distill_resumes_to_the_same_result() {
    let dir = tempfile::tempdir().unwrap();
    let straight = tiny_config(&dir.path().join("a"), "r");
    let broken = tiny_config(&dir.path().join("b"), "r");
    let ca = write_config(&mkdir(dir.path().join("a")), &straight);
    let cb = write_config(&mkdir(dir.path().join("b")), &broken);
    for c in [&ca, &cb] {
        assert_ok(&edistill(c, &["partition"]));
        assert_ok(&edistill(c, &["train-teachers"]));
    }
    assert_ok(&edistill(&ca, &["distill"]));
    let out = edistill(&cb, &["distill", "--interrupt-after", "7"]);
    assert_ok(&out);
    assert!(stdout(&out).contains("stopped after epoch 7"), "{}", stdout(&out));
    assert!(!broken.run_dir().join(FINAL_CHECKPOINT).exists());
    assert_ok(&edistill(&cb, &["distill", "--resume"]));
    for f in [METRICS_FILE, FINAL_CHECKPOINT] {
        assert_eq!(
            std::fs::read(straight.run_dir().join(f)).unwrap(),
            std::fs::read(broken.run_dir().join(f)).unwrap(),
            "{f}"
        );
    }
}

fn mkdir(path: PathBuf) -> PathBuf {
    std::fs::create_dir_all(&path).unwrap();
    path
}
