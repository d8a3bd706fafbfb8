//! Config-driven phases: partition, teacher training, distillation,
//! evaluation and reporting. Artifacts live under `{out_dir}/{run_id}`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::checkpoint::{read_json, ModelCheckpoint};
use crate::config::RunConfig;
use crate::data::{Dataset, SplitKind, SyntheticConfig};
use crate::error::{Error, Result};
use crate::metrics::read_log;
use crate::model::assemble_stage_model;
use crate::nn::Network;
use crate::partition::{partition, SubDatasetPartition};
use crate::report::{evaluate as evaluate_model, forgetting_matrix, render_report, Evaluation, RunReport};
use crate::teacher::{
    cache_teacher_outputs, train_teacher, LogitStore, TeacherAssignment, TeacherMode, TeacherRef, TeacherSet,
    TeacherSource, TeacherTraining,
};
use crate::trainer::{
    run_education_distillation, DistillRun, RunCheckpoint, RunOutcome, TrainObserver, TrainSettings, METRICS_FILE,
};

pub const PARTITION_FILE: &str = "partition.txt";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const ERROR_MARKER: &str = "ERROR";
pub const LOCK_FILE: &str = ".lock";
pub const TEACHER_DIR: &str = "teachers";
pub const REPORT_DIR: &str = "report";

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    match (&d.train_path, &d.test_path) {
        (Some(train), Some(test)) if d.name != "synthetic" => {
            Dataset::from_text_files(train, test, d.input(), d.num_classes)
        }
        _ => Dataset::synthetic(&SyntheticConfig {
            num_classes: d.num_classes,
            channels: d.channels,
            height: d.height,
            width: d.width,
            train_per_class: d.train_per_class,
            test_per_class: d.test_per_class,
            separation: d.separation,
            noise: d.noise,
            seed: cfg.seed,
        }),
    }
}

pub fn build_partition(cfg: &RunConfig, dataset: &Dataset) -> Result<SubDatasetPartition> {
    let p = &cfg.partition;
    if p.num_stages == 1 {
        return SubDatasetPartition::whole(dataset.train.labels(), p.mode);
    }
    partition(dataset.train.labels(), p.num_stages, &p.ratios(), p.mode, cfg.partition_seed())
}

/// Creates the run directory and writes the partition file.
pub fn write_partition(cfg: &RunConfig, dataset: &Dataset) -> Result<(PathBuf, SubDatasetPartition)> {
    let part = build_partition(cfg, dataset)?;
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(PARTITION_FILE);
    part.save(&path)?;
    Ok((path, part))
}

/// The partition file of this run, checked against the config. A single-stage
/// run needs no file.
pub fn load_partition(cfg: &RunConfig, dataset: &Dataset) -> Result<SubDatasetPartition> {
    if cfg.partition.num_stages == 1 {
        return build_partition(cfg, dataset);
    }
    let path = cfg.run_dir().join(PARTITION_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            hint: "run `partition` first".into(),
        });
    }
    let part = SubDatasetPartition::load(&path)?;
    if part.num_subsets() != cfg.partition.num_stages
        || part.mode() != cfg.partition.mode
        || part.seed() != cfg.partition_seed()
        || part.ratios() != cfg.partition.ratios().as_slice()
    {
        return Err(Error::Config(format!(
            "{} was written for a different [partition] section; rerun `partition`",
            path.display()
        )));
    }
    Ok(part)
}

fn derive_seed(seed: u64, label: &str, index: usize) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(label.as_bytes())
        .chain_update((index as u64).to_le_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Where each stage's teacher checkpoint lives.
pub fn teacher_assignment(cfg: &RunConfig) -> Result<TeacherAssignment> {
    let arch = cfg.teacher.arch(&cfg.dataset)?;
    let dir = cfg.run_dir().join(TEACHER_DIR);
    let t = cfg.partition.num_stages;
    let path_for = |stage: usize| -> PathBuf {
        match (cfg.teacher.mode, cfg.teacher.checkpoints.as_slice()) {
            (TeacherMode::SharedPretrained, [one]) => one.clone(),
            (TeacherMode::SharedPretrained, _) => dir.join("shared.ckpt"),
            (TeacherMode::PerSubsetTrained, []) => dir.join(format!("teacher{stage}.ckpt")),
            (TeacherMode::PerSubsetTrained, given) => given[stage - 1].clone(),
        }
    };
    let per_stage = (1..=t)
        .map(|s| {
            (
                s,
                TeacherRef {
                    arch: arch.clone(),
                    checkpoint: path_for(s),
                },
            )
        })
        .collect();
    let assignment = TeacherAssignment {
        mode: cfg.teacher.mode,
        per_stage,
    };
    assignment.validate(t, cfg.dataset.num_classes)?;
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSummary {
    /// Subset id, or 0 for the shared teacher.
    pub subset: usize,
    pub checkpoint: PathBuf,
    pub samples: usize,
    /// Top-1 percent on the samples the teacher is responsible for.
    pub accuracy: f64,
    pub trained: bool,
}

fn teacher_samples(cfg: &RunConfig, dataset: &Dataset, part: &SubDatasetPartition, subset: usize) -> Result<Vec<usize>> {
    let labels = dataset.train.labels();
    match cfg.teacher.mode {
        TeacherMode::SharedPretrained => Ok((0..labels.len()).collect()),
        TeacherMode::PerSubsetTrained => part.subset_indices(labels, subset, SplitKind::Train),
    }
}

/// Trains one teacher per subset (or one shared teacher), or validates the
/// provided checkpoints, and writes `teachers/summary.tsv`.
pub fn train_teachers(cfg: &RunConfig) -> Result<Vec<TeacherSummary>> {
    let dataset = load_dataset(cfg)?;
    let part = load_partition(cfg, &dataset)?;
    let assignment = teacher_assignment(cfg)?;
    let subsets: Vec<usize> = match cfg.teacher.mode {
        TeacherMode::PerSubsetTrained => (1..=part.num_subsets()).collect(),
        TeacherMode::SharedPretrained => vec![0],
    };
    let training = TeacherTraining {
        epochs: cfg.teacher.epochs,
        lr_milestones: cfg.teacher.lr_milestones.clone(),
        optimizer: cfg.optimizer.clone(),
        seed: cfg.seed,
    };
    let mut out = Vec::new();
    for &subset in &subsets {
        let teacher = &assignment.per_stage[&subset.max(1)];
        let idx = teacher_samples(cfg, &dataset, &part, subset)?;
        let (network, trained) = if cfg.teacher.checkpoints.is_empty() {
            let settings = TeacherTraining {
                seed: derive_seed(cfg.seed, "teacher", subset),
                ..training.clone()
            };
            let fit = train_teacher(&teacher.arch, &dataset.train, &idx, &settings)?;
            ModelCheckpoint {
                spec: teacher.arch.clone(),
                stage: 1,
                num_stages: 1,
                state: fit.network.state_dict(),
            }
            .save(&teacher.checkpoint)?;
            (fit.network, true)
        } else {
            (ModelCheckpoint::load(&teacher.checkpoint)?.into_network(&teacher.arch)?, false)
        };
        let accuracy = crate::report::top1_accuracy(&network, crate::report::batches(&dataset, SplitKind::Train, &idx))?;
        out.push(TeacherSummary {
            subset,
            checkpoint: teacher.checkpoint.clone(),
            samples: idx.len(),
            accuracy,
            trained,
        });
    }
    let dir = cfg.run_dir().join(TEACHER_DIR);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("summary.tsv");
    std::fs::write(&path, teacher_table(&out)).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

pub fn teacher_table(rows: &[TeacherSummary]) -> String {
    let mut s = String::from("subset\tsamples\ttop1\ttrained\tcheckpoint\n");
    for r in rows {
        let subset = if r.subset == 0 { "all".to_string() } else { r.subset.to_string() };
        let _ = writeln!(s, "{subset}\t{}\t{:.2}\t{}\t{}", r.samples, r.accuracy, r.trained, r.checkpoint.display());
    }
    s
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DistillOptions {
    pub resume: bool,
    pub stop_after_epoch: Option<usize>,
}

pub fn train_settings(cfg: &RunConfig, opts: &DistillOptions) -> TrainSettings {
    TrainSettings {
        run_id: cfg.output.run_id.clone(),
        out_dir: cfg.output.out_dir.clone(),
        seed: cfg.seed,
        deterministic: cfg.output.deterministic,
        eval_every: cfg.schedule.eval_every,
        checkpoint_every: cfg.schedule.checkpoint_every,
        optimizer: cfg.optimizer.clone(),
        distill: cfg.loss,
        resume: opts.resume,
        stop_after_epoch: opts.stop_after_epoch,
    }
}

/// Loads the cached store matching these teachers, or builds and saves it.
/// The file name carries a digest of the teacher weights.
pub fn teacher_logit_store(cfg: &RunConfig, teachers: &TeacherSet, dataset: &Dataset, part: &SubDatasetPartition) -> Result<LogitStore> {
    let mut h = Sha256::new();
    for s in teachers.state_hashes() {
        h.update(s.as_bytes());
    }
    h.update(part.to_text().as_bytes());
    let tag = hex::encode(&h.finalize()[..6]);
    let dir = cfg.run_dir().join(TEACHER_DIR);
    let path = dir.join(format!("logits-{tag}.bin"));
    if path.exists() {
        return LogitStore::load(&path, dataset);
    }
    let store = cache_teacher_outputs(teachers, dataset, part)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    store.save(&path)?;
    Ok(store)
}

/// Runs the staged distillation for `cfg` and, once complete, renders the report.
pub fn distill(cfg: &RunConfig, opts: &DistillOptions, observer: &mut dyn TrainObserver) -> Result<RunOutcome> {
    let dataset = load_dataset(cfg)?;
    let part = load_partition(cfg, &dataset)?;
    let spec = cfg.student_spec()?;
    let schedule = cfg.stage_schedule(&spec)?;
    let assignment = teacher_assignment(cfg)?;
    if let Some(missing) = assignment.per_stage.values().find(|t| !t.checkpoint.exists()) {
        return Err(Error::MissingArtifact {
            path: missing.checkpoint.clone(),
            hint: "run `train-teachers` first".into(),
        });
    }
    let teachers = TeacherSet::load(&assignment)?;
    let store = if cfg.teacher.cache_logits {
        Some(teacher_logit_store(cfg, &teachers, &dataset, &part)?)
    } else {
        None
    };
    let source = match &store {
        Some(s) => TeacherSource::Cached(s, &teachers),
        None => TeacherSource::Live(&teachers),
    };
    let settings = train_settings(cfg, opts);
    let ctx = DistillRun {
        spec: &spec,
        schedule: &schedule,
        dataset: &dataset,
        partition: &part,
        teachers: source,
        settings: &settings,
    };
    let outcome = run_education_distillation(ctx, observer)?;
    if matches!(outcome, RunOutcome::Completed(_)) {
        report(&cfg.run_dir())?;
    }
    Ok(outcome)
}

/// Loads a final or stage checkpoint into the model the config describes.
pub fn load_checkpoint_network(cfg: &RunConfig, path: &Path) -> Result<Network> {
    let spec = cfg.student_spec()?;
    let raw: serde_json::Value = read_json(path)?;
    let json_err = |e| Error::Json {
        path: path.into(),
        source: e,
    };
    let model = if raw.get("model").is_some() {
        serde_json::from_value::<RunCheckpoint>(raw).map_err(json_err)?.model
    } else {
        serde_json::from_value::<ModelCheckpoint>(raw).map_err(json_err)?
    };
    if model.stage == model.num_stages {
        return model.into_network(&spec);
    }
    let schedule = cfg.stage_schedule(&spec)?;
    let mut stage_model = assemble_stage_model(&spec, &schedule, model.stage, cfg.seed)?;
    stage_model.network_mut().load_state_dict(&model.state)?;
    Ok(stage_model.into_network())
}

/// Full-set and per-subset test top-1 of a checkpoint.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path) -> Result<Evaluation> {
    if !checkpoint.exists() {
        return Err(Error::MissingArtifact {
            path: checkpoint.into(),
            hint: "pass an existing checkpoint".into(),
        });
    }
    let net = load_checkpoint_network(cfg, checkpoint)?;
    let dataset = load_dataset(cfg)?;
    let part = load_partition(cfg, &dataset)?;
    evaluate_model(&net, &dataset, &part, SplitKind::Test)
}

/// Regenerates `report/` from the run's metrics log. Never touches the log.
pub fn report(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let log = run_dir.join(METRICS_FILE);
    if !log.exists() {
        return Err(Error::MissingArtifact {
            path: log,
            hint: "run `distill` first".into(),
        });
    }
    let records = read_log(&log)?;
    let summary = RunReport::from_log(&records)?;
    let matrix = forgetting_matrix(&records)?;
    render_report(&summary, &matrix, &records, &run_dir.join(REPORT_DIR))
}

/// Writes the post-override config into the run directory.
pub fn snapshot_config(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(CONFIG_SNAPSHOT);
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn write_error_marker(run_dir: &Path, err: &dyn std::fmt::Display) -> Result<()> {
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let path = run_dir.join(ERROR_MARKER);
    std::fs::write(&path, format!("{err}\n")).map_err(|e| Error::io(&path, e))
}

pub fn clear_error_marker(run_dir: &Path) -> Result<()> {
    let path = run_dir.join(ERROR_MARKER);
    match std::fs::remove_file(&path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(&path, e)),
        _ => Ok(()),
    }
}

/// Exclusive claim on a run directory, released on drop. A lock whose
/// owner process no longer exists is taken over.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

fn process_alive(pid: u32) -> bool {
    pid == std::process::id() || Path::new(&format!("/proc/{pid}")).exists()
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(LOCK_FILE);
        for _ in 0..2 {
            match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    use std::io::Write;
                    write!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let owner = std::fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    match owner {
                        Some(pid) if process_alive(pid) => return Err(Error::Locked { path, pid }),
                        _ => std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?,
                    }
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::Locked { path, pid: 0 })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Per-subset accuracies keyed by subset id, for printing.
pub fn format_evaluation(ev: &Evaluation) -> String {
    let mut s = format!("all\t{:.2}\n", ev.overall);
    let per: &BTreeMap<usize, f64> = &ev.per_subset;
    for (t, v) in per {
        let _ = writeln!(s, "subset {t}\t{v:.2}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Locked { .. })));
        drop(lock);
        let _again = RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn stale_lock_is_taken_over() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(LOCK_FILE), "4294967294").unwrap();
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn teacher_seeds_differ_per_subset() {
        assert_ne!(derive_seed(0, "teacher", 1), derive_seed(0, "teacher", 2));
        assert_eq!(derive_seed(7, "teacher", 1), derive_seed(7, "teacher", 1));
    }
}
