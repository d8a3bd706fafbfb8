//! The staged distillation loop.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_json, write_json, ModelCheckpoint};
use crate::data::{Dataset, SplitKind};
use crate::error::{Error, Result};
use crate::loss::{ed_loss, DistillConfig, LogitBatch};
use crate::metrics::{MetricsLog, MetricsRecord, SubsetId, ADVANCE, LOSS, RESTORE, TOP1};
use crate::model::{advance_stage, assemble_stage_model, StageModel, StudentSpec};
use crate::optim::{lr_at, OptimizerConfig, Sgd};
use crate::partition::{active_union, SubDatasetPartition};
use crate::report::{evaluate, Evaluation, RunReport};
use crate::schedule::{AdvanceMode, StageSchedule};
use crate::teacher::TeacherSource;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Zeroes wall-clock fields so that logs depend only on seed and config.
    pub deterministic: bool,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub optimizer: OptimizerConfig,
    pub distill: DistillConfig,
    pub resume: bool,
    /// Stop cleanly after this epoch, leaving a checkpoint to resume from.
    pub stop_after_epoch: Option<usize>,
}

impl TrainSettings {
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }
}

/// Everything a run reads but never mutates.
#[derive(Debug, Clone, Copy)]
pub struct DistillRun<'a> {
    pub spec: &'a StudentSpec,
    pub schedule: &'a StageSchedule,
    pub dataset: &'a Dataset,
    pub partition: &'a SubDatasetPartition,
    pub teachers: TeacherSource<'a>,
    pub settings: &'a TrainSettings,
}

/// Tracks improvement of active-subset accuracy within a stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlateauTracker {
    pub best: Option<f64>,
    pub stale: usize,
}

impl PlateauTracker {
    pub fn observe(&mut self, accuracy: f64, delta: f64) {
        match self.best {
            Some(best) if accuracy < best + delta => self.stale += 1,
            _ => {
                self.best = Some(accuracy);
                self.stale = 0;
            }
        }
    }

    pub fn reset(&mut self) {
        *self = PlateauTracker::default();
    }
}

/// Whether the stage in effect should end before `epoch` is trained.
/// The scheduled advance epoch is always a hard ceiling.
pub fn advance_due(stage: usize, epoch: usize, schedule: &StageSchedule, plateau: &PlateauTracker) -> bool {
    if stage >= schedule.num_stages {
        return false;
    }
    if epoch >= schedule.stage_ceiling(stage) {
        return true;
    }
    match schedule.advance_mode {
        AdvanceMode::FixedEpoch => false,
        AdvanceMode::Plateau { patience, .. } => plateau.stale >= patience,
    }
}

#[derive(Debug)]
pub struct RunState {
    /// Next epoch to train.
    pub epoch: usize,
    pub model: StageModel,
    pub optimizer: Sgd,
    pub plateau: PlateauTracker,
    /// Epochs at which advances fired so far.
    pub advances: Vec<usize>,
}

impl RunState {
    pub fn stage(&self) -> usize {
        self.model.stage()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub run_id: String,
    pub model: ModelCheckpoint,
    pub next_epoch: usize,
    pub velocity: BTreeMap<String, Vec<f64>>,
    pub plateau: PlateauTracker,
    pub advances: Vec<usize>,
    /// Metrics records written when the checkpoint was taken.
    pub records: usize,
}

pub fn checkpoint_name(stage: usize, epoch: usize) -> String {
    format!("stage{stage}_epoch{epoch}.ckpt")
}

fn parse_checkpoint_name(name: &str) -> Option<(usize, usize)> {
    let rest = name.strip_prefix("stage")?.strip_suffix(".ckpt")?;
    let (stage, epoch) = rest.split_once("_epoch")?;
    Some((stage.parse().ok()?, epoch.parse().ok()?))
}

/// The stage checkpoint with the highest epoch in `run_dir`, if any.
pub fn newest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let entries = match std::fs::read_dir(run_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(run_dir, e)),
    };
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name();
        if let Some((_, epoch)) = name.to_str().and_then(parse_checkpoint_name) {
            if best.as_ref().is_none_or(|(e, _)| epoch > *e) {
                best = Some((epoch, entry.path()));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Hooks for inspecting the model while a run progresses.
pub trait TrainObserver {
    fn stage_started(&mut self, _epoch: usize, _model: &StageModel) {}
    fn epoch_finished(&mut self, _epoch: usize, _model: &StageModel) {}
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed(RunReport),
    Stopped { epoch: usize, checkpoint: PathBuf },
}

impl RunOutcome {
    pub fn report(self) -> Option<RunReport> {
        match self {
            RunOutcome::Completed(r) => Some(r),
            RunOutcome::Stopped { .. } => None,
        }
    }
}

struct Run<'a> {
    ctx: DistillRun<'a>,
    dir: PathBuf,
    log: MetricsLog,
    started: Instant,
}

impl Run<'_> {
    fn record(&mut self, epoch: usize, stage: usize, split: SplitKind, subset: SubsetId, metric: &str, value: f64) -> Result<()> {
        let wall_time = if self.ctx.settings.deterministic {
            0.0
        } else {
            self.started.elapsed().as_secs_f64()
        };
        self.log.append(MetricsRecord {
            run_id: self.ctx.settings.run_id.clone(),
            epoch,
            stage,
            split,
            subset_id: subset,
            metric: metric.to_string(),
            value,
            wall_time,
        })
    }

    fn save_checkpoint(&mut self, state: &RunState, path: &Path) -> Result<()> {
        self.log.flush()?;
        let ckpt = RunCheckpoint {
            run_id: self.ctx.settings.run_id.clone(),
            model: model_checkpoint(self.ctx.spec, &state.model),
            next_epoch: state.epoch,
            velocity: state.optimizer.velocity().clone(),
            plateau: state.plateau.clone(),
            advances: state.advances.clone(),
            records: self.log.len(),
        };
        write_json(path, &ckpt)
    }
}

fn model_checkpoint(spec: &StudentSpec, model: &StageModel) -> ModelCheckpoint {
    ModelCheckpoint {
        spec: spec.clone(),
        stage: model.stage(),
        num_stages: model.num_stages(),
        state: model.network().state_dict(),
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Applies a due advance: the next stage's model, a fresh optimizer over the
/// new trainable set, and the advance (plus restore) events in the log.
fn maybe_advance(run: &mut Run, state: &mut RunState, observer: &mut dyn TrainObserver) -> Result<bool> {
    let schedule = run.ctx.schedule;
    if !advance_due(state.stage(), state.epoch, schedule, &state.plateau) {
        return Ok(false);
    }
    state.model = advance_stage(state.model.clone(), run.ctx.spec, schedule)?;
    state.optimizer = Sgd::new(&run.ctx.settings.optimizer, state.model.network_mut());
    state.plateau.reset();
    state.advances.push(state.epoch);
    let stage = state.stage();
    run.record(state.epoch, stage, SplitKind::Train, SubsetId::All, ADVANCE, stage as f64)?;
    if state.model.is_final() {
        run.record(state.epoch, stage, SplitKind::Train, SubsetId::All, RESTORE, stage as f64)?;
    }
    observer.stage_started(state.epoch, &state.model);
    Ok(true)
}

fn log_evaluation(run: &mut Run, epoch: usize, stage: usize, ev: &Evaluation) -> Result<()> {
    run.record(epoch, stage, SplitKind::Test, SubsetId::All, TOP1, ev.overall)?;
    for (&t, &acc) in ev.per_subset.range(..=stage) {
        run.record(epoch, stage, SplitKind::Test, SubsetId::Subset(t), TOP1, acc)?;
    }
    Ok(())
}

/// Weighted accuracy over subsets `1..=stage`.
fn active_accuracy(ev: &Evaluation, stage: usize) -> f64 {
    let (mut hit, mut n) = (0.0, 0usize);
    for (t, acc) in ev.per_subset.range(..=stage) {
        hit += acc * ev.subset_sizes[t] as f64;
        n += ev.subset_sizes[t];
    }
    hit / n as f64
}

/// Trains one epoch over the active union and appends its loss records.
fn train_epoch(run: &mut Run, state: &mut RunState) -> Result<()> {
    let ctx = run.ctx;
    let stage = state.stage();
    let epoch = state.epoch;
    let split = &ctx.dataset.train;
    let union = active_union(split.labels(), ctx.partition, stage)?;
    let registered = ctx.teachers.registered();
    let lr = lr_at(epoch, &ctx.settings.optimizer);
    let mut rng = epoch_rng(ctx.settings.seed, epoch);
    let mut total = 0.0;
    let mut rows = 0usize;
    let mut per_subset: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (step, batch) in union.batches(ctx.settings.optimizer.batch_size, &mut rng).into_iter().enumerate() {
        let (ids, subsets): (Vec<usize>, Vec<usize>) = batch.into_iter().unzip();
        let x = split.batch(&ids, &ctx.dataset.input);
        let teacher = ctx.teachers.logits(&x, &ids, &subsets)?;
        let net = state.model.network_mut();
        net.zero_grad();
        let student = net.forward_train(&x)?;
        let labels = ids.iter().map(|&i| split.labels()[i]).collect();
        let diverged = !student.is_finite();
        let batch = LogitBatch::new(student, teacher, labels, subsets)?;
        let loss = if diverged {
            None
        } else {
            Some(ed_loss(&batch, &registered, &ctx.settings.distill)?)
        };
        let Some(loss) = loss.filter(|l| l.total.is_finite() && l.grad.is_finite()) else {
            let path = run.dir.join(format!("diagnostic_stage{stage}_epoch{epoch}_step{step}.ckpt"));
            run.save_checkpoint(state, &path)?;
            return Err(Error::NonFiniteLoss {
                stage,
                epoch,
                step,
                checkpoint: path,
            });
        };
        let net = state.model.network_mut();
        net.backward(&loss.grad);
        state.optimizer.step(net, lr)?;
        total += loss.total * batch.len() as f64;
        rows += batch.len();
        for (t, s) in &loss.per_subset {
            let e = per_subset.entry(*t).or_default();
            e.0 += s.loss * s.rows as f64;
            e.1 += s.rows;
        }
    }
    run.record(epoch, stage, SplitKind::Train, SubsetId::All, LOSS, total / rows as f64)?;
    for (t, (sum, n)) in per_subset {
        run.record(epoch, stage, SplitKind::Train, SubsetId::Subset(t), LOSS, sum / n as f64)?;
    }
    Ok(())
}

/// Runs epochs of the current stage until its end (or the requested stop).
/// Returns `false` if the run was stopped early.
fn train_stage(run: &mut Run, state: &mut RunState, observer: &mut dyn TrainObserver) -> Result<bool> {
    let ctx = run.ctx;
    let schedule = ctx.schedule;
    let settings = ctx.settings;
    loop {
        let epoch = state.epoch;
        let stage = state.stage();
        train_epoch(run, state).map_err(|e| e.at(stage, epoch))?;
        let last_of_run = epoch + 1 == schedule.total_epochs;
        let ceiling_end = stage < schedule.num_stages && epoch + 1 >= schedule.stage_ceiling(stage);
        let plateau_mode = matches!(schedule.advance_mode, AdvanceMode::Plateau { .. });
        let cadence = (epoch + 1) % settings.eval_every.max(1) == 0;
        if cadence || last_of_run || ceiling_end || plateau_mode {
            let ev = evaluate(state.model.network(), ctx.dataset, ctx.partition, SplitKind::Test)
                .map_err(|e| e.at(stage, epoch))?;
            if let AdvanceMode::Plateau { delta, .. } = schedule.advance_mode {
                state.plateau.observe(active_accuracy(&ev, stage), delta);
            }
            log_evaluation(run, epoch, stage, &ev)?;
        }
        state.epoch += 1;
        observer.epoch_finished(epoch, &state.model);
        let stage_over = last_of_run || advance_due(stage, state.epoch, schedule, &state.plateau);
        let periodic = (epoch + 1) % settings.checkpoint_every.max(1) == 0;
        let stopping = settings.stop_after_epoch == Some(epoch);
        if (stage_over || periodic || stopping) && !last_of_run {
            let path = run.dir.join(checkpoint_name(stage, epoch));
            run.save_checkpoint(state, &path)?;
        }
        if stopping && !last_of_run {
            return Ok(false);
        }
        if stage_over {
            run.log.flush()?;
            return Ok(true);
        }
    }
}

fn fresh_state(ctx: &DistillRun) -> Result<RunState> {
    let mut model = assemble_stage_model(ctx.spec, ctx.schedule, 1, ctx.settings.seed)?;
    let optimizer = Sgd::new(&ctx.settings.optimizer, model.network_mut());
    Ok(RunState {
        epoch: 0,
        model,
        optimizer,
        plateau: PlateauTracker::default(),
        advances: Vec::new(),
    })
}

fn resumed_state(ctx: &DistillRun, ckpt: RunCheckpoint) -> Result<RunState> {
    if ckpt.run_id != ctx.settings.run_id || ckpt.model.spec != *ctx.spec {
        return Err(Error::Config("checkpoint belongs to a different run or student".into()));
    }
    let mut model = assemble_stage_model(ctx.spec, ctx.schedule, ckpt.model.stage, ctx.settings.seed)?;
    model.network_mut().load_state_dict(&ckpt.model.state)?;
    let trainable = model.trainable_param_ids();
    if !ckpt.velocity.keys().eq(trainable.iter()) {
        return Err(Error::Contract("checkpoint optimizer state does not match the trainable set".into()));
    }
    Ok(RunState {
        epoch: ckpt.next_epoch,
        model,
        optimizer: Sgd::from_state(&ctx.settings.optimizer, ckpt.velocity),
        plateau: ckpt.plateau,
        advances: ckpt.advances,
    })
}

/// Removes artifacts a previous run under the same id left behind.
fn clear_run_dir(dir: &Path) -> Result<()> {
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let owned = name == METRICS_FILE
            || name == FINAL_CHECKPOINT
            || parse_checkpoint_name(name).is_some()
            || (name.starts_with("diagnostic_") && name.ends_with(".ckpt"));
        if owned {
            std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn check_inputs(ctx: &DistillRun) -> Result<()> {
    ctx.spec.validate()?;
    ctx.schedule.validate(ctx.spec)?;
    ctx.settings.distill.validate()?;
    ctx.settings.optimizer.validate(ctx.schedule.total_epochs)?;
    if ctx.partition.num_subsets() != ctx.schedule.num_stages {
        return Err(Error::Config(format!(
            "partition has {} subsets but the schedule has {} stages",
            ctx.partition.num_subsets(),
            ctx.schedule.num_stages
        )));
    }
    if ctx.spec.num_classes != ctx.dataset.num_classes || ctx.spec.input != ctx.dataset.input {
        return Err(Error::Config("student input or class count does not match the dataset".into()));
    }
    let registered = ctx.teachers.registered();
    if let Some(t) = (1..=ctx.schedule.num_stages).find(|t| !registered.contains(t)) {
        return Err(Error::MissingTeacher(t));
    }
    Ok(())
}

/// Trains stages `1..=T` with advances between them, writing checkpoints,
/// the metrics log and `final.ckpt` under `{out_dir}/{run_id}`.
pub fn run_education_distillation(ctx: DistillRun, observer: &mut dyn TrainObserver) -> Result<RunOutcome> {
    check_inputs(&ctx)?;
    let dir = ctx.settings.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let log_path = dir.join(METRICS_FILE);
    let (mut state, log) = match newest_checkpoint(&dir)? {
        Some(path) if ctx.settings.resume => {
            let ckpt: RunCheckpoint = read_json(&path)?;
            let keep = ckpt.records;
            (resumed_state(&ctx, ckpt)?, MetricsLog::resume(&log_path, keep)?)
        }
        _ => {
            if ctx.settings.resume && dir.join(FINAL_CHECKPOINT).exists() {
                return Err(Error::Config(format!("run {} is already complete", ctx.settings.run_id)));
            }
            clear_run_dir(&dir)?;
            (fresh_state(&ctx)?, MetricsLog::create(&log_path)?)
        }
    };
    let mut run = Run {
        ctx,
        dir,
        log,
        started: Instant::now(),
    };
    if state.epoch == 0 {
        observer.stage_started(0, &state.model);
    }
    while state.epoch < ctx.schedule.total_epochs {
        let (stage, epoch) = (state.stage(), state.epoch);
        maybe_advance(&mut run, &mut state, observer).map_err(|e| e.at(stage, epoch))?;
        if !train_stage(&mut run, &mut state, observer)? {
            let epoch = state.epoch - 1;
            return Ok(RunOutcome::Stopped {
                epoch,
                checkpoint: run.dir.join(checkpoint_name(state.stage(), epoch)),
            });
        }
    }
    run.log.flush()?;
    if !state.model.is_final() {
        return Err(Error::Contract(format!(
            "run ended at stage {} of {}",
            state.stage(),
            ctx.schedule.num_stages
        )));
    }
    model_checkpoint(ctx.spec, &state.model).save(&run.dir.join(FINAL_CHECKPOINT))?;
    RunReport::from_log(run.log.records()).map(RunOutcome::Completed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticConfig;
    use crate::model::presets;
    use crate::model::reference_network;
    use crate::partition::PartitionMode;
    use crate::teacher::{TeacherMode, TeacherSet};

    fn schedule(mode: AdvanceMode) -> StageSchedule {
        let spec = presets::resnet_toy(3, 8, 6);
        StageSchedule {
            advance_mode: mode,
            ..StageSchedule::fixed(&spec, 3, vec![50, 80], 240).unwrap()
        }
    }

    #[test]
    fn fixed_advances_fire_exactly_on_schedule() {
        let s = schedule(AdvanceMode::FixedEpoch);
        let p = PlateauTracker::default();
        assert!(!advance_due(1, 49, &s, &p));
        assert!(advance_due(1, 50, &s, &p));
        assert!(!advance_due(2, 79, &s, &p));
        assert!(advance_due(2, 80, &s, &p));
        assert!(!advance_due(3, 239, &s, &p));
    }

    #[test]
    fn plateau_advances_early_but_never_past_the_ceiling() {
        let s = schedule(AdvanceMode::Plateau { delta: 0.1, patience: 3 });
        let mut p = PlateauTracker::default();
        let mut fired = None;
        for (epoch, acc) in [10.0, 20.0, 20.05, 20.08, 20.09].into_iter().enumerate() {
            p.observe(acc, 0.1);
            if advance_due(1, epoch + 1, &s, &p) {
                fired = Some(epoch + 1);
                break;
            }
        }
        assert_eq!(fired, Some(5));

        let mut p = PlateauTracker::default();
        let mut fired = None;
        for epoch in 0..100 {
            p.observe(epoch as f64, 0.1);
            if advance_due(1, epoch + 1, &s, &p) {
                fired = Some(epoch + 1);
                break;
            }
        }
        assert_eq!(fired, Some(50));
    }

    #[test]
    fn checkpoint_names_parse_back() {
        assert_eq!(parse_checkpoint_name(&checkpoint_name(2, 17)), Some((2, 17)));
        assert_eq!(parse_checkpoint_name("final.ckpt"), None);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic_checkpoint() {
        let data = Dataset::synthetic(&SyntheticConfig {
            num_classes: 3,
            train_per_class: 4,
            test_per_class: 2,
            ..Default::default()
        })
        .unwrap();
        let spec = presets::vgg_toy(3, 8, 3);
        let sched = StageSchedule::fixed(&spec, 1, vec![], 3).unwrap();
        let part = SubDatasetPartition::whole(data.train.labels(), PartitionMode::ClassDisjoint).unwrap();
        let teachers = TeacherSet::new(TeacherMode::SharedPretrained, vec![reference_network(&spec, 9).unwrap()], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let settings = TrainSettings {
            run_id: "nan".into(),
            out_dir: dir.path().into(),
            seed: 0,
            deterministic: true,
            eval_every: 1,
            checkpoint_every: 1,
            optimizer: OptimizerConfig {
                init_lr: 1e300,
                lr_milestones: vec![],
                ..Default::default()
            },
            distill: DistillConfig::default(),
            resume: false,
            stop_after_epoch: None,
        };
        let ctx = DistillRun {
            spec: &spec,
            schedule: &sched,
            dataset: &data,
            partition: &part,
            teachers: TeacherSource::Live(&teachers),
            settings: &settings,
        };
        let err = run_education_distillation(ctx, &mut NoObserver).unwrap_err();
        let Error::AtEpoch { source, .. } = err else { panic!("{err}") };
        let Error::NonFiniteLoss { checkpoint, .. } = *source else { panic!("{source}") };
        assert!(checkpoint.exists());
        // Diverged weights serialise as null, so read it as plain JSON.
        let dump: serde_json::Value = read_json(&checkpoint).unwrap();
        assert_eq!(dump["run_id"], "nan");
    }
}
