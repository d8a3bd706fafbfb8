//! The TOML run configuration. Every field has a default, so a minimal
//! document only needs to name the dataset and the student.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::DistillConfig;
use crate::model::{presets, InputShape, StudentSpec};
use crate::optim::OptimizerConfig;
use crate::partition::PartitionMode;
use crate::schedule::{AdvanceMode, StageSchedule};
use crate::teacher::TeacherMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub student: ModelSection,
    pub teacher: TeacherSection,
    pub partition: PartitionSection,
    pub schedule: ScheduleSection,
    pub loss: DistillConfig,
    pub optimizer: OptimizerConfig,
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetSection::default(),
            student: ModelSection {
                preset: Some("resnet_toy".into()),
                spec: None,
            },
            teacher: TeacherSection::default(),
            partition: PartitionSection::default(),
            schedule: ScheduleSection::default(),
            loss: DistillConfig::default(),
            optimizer: OptimizerConfig::default(),
            output: OutputSection::default(),
        }
    }
}

/// `name = "synthetic"` generates Gaussian-blob classes; any other name
/// reads `train_path` and `test_path` (one sample per line: label, then values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub name: String,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub noise: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            name: "synthetic".into(),
            train_path: None,
            test_path: None,
            num_classes: 9,
            channels: 3,
            height: 8,
            width: 8,
            train_per_class: 60,
            test_per_class: 40,
            separation: 1.0,
            noise: 1.0,
        }
    }
}

impl DatasetSection {
    pub fn input(&self) -> InputShape {
        InputShape {
            channels: self.channels,
            height: self.height,
            width: self.width,
        }
    }
}

/// Either a preset name or an inline spec.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub spec: Option<StudentSpec>,
}

impl ModelSection {
    pub fn resolve(&self, section: &str, dataset: &DatasetSection) -> Result<StudentSpec> {
        let spec = match (&self.preset, &self.spec) {
            (Some(name), None) => {
                if dataset.height != dataset.width {
                    return Err(Error::Config(format!(
                        "{section}.preset needs square inputs, dataset is {}x{}",
                        dataset.height, dataset.width
                    )));
                }
                presets::by_name(name, dataset.channels, dataset.height, dataset.num_classes).ok_or_else(|| {
                    Error::Config(format!(
                        "{section}.preset {name:?} is not one of {:?}",
                        presets::NAMES
                    ))
                })?
            }
            (None, Some(spec)) => spec.clone(),
            _ => {
                return Err(Error::Config(format!(
                    "{section} needs exactly one of `preset` or `spec`"
                )))
            }
        };
        spec.validate()?;
        if spec.input != dataset.input() || spec.num_classes != dataset.num_classes {
            return Err(Error::Config(format!(
                "{section}.spec expects {:?} inputs and {} classes, dataset provides {:?} and {}",
                spec.input,
                spec.num_classes,
                dataset.input(),
                dataset.num_classes
            )));
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub mode: TeacherMode,
    pub preset: Option<String>,
    pub spec: Option<StudentSpec>,
    pub epochs: usize,
    pub lr_milestones: Vec<usize>,
    /// Existing checkpoints to use instead of training: one per stage, or a
    /// single one in shared mode.
    pub checkpoints: Vec<PathBuf>,
    /// Serve teacher logits from an on-disk store instead of live forwards.
    pub cache_logits: bool,
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            mode: TeacherMode::PerSubsetTrained,
            preset: Some("resnet_teacher".into()),
            spec: None,
            epochs: 30,
            lr_milestones: Vec::new(),
            checkpoints: Vec::new(),
            cache_logits: true,
        }
    }
}

impl TeacherSection {
    pub fn arch(&self, dataset: &DatasetSection) -> Result<StudentSpec> {
        ModelSection {
            preset: self.preset.clone(),
            spec: self.spec.clone(),
        }
        .resolve("teacher", dataset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub num_stages: usize,
    /// Defaults to equal shares.
    pub ratios: Option<Vec<f64>>,
    pub mode: PartitionMode,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            num_stages: 3,
            ratios: None,
            mode: PartitionMode::ClassDisjoint,
            seed: None,
        }
    }
}

impl PartitionSection {
    pub fn ratios(&self) -> Vec<f64> {
        self.ratios.clone().unwrap_or_else(|| vec![1.0; self.num_stages])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvanceModeName {
    FixedEpoch,
    Plateau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub advance_epochs: Vec<usize>,
    pub total_epochs: usize,
    pub advance_mode: AdvanceModeName,
    pub plateau_delta: f64,
    pub plateau_patience: usize,
    /// Defaults to surplus blocks in stage 1, then one block per stage.
    pub block_allocation: Option<Vec<Vec<String>>>,
    pub fine_tune_all: bool,
    pub eval_every: usize,
    pub checkpoint_every: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            advance_epochs: vec![50, 80],
            total_epochs: 240,
            advance_mode: AdvanceModeName::FixedEpoch,
            plateau_delta: 0.1,
            plateau_patience: 10,
            block_allocation: None,
            fine_tune_all: false,
            eval_every: 10,
            checkpoint_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub out_dir: PathBuf,
    pub run_id: String,
    pub deterministic: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            out_dir: PathBuf::from("runs"),
            run_id: "ed".into(),
            deterministic: false,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.out_dir.join(&self.output.run_id)
    }

    pub fn partition_seed(&self) -> u64 {
        self.partition.seed.unwrap_or(self.seed)
    }

    pub fn student_spec(&self) -> Result<StudentSpec> {
        self.student.resolve("student", &self.dataset)
    }

    pub fn stage_schedule(&self, spec: &StudentSpec) -> Result<StageSchedule> {
        let s = &self.schedule;
        let t = self.partition.num_stages;
        let block_allocation = match &s.block_allocation {
            Some(a) => a.clone(),
            None => StageSchedule::default_allocation(spec, t)
                .map_err(|_| Error::Config(format!(
                    "partition.num_stages = {t} exceeds the {} blocks of student {}",
                    spec.blocks.len(),
                    spec.name
                )))?,
        };
        let schedule = StageSchedule {
            num_stages: t,
            block_allocation,
            advance_epochs: s.advance_epochs.clone(),
            total_epochs: s.total_epochs,
            advance_mode: match s.advance_mode {
                AdvanceModeName::FixedEpoch => AdvanceMode::FixedEpoch,
                AdvanceModeName::Plateau => AdvanceMode::Plateau {
                    delta: s.plateau_delta,
                    patience: s.plateau_patience,
                },
            },
            fine_tune_all: s.fine_tune_all,
        };
        schedule
            .validate(spec)
            .map_err(|e| Error::Config(format!("schedule: {e}")))?;
        Ok(schedule)
    }

    /// Checks every section and all cross-section references.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        if d.num_classes < 2 || d.channels == 0 || d.height == 0 || d.width == 0 {
            return Err(Error::Config(
                "dataset.num_classes must be >= 2 and dataset dimensions positive".into(),
            ));
        }
        if d.name == "synthetic" {
            if d.train_per_class == 0 || d.test_per_class == 0 {
                return Err(Error::Config("dataset.train_per_class and test_per_class must be positive".into()));
            }
        } else if d.train_path.is_none() || d.test_path.is_none() {
            return Err(Error::Config(format!(
                "dataset.name = {:?} needs dataset.train_path and dataset.test_path",
                d.name
            )));
        }
        let p = &self.partition;
        if p.num_stages == 0 {
            return Err(Error::Config("partition.num_stages must be at least 1".into()));
        }
        if p.mode == PartitionMode::ClassDisjoint && p.num_stages > d.num_classes {
            return Err(Error::Config(format!(
                "partition.num_stages = {} exceeds dataset.num_classes = {}",
                p.num_stages, d.num_classes
            )));
        }
        let ratios = p.ratios();
        if ratios.len() != p.num_stages || ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config(format!(
                "partition.ratios needs {} positive entries, got {ratios:?}",
                p.num_stages
            )));
        }
        if self.schedule.advance_epochs.len() + 1 != p.num_stages {
            return Err(Error::Config(format!(
                "schedule.advance_epochs has {} entries, partition.num_stages = {} needs {}",
                self.schedule.advance_epochs.len(),
                p.num_stages,
                p.num_stages.saturating_sub(1)
            )));
        }
        if self.schedule.eval_every == 0 || self.schedule.checkpoint_every == 0 {
            return Err(Error::Config("schedule.eval_every and checkpoint_every must be positive".into()));
        }
        let spec = self.student_spec()?;
        self.stage_schedule(&spec)?;
        self.loss.validate()?;
        self.optimizer
            .validate(self.schedule.total_epochs)
            .map_err(|e| Error::Config(format!("optimizer: {e}")))?;
        let t = &self.teacher;
        t.arch(d)?;
        let expected = match t.mode {
            TeacherMode::PerSubsetTrained => p.num_stages,
            TeacherMode::SharedPretrained => 1,
        };
        if !t.checkpoints.is_empty() && t.checkpoints.len() != expected {
            return Err(Error::Config(format!(
                "teacher.checkpoints lists {} files, {:?} mode with partition.num_stages = {} needs {expected}",
                t.checkpoints.len(),
                t.mode,
                p.num_stages
            )));
        }
        if t.checkpoints.is_empty() && t.epochs == 0 {
            return Err(Error::Config("teacher.epochs must be positive when teachers are trained".into()));
        }
        if t.lr_milestones.iter().any(|&m| m == 0 || m >= t.epochs.max(1)) {
            return Err(Error::Config("teacher.lr_milestones must lie inside 1..teacher.epochs".into()));
        }
        let id = &self.output.run_id;
        if id.is_empty() || id.contains(['/', '\\']) || id.starts_with('.') {
            return Err(Error::Config(format!("output.run_id {id:?} must be a plain directory name")));
        }
        Ok(())
    }

    /// The single-stage vanilla-KD counterpart: one subset holding all data,
    /// one shared teacher, and its own run id.
    pub fn kd_baseline(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.partition.num_stages = 1;
        cfg.partition.ratios = None;
        cfg.schedule.advance_epochs.clear();
        cfg.schedule.block_allocation = None;
        cfg.teacher.mode = TeacherMode::SharedPretrained;
        if cfg.teacher.checkpoints.len() > 1 {
            cfg.teacher.checkpoints.clear();
        }
        cfg.output.run_id = format!("{}-kd", self.output.run_id);
        cfg
    }
}
