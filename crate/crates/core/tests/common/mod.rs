#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use edu_distill::config::RunConfig;
use edu_distill::model::StageModel;
use edu_distill::trainer::TrainObserver;

/// Nine Gaussian-blob classes, three class-disjoint subsets, a three-block
/// toy residual student and sixty epochs.
pub fn desk_config(out_dir: &Path, run_id: &str) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 1,
        ..RunConfig::default()
    };
    cfg.teacher.epochs = 30;
    cfg.schedule.advance_epochs = vec![20, 40];
    cfg.schedule.total_epochs = 60;
    cfg.schedule.eval_every = 1;
    cfg.schedule.checkpoint_every = 20;
    cfg.optimizer.init_lr = 0.02;
    cfg.optimizer.lr_milestones = vec![50];
    cfg.output.out_dir = out_dir.to_path_buf();
    cfg.output.run_id = run_id.into();
    cfg.output.deterministic = true;
    cfg
}

/// A few seconds end to end: small data, cheap teachers, twelve epochs.
pub fn tiny_config(out_dir: &Path, run_id: &str) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.num_classes = 6;
    cfg.dataset.train_per_class = 10;
    cfg.dataset.test_per_class = 5;
    cfg.teacher.preset = Some("resnet_toy".into());
    cfg.teacher.epochs = 4;
    cfg.schedule.advance_epochs = vec![4, 8];
    cfg.schedule.total_epochs = 12;
    cfg.schedule.eval_every = 2;
    cfg.schedule.checkpoint_every = 3;
    cfg.optimizer.batch_size = 16;
    cfg.optimizer.init_lr = 0.02;
    cfg.optimizer.lr_milestones = vec![10];
    cfg.output.out_dir = out_dir.to_path_buf();
    cfg.output.run_id = run_id.into();
    cfg.output.deterministic = true;
    cfg
}

/// Snapshots every frozen parameter and buffer when it first becomes frozen
/// and compares it bitwise at each later stage start and epoch end.
#[derive(Default)]
pub struct FreezeWatch {
    pub snapshots: BTreeMap<String, Vec<f64>>,
    pub per_stage: Vec<usize>,
    pub max_abs_diff: f64,
    pub comparisons: usize,
}

impl FreezeWatch {
    fn compare(&mut self, model: &StageModel) {
        let state = model.network().state_dict();
        for (name, snap) in &self.snapshots {
            let now = &state[name].data;
            let diff = snap.iter().zip(now).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if snap.len() != now.len() {
                self.max_abs_diff = f64::INFINITY;
            }
            self.max_abs_diff = self.max_abs_diff.max(diff);
            self.comparisons += 1;
        }
    }
}

impl TrainObserver for FreezeWatch {
    fn stage_started(&mut self, _epoch: usize, model: &StageModel) {
        self.compare(model);
        let state = model.network().state_dict();
        for name in model.frozen_state_ids() {
            self.snapshots.entry(name.clone()).or_insert_with(|| state[&name].data.clone());
        }
        self.per_stage.push(self.snapshots.len());
    }

    fn epoch_finished(&mut self, _epoch: usize, model: &StageModel) {
        self.compare(model);
    }
}
