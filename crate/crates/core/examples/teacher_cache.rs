//! Trains one small teacher per sub-dataset, caches their logits and checks
//! the cache against live inference.

use edu_distill::data::{Dataset, SplitKind, SyntheticConfig};
use edu_distill::model::presets;
use edu_distill::optim::OptimizerConfig;
use edu_distill::partition::{partition, PartitionMode};
use edu_distill::teacher::{cache_teacher_outputs, train_teacher, TeacherMode, TeacherSet, TeacherTraining};

fn main() -> edu_distill::Result<()> {
    let data = Dataset::synthetic(&SyntheticConfig {
        num_classes: 6,
        train_per_class: 20,
        test_per_class: 10,
        ..SyntheticConfig::default()
    })?;
    let part = partition(data.train.labels(), 3, &[1.0; 3], PartitionMode::ClassDisjoint, 7)?;
    let arch = presets::resnet_toy(3, 8, 6);
    let mut networks = Vec::new();
    for t in 1..=3 {
        let idx = part.subset_indices(data.train.labels(), t, SplitKind::Train)?;
        let settings = TeacherTraining {
            epochs: 8,
            lr_milestones: vec![],
            optimizer: OptimizerConfig::default(),
            seed: t as u64,
        };
        let fit = train_teacher(&arch, &data.train, &idx, &settings)?;
        println!("teacher {t}: {} samples, train top-1 {:.1}%", idx.len(), fit.train_accuracy);
        networks.push(fit.network);
    }
    let teachers = TeacherSet::new(TeacherMode::PerSubsetTrained, networks, 3)?;
    let store = cache_teacher_outputs(&teachers, &data, &part)?;

    let ids: Vec<usize> = (0..data.train.len()).collect();
    let subset_ids = part.assign(data.train.labels(), SplitKind::Train)?;
    let live = teachers.teacher_logits(&data.train.batch(&ids, &data.input), &subset_ids)?;
    let cached = store.batch(&ids)?;
    println!("cached {} rows, max |live - cached| = {:.2e}, hit rate {:.0}%", store.len(), live.max_abs_diff(&cached), 100.0 * store.hit_rate());
    Ok(())
}
