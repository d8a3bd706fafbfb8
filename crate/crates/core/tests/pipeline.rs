mod common;

use std::collections::BTreeSet;

use edu_distill::checkpoint::ModelCheckpoint;
use edu_distill::data::SplitKind;
use edu_distill::metrics::{read_log, SubsetId, ADVANCE, RESTORE, TOP1};
use edu_distill::model::{advance_stage, assemble_stage_model, presets, reference_network};
use edu_distill::optim::{OptimizerConfig, Sgd};
use edu_distill::pipeline::{self, DistillOptions};
use edu_distill::report::{batches, top1_accuracy};
use edu_distill::schedule::StageSchedule;
use edu_distill::teacher::{cache_teacher_outputs, train_teacher, TeacherSet, TeacherSource, TeacherTraining};
use edu_distill::trainer::{RunOutcome, FINAL_CHECKPOINT, METRICS_FILE};

use common::{desk_config, tiny_config, FreezeWatch};

#[test]
fn staged_run_advances_twice_restores_once_and_keeps_frozen_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "staged");
    let data = pipeline::load_dataset(&cfg).unwrap();
    pipeline::write_partition(&cfg, &data).unwrap();
    pipeline::train_teachers(&cfg).unwrap();
    let mut watch = FreezeWatch::default();
    let outcome = pipeline::distill(&cfg, &DistillOptions::default(), &mut watch).unwrap();
    assert!(matches!(outcome, RunOutcome::Completed(_)));

    let records = read_log(&cfg.run_dir().join(METRICS_FILE)).unwrap();
    let advances: Vec<_> = records.iter().filter(|r| r.metric == ADVANCE).map(|r| r.epoch).collect();
    let restores: Vec<_> = records.iter().filter(|r| r.metric == RESTORE).map(|r| r.epoch).collect();
    assert_eq!(advances, vec![4, 8]);
    assert_eq!(restores, vec![8]);

    // Evaluations only report subsets the current stage has seen.
    for r in records.iter().filter(|r| r.metric == TOP1) {
        if let SubsetId::Subset(t) = r.subset_id {
            assert!(t <= r.stage, "subset {t} reported at stage {}", r.stage);
        }
    }

    assert_eq!(watch.max_abs_diff, 0.0);
    assert!(watch.comparisons > 0);

    let spec = cfg.student_spec().unwrap();
    let net = ModelCheckpoint::load(&cfg.run_dir().join(FINAL_CHECKPOINT))
        .unwrap()
        .into_network(&spec)
        .unwrap();
    assert_eq!(net.fingerprint(), reference_network(&spec, 0).unwrap().fingerprint());
}

#[test]
fn optimizer_tracks_exactly_the_trainable_set_after_each_advance() {
    let spec = presets::resnet_toy(3, 8, 9);
    let schedule = StageSchedule::fixed(&spec, 3, vec![2, 4], 6).unwrap();
    let mut model = assemble_stage_model(&spec, &schedule, 1, 3).unwrap();
    let cfg = OptimizerConfig::default();
    loop {
        let trainable = model.trainable_param_ids();
        let sgd = Sgd::new(&cfg, model.network_mut());
        let ids: BTreeSet<String> = sgd.param_ids().cloned().collect();
        assert_eq!(ids, trainable, "stage {}", model.stage());
        assert!(ids.is_disjoint(model.frozen_param_ids()));
        if model.is_final() {
            break;
        }
        model = advance_stage(model, &spec, &schedule).unwrap();
    }
}

#[test]
fn subset_teacher_learns_its_classes_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = desk_config(dir.path(), "teacher");
    let data = pipeline::load_dataset(&cfg).unwrap();
    let part = pipeline::build_partition(&cfg, &data).unwrap();
    let own = part.subset_indices(data.train.labels(), 1, SplitKind::Train).unwrap();
    let settings = TeacherTraining {
        epochs: 15,
        lr_milestones: vec![],
        optimizer: cfg.optimizer.clone(),
        seed: 5,
    };
    let arch = presets::resnet_toy(3, 8, 9);
    let fit = train_teacher(&arch, &data.train, &own, &settings).unwrap();
    assert!(fit.train_accuracy > 95.0, "train accuracy {}", fit.train_accuracy);

    let own_test = part.subset_indices(data.test.labels(), 1, SplitKind::Test).unwrap();
    let other_test: Vec<usize> = (0..data.test.len()).filter(|i| !own_test.contains(i)).collect();
    let on_own = top1_accuracy(&fit.network, batches(&data, SplitKind::Test, &own_test)).unwrap();
    let on_other = top1_accuracy(&fit.network, batches(&data, SplitKind::Test, &other_test)).unwrap();
    assert!(on_own > 95.0, "own-class test accuracy {on_own}");
    assert!(on_other < 5.0, "unseen-class accuracy {on_other}");

    let again = train_teacher(&arch, &data.train, &own, &settings).unwrap();
    assert_eq!(fit.network.state_hash(), again.network.state_hash());
}

#[test]
fn cached_logits_match_live_teachers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "cache");
    let data = pipeline::load_dataset(&cfg).unwrap();
    let (_, part) = pipeline::write_partition(&cfg, &data).unwrap();
    pipeline::train_teachers(&cfg).unwrap();
    let teachers = TeacherSet::load(&pipeline::teacher_assignment(&cfg).unwrap()).unwrap();
    let hashes = teachers.state_hashes();

    let store = pipeline::teacher_logit_store(&cfg, &teachers, &data, &part).unwrap();
    // A second call reads the file back instead of recomputing.
    let reloaded = pipeline::teacher_logit_store(&cfg, &teachers, &data, &part).unwrap();
    let fresh = cache_teacher_outputs(&teachers, &data, &part).unwrap();
    assert_eq!(reloaded.len(), fresh.len());

    let ids: Vec<usize> = (0..data.train.len()).collect();
    let subset_ids = part.assign(data.train.labels(), SplitKind::Train).unwrap();
    let x = data.train.batch(&ids, &data.input);
    let live = TeacherSource::Live(&teachers).logits(&x, &ids, &subset_ids).unwrap();
    store.reset_counters();
    let cached = TeacherSource::Cached(&store, &teachers).logits(&x, &ids, &subset_ids).unwrap();
    assert!(live.max_abs_diff(&cached) < 1e-5, "diff {}", live.max_abs_diff(&cached));
    assert_eq!(store.hit_rate(), 1.0);

    pipeline::distill(&cfg, &DistillOptions::default(), &mut edu_distill::trainer::NoObserver).unwrap();
    assert_eq!(teachers.state_hashes(), hashes);
    let on_disk = TeacherSet::load(&pipeline::teacher_assignment(&cfg).unwrap()).unwrap();
    assert_eq!(on_disk.state_hashes(), hashes);
}
