use std::collections::BTreeSet;

use proptest::prelude::*;

use edu_distill::data::SplitKind;
use edu_distill::loss::{softened_kl, softmax};
use edu_distill::model::presets;
use edu_distill::optim::{lr_at, OptimizerConfig};
use edu_distill::partition::{largest_remainder, partition, PartitionMode};
use edu_distill::schedule::StageSchedule;

fn logits(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-20.0f64..20.0, len)
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(
        (z, g) in (2usize..12).prop_flat_map(|c| (logits(c), logits(c))),
        tau in 0.5f64..8.0,
    ) {
        prop_assert!(softened_kl(&z, &g, tau).unwrap() >= 0.0);
        prop_assert_eq!(softened_kl(&z, &z, tau).unwrap(), 0.0);
    }

    #[test]
    fn softmax_ignores_constant_shift(z in logits(7), shift in -50.0f64..50.0, tau in 0.5f64..8.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let (a, b) = (softmax(&z, tau), softmax(&shifted, tau));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn largest_remainder_sums_to_total(total in 0usize..500, ratios in prop::collection::vec(0.01f64..10.0, 1..8)) {
        let sizes = largest_remainder(total, &ratios).unwrap();
        prop_assert_eq!(sizes.iter().sum::<usize>(), total);
        let sum: f64 = ratios.iter().sum();
        for (s, r) in sizes.iter().zip(&ratios) {
            let quota = total as f64 * r / sum;
            prop_assert!((*s as f64 - quota).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn class_partition_covers_every_sample_once(
        classes in 3usize..30,
        per_class in 1usize..4,
        t in 2usize..4,
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
        let p = partition(&labels, t, &vec![1.0; t], PartitionMode::ClassDisjoint, seed).unwrap();
        let ids = p.assign(&labels, SplitKind::Train).unwrap();
        prop_assert!(ids.iter().all(|&s| (1..=t).contains(&s)));
        // Every class lands in exactly one subset.
        for c in 0..classes {
            let owners: BTreeSet<usize> = labels.iter().zip(&ids).filter(|(l, _)| **l == c).map(|(_, s)| *s).collect();
            prop_assert_eq!(owners.len(), 1);
        }
        let again = partition(&labels, t, &vec![1.0; t], PartitionMode::ClassDisjoint, seed).unwrap();
        prop_assert_eq!(p.to_text(), again.to_text());
    }

    #[test]
    fn lr_never_increases(init in 1e-4f64..1.0, mut milestones in prop::collection::vec(1usize..300, 0..5)) {
        milestones.sort_unstable();
        let cfg = OptimizerConfig { init_lr: init, lr_milestones: milestones, ..OptimizerConfig::default() };
        let mut prev = lr_at(0, &cfg);
        prop_assert_eq!(prev, init);
        for epoch in 1..320 {
            let lr = lr_at(epoch, &cfg);
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn stage_at_steps_once_per_advance(a in 1usize..50, gap in 1usize..50, tail in 1usize..50) {
        let spec = presets::resnet_toy(3, 8, 9);
        let b = a + gap;
        let schedule = StageSchedule::fixed(&spec, 3, vec![a, b], b + tail).unwrap();
        for epoch in 0..b + tail {
            let expected = if epoch < a { 1 } else if epoch < b { 2 } else { 3 };
            prop_assert_eq!(schedule.stage_at(epoch), expected);
        }
    }
}
