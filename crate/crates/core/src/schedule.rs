//! Stage timetable: which blocks join at each stage and when stages advance.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StudentSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvanceMode {
    /// Advance exactly at the listed epochs.
    FixedEpoch,
    /// Advance once active-subset accuracy stops improving by `delta` points
    /// for `patience` evaluated epochs; the listed epochs remain a hard ceiling.
    Plateau { delta: f64, patience: usize },
}

impl AdvanceMode {
    pub const DEFAULT_PLATEAU: AdvanceMode = AdvanceMode::Plateau {
        delta: 0.1,
        patience: 10,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    pub num_stages: usize,
    /// Block ids introduced at each stage, in network order.
    pub block_allocation: Vec<Vec<String>>,
    /// `num_stages - 1` epochs; stage `t + 1` starts at `advance_epochs[t - 1]`.
    pub advance_epochs: Vec<usize>,
    pub total_epochs: usize,
    pub advance_mode: AdvanceMode,
    /// Unfreeze every parameter once the final architecture is restored.
    pub fine_tune_all: bool,
}

impl StageSchedule {
    /// Puts every surplus block into stage 1, then one block per later stage:
    /// 4 blocks over 3 stages gives `{1, 2}, {3}, {4}`.
    pub fn default_allocation(spec: &StudentSpec, num_stages: usize) -> Result<Vec<Vec<String>>> {
        let ids: Vec<String> = spec.blocks.iter().map(|b| b.id.clone()).collect();
        if num_stages == 0 || num_stages > ids.len() {
            return Err(Error::InvalidSchedule(format!(
                "{num_stages} stages cannot be allocated over {} blocks",
                ids.len()
            )));
        }
        let first = ids.len() - num_stages + 1;
        let mut alloc = vec![ids[..first].to_vec()];
        alloc.extend(ids[first..].iter().map(|id| vec![id.clone()]));
        Ok(alloc)
    }

    pub fn fixed(spec: &StudentSpec, num_stages: usize, advance_epochs: Vec<usize>, total_epochs: usize) -> Result<Self> {
        let schedule = StageSchedule {
            num_stages,
            block_allocation: Self::default_allocation(spec, num_stages)?,
            advance_epochs,
            total_epochs,
            advance_mode: AdvanceMode::FixedEpoch,
            fine_tune_all: false,
        };
        schedule.validate(spec)?;
        Ok(schedule)
    }

    pub fn validate(&self, spec: &StudentSpec) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSchedule(msg));
        if self.num_stages == 0 {
            return bad("at least one stage is required".into());
        }
        if self.block_allocation.len() != self.num_stages {
            return bad(format!(
                "block_allocation has {} entries for {} stages",
                self.block_allocation.len(),
                self.num_stages
            ));
        }
        if let Some(i) = self.block_allocation.iter().position(Vec::is_empty) {
            return bad(format!("stage {} allocates no blocks", i + 1));
        }
        let flat: Vec<&String> = self.block_allocation.iter().flatten().collect();
        let unique: BTreeSet<&String> = flat.iter().copied().collect();
        if unique.len() != flat.len() {
            return bad("a block is allocated to more than one stage".into());
        }
        let spec_ids: Vec<&String> = spec.blocks.iter().map(|b| &b.id).collect();
        if let Some(missing) = spec_ids.iter().find(|id| !unique.contains(*id)) {
            return bad(format!("block {missing} is not allocated to any stage"));
        }
        if flat != spec_ids {
            return bad("allocation must follow the network's block order".into());
        }
        if self.advance_epochs.len() + 1 != self.num_stages {
            return bad(format!(
                "{} stages need {} advance epochs, got {}",
                self.num_stages,
                self.num_stages - 1,
                self.advance_epochs.len()
            ));
        }
        if self.advance_epochs.first() == Some(&0) {
            return bad("the first advance epoch must be after epoch 0".into());
        }
        if self.advance_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("advance_epochs must be strictly increasing".into());
        }
        if self.advance_epochs.last().is_some_and(|&e| e >= self.total_epochs) {
            return bad("advance_epochs must be below total_epochs".into());
        }
        if let AdvanceMode::Plateau { delta, patience } = self.advance_mode {
            if !(delta >= 0.0) || patience == 0 {
                return bad("plateau mode needs delta >= 0 and patience >= 1".into());
            }
        }
        Ok(())
    }

    /// Stage (1-based) whose block list contains `block_id`.
    pub fn stage_of_block(&self, block_id: &str) -> Option<usize> {
        self.block_allocation
            .iter()
            .position(|ids| ids.iter().any(|id| id == block_id))
            .map(|i| i + 1)
    }

    pub fn blocks_for_stage(&self, stage: usize) -> &[String] {
        &self.block_allocation[stage - 1]
    }

    /// Stage in effect during `epoch` under fixed-epoch advancing.
    pub fn stage_at(&self, epoch: usize) -> usize {
        1 + self.advance_epochs.iter().filter(|&&e| e <= epoch).count()
    }

    /// Epoch at which `stage` must end at the latest (exclusive).
    pub fn stage_ceiling(&self, stage: usize) -> usize {
        self.advance_epochs
            .get(stage - 1)
            .copied()
            .unwrap_or(self.total_epochs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;

    #[test]
    fn default_allocation_front_loads_stage_one() {
        let spec = presets::resnet_toy4(3, 8, 10);
        let alloc = StageSchedule::default_allocation(&spec, 3).unwrap();
        assert_eq!(alloc, vec![vec!["b1".to_string(), "b2".into()], vec!["b3".into()], vec!["b4".into()]]);
    }

    #[test]
    fn stage_at_is_a_step_function() {
        let spec = presets::resnet_toy(3, 8, 10);
        let s = StageSchedule::fixed(&spec, 3, vec![50, 80], 240).unwrap();
        assert_eq!(s.stage_at(0), 1);
        assert_eq!(s.stage_at(49), 1);
        assert_eq!(s.stage_at(50), 2);
        assert_eq!(s.stage_at(79), 2);
        assert_eq!(s.stage_at(80), 3);
        assert_eq!(s.stage_at(239), 3);
        let stages: BTreeSet<usize> = (0..240).map(|e| s.stage_at(e)).collect();
        assert_eq!(stages.len(), 3);
    }

    #[test]
    fn rejects_bad_schedules() {
        let spec = presets::resnet_toy(3, 8, 10);
        assert!(StageSchedule::fixed(&spec, 3, vec![80, 50], 240).is_err());
        assert!(StageSchedule::fixed(&spec, 3, vec![50, 240], 240).is_err());
        assert!(StageSchedule::fixed(&spec, 3, vec![50], 240).is_err());
        assert!(StageSchedule::fixed(&spec, 4, vec![10, 20, 30], 240).is_err());
        let mut s = StageSchedule::fixed(&spec, 3, vec![50, 80], 240).unwrap();
        s.block_allocation = vec![vec!["b1".into()], vec!["b2".into()], vec![]];
        assert!(s.validate(&spec).is_err());
        s.block_allocation = vec![vec!["b1".into()], vec!["b3".into()], vec!["b2".into()]];
        assert!(s.validate(&spec).is_err());
        s.block_allocation = vec![vec!["b1".into()], vec!["b2".into()], vec!["b2".into()]];
        assert!(s.validate(&spec).is_err());
    }
}
