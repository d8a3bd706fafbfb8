//! Per-subset teachers: training, routed inference and the on-disk logit cache.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::ModelCheckpoint;
use crate::data::{Dataset, Split, SplitKind};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, softmax};
use crate::model::{reference_network, StudentSpec};
use crate::nn::Network;
use crate::optim::{lr_at, OptimizerConfig, Sgd};
use crate::partition::{ActiveUnion, SubDatasetPartition};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TeacherMode {
    /// One teacher per subset, trained only on that subset.
    PerSubsetTrained,
    /// A single full-data teacher serves every subset.
    SharedPretrained,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherRef {
    pub arch: StudentSpec,
    pub checkpoint: PathBuf,
}

/// Stage → teacher map; every stage has exactly one.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherAssignment {
    pub mode: TeacherMode,
    pub per_stage: BTreeMap<usize, TeacherRef>,
}

impl TeacherAssignment {
    pub fn validate(&self, num_stages: usize, num_classes: usize) -> Result<()> {
        let stages: Vec<usize> = self.per_stage.keys().copied().collect();
        if stages != (1..=num_stages).collect::<Vec<_>>() {
            return Err(Error::Config(format!(
                "teachers registered for stages {stages:?}, expected 1..={num_stages}"
            )));
        }
        if let Some(t) = self.per_stage.values().find(|t| t.arch.num_classes != num_classes) {
            return Err(Error::Config(format!(
                "teacher {} outputs {} classes, dataset has {num_classes}",
                t.arch.name, t.arch.num_classes
            )));
        }
        Ok(())
    }
}

/// Training settings for teachers; optimizer constants come from the shared optimizer section.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTraining {
    pub epochs: usize,
    pub lr_milestones: Vec<usize>,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub network: Network,
    /// Top-1 on the training samples it saw, in percent.
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Plain cross-entropy training on the given sample indices.
pub fn train_teacher(arch: &StudentSpec, split: &Split, indices: &[usize], cfg: &TeacherTraining) -> Result<TrainedTeacher> {
    if indices.is_empty() {
        return Err(Error::InvalidPartition("teacher subset is empty".into()));
    }
    let mut net = reference_network(arch, cfg.seed)?;
    let opt_cfg = OptimizerConfig {
        lr_milestones: cfg.lr_milestones.clone(),
        ..cfg.optimizer.clone()
    };
    let mut sgd = Sgd::new(&opt_cfg, &mut net);
    let pool = ActiveUnion {
        indices: indices.to_vec(),
        subset_ids: vec![1; indices.len()],
    };
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        let lr = lr_at(epoch, &opt_cfg);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in pool.batches(opt_cfg.batch_size, &mut rng) {
            let ids: Vec<usize> = batch.iter().map(|&(i, _)| i).collect();
            let x = split.batch(&ids, &arch.input);
            net.zero_grad();
            let logits = net.forward_train(&x)?;
            let n = ids.len() as f64;
            let mut grad = Tensor::zeros(logits.shape());
            for (r, &i) in ids.iter().enumerate() {
                let p = softmax(logits.row(r), 1.0);
                let y = split.labels()[i];
                epoch_loss += cross_entropy(logits.row(r), y);
                for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
                    *g = (p[j] - if j == y { 1.0 } else { 0.0 }) / n;
                }
            }
            if !epoch_loss.is_finite() {
                return Err(Error::InvalidLoss(format!("teacher diverged at epoch {epoch}")));
            }
            net.backward(&grad);
            sgd.step(&mut net, lr)?;
            seen += ids.len();
        }
        final_loss = epoch_loss / seen as f64;
    }
    let correct = indices
        .chunks(256)
        .map(|chunk| -> Result<usize> {
            let logits = net.infer(&split.batch(chunk, &arch.input))?;
            Ok(logits
                .argmax_rows()
                .iter()
                .zip(chunk)
                .filter(|(p, &i)| **p == split.labels()[i])
                .count())
        })
        .sum::<Result<usize>>()?;
    Ok(TrainedTeacher {
        network: net,
        train_accuracy: 100.0 * correct as f64 / indices.len() as f64,
        final_loss,
    })
}

/// Loaded teachers with the subset → teacher routing table.
#[derive(Debug, Clone)]
pub struct TeacherSet {
    mode: TeacherMode,
    networks: Vec<Network>,
    routing: BTreeMap<usize, usize>,
    num_classes: usize,
}

impl TeacherSet {
    /// `networks[i]` serves subset `i + 1`; in shared mode a single network serves all.
    pub fn new(mode: TeacherMode, networks: Vec<Network>, num_subsets: usize) -> Result<Self> {
        let expected = match mode {
            TeacherMode::PerSubsetTrained => num_subsets,
            TeacherMode::SharedPretrained => 1,
        };
        if networks.len() != expected {
            return Err(Error::Config(format!(
                "{mode:?} mode needs {expected} teacher(s), got {}",
                networks.len()
            )));
        }
        let num_classes = networks[0].output_width();
        if networks.iter().any(|n| n.output_width() != num_classes) {
            return Err(Error::Config("teachers disagree on output width".into()));
        }
        let routing = (1..=num_subsets)
            .map(|s| (s, if mode == TeacherMode::SharedPretrained { 0 } else { s - 1 }))
            .collect();
        Ok(TeacherSet {
            mode,
            networks,
            routing,
            num_classes,
        })
    }

    pub fn load(assignment: &TeacherAssignment) -> Result<Self> {
        let mut networks: Vec<Network> = Vec::new();
        let mut seen: BTreeMap<&Path, usize> = BTreeMap::new();
        for teacher in assignment.per_stage.values() {
            if assignment.mode == TeacherMode::SharedPretrained && seen.contains_key(teacher.checkpoint.as_path()) {
                continue;
            }
            let ckpt = ModelCheckpoint::load(&teacher.checkpoint)?;
            networks.push(ckpt.into_network(&teacher.arch)?);
            seen.insert(teacher.checkpoint.as_path(), networks.len() - 1);
        }
        if assignment.mode == TeacherMode::SharedPretrained && networks.len() != 1 {
            return Err(Error::Config("shared-pretrained mode expects one checkpoint".into()));
        }
        TeacherSet::new(assignment.mode, networks, assignment.per_stage.len())
    }

    pub fn mode(&self) -> TeacherMode {
        self.mode
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn registered(&self) -> BTreeSet<usize> {
        self.routing.keys().copied().collect()
    }

    pub fn teacher_for(&self, subset: usize) -> Result<&Network> {
        self.routing
            .get(&subset)
            .map(|&i| &self.networks[i])
            .ok_or(Error::MissingTeacher(subset))
    }

    pub fn state_hashes(&self) -> Vec<String> {
        self.networks.iter().map(Network::state_hash).collect()
    }

    /// Row `i` is the inference-mode output of the teacher mapped to `subset_ids[i]`.
    pub fn teacher_logits(&self, inputs: &Tensor, subset_ids: &[usize]) -> Result<Tensor> {
        if inputs.rows() != subset_ids.len() {
            return Err(Error::ShapeMismatch("one subset id per input row required".into()));
        }
        let mut by_teacher: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &s) in subset_ids.iter().enumerate() {
            let t = *self.routing.get(&s).ok_or(Error::MissingTeacher(s))?;
            by_teacher.entry(t).or_default().push(row);
        }
        let mut out = Tensor::zeros(&[subset_ids.len(), self.num_classes]);
        for (t, rows) in by_teacher {
            let logits = self.networks[t].infer(&inputs.gather_rows(&rows))?;
            for (k, &row) in rows.iter().enumerate() {
                out.row_mut(row).copy_from_slice(logits.row(k));
            }
        }
        Ok(out)
    }
}

const STORE_MAGIC: &[u8; 8] = b"EDLOGIT1";

/// Teacher logits per training sample.
///
/// File layout (little-endian): magic `EDLOGIT1`, `num_classes: u32`,
/// `sample_count: u64`, dataset content hash (32 bytes), SHA-256 of the
/// record payload (32 bytes), then `sample_count` records of
/// `sample_id: u64` followed by `num_classes` × `f32`.
#[derive(Debug)]
pub struct LogitStore {
    num_classes: usize,
    dataset_hash: [u8; 32],
    entries: BTreeMap<u64, Vec<f32>>,
    hits: Cell<u64>,
    misses: Cell<u64>,
}

impl LogitStore {
    pub fn new(num_classes: usize, dataset_hash: [u8; 32]) -> Self {
        LogitStore {
            num_classes,
            dataset_hash,
            entries: BTreeMap::new(),
            hits: Cell::new(0),
            misses: Cell::new(0),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, sample_id: u64, logits: &[f64]) {
        self.entries
            .insert(sample_id, logits.iter().map(|&v| v as f32).collect());
    }

    pub fn get(&self, sample_id: u64) -> Option<&[f32]> {
        let hit = self.entries.get(&sample_id);
        match hit {
            Some(_) => self.hits.set(self.hits.get() + 1),
            None => self.misses.set(self.misses.get() + 1),
        }
        hit.map(Vec::as_slice)
    }

    /// Fraction of lookups served from the store since the last reset.
    pub fn hit_rate(&self) -> f64 {
        let total = self.hits.get() + self.misses.get();
        if total == 0 {
            0.0
        } else {
            self.hits.get() as f64 / total as f64
        }
    }

    pub fn reset_counters(&self) {
        self.hits.set(0);
        self.misses.set(0);
    }

    /// Cached logits for `sample_ids`, one row each.
    pub fn batch(&self, sample_ids: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(sample_ids.len() * self.num_classes);
        for &id in sample_ids {
            let row = self
                .get(id as u64)
                .ok_or_else(|| Error::StoreIntegrity(format!("no cached logits for sample {id}")))?;
            data.extend(row.iter().map(|&v| v as f64));
        }
        Tensor::from_vec(&[sample_ids.len(), self.num_classes], data)
    }

    fn payload(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.entries.len() * (8 + 4 * self.num_classes));
        for (id, logits) in &self.entries {
            buf.extend_from_slice(&id.to_le_bytes());
            for v in logits {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let payload = self.payload();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut header = Vec::with_capacity(84);
        header.extend_from_slice(STORE_MAGIC);
        header.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        header.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        header.extend_from_slice(&self.dataset_hash);
        header.extend_from_slice(&Sha256::digest(&payload));
        file.write_all(&header)
            .and_then(|_| file.write_all(&payload))
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a store and checks it against `dataset`; any hash mismatch is rejected.
    pub fn load(path: &Path, dataset: &Dataset) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let reject = |msg: &str| Error::StoreIntegrity(format!("{}: {msg}", path.display()));
        if bytes.len() < 84 || &bytes[..8] != STORE_MAGIC {
            return Err(reject("not a logit store"));
        }
        let num_classes = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let dataset_hash: [u8; 32] = bytes[20..52].try_into().unwrap();
        let payload_hash = &bytes[52..84];
        let payload = &bytes[84..];
        if dataset_hash != dataset.content_hash() {
            return Err(reject("dataset content hash mismatch"));
        }
        if Sha256::digest(payload).as_slice() != payload_hash {
            return Err(reject("payload hash mismatch"));
        }
        let record = 8 + 4 * num_classes;
        if num_classes != dataset.num_classes || payload.len() != count * record {
            return Err(reject("record layout does not match header"));
        }
        let mut store = LogitStore::new(num_classes, dataset_hash);
        for rec in payload.chunks_exact(record) {
            let id = u64::from_le_bytes(rec[..8].try_into().unwrap());
            let logits = rec[8..]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            store.entries.insert(id, logits);
        }
        Ok(store)
    }
}

/// Runs every training sample through the teacher of its subset and stores the logits.
pub fn cache_teacher_outputs(teachers: &TeacherSet, dataset: &Dataset, partition: &SubDatasetPartition) -> Result<LogitStore> {
    let split = &dataset.train;
    let subset_ids = partition.assign(split.labels(), SplitKind::Train)?;
    let mut store = LogitStore::new(teachers.num_classes(), dataset.content_hash());
    let all: Vec<usize> = (0..split.len()).collect();
    for chunk in all.chunks(256) {
        let x = split.batch(chunk, &dataset.input);
        let ids: Vec<usize> = chunk.iter().map(|&i| subset_ids[i]).collect();
        let logits = teachers.teacher_logits(&x, &ids)?;
        for (r, &i) in chunk.iter().enumerate() {
            store.insert(i as u64, logits.row(r));
        }
    }
    Ok(store)
}

/// Where the trainer gets teacher logits from.
#[derive(Debug, Clone, Copy)]
pub enum TeacherSource<'a> {
    Live(&'a TeacherSet),
    Cached(&'a LogitStore, &'a TeacherSet),
}

impl TeacherSource<'_> {
    pub fn registered(&self) -> BTreeSet<usize> {
        match self {
            TeacherSource::Live(t) | TeacherSource::Cached(_, t) => t.registered(),
        }
    }

    pub fn logits(&self, inputs: &Tensor, sample_ids: &[usize], subset_ids: &[usize]) -> Result<Tensor> {
        match self {
            TeacherSource::Live(t) => t.teacher_logits(inputs, subset_ids),
            TeacherSource::Cached(store, t) => {
                let registered = t.registered();
                if let Some(&s) = subset_ids.iter().find(|s| !registered.contains(s)) {
                    return Err(Error::MissingTeacher(s));
                }
                store.batch(sample_ids)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticConfig;
    use crate::model::presets;
    use crate::partition::{partition, PartitionMode};

    fn setup() -> (Dataset, SubDatasetPartition, TeacherSet) {
        let data = Dataset::synthetic(&SyntheticConfig {
            num_classes: 6,
            train_per_class: 4,
            test_per_class: 2,
            ..Default::default()
        })
        .unwrap();
        let part = partition(data.train.labels(), 3, &[1.0; 3], PartitionMode::ClassDisjoint, 1).unwrap();
        let arch = presets::resnet_toy(3, 8, 6);
        let nets = (0..3).map(|s| reference_network(&arch, s).unwrap()).collect();
        let teachers = TeacherSet::new(TeacherMode::PerSubsetTrained, nets, 3).unwrap();
        (data, part, teachers)
    }

    #[test]
    fn routing_matches_single_teacher_forwards() {
        let (data, _, teachers) = setup();
        let ids: Vec<usize> = (0..8).collect();
        let x = data.train.batch(&ids, &data.input);
        let subsets = vec![1, 3, 2, 2, 1, 3, 3, 1];
        let mixed = teachers.teacher_logits(&x, &subsets).unwrap();
        for (r, &s) in subsets.iter().enumerate() {
            let alone = teachers.teacher_for(s).unwrap().infer(&x.gather_rows(&[r])).unwrap();
            assert_eq!(mixed.row(r), alone.row(0));
        }
        let all2 = teachers.teacher_logits(&x, &[2; 8]).unwrap();
        assert_eq!(all2, teachers.teacher_for(2).unwrap().infer(&x).unwrap());
        assert!(matches!(teachers.teacher_logits(&x, &[4; 8]), Err(Error::MissingTeacher(4))));
    }

    #[test]
    fn store_round_trip_and_tamper_detection() {
        let (data, part, teachers) = setup();
        let store = cache_teacher_outputs(&teachers, &data, &part).unwrap();
        assert_eq!(store.len(), data.train.len());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("logits.bin");
        store.save(&path).unwrap();
        let back = LogitStore::load(&path, &data).unwrap();
        assert_eq!(back.entries, store.entries);

        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(LogitStore::load(&path, &data), Err(Error::StoreIntegrity(_))));

        store.save(&path).unwrap();
        let other = Dataset::synthetic(&SyntheticConfig {
            num_classes: 6,
            train_per_class: 4,
            test_per_class: 2,
            seed: 99,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(LogitStore::load(&path, &other), Err(Error::StoreIntegrity(_))));
    }

    #[test]
    fn shared_mode_routes_everything_to_one_teacher() {
        let arch = presets::resnet_toy(3, 8, 6);
        let set = TeacherSet::new(TeacherMode::SharedPretrained, vec![reference_network(&arch, 0).unwrap()], 3).unwrap();
        assert_eq!(set.registered(), [1, 2, 3].into());
        assert!(std::ptr::eq(set.teacher_for(1).unwrap(), set.teacher_for(3).unwrap()));
        assert!(TeacherSet::new(TeacherMode::PerSubsetTrained, vec![reference_network(&arch, 0).unwrap()], 3).is_err());
    }
}
