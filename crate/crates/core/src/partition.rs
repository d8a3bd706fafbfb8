//! Disjoint sub-datasets introduced one per stage.
//!
//! In class-disjoint mode every class belongs to exactly one subset; in
//! sample-disjoint mode every training sample does. Group sizes follow the
//! requested ratios under largest-remainder rounding (ties go to the lower
//! group index). Labels always stay in the global class space.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    ClassDisjoint,
    SampleDisjoint,
}

impl fmt::Display for PartitionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartitionMode::ClassDisjoint => "class-disjoint",
            PartitionMode::SampleDisjoint => "sample-disjoint",
        })
    }
}

impl FromStr for PartitionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class-disjoint" => Ok(PartitionMode::ClassDisjoint),
            "sample-disjoint" => Ok(PartitionMode::SampleDisjoint),
            other => Err(Error::InvalidPartition(format!("unknown mode {other:?}"))),
        }
    }
}

/// Splits `total` items into `ratios.len()` integer sizes by largest remainder.
pub fn largest_remainder(total: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    if ratios.is_empty() {
        return Err(Error::InvalidPartition("no ratios given".into()));
    }
    if let Some(r) = ratios.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(Error::InvalidPartition(format!("ratio {r} must be positive and finite")));
    }
    let sum: f64 = ratios.iter().sum();
    let quotas: Vec<f64> = ratios.iter().map(|r| total as f64 * r / sum).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // Stable sort keeps lower indices first among equal remainders.
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra)
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    Ok(sizes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubDatasetPartition {
    mode: PartitionMode,
    /// Class ids (class-disjoint) or training-sample indices (sample-disjoint).
    groups: Vec<Vec<usize>>,
    ratios: Vec<f64>,
    seed: u64,
    /// Subset id (1-based) per class or per training sample.
    lookup: Vec<usize>,
}

/// Partitions `labels` into `num_subsets` disjoint groups.
pub fn partition(
    labels: &[usize],
    num_subsets: usize,
    ratios: &[f64],
    mode: PartitionMode,
    seed: u64,
) -> Result<SubDatasetPartition> {
    if num_subsets < 2 {
        return Err(Error::InvalidPartition(format!("need at least 2 subsets, got {num_subsets}")));
    }
    if ratios.len() != num_subsets {
        return Err(Error::InvalidPartition(format!(
            "{num_subsets} subsets but {} ratios",
            ratios.len()
        )));
    }
    build(labels, ratios, mode, seed)
}

fn build(labels: &[usize], ratios: &[f64], mode: PartitionMode, seed: u64) -> Result<SubDatasetPartition> {
    let mut items: Vec<usize> = match mode {
        PartitionMode::ClassDisjoint => labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
        PartitionMode::SampleDisjoint => (0..labels.len()).collect(),
    };
    if ratios.len() > items.len() {
        return Err(Error::InvalidPartition(format!(
            "{} subsets exceed the {} available {}",
            ratios.len(),
            items.len(),
            if mode == PartitionMode::ClassDisjoint { "classes" } else { "samples" }
        )));
    }
    let sizes = largest_remainder(items.len(), ratios)?;
    if sizes.contains(&0) {
        return Err(Error::InvalidPartition(format!(
            "ratios {ratios:?} leave a subset empty over {} items",
            items.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    let mut groups = Vec::with_capacity(sizes.len());
    let mut rest = items.as_slice();
    for size in sizes {
        let (head, tail) = rest.split_at(size);
        groups.push(head.to_vec());
        rest = tail;
    }
    SubDatasetPartition::from_groups(mode, groups, ratios.to_vec(), seed)
}

impl SubDatasetPartition {
    /// One subset holding everything; the degenerate single-stage split.
    pub fn whole(labels: &[usize], mode: PartitionMode) -> Result<Self> {
        build(labels, &[1.0], mode, 0)
    }

    fn from_groups(mode: PartitionMode, groups: Vec<Vec<usize>>, ratios: Vec<f64>, seed: u64) -> Result<Self> {
        let max = groups.iter().flatten().copied().max().unwrap_or(0);
        let mut lookup = vec![0; max + 1];
        for (g, members) in groups.iter().enumerate() {
            for &m in members {
                if lookup[m] != 0 {
                    return Err(Error::InvalidPartition(format!("{m} appears in two groups")));
                }
                lookup[m] = g + 1;
            }
        }
        Ok(SubDatasetPartition {
            mode,
            groups,
            ratios,
            seed,
            lookup,
        })
    }

    pub fn mode(&self) -> PartitionMode {
        self.mode
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_subsets(&self) -> usize {
        self.groups.len()
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    fn check_index(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.groups.len() {
            return Err(Error::SubsetOutOfRange {
                index: t,
                count: self.groups.len(),
            });
        }
        Ok(())
    }

    /// Subset id of class `class` (class-disjoint mode only).
    pub fn subset_of_class(&self, class: usize) -> Option<usize> {
        match self.mode {
            PartitionMode::ClassDisjoint => self.lookup.get(class).copied().filter(|&s| s != 0),
            PartitionMode::SampleDisjoint => None,
        }
    }

    /// Subset id of every sample of a split, given that split's labels.
    pub fn assign(&self, labels: &[usize], split: SplitKind) -> Result<Vec<usize>> {
        let ids: Vec<usize> = match (self.mode, split) {
            (PartitionMode::ClassDisjoint, _) => labels
                .iter()
                .map(|&l| self.lookup.get(l).copied().unwrap_or(0))
                .collect(),
            (PartitionMode::SampleDisjoint, SplitKind::Train) => {
                if labels.len() != self.lookup.len() {
                    return Err(Error::InvalidPartition(format!(
                        "partition covers {} training samples, split has {}",
                        self.lookup.len(),
                        labels.len()
                    )));
                }
                self.lookup.clone()
            }
            // Test samples are split afresh with the same ratios and seed.
            (PartitionMode::SampleDisjoint, SplitKind::Test) => {
                if self.groups.len() == 1 {
                    vec![1; labels.len()]
                } else {
                    build(labels, &self.ratios, self.mode, self.seed)?.lookup
                }
            }
        };
        if let Some(i) = ids.iter().position(|&s| s == 0) {
            return Err(Error::InvalidPartition(format!(
                "sample {i} (class {}) belongs to no subset",
                labels[i]
            )));
        }
        Ok(ids)
    }

    /// Indices of the samples of `split` that belong to subset `t`.
    pub fn subset_indices(&self, labels: &[usize], t: usize, split: SplitKind) -> Result<Vec<usize>> {
        self.check_index(t)?;
        let ids = self.assign(labels, split)?;
        Ok((0..labels.len()).filter(|&i| ids[i] == t).collect())
    }

    /// Serialises as a line-oriented document that [`SubDatasetPartition::parse`] reads back exactly.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let mut s = String::from("# sub-dataset partition\n");
        s += &format!("mode {}\n", self.mode);
        s += &format!("seed {}\n", self.seed);
        s += &format!(
            "ratios {}\n",
            self.ratios.iter().map(|r| format!("{r:?}")).collect::<Vec<_>>().join(" ")
        );
        for (i, g) in self.groups.iter().enumerate() {
            s += &format!("group {}: {}\n", i + 1, join(g));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidPartition(format!("malformed partition file: {msg}"));
        let mut mode = None;
        let mut seed = None;
        let mut ratios = None;
        let mut groups = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
            match key {
                "mode" => mode = Some(rest.trim().parse()?),
                "seed" => seed = Some(rest.trim().parse::<u64>().map_err(|_| bad("seed"))?),
                "ratios" => {
                    ratios = Some(
                        rest.split_whitespace()
                            .map(str::parse::<f64>)
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(|_| bad("ratios"))?,
                    )
                }
                "group" => {
                    let (idx, members) = rest.split_once(':').ok_or_else(|| bad("group"))?;
                    let idx: usize = idx.trim().parse().map_err(|_| bad("group index"))?;
                    if idx != groups.len() + 1 {
                        return Err(bad("groups out of order"));
                    }
                    groups.push(
                        members
                            .split_whitespace()
                            .map(str::parse::<usize>)
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(|_| bad("group members"))?,
                    );
                }
                other => return Err(bad(&format!("unknown key {other}"))),
            }
        }
        let ratios: Vec<f64> = ratios.ok_or_else(|| bad("missing ratios"))?;
        if ratios.len() != groups.len() || groups.iter().any(Vec::is_empty) {
            return Err(bad("ratios and groups disagree"));
        }
        Self::from_groups(
            mode.ok_or_else(|| bad("missing mode"))?,
            groups,
            ratios,
            seed.ok_or_else(|| bad("missing seed"))?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Samples of one subset, labels in the global class space.
#[derive(Debug, Clone)]
pub struct SubsetView<'a> {
    dataset: &'a Dataset,
    split: SplitKind,
    subset: usize,
    indices: Vec<usize>,
}

impl<'a> SubsetView<'a> {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `(sample, label, subset_id)` triples.
    pub fn iter(&self) -> impl Iterator<Item = (&'a [f64], usize, usize)> + '_ {
        let split = self.dataset.split(self.split);
        self.indices.iter().map(move |&i| (split.sample(i), split.labels()[i], self.subset))
    }
}

pub fn subset_view<'a>(
    dataset: &'a Dataset,
    partition: &SubDatasetPartition,
    t: usize,
    split: SplitKind,
) -> Result<SubsetView<'a>> {
    let indices = partition.subset_indices(dataset.split(split).labels(), t, split)?;
    Ok(SubsetView {
        dataset,
        split,
        subset: t,
        indices,
    })
}

/// Training samples of subsets `1..=t`, each tagged with its subset id.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveUnion {
    pub indices: Vec<usize>,
    pub subset_ids: Vec<usize>,
}

impl ActiveUnion {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// A uniformly shuffled pass over the union, cut into batches of
    /// `(sample index, subset id)` pairs. The last batch may be short.
    pub fn batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<(usize, usize)>> {
        let mut order: Vec<usize> = (0..self.indices.len()).collect();
        order.shuffle(rng);
        order
            .chunks(batch_size.max(1))
            .map(|chunk| chunk.iter().map(|&k| (self.indices[k], self.subset_ids[k])).collect())
            .collect()
    }
}

pub fn active_union(labels: &[usize], partition: &SubDatasetPartition, t: usize) -> Result<ActiveUnion> {
    partition.check_index(t)?;
    let ids = partition.assign(labels, SplitKind::Train)?;
    let (indices, subset_ids) = ids
        .iter()
        .enumerate()
        .filter(|(_, &s)| s <= t)
        .map(|(i, &s)| (i, s))
        .unzip();
    Ok(ActiveUnion { indices, subset_ids })
}
