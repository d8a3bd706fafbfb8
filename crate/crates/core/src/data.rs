//! Labeled image-classification data held in memory.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::InputShape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Test,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        })
    }
}

/// Samples of one split. A sample's id is its index.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    sample_len: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Split {
    pub fn new(sample_len: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != sample_len * labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels need {} feature values, got {}",
                labels.len(),
                sample_len * labels.len(),
                features.len()
            )));
        }
        Ok(Split {
            sample_len,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.sample_len..(i + 1) * self.sample_len]
    }

    /// Stacks the selected samples into an `(n, c, h, w)` batch.
    pub fn batch(&self, indices: &[usize], input: &InputShape) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor::from_vec(&[indices.len(), input.channels, input.height, input.width], data)
            .expect("sample length matches input shape")
    }

    fn hash_into(&self, h: &mut Sha256) {
        h.update((self.labels.len() as u64).to_le_bytes());
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for v in &self.features {
            h.update(v.to_le_bytes());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub input: InputShape,
    pub num_classes: usize,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn new(name: &str, input: InputShape, num_classes: usize, train: Split, test: Split) -> Result<Self> {
        for split in [&train, &test] {
            if split.sample_len != input.len() {
                return Err(Error::ShapeMismatch("sample length differs from input shape".into()));
            }
            if let Some(&bad) = split.labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::ShapeMismatch(format!("label {bad} outside 0..{num_classes}")));
            }
        }
        Ok(Dataset {
            name: name.into(),
            input,
            num_classes,
            train,
            test,
        })
    }

    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Test => &self.test,
        }
    }

    /// SHA-256 over shape, class count, labels and feature bytes of both splits.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for d in self.input.dims() {
            h.update((d as u64).to_le_bytes());
        }
        h.update((self.num_classes as u64).to_le_bytes());
        self.train.hash_into(&mut h);
        self.test.hash_into(&mut h);
        h.finalize().into()
    }

    /// Gaussian blobs: each class has a random mean image, samples add
    /// isotropic noise around it.
    pub fn synthetic(cfg: &SyntheticConfig) -> Result<Self> {
        if cfg.num_classes == 0 || cfg.train_per_class == 0 || cfg.test_per_class == 0 {
            return Err(Error::Config("synthetic dataset needs classes and samples".into()));
        }
        let input = InputShape {
            channels: cfg.channels,
            height: cfg.height,
            width: cfg.width,
        };
        let dim = input.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
        let centers: Vec<Vec<f64>> = (0..cfg.num_classes)
            .map(|_| (0..dim).map(|_| cfg.separation * normal()).collect())
            .collect();
        let mut draw = |per_class: usize| -> Result<Split> {
            let mut features = Vec::with_capacity(per_class * cfg.num_classes * dim);
            let mut labels = Vec::with_capacity(per_class * cfg.num_classes);
            for i in 0..per_class * cfg.num_classes {
                let class = i % cfg.num_classes;
                features.extend(centers[class].iter().map(|c| c + cfg.noise * normal()));
                labels.push(class);
            }
            Split::new(dim, features, labels)
        };
        let train = draw(cfg.train_per_class)?;
        let test = draw(cfg.test_per_class)?;
        Dataset::new("synthetic", input, cfg.num_classes, train, test)
    }

    /// Loads whitespace-separated text files with one sample per line:
    /// the class id followed by `c*h*w` feature values.
    pub fn from_text_files(train: &Path, test: &Path, input: InputShape, num_classes: usize) -> Result<Self> {
        let load = |path: &Path| -> Result<Split> {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut features = Vec::new();
            let mut labels = Vec::new();
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let mut fields = line.split_whitespace();
                let parse_err = || Error::Config(format!("{}:{}: malformed sample", path.display(), n + 1));
                let label: usize = fields.next().and_then(|f| f.parse().ok()).ok_or_else(parse_err)?;
                let values: Vec<f64> = fields.map(str::parse).collect::<Result<_, _>>().map_err(|_| parse_err())?;
                if values.len() != input.len() {
                    return Err(parse_err());
                }
                labels.push(label);
                features.extend(values);
            }
            Split::new(input.len(), features, labels)
        };
        let name = train
            .file_stem()
            .map_or("file".into(), |s| s.to_string_lossy().into_owned());
        Dataset::new(&name, input, num_classes, load(train)?, load(test)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of the class means.
    pub separation: f64,
    /// Standard deviation of per-sample noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_classes: 9,
            channels: 3,
            height: 8,
            width: 8,
            train_per_class: 60,
            test_per_class: 40,
            separation: 1.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let cfg = SyntheticConfig::default();
        let a = Dataset::synthetic(&cfg).unwrap();
        let b = Dataset::synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.train.len(), 9 * 60);
        for c in 0..9 {
            assert_eq!(a.test.labels().iter().filter(|&&l| l == c).count(), 40);
        }
        let other = Dataset::synthetic(&SyntheticConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.content_hash(), other.content_hash());
    }

    #[test]
    fn text_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let train = dir.path().join("train.txt");
        let test = dir.path().join("test.txt");
        std::fs::write(&train, "0 1 2 3 4\n1 0.5 0.5 0.5 0.5\n").unwrap();
        std::fs::write(&test, "1 1 1 1 1\n").unwrap();
        let d = Dataset::from_text_files(&train, &test, InputShape::square(1, 2), 2).unwrap();
        assert_eq!(d.train.labels(), &[0, 1]);
        assert_eq!(d.train.sample(0), &[1.0, 2.0, 3.0, 4.0]);
        std::fs::write(&test, "5 1 1 1 1\n").unwrap();
        assert!(Dataset::from_text_files(&train, &test, InputShape::square(1, 2), 2).is_err());
    }
}
