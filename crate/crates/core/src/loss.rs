//! Softened-KL distillation loss, its blend with cross-entropy, and the
//! per-subset sum used while several sub-datasets are active.
//!
//! The KD term uses the teacher as target: `KL(softmax(G/τ) ‖ softmax(Z/τ))`.
//! All reductions are per-sample means, so the subset-weighted total over a
//! batch does not depend on how its rows are grouped.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdScale {
    One,
    TauSquared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub tau: f64,
    pub alpha: f64,
    pub kd_scale: KdScale,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 4.0,
            alpha: 0.3,
            kd_scale: KdScale::TauSquared,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("loss.alpha must lie in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn kd_multiplier(&self) -> f64 {
        match self.kd_scale {
            KdScale::One => 1.0,
            KdScale::TauSquared => self.tau * self.tau,
        }
    }
}

/// Student logits `Z`, routed teacher logits `G`, labels and subset ids for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitBatch {
    pub student: Tensor,
    pub teacher: Tensor,
    pub labels: Vec<usize>,
    pub subset_ids: Vec<usize>,
}

impl LogitBatch {
    pub fn new(student: Tensor, teacher: Tensor, labels: Vec<usize>, subset_ids: Vec<usize>) -> Result<Self> {
        if student.shape().len() != 2 || student.shape() != teacher.shape() {
            return Err(Error::InvalidLoss(format!(
                "student {:?} and teacher {:?} logits must be equal-shaped matrices",
                student.shape(),
                teacher.shape()
            )));
        }
        let (n, c) = student.dims2();
        if labels.len() != n || subset_ids.len() != n {
            return Err(Error::InvalidLoss("one label and subset id per row required".into()));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidLoss(format!("label {l} outside 0..{c}")));
        }
        Ok(LogitBatch {
            student,
            teacher,
            labels,
            subset_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn log_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / tau));
    let lse = row.iter().map(|&v| (v / tau - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v / tau - lse).collect()
}

pub fn softmax(row: &[f64], tau: f64) -> Vec<f64> {
    log_softmax(row, tau).into_iter().map(f64::exp).collect()
}

fn check_row(z: &[f64], g: &[f64]) -> Result<()> {
    if z.len() != g.len() || z.is_empty() {
        return Err(Error::InvalidLoss("logit rows must be non-empty and equal width".into()));
    }
    if z.iter().chain(g).any(|v| !v.is_finite()) {
        return Err(Error::InvalidLoss("non-finite logits".into()));
    }
    Ok(())
}

/// `KL(softmax(g/τ) ‖ softmax(z/τ))` for one row.
pub fn softened_kl(z: &[f64], g: &[f64], tau: f64) -> Result<f64> {
    check_row(z, g)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidLoss(format!("temperature must be positive, got {tau}")));
    }
    let lq = log_softmax(z, tau);
    let lp = log_softmax(g, tau);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    Ok(kl.max(0.0))
}

/// Gradient of [`softened_kl`] w.r.t. `z`: `(softmax(z/τ) − softmax(g/τ)) / τ`.
pub fn softened_kl_grad(z: &[f64], g: &[f64], tau: f64) -> Vec<f64> {
    let q = softmax(z, tau);
    let p = softmax(g, tau);
    q.iter().zip(&p).map(|(a, b)| (a - b) / tau).collect()
}

pub fn cross_entropy(z: &[f64], label: usize) -> f64 {
    -log_softmax(z, 1.0)[label]
}

/// Loss value and its gradient w.r.t. the student logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

/// Blended loss over `rows`, with the gradient scattered into a full-size
/// matrix (zero outside `rows`). `grad_scale` multiplies the gradient only.
fn blend_rows(batch: &LogitBatch, rows: &[usize], cfg: &DistillConfig, grad_scale: f64, grad: &mut Tensor) -> Result<f64> {
    let n = rows.len() as f64;
    let kd_mul = cfg.kd_multiplier();
    let mut kd = 0.0;
    let mut ce = 0.0;
    for &i in rows {
        let z = batch.student.row(i);
        let g = batch.teacher.row(i);
        kd += softened_kl(z, g, cfg.tau)?;
        ce += cross_entropy(z, batch.labels[i]);
        let kd_grad = softened_kl_grad(z, g, cfg.tau);
        let probs = softmax(z, 1.0);
        let out = grad.row_mut(i);
        for (j, o) in out.iter_mut().enumerate() {
            let onehot = if j == batch.labels[i] { 1.0 } else { 0.0 };
            let d = cfg.alpha * kd_mul * kd_grad[j] + (1.0 - cfg.alpha) * (probs[j] - onehot);
            *o += grad_scale * d / n;
        }
    }
    Ok(cfg.alpha * kd_mul * (kd / n) + (1.0 - cfg.alpha) * (ce / n))
}

fn single_subset_rows(batch: &LogitBatch) -> Result<Vec<usize>> {
    if batch.is_empty() {
        return Err(Error::InvalidLoss("empty batch".into()));
    }
    if batch.subset_ids.iter().any(|&s| s != batch.subset_ids[0]) {
        return Err(Error::InvalidLoss("combined loss expects rows from one subset".into()));
    }
    Ok((0..batch.len()).collect())
}

/// `α · kd_scale · mean KL + (1 − α) · mean CE` over a single-subset batch.
pub fn combined_loss(batch: &LogitBatch, cfg: &DistillConfig) -> Result<f64> {
    Ok(combined_loss_with_grad(batch, cfg)?.value)
}

pub fn combined_loss_with_grad(batch: &LogitBatch, cfg: &DistillConfig) -> Result<LossValue> {
    cfg.validate()?;
    let rows = single_subset_rows(batch)?;
    let mut grad = Tensor::zeros(batch.student.shape());
    let value = blend_rows(batch, &rows, cfg, 1.0, &mut grad)?;
    Ok(LossValue { value, grad })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetLoss {
    pub loss: f64,
    /// Fraction of batch rows from this subset.
    pub weight: f64,
    pub rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdLoss {
    pub total: f64,
    pub per_subset: BTreeMap<usize, SubsetLoss>,
    pub grad: Tensor,
}

/// Sum over the subsets present in `batch` of their blended loss, each
/// weighted by its share of the rows. Subsets absent from the batch add nothing.
pub fn ed_loss(batch: &LogitBatch, registered: &BTreeSet<usize>, cfg: &DistillConfig) -> Result<EdLoss> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::InvalidLoss("empty batch".into()));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &s) in batch.subset_ids.iter().enumerate() {
        groups.entry(s).or_default().push(i);
    }
    if let Some(&missing) = groups.keys().find(|s| !registered.contains(s)) {
        return Err(Error::MissingTeacher(missing));
    }
    let n = batch.len() as f64;
    let mut grad = Tensor::zeros(batch.student.shape());
    let mut per_subset = BTreeMap::new();
    let mut total = 0.0;
    for (subset, rows) in groups {
        let weight = rows.len() as f64 / n;
        let loss = blend_rows(batch, &rows, cfg, weight, &mut grad)?;
        total += weight * loss;
        per_subset.insert(
            subset,
            SubsetLoss {
                loss,
                weight,
                rows: rows.len(),
            },
        );
    }
    Ok(EdLoss {
        total,
        per_subset,
        grad,
    })
}

/// Largest relative error between an analytic gradient and central finite
/// differences of `loss_fn` at `z`. `loss_fn` returns `(value, gradient)`.
pub fn gradient_check(loss_fn: impl Fn(&Tensor) -> (f64, Tensor), z: &Tensor, eps: f64) -> f64 {
    assert!((1e-6..=1e-3).contains(&eps), "perturbation {eps} outside [1e-6, 1e-3]");
    let (_, analytic) = loss_fn(z);
    let mut worst: f64 = 0.0;
    for i in 0..z.len() {
        let mut plus = z.clone();
        plus.data_mut()[i] += eps;
        let mut minus = z.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (loss_fn(&plus).0 - loss_fn(&minus).0) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(z: Vec<Vec<f64>>, g: Vec<Vec<f64>>, labels: Vec<usize>, subsets: Vec<usize>) -> LogitBatch {
        LogitBatch::new(Tensor::from_rows(&z).unwrap(), Tensor::from_rows(&g).unwrap(), labels, subsets).unwrap()
    }

    #[test]
    fn identical_logits_have_zero_kl() {
        assert_eq!(softened_kl(&[3.0, -1.0, 0.5], &[3.0, -1.0, 0.5], 4.0).unwrap(), 0.0);
        assert_eq!(softened_kl(&[0.0, 0.0], &[0.0, 0.0], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(softened_kl(&[f64::NAN, 0.0], &[0.0, 0.0], 1.0).is_err());
        assert!(softened_kl(&[0.0], &[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn blend_endpoints() {
        let b = batch(
            vec![vec![1.0, 2.0, 0.0], vec![0.5, -1.0, 2.0]],
            vec![vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 3.0]],
            vec![1, 2],
            vec![1, 1],
        );
        let ce = (cross_entropy(b.student.row(0), 1) + cross_entropy(b.student.row(1), 2)) / 2.0;
        let cfg0 = DistillConfig { alpha: 0.0, ..Default::default() };
        assert!((combined_loss(&b, &cfg0).unwrap() - ce).abs() < 1e-12);
        let cfg1 = DistillConfig { alpha: 1.0, ..Default::default() };
        let kd = 16.0 * (softened_kl(b.student.row(0), b.teacher.row(0), 4.0).unwrap()
            + softened_kl(b.student.row(1), b.teacher.row(1), 4.0).unwrap())
            / 2.0;
        assert!((combined_loss(&b, &cfg1).unwrap() - kd).abs() < 1e-12);
    }

    #[test]
    fn combined_loss_errors() {
        let b = batch(vec![vec![0.0, 1.0]; 2], vec![vec![0.0, 1.0]; 2], vec![0, 1], vec![1, 2]);
        assert!(combined_loss(&b, &DistillConfig::default()).is_err());
        let bad = DistillConfig { tau: 0.0, ..Default::default() };
        let b1 = batch(vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]], vec![0], vec![1]);
        assert!(combined_loss(&b1, &bad).is_err());
        assert!(LogitBatch::new(Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 2]), vec![2], vec![1]).is_err());
    }

    #[test]
    fn ce_gradient_is_softmax_minus_onehot() {
        let b = batch(vec![vec![0.3, -0.2, 1.1]], vec![vec![0.0; 3]], vec![2], vec![1]);
        let cfg = DistillConfig { alpha: 0.0, ..Default::default() };
        let g = combined_loss_with_grad(&b, &cfg).unwrap().grad;
        let p = softmax(&[0.3, -0.2, 1.1], 1.0);
        for j in 0..3 {
            let expected = p[j] - if j == 2 { 1.0 } else { 0.0 };
            assert!((g.row(0)[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn ed_loss_requires_registered_teachers() {
        let b = batch(vec![vec![0.0, 1.0]; 2], vec![vec![0.0, 1.0]; 2], vec![0, 1], vec![1, 2]);
        let only_one: BTreeSet<usize> = [1].into();
        assert!(matches!(ed_loss(&b, &only_one, &DistillConfig::default()), Err(Error::MissingTeacher(2))));
    }
}
