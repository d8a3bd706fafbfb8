//! Accuracy evaluation, the stage × subset forgetting matrix, and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{Dataset, SplitKind};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRecord, SubsetId, ADVANCE, LOSS, TOP1};
use crate::nn::Network;
use crate::partition::SubDatasetPartition;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 256;

/// Anything that maps a batch of inputs to logits in inference mode.
pub trait Classifier {
    fn predict(&self, inputs: &Tensor) -> Result<Tensor>;
}

impl Classifier for Network {
    fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        self.infer(inputs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tally {
    pub correct: usize,
    pub total: usize,
}

impl Tally {
    pub fn percent(&self) -> f64 {
        100.0 * self.correct as f64 / self.total as f64
    }
}

fn tally<C: Classifier + ?Sized>(model: &C, batches: impl IntoIterator<Item = (Tensor, Vec<usize>)>) -> Result<Tally> {
    let mut t = Tally { correct: 0, total: 0 };
    for (x, labels) in batches {
        let logits = model.predict(&x)?;
        if logits.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions for {} labels",
                logits.rows(),
                labels.len()
            )));
        }
        t.correct += logits.argmax_rows().iter().zip(&labels).filter(|(p, y)| p == y).count();
        t.total += labels.len();
    }
    Ok(t)
}

/// Percentage of samples whose argmax logit equals the label.
pub fn top1_accuracy<C: Classifier + ?Sized>(
    model: &C,
    batches: impl IntoIterator<Item = (Tensor, Vec<usize>)>,
) -> Result<f64> {
    let t = tally(model, batches)?;
    if t.total == 0 {
        return Err(Error::Metrics("top-1 accuracy of an empty sample set".into()));
    }
    Ok(t.percent())
}

/// `(inputs, labels)` batches over the given samples of one split.
pub fn batches<'a>(dataset: &'a Dataset, split: SplitKind, indices: &'a [usize]) -> impl Iterator<Item = (Tensor, Vec<usize>)> + 'a {
    let s = dataset.split(split);
    indices.chunks(EVAL_BATCH).map(move |chunk| {
        (
            s.batch(chunk, &dataset.input),
            chunk.iter().map(|&i| s.labels()[i]).collect(),
        )
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub overall: f64,
    /// Subset id → top-1 percent, for every subset of the partition.
    pub per_subset: BTreeMap<usize, f64>,
    pub subset_sizes: BTreeMap<usize, usize>,
}

/// Full-split and per-subset top-1 in one pass over the split.
pub fn evaluate<C: Classifier + ?Sized>(
    model: &C,
    dataset: &Dataset,
    partition: &SubDatasetPartition,
    split: SplitKind,
) -> Result<Evaluation> {
    let labels = dataset.split(split).labels();
    let ids = partition.assign(labels, split)?;
    let mut per: BTreeMap<usize, Tally> = BTreeMap::new();
    for t in 1..=partition.num_subsets() {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| ids[i] == t).collect();
        if idx.is_empty() {
            return Err(Error::Metrics(format!("subset {t} has no {split} samples")));
        }
        per.insert(t, tally(model, batches(dataset, split, &idx))?);
    }
    let correct: usize = per.values().map(|t| t.correct).sum();
    let total: usize = per.values().map(|t| t.total).sum();
    if total == 0 {
        return Err(Error::Metrics("top-1 accuracy of an empty sample set".into()));
    }
    Ok(Evaluation {
        overall: Tally { correct, total }.percent(),
        per_subset: per.iter().map(|(&k, t)| (k, t.percent())).collect(),
        subset_sizes: per.iter().map(|(&k, t)| (k, t.total)).collect(),
    })
}

/// Rows are stage ends, columns subsets; `None` marks a subset not yet introduced.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingMatrix {
    pub stage_end_epochs: Vec<usize>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl ForgettingMatrix {
    pub fn num_stages(&self) -> usize {
        self.rows.len()
    }

    /// Accuracy of `subset` at the end of `stage`, both 1-based.
    pub fn entry(&self, stage: usize, subset: usize) -> Option<f64> {
        self.rows.get(stage - 1).and_then(|r| r.get(subset - 1)).copied().flatten()
    }

    pub fn is_lower_triangular(&self) -> bool {
        self.rows.iter().enumerate().all(|(s, row)| {
            row.len() == self.rows.len() && row.iter().enumerate().all(|(t, v)| v.is_some() == (t <= s))
        })
    }

    /// Entries rounded to the two decimals used in the table.
    pub fn rounded(&self) -> Self {
        ForgettingMatrix {
            stage_end_epochs: self.stage_end_epochs.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|v| v.map(|x| (x * 100.0).round() / 100.0)).collect())
                .collect(),
        }
    }

    pub fn to_markdown(&self) -> String {
        let t = self.num_stages();
        let mut out = String::from("| stage | epoch |");
        for s in 1..=t {
            let _ = write!(out, " subset {s} |");
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---|".repeat(t));
        out.push('\n');
        for (s, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "| {} | {} |", s + 1, self.stage_end_epochs[s]);
            for v in row {
                match v {
                    Some(x) => {
                        let _ = write!(out, " {x:.2} |");
                    }
                    None => out.push_str(" absent |"),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_markdown(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::Metrics(format!("forgetting table: {m}"));
        let mut stage_end_epochs = Vec::new();
        let mut rows = Vec::new();
        for line in text.lines().skip(2).filter(|l| !l.trim().is_empty()) {
            let cells: Vec<&str> = line.trim().trim_matches('|').split('|').map(str::trim).collect();
            if cells.len() < 2 {
                return Err(bad(line));
            }
            stage_end_epochs.push(cells[1].parse().map_err(|_| bad(line))?);
            rows.push(
                cells[2..]
                    .iter()
                    .map(|c| match *c {
                        "absent" => Ok(None),
                        v => v.parse().map(Some).map_err(|_| bad(line)),
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(ForgettingMatrix { stage_end_epochs, rows })
    }
}

fn test_top1(records: &[MetricsRecord]) -> BTreeMap<(usize, SubsetId), f64> {
    records
        .iter()
        .filter(|r| r.split == SplitKind::Test && r.metric == TOP1)
        .map(|r| ((r.epoch, r.subset_id), r.value))
        .collect()
}

/// The last epoch trained in each stage, ordered by stage.
pub fn stage_end_epochs(records: &[MetricsRecord]) -> Vec<usize> {
    let mut ends: BTreeMap<usize, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.metric != ADVANCE && r.metric != crate::metrics::RESTORE) {
        let e = ends.entry(r.stage).or_insert(r.epoch);
        *e = (*e).max(r.epoch);
    }
    ends.into_values().collect()
}

/// Builds the matrix from stage-end per-subset test evaluations in the log.
pub fn forgetting_matrix(records: &[MetricsRecord]) -> Result<ForgettingMatrix> {
    let ends = stage_end_epochs(records);
    if ends.is_empty() {
        return Err(Error::Metrics("metrics log has no stage records".into()));
    }
    let top1 = test_top1(records);
    let t = ends.len();
    let rows = ends
        .iter()
        .enumerate()
        .map(|(s, &epoch)| {
            (1..=t)
                .map(|subset| {
                    if subset > s + 1 {
                        return Ok(None);
                    }
                    top1.get(&(epoch, SubsetId::Subset(subset))).copied().map(Some).ok_or_else(|| {
                        Error::Metrics(format!(
                            "no stage-end test top1 for stage {} subset {subset} at epoch {epoch}",
                            s + 1
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForgettingMatrix {
        stage_end_epochs: ends,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpan {
    pub stage: usize,
    pub first_epoch: usize,
    pub last_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub run_id: String,
    pub num_stages: usize,
    pub final_top1: f64,
    pub final_per_subset: BTreeMap<usize, f64>,
    pub timeline: Vec<StageSpan>,
    pub advance_epochs: Vec<usize>,
}

impl RunReport {
    /// Everything the report needs is in the log.
    pub fn from_log(records: &[MetricsRecord]) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::Metrics("metrics log is empty".into()))?;
        let top1 = test_top1(records);
        let (&(last_epoch, _), _) = top1
            .iter()
            .filter(|((_, s), _)| *s == SubsetId::All)
            .next_back()
            .ok_or_else(|| Error::Metrics("no full-set test evaluation in log".into()))?;
        let final_per_subset = top1
            .iter()
            .filter_map(|(&(e, s), &v)| match s {
                SubsetId::Subset(t) if e == last_epoch => Some((t, v)),
                _ => None,
            })
            .collect();
        let mut timeline: Vec<StageSpan> = Vec::new();
        let mut first_epochs: BTreeMap<usize, usize> = BTreeMap::new();
        for r in records.iter().filter(|r| r.metric != ADVANCE && r.metric != crate::metrics::RESTORE) {
            let e = first_epochs.entry(r.stage).or_insert(r.epoch);
            *e = (*e).min(r.epoch);
        }
        for ((&stage, &first_epoch), last) in first_epochs.iter().zip(stage_end_epochs(records)) {
            timeline.push(StageSpan {
                stage,
                first_epoch,
                last_epoch: last,
            });
        }
        let advance_epochs = records.iter().filter(|r| r.metric == ADVANCE).map(|r| r.epoch).collect();
        Ok(RunReport {
            run_id: first.run_id.clone(),
            num_stages: timeline.len(),
            final_top1: top1[&(last_epoch, SubsetId::All)],
            final_per_subset,
            timeline,
            advance_epochs,
        })
    }
}

/// Series of `(epoch, value)` for test top-1 of one subset id.
fn curve(records: &[MetricsRecord], subset: SubsetId) -> Vec<(usize, f64)> {
    records
        .iter()
        .filter(|r| r.split == SplitKind::Test && r.metric == TOP1 && r.subset_id == subset)
        .map(|r| (r.epoch, r.value))
        .collect()
}

/// Accuracy-vs-epoch line chart with one vertical marker per advance epoch.
pub fn plot_svg(title: &str, points: &[(usize, f64)], advance_epochs: &[usize], max_epoch: usize) -> String {
    let (w, h, m) = (640.0, 400.0, 48.0);
    let span = max_epoch.max(1) as f64;
    let x = |e: usize| m + (w - 2.0 * m) * e as f64 / span;
    let y = |v: f64| h - m - (h - 2.0 * m) * v.clamp(0.0, 100.0) / 100.0;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<g stroke="black"><line x1="{m}" y1="{}" x2="{}" y2="{}"/><line x1="{m}" y1="{m}" x2="{m}" y2="{}"/></g>"#,
        h - m,
        w - m,
        h - m,
        h - m
    );
    for v in [0, 25, 50, 75, 100] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="10">{v}</text>"#,
            m - 4.0,
            y(v as f64) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">epoch (0..{max_epoch})</text>"#,
        w / 2.0,
        h - 12.0
    );
    for &e in advance_epochs {
        let _ = writeln!(
            s,
            r#"<line class="advance" data-epoch="{e}" x1="{0:.2}" y1="{m}" x2="{0:.2}" y2="{1}" stroke="gray" stroke-dasharray="4 3"/>"#,
            x(e),
            h - m
        );
    }
    if !points.is_empty() {
        let path: Vec<String> = points.iter().map(|&(e, v)| format!("{:.2},{:.2}", x(e), y(v))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#, path.join(" "));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `metrics.csv`, `forgetting_matrix.md`, `summary.md` and `1 + T`
/// SVG plots into `dir`. Output depends only on the inputs.
pub fn render_report(report: &RunReport, matrix: &ForgettingMatrix, records: &[MetricsRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
        Ok(())
    };

    let mut csv = String::from("run_id,epoch,stage,split,subset_id,metric,value,wall_time\n");
    for r in records {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.run_id, r.epoch, r.stage, r.split, r.subset_id, r.metric, r.value, r.wall_time
        );
    }
    put("metrics.csv", csv)?;
    put("forgetting_matrix.md", matrix.to_markdown())?;

    let mut summary = format!("# run {}\n\nfinal top-1: {:.2}\n\n", report.run_id, report.final_top1);
    for (t, v) in &report.final_per_subset {
        let _ = writeln!(summary, "- subset {t}: {v:.2}");
    }
    summary.push_str("\n| stage | first epoch | last epoch |\n|---|---|---|\n");
    for span in &report.timeline {
        let _ = writeln!(summary, "| {} | {} | {} |", span.stage, span.first_epoch, span.last_epoch);
    }
    put("summary.md", summary)?;

    let max_epoch = report.timeline.last().map_or(0, |s| s.last_epoch);
    put(
        "accuracy_all.svg",
        plot_svg("test top-1, all subsets", &curve(records, SubsetId::All), &report.advance_epochs, max_epoch),
    )?;
    for t in 1..=report.num_stages {
        put(
            &format!("accuracy_subset{t}.svg"),
            plot_svg(
                &format!("test top-1, subset {t}"),
                &curve(records, SubsetId::Subset(t)),
                &report.advance_epochs,
                max_epoch,
            ),
        )?;
    }
    Ok(written)
}

/// Mean training loss per epoch.
pub fn loss_trace(records: &[MetricsRecord]) -> Vec<(usize, f64)> {
    records
        .iter()
        .filter(|r| r.split == SplitKind::Train && r.metric == LOSS && r.subset_id == SubsetId::All)
        .map(|r| (r.epoch, r.value))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticConfig;
    use crate::partition::{partition, PartitionMode};

    struct Oracle(usize);

    impl Classifier for Oracle {
        fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
            // Reads the label back out of the first feature.
            let rows = (0..inputs.rows())
                .map(|r| {
                    let mut v = vec![0.0; self.0];
                    v[inputs.row(r)[0] as usize] = 1.0;
                    v
                })
                .collect::<Vec<_>>();
            Tensor::from_rows(&rows)
        }
    }

    struct Constant(usize);

    impl Classifier for Constant {
        fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(&[inputs.rows(), self.0]))
        }
    }

    fn labelled(labels: &[usize]) -> Vec<(Tensor, Vec<usize>)> {
        let rows: Vec<Vec<f64>> = labels.iter().map(|&y| vec![y as f64]).collect();
        vec![(Tensor::from_rows(&rows).unwrap(), labels.to_vec())]
    }

    #[test]
    fn oracle_and_constant_models() {
        let labels: Vec<usize> = (0..1000).map(|i| i % 5).collect();
        assert_eq!(top1_accuracy(&Oracle(5), labelled(&labels)).unwrap(), 100.0);
        // Constant logits pick class 0, which is exactly a fifth of a balanced set.
        assert_eq!(top1_accuracy(&Constant(5), labelled(&labels)).unwrap(), 20.0);
        assert!(top1_accuracy(&Oracle(5), Vec::new()).is_err());
    }

    #[test]
    fn overall_is_size_weighted_mean_of_subsets() {
        let data = Dataset::synthetic(&SyntheticConfig {
            num_classes: 7,
            train_per_class: 3,
            test_per_class: 5,
            ..Default::default()
        })
        .unwrap();
        let part = partition(data.train.labels(), 3, &[2.0, 1.0, 1.0], PartitionMode::ClassDisjoint, 3).unwrap();
        let net = crate::model::reference_network(&crate::model::presets::vgg_toy(3, 8, 7), 1).unwrap();
        let ev = evaluate(&net, &data, &part, SplitKind::Test).unwrap();
        let n: usize = ev.subset_sizes.values().sum();
        let mean: f64 = ev.per_subset.iter().map(|(t, a)| a * ev.subset_sizes[t] as f64).sum::<f64>() / n as f64;
        assert!((mean - ev.overall).abs() < 1e-9);
        let direct: Vec<usize> = (0..data.test.len()).collect();
        assert_eq!(top1_accuracy(&net, batches(&data, SplitKind::Test, &direct)).unwrap(), ev.overall);
    }

    fn record(epoch: usize, stage: usize, subset: SubsetId, metric: &str, value: f64) -> MetricsRecord {
        MetricsRecord {
            run_id: "x".into(),
            epoch,
            stage,
            split: if metric == TOP1 { SplitKind::Test } else { SplitKind::Train },
            subset_id: subset,
            metric: metric.into(),
            value,
            wall_time: 0.0,
        }
    }

    fn three_stage_log() -> Vec<MetricsRecord> {
        let mut log = Vec::new();
        for epoch in 0..6 {
            let stage = 1 + epoch / 2;
            if epoch > 0 && epoch % 2 == 0 {
                log.push(record(epoch, stage, SubsetId::All, ADVANCE, stage as f64));
            }
            log.push(record(epoch, stage, SubsetId::All, LOSS, 1.0 / (epoch + 1) as f64));
            log.push(record(epoch, stage, SubsetId::All, TOP1, 10.0 * epoch as f64 + 0.123));
            for t in 1..=stage {
                log.push(record(epoch, stage, SubsetId::Subset(t), TOP1, 40.0 + epoch as f64 + t as f64 / 3.0));
            }
        }
        log
    }

    #[test]
    fn matrix_is_triangular_and_round_trips() {
        let log = three_stage_log();
        let m = forgetting_matrix(&log).unwrap();
        assert_eq!(m.stage_end_epochs, vec![1, 3, 5]);
        assert!(m.is_lower_triangular());
        let occupied: Vec<usize> = m.rows.iter().map(|r| r.iter().flatten().count()).collect();
        assert_eq!(occupied, vec![1, 2, 3]);
        assert_eq!(m.entry(2, 1), Some(43.0 + 1.0 / 3.0));
        assert_eq!(ForgettingMatrix::parse_markdown(&m.to_markdown()).unwrap(), m.rounded());

        let missing: Vec<_> = log
            .iter()
            .filter(|r| !(r.epoch == 3 && r.subset_id == SubsetId::Subset(1)))
            .cloned()
            .collect();
        assert!(forgetting_matrix(&missing).is_err());
    }

    #[test]
    fn report_files_and_markers() {
        let log = three_stage_log();
        let report = RunReport::from_log(&log).unwrap();
        assert_eq!(report.advance_epochs, vec![2, 4]);
        assert_eq!(report.final_top1, 50.123);
        assert_eq!(report.final_per_subset.len(), 3);
        let m = forgetting_matrix(&log).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = render_report(&report, &m, &log, dir.path()).unwrap();
        let svgs: Vec<_> = files.iter().filter(|p| p.extension().is_some_and(|e| e == "svg")).collect();
        assert_eq!(svgs.len(), 1 + 3);
        let svg = std::fs::read_to_string(svgs[0]).unwrap();
        let marks: Vec<usize> = svg
            .split("data-epoch=\"")
            .skip(1)
            .map(|s| s[..s.find('"').unwrap()].parse().unwrap())
            .collect();
        assert_eq!(marks, vec![2, 4]);
        let first: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let again = render_report(&report, &m, &log, dir.path()).unwrap();
        assert_eq!(first, again.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>());
    }
}
