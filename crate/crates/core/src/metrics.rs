//! Append-only, tab-separated metrics log.

use std::collections::HashSet;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SplitKind;
use crate::error::{Error, Result};

pub const HEADER: &str = "run_id\tepoch\tstage\tsplit\tsubset_id\tmetric\tvalue\twall_time";

pub const TOP1: &str = "top1";
pub const LOSS: &str = "loss";
pub const ADVANCE: &str = "advance";
pub const RESTORE: &str = "restore";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SubsetId {
    Subset(usize),
    All,
}

impl fmt::Display for SubsetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubsetId::Subset(t) => write!(f, "{t}"),
            SubsetId::All => f.write_str("all"),
        }
    }
}

impl FromStr for SubsetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(SubsetId::All);
        }
        s.parse()
            .map(SubsetId::Subset)
            .map_err(|_| Error::Metrics(format!("bad subset id {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub epoch: usize,
    pub stage: usize,
    pub split: SplitKind,
    pub subset_id: SubsetId,
    pub metric: String,
    pub value: f64,
    pub wall_time: f64,
}

type RecordKey = (String, usize, SplitKind, SubsetId, String);

impl MetricsRecord {
    fn key(&self) -> RecordKey {
        (
            self.run_id.clone(),
            self.epoch,
            self.split,
            self.subset_id,
            self.metric.clone(),
        )
    }

    /// Floats use the shortest round-trip representation, so parsing a line
    /// gives back the exact value.
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.run_id, self.epoch, self.stage, self.split, self.subset_id, self.metric, self.value, self.wall_time
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(Error::Metrics(format!("expected 8 fields, got {}: {line:?}", f.len())));
        }
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Metrics(format!("bad {what} {s:?}")))
        };
        let real = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Metrics(format!("bad {what} {s:?}")))
        };
        let split = match f[3] {
            "train" => SplitKind::Train,
            "test" => SplitKind::Test,
            other => return Err(Error::Metrics(format!("bad split {other:?}"))),
        };
        Ok(MetricsRecord {
            run_id: f[0].to_string(),
            epoch: num(f[1], "epoch")?,
            stage: num(f[2], "stage")?,
            split,
            subset_id: f[4].parse()?,
            metric: f[5].to_string(),
            value: real(f[6], "value")?,
            wall_time: real(f[7], "wall_time")?,
        })
    }
}

/// Single writer over a log file. Rejects duplicate
/// `(run_id, epoch, split, subset_id, metric)` keys.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    file: File,
    keys: HashSet<RecordKey>,
    records: Vec<MetricsRecord>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            file,
            keys: HashSet::new(),
            records: Vec::new(),
        })
    }

    /// Reopens an existing log keeping only its first `keep` records; anything
    /// written after the last checkpoint is dropped.
    pub fn resume(path: &Path, keep: usize) -> Result<Self> {
        let mut records = read_log(path)?;
        if records.len() < keep {
            return Err(Error::Metrics(format!(
                "{} holds {} records, checkpoint expects {keep}",
                path.display(),
                records.len()
            )));
        }
        records.truncate(keep);
        let mut log = MetricsLog::create(path)?;
        for r in records {
            log.append(r)?;
        }
        log.flush()?;
        Ok(log)
    }

    pub fn append(&mut self, record: MetricsRecord) -> Result<()> {
        if !self.keys.insert(record.key()) {
            return Err(Error::Metrics(format!("duplicate record {}", record.to_line())));
        }
        writeln!(self.file, "{}", record.to_line()).map_err(|e| Error::io(&self.path, e))?;
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_log(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = OpenOptions::new().read(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == HEADER => {}
        Some(Err(e)) => return Err(Error::io(path, e)),
        _ => return Err(Error::Metrics(format!("{}: missing header", path.display()))),
    }
    lines
        .map(|l| l.map_err(|e| Error::io(path, e)).and_then(|l| MetricsRecord::parse_line(&l)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, subset: SubsetId, value: f64) -> MetricsRecord {
        MetricsRecord {
            run_id: "r".into(),
            epoch,
            stage: 1,
            split: SplitKind::Test,
            subset_id: subset,
            metric: TOP1.into(),
            value,
            wall_time: 0.0,
        }
    }

    #[test]
    fn lines_round_trip_exactly() {
        let r = rec(3, SubsetId::Subset(2), 0.1 + 0.2);
        assert_eq!(MetricsRecord::parse_line(&r.to_line()).unwrap(), r);
        let all = rec(0, SubsetId::All, 1.0 / 3.0);
        assert_eq!(MetricsRecord::parse_line(&all.to_line()).unwrap(), all);
    }

    #[test]
    fn duplicates_rejected_and_resume_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.tsv");
        let mut log = MetricsLog::create(&path).unwrap();
        for e in 0..4 {
            log.append(rec(e, SubsetId::All, e as f64)).unwrap();
        }
        assert!(log.append(rec(1, SubsetId::All, 9.0)).is_err());
        log.flush().unwrap();
        drop(log);
        assert_eq!(read_log(&path).unwrap().len(), 4);

        let mut log = MetricsLog::resume(&path, 2).unwrap();
        log.append(rec(2, SubsetId::All, 7.0)).unwrap();
        log.flush().unwrap();
        let back = read_log(&path).unwrap();
        assert_eq!(back.iter().map(|r| r.value).collect::<Vec<_>>(), vec![0.0, 1.0, 7.0]);
    }
}
