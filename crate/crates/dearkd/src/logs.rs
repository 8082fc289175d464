//! CSV run logs, attention-distance series and image manifests.

use std::path::Path;

use dearkd_core::metrics::AttnDistanceReport;
use serde::{Deserialize, Serialize};

use crate::data::ManifestRow;
use crate::error::{Error, IoContext, Result};

pub const RUN_LOG: &str = "runlog.csv";
pub const ATTN_LOG: &str = "attn_distance.csv";

/// One `(epoch, split)` row. Loss columns of the test split hold the
/// evaluation cross-entropy in `loss_total` / `loss_ce` and zeros elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLogRow {
    pub epoch: usize,
    pub split: String,
    pub lr: f64,
    pub stage: u8,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_logit: f64,
    pub loss_hidden: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnDistanceRow {
    pub epoch: usize,
    pub layer: usize,
    pub head: usize,
    pub mean_distance: f64,
}

pub fn attn_rows(report: &AttnDistanceReport) -> Vec<AttnDistanceRow> {
    report
        .heads
        .iter()
        .enumerate()
        .flat_map(|(layer, heads)| heads.iter().enumerate().map(move |(head, &d)| AttnDistanceRow { epoch: report.epoch, layer, head, mean_distance: d }))
        .collect()
}

/// Appends rows to a CSV file, writing the header first when the file is
/// new. Each call flushes, so partial runs leave valid logs behind.
pub struct CsvLog {
    writer: csv::Writer<std::fs::File>,
    path: std::path::PathBuf,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::File::create(path).at(path)?;
        Ok(CsvLog { writer: csv::Writer::from_writer(file), path: path.to_path_buf() })
    }

    pub fn write<R: Serialize>(&mut self, rows: &[R]) -> Result<()> {
        for r in rows {
            self.writer.serialize(r).at(&self.path)?;
        }
        self.writer.flush().at(&self.path)
    }
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut reader = csv::Reader::from_path(path).at(path)?;
    reader.deserialize().collect::<std::result::Result<Vec<R>, _>>().at(path)
}

/// Reads a run log and checks one row per `(epoch, split)` in
/// non-decreasing epoch order.
pub fn read_run_log(path: &Path) -> Result<Vec<RunLogRow>> {
    let rows: Vec<RunLogRow> = read_csv(path)?;
    let mut seen = std::collections::BTreeSet::new();
    for (i, r) in rows.iter().enumerate() {
        if i > 0 && r.epoch < rows[i - 1].epoch {
            return Err(Error::Config(format!("{}: row {i} goes back to epoch {}", path.display(), r.epoch)));
        }
        if !seen.insert((r.epoch, r.split.clone())) {
            return Err(Error::Config(format!("{}: duplicate row for epoch {} split {}", path.display(), r.epoch, r.split)));
        }
    }
    Ok(rows)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut log = CsvLog::create(path)?;
    log.write(rows)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    read_csv(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_log_round_trip_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RUN_LOG);
        let row = |epoch, split: &str| RunLogRow {
            epoch,
            split: split.into(),
            lr: 1e-3,
            stage: 1,
            loss_total: 0.5,
            loss_ce: 0.5,
            loss_logit: 0.0,
            loss_hidden: 0.0,
            top1: 0.25,
        };
        let mut log = CsvLog::create(&path).unwrap();
        log.write(&[row(0, "train"), row(0, "test")]).unwrap();
        log.write(&[row(1, "train")]).unwrap();
        drop(log);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,split,lr,stage,loss_total,loss_ce,loss_logit,loss_hidden,top1\n"), "{text}");
        assert_eq!(read_run_log(&path).unwrap().len(), 3);
        let mut log = CsvLog::create(&path).unwrap();
        log.write(&[row(1, "train"), row(0, "train")]).unwrap();
        drop(log);
        assert!(read_run_log(&path).is_err());
    }

    #[test]
    fn attention_rows_flatten_layers() {
        let r = AttnDistanceReport { epoch: 2, heads: vec![vec![0.5, 1.0], vec![2.0, 3.0]] };
        let rows = attn_rows(&r);
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3], AttnDistanceRow { epoch: 2, layer: 1, head: 1, mean_distance: 3.0 });
    }
}
