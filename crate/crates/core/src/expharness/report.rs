use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExperimentError, Init, Result};

pub const CSV_HEADER: &str =
    "init,pretrain_domain,finetune_domain,fraction,corruption,seed,test_iou,max_val_iou";

const AGGREGATE_HEADER: &str =
    "aggregate,init,pretrain_domain,finetune_domain,fraction,corruption,n,\
mean_test_iou,min_test_iou,max_test_iou,mean_max_val_iou,min_max_val_iou,max_max_val_iou";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub init: Init,
    /// `"none"` for scratch runs.
    pub pretrain_domain: String,
    pub finetune_domain: String,
    pub fraction: f64,
    /// `"none"` outside the corruption ablation.
    pub corruption: String,
    pub seed: u64,
    pub test_iou: f64,
    pub max_val_iou: f64,
}

impl ReportRow {
    fn same_cell(&self, o: &ReportRow) -> bool {
        self.init == o.init
            && self.pretrain_domain == o.pretrain_domain
            && self.finetune_domain == o.finetune_domain
            && self.fraction == o.fraction
            && self.corruption == o.corruption
    }
}

/// Mean, min and max over the seeds of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub init: Init,
    pub pretrain_domain: String,
    pub finetune_domain: String,
    pub fraction: f64,
    pub corruption: String,
    pub n: usize,
    pub mean_test_iou: f64,
    pub min_test_iou: f64,
    pub max_test_iou: f64,
    pub mean_max_val_iou: f64,
    pub min_max_val_iou: f64,
    pub max_max_val_iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
}

fn stats(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, f64) {
    let n = values.clone().count() as f64;
    let sum: f64 = values.clone().sum();
    let min = values.clone().fold(f64::INFINITY, f64::min);
    let max = values.fold(f64::NEG_INFINITY, f64::max);
    (sum / n, min, max)
}

impl TableReport {
    /// Aggregates are computed over consecutive rows of the same cell, so
    /// rows must already be in report order.
    pub fn from_rows(rows: Vec<ReportRow>) -> Self {
        let mut aggregates = Vec::new();
        let mut start = 0;
        while start < rows.len() {
            let mut end = start + 1;
            while end < rows.len() && rows[end].same_cell(&rows[start]) {
                end += 1;
            }
            let cell = &rows[start..end];
            let (mean_t, min_t, max_t) = stats(cell.iter().map(|r| r.test_iou));
            let (mean_v, min_v, max_v) = stats(cell.iter().map(|r| r.max_val_iou));
            let r = &cell[0];
            aggregates.push(Aggregate {
                init: r.init,
                pretrain_domain: r.pretrain_domain.clone(),
                finetune_domain: r.finetune_domain.clone(),
                fraction: r.fraction,
                corruption: r.corruption.clone(),
                n: cell.len(),
                mean_test_iou: mean_t,
                min_test_iou: min_t,
                max_test_iou: max_t,
                mean_max_val_iou: mean_v,
                min_max_val_iou: min_v,
                max_max_val_iou: max_v,
            });
            start = end;
        }
        Self { rows, aggregates }
    }

    /// Aggregate of the first cell matching every given coordinate.
    pub fn aggregate(
        &self,
        init: Init,
        pretrain: &str,
        finetune: &str,
        fraction: f64,
        corruption: &str,
    ) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| {
            a.init == init
                && a.pretrain_domain == pretrain
                && a.finetune_domain == finetune
                && a.fraction == fraction
                && a.corruption == corruption
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{},{},{:.6},{:.6}",
                r.init,
                r.pretrain_domain,
                r.finetune_domain,
                r.fraction,
                r.corruption,
                r.seed,
                r.test_iou,
                r.max_val_iou
            );
        }
        if !self.aggregates.is_empty() {
            out.push('\n');
            out.push_str(AGGREGATE_HEADER);
            out.push('\n');
            for a in &self.aggregates {
                let _ = writeln!(
                    out,
                    "aggregate,{},{},{},{:.6},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    a.init,
                    a.pretrain_domain,
                    a.finetune_domain,
                    a.fraction,
                    a.corruption,
                    a.n,
                    a.mean_test_iou,
                    a.min_test_iou,
                    a.max_test_iou,
                    a.mean_max_val_iou,
                    a.min_max_val_iou,
                    a.max_max_val_iou
                );
            }
        }
        out
    }
}

/// Writes the CSV (6 decimals) and the full-precision JSON mirror.
pub fn emit_report(report: &TableReport, csv: &Path, json: &Path) -> Result<()> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ExperimentError::Io { path, source }
    };
    fs::write(csv, report.to_csv()).map_err(io(csv))?;
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(json, text).map_err(io(json))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(init: Init, fraction: f64, seed: u64, t: f64) -> ReportRow {
        ReportRow {
            init,
            pretrain_domain: "none".into(),
            finetune_domain: "a".into(),
            fraction,
            corruption: "none".into(),
            seed,
            test_iou: t,
            max_val_iou: t + 0.01,
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(
            TableReport::from_rows(vec![]).to_csv(),
            format!("{CSV_HEADER}\n")
        );
    }

    #[test]
    fn aggregates_follow_cells() {
        let rows = vec![
            row(Init::Scratch, 0.6, 1, 0.5),
            row(Init::Scratch, 0.6, 2, 0.7),
            row(Init::Scratch, 1.0, 1, 0.9),
        ];
        let r = TableReport::from_rows(rows);
        assert_eq!(r.aggregates.len(), 2);
        assert!((r.aggregates[0].mean_test_iou - 0.6).abs() < 1e-12);
        assert_eq!(r.aggregates[0].min_test_iou, 0.5);
        assert_eq!(r.aggregates[0].max_test_iou, 0.7);
        let csv = r.to_csv();
        assert!(csv.starts_with(&format!(
            "{CSV_HEADER}\nscratch,none,a,0.600000,none,1,0.500000,0.510000\n"
        )));
        assert_eq!(
            csv.lines()
                .filter(|l| l.starts_with("aggregate,scratch"))
                .count(),
            2
        );
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let r = TableReport::from_rows(vec![row(Init::SslPretrained, 0.7, 3, 0.1 + 0.2)]);
        let dir = tempfile::tempdir().unwrap();
        let (c, j) = (dir.path().join("r.csv"), dir.path().join("r.json"));
        emit_report(&r, &c, &j).unwrap();
        let back: TableReport = serde_json::from_str(&fs::read_to_string(j).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.rows[0].test_iou.to_bits(), (0.1f64 + 0.2).to_bits());
    }
}
