//! Depth-map error metrics and their CSV table.

use crate::error::{MvsError, Result};
use crate::tensor::Tensor;

/// Errors at or beyond this many depth intervals are left out of the MAE.
pub const MAE_OUTLIER_INTERVALS: f64 = 100.0;
pub const ABS_THRESHOLD_M: f64 = 0.6;
pub const INTERVAL_THRESHOLD: f64 = 3.0;
pub const CSV_HEADER: &str = "scene,mae,acc06,acc3i,comp";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean absolute error over inlier pixels; NaN when every pixel is an outlier.
    pub mae: f64,
    pub acc_06m: f64,
    pub acc_3interval: f64,
    pub completeness: f64,
    pub n_valid: usize,
}

/// Compares `pred` with `gt` over pixels where `valid` is non-zero and the
/// ground truth is finite. Accuracies use strict `<`.
pub fn evaluate(pred: &Tensor, gt: &Tensor, valid: &Tensor, depth_interval: f64) -> Result<EvalReport> {
    if pred.shape() != gt.shape() || valid.shape() != gt.shape() {
        return Err(MvsError::ShapeMismatch {
            op: "evaluate",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    if !(depth_interval > 0.0) {
        return Err(MvsError::invalid(format!("depth interval must be positive, got {depth_interval}")));
    }
    let (mut n, mut finite, mut acc06, mut acc3, mut inliers) = (0usize, 0usize, 0usize, 0usize, 0usize);
    let mut abs_sum = 0.0;
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(valid.data()) {
        if m == 0.0 || !g.is_finite() {
            continue;
        }
        n += 1;
        if !p.is_finite() {
            continue;
        }
        finite += 1;
        let e = (p - g).abs();
        if e < ABS_THRESHOLD_M {
            acc06 += 1;
        }
        if e < INTERVAL_THRESHOLD * depth_interval {
            acc3 += 1;
        }
        if e < MAE_OUTLIER_INTERVALS * depth_interval {
            inliers += 1;
            abs_sum += e;
        }
    }
    if n == 0 {
        return Err(MvsError::invalid("no valid pixels to evaluate"));
    }
    let nf = n as f64;
    Ok(EvalReport {
        mae: if inliers > 0 { abs_sum / inliers as f64 } else { f64::NAN },
        acc_06m: acc06 as f64 / nf,
        acc_3interval: acc3 as f64 / nf,
        completeness: finite as f64 / nf,
        n_valid: n,
    })
}

/// Per-scene means of every metric.
pub fn mean_report(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.is_empty() {
        return Err(MvsError::invalid("cannot average zero reports"));
    }
    let k = reports.len() as f64;
    let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    Ok(EvalReport {
        mae: avg(|r| r.mae),
        acc_06m: avg(|r| r.acc_06m),
        acc_3interval: avg(|r| r.acc_3interval),
        completeness: avg(|r| r.completeness),
        n_valid: reports.iter().map(|r| r.n_valid).sum(),
    })
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub scene: String,
    pub mae: f64,
    pub acc06: f64,
    pub acc3i: f64,
    pub comp: f64,
}

impl TableRow {
    pub fn new(scene: impl Into<String>, r: &EvalReport) -> TableRow {
        TableRow {
            scene: scene.into(),
            mae: r.mae,
            acc06: r.acc_06m,
            acc3i: r.acc_3interval,
            comp: r.completeness,
        }
    }
}

/// CSV with one row per scene followed by a `mean` row.
pub fn report_table(reports: &[(String, EvalReport)]) -> Result<String> {
    let all: Vec<EvalReport> = reports.iter().map(|(_, r)| *r).collect();
    let mean = mean_report(&all)?;
    let mut rows: Vec<TableRow> = reports.iter().map(|(s, r)| TableRow::new(s.clone(), r)).collect();
    rows.push(TableRow::new("mean", &mean));
    write_table(&rows)
}

pub fn write_table(rows: &[TableRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| MvsError::invalid(format!("csv: {e}"));
    w.write_record(CSV_HEADER.split(',')).map_err(err)?;
    for r in rows {
        w.write_record([
            r.scene.clone(),
            r.mae.to_string(),
            r.acc06.to_string(),
            r.acc3i.to_string(),
            r.comp.to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| MvsError::invalid(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| MvsError::invalid(format!("csv: {e}")))
}

pub fn parse_table(text: &str) -> Result<Vec<TableRow>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| MvsError::invalid(format!("csv: {e}")))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(MvsError::invalid(format!("unexpected CSV header, want '{CSV_HEADER}'")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| MvsError::invalid(format!("csv row {}: {e}", i + 2)))?;
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse()
                .map_err(|_| MvsError::invalid(format!("csv row {}: invalid number '{}'", i + 2, &rec[j])))
        };
        rows.push(TableRow {
            scene: rec[0].to_string(),
            mae: num(1)?,
            acc06: num(2)?,
            acc3i: num(3)?,
            comp: num(4)?,
        });
    }
    Ok(rows)
}
