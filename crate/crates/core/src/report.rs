//! Sweep reports: CSV with one row per trial plus one aggregate row per
//! (variant, rate), or JSON aggregates.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::{CellReport, TrialReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::InvalidArgument(format!("unknown report format `{other}`"))),
        }
    }
}

/// Aggregate of one (variant, rate) cell; also the JSON record schema.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRecord {
    pub experiment: String,
    pub rate: f64,
    pub trials: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    pub seed: u64,
}

/// `<variant>-<metric>-<target>`, e.g. `zobnn-acc-all`.
pub fn experiment_name(report: &TrialReport, cell: &CellReport) -> String {
    format!("{}-{}-{}", cell.mode, report.metric.name(), report.target)
}

pub fn aggregates(report: &TrialReport) -> Vec<AggregateRecord> {
    report
        .cells
        .iter()
        .map(|c| AggregateRecord {
            experiment: experiment_name(report, c),
            rate: c.rate,
            trials: c.values.len(),
            mean: c.stats.mean,
            median: c.stats.median,
            q1: c.stats.q1,
            q3: c.stats.q3,
            min: c.stats.min,
            max: c.stats.max,
            seed: report.seed,
        })
        .collect()
}

/// One CSV line: trial rows fill `trial`, `value` and `flips`; aggregate
/// rows fill the statistics columns.
#[derive(Serialize)]
struct CsvRow<'a> {
    experiment: &'a str,
    rate: f64,
    row: &'static str,
    trial: Option<u64>,
    value: Option<f64>,
    flips: Option<u64>,
    trials: Option<usize>,
    mean: Option<f64>,
    median: Option<f64>,
    q1: Option<f64>,
    q3: Option<f64>,
    min: Option<f64>,
    max: Option<f64>,
    seed: u64,
}

pub fn write_csv(report: &TrialReport, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (cell, agg) in report.cells.iter().zip(aggregates(report)) {
        let blank = CsvRow {
            experiment: &agg.experiment,
            rate: cell.rate,
            row: "trial",
            trial: None,
            value: None,
            flips: None,
            trials: None,
            mean: None,
            median: None,
            q1: None,
            q3: None,
            min: None,
            max: None,
            seed: report.seed,
        };
        for (t, (&value, &flips)) in cell.values.iter().zip(&cell.flips).enumerate() {
            w.serialize(CsvRow { trial: Some(t as u64), value: Some(value), flips: Some(flips), ..blank })?;
        }
        w.serialize(CsvRow {
            row: "aggregate",
            flips: Some(cell.total_flips()),
            trials: Some(agg.trials),
            mean: Some(agg.mean),
            median: Some(agg.median),
            q1: Some(agg.q1),
            q3: Some(agg.q3),
            min: Some(agg.min),
            max: Some(agg.max),
            ..blank
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(report: &TrialReport, mut out: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, &aggregates(report))?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_report_file(report: &TrialReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        ReportFormat::Csv => write_csv(report, file),
        ReportFormat::Json => write_json(report, file),
    }
}
