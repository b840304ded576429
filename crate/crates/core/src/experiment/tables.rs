//! Aggregate and summary CSV files.

use super::ExperimentError;

pub const AGGREGATE_COLUMNS: [&str; 10] = [
    "t",
    "rel_cov_err_wsc",
    "rel_cov_err_plugin",
    "rel_cov_err_bm",
    "cov_wsc",
    "cov_plugin",
    "cov_bm",
    "cov_oracle",
    "rel_var_err_wsc",
    "rel_var_err_plugin",
];

pub const SUMMARY_COLUMNS: [&str; 7] = [
    "estimator",
    "final_coverage",
    "mean_trajectory_coverage",
    "final_rel_cov_err",
    "final_rel_var_err",
    "reps_ok",
    "reps_diverged",
];

/// One checkpoint of replication-averaged metrics. `values[k]` holds
/// column `AGGREGATE_COLUMNS[k + 1]`; `None` is an empty field.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub t: usize,
    pub values: [Option<f64>; 9],
}

impl AggregateRow {
    pub fn get(&self, column: &str) -> Option<f64> {
        AGGREGATE_COLUMNS[1..]
            .iter()
            .position(|c| *c == column)
            .and_then(|k| self.values[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub estimator: String,
    pub final_coverage: Option<f64>,
    pub mean_trajectory_coverage: Option<f64>,
    pub final_rel_cov_err: Option<f64>,
    pub final_rel_var_err: Option<f64>,
    pub reps_ok: usize,
    pub reps_diverged: usize,
}

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_err(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Csv(e.to_string())
}

fn write_records(
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<String, ExperimentError> {
    let mut w = ::csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(csv_err)?;
    String::from_utf8(bytes).map_err(csv_err)
}

pub fn write_aggregate_csv(rows: &[AggregateRow]) -> Result<String, ExperimentError> {
    write_records(
        &AGGREGATE_COLUMNS,
        rows.iter().map(|r| {
            std::iter::once(r.t.to_string())
                .chain(r.values.iter().map(|v| field(*v)))
                .collect()
        }),
    )
}

pub fn write_summary_csv(rows: &[SummaryRow]) -> Result<String, ExperimentError> {
    write_records(
        &SUMMARY_COLUMNS,
        rows.iter().map(|r| {
            vec![
                r.estimator.clone(),
                field(r.final_coverage),
                field(r.mean_trajectory_coverage),
                field(r.final_rel_cov_err),
                field(r.final_rel_var_err),
                r.reps_ok.to_string(),
                r.reps_diverged.to_string(),
            ]
        }),
    )
}

fn read_records(text: &str, header: &[&str]) -> Result<Vec<::csv::StringRecord>, ExperimentError> {
    let mut r = ::csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let found = r.headers().map_err(csv_err)?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(ExperimentError::Csv(format!(
            "unexpected header {:?}",
            found.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.records().map(|rec| rec.map_err(csv_err)).collect()
}

fn opt_f64(s: &str, row: usize) -> Result<Option<f64>, ExperimentError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| ExperimentError::Csv(format!("row {row}: invalid number {s:?}")))
}

fn count(s: &str, row: usize) -> Result<usize, ExperimentError> {
    s.parse::<usize>()
        .map_err(|_| ExperimentError::Csv(format!("row {row}: invalid count {s:?}")))
}

pub fn parse_aggregate_csv(text: &str) -> Result<Vec<AggregateRow>, ExperimentError> {
    read_records(text, &AGGREGATE_COLUMNS)?
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let row = i + 2;
            let t = count(&rec[0], row)?;
            let mut values = [None; 9];
            for (k, v) in values.iter_mut().enumerate() {
                *v = opt_f64(&rec[k + 1], row)?;
            }
            Ok(AggregateRow { t, values })
        })
        .collect()
}

pub fn parse_summary_csv(text: &str) -> Result<Vec<SummaryRow>, ExperimentError> {
    read_records(text, &SUMMARY_COLUMNS)?
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let row = i + 2;
            Ok(SummaryRow {
                estimator: rec[0].to_string(),
                final_coverage: opt_f64(&rec[1], row)?,
                mean_trajectory_coverage: opt_f64(&rec[2], row)?,
                final_rel_cov_err: opt_f64(&rec[3], row)?,
                final_rel_var_err: opt_f64(&rec[4], row)?,
                reps_ok: count(&rec[5], row)?,
                reps_diverged: count(&rec[6], row)?,
            })
        })
        .collect()
}
