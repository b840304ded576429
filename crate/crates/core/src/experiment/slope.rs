//! Log-log slope of an error curve.

use super::{parse_aggregate_csv, ExperimentError};

pub const DEFAULT_TAIL: f64 = 0.3;

/// Least-squares slope of `log err` against `log t` over the last
/// `ceil(tail · n)` points. Points with nonpositive or missing error are
/// skipped.
pub fn fit_loglog_slope(
    points: &[(usize, Option<f64>)],
    tail: f64,
) -> Result<f64, ExperimentError> {
    if !(tail > 0.0 && tail <= 1.0) {
        return Err(ExperimentError::Config {
            key: "tail".into(),
            line: None,
            message: format!("must lie in (0, 1], got {tail}"),
        });
    }
    let keep = ((points.len() as f64) * tail).ceil() as usize;
    let xy: Vec<(f64, f64)> = points[points.len() - keep..]
        .iter()
        .filter_map(|&(t, e)| match e {
            Some(e) if e > 0.0 && e.is_finite() && t > 0 => Some(((t as f64).ln(), e.ln())),
            _ => None,
        })
        .collect();
    if xy.len() < 2 {
        return Err(ExperimentError::Csv(format!(
            "need at least 2 usable rows in the tail, found {}",
            xy.len()
        )));
    }
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(ExperimentError::Csv(
            "all tail rows share the same t".into(),
        ));
    }
    Ok(sxy / sxx)
}

/// Slope of `column` in an aggregate CSV.
pub fn slope_from_csv(text: &str, column: &str, tail: f64) -> Result<f64, ExperimentError> {
    if !super::AGGREGATE_COLUMNS[1..].contains(&column) {
        return Err(ExperimentError::Config {
            key: "column".into(),
            line: None,
            message: format!("unknown column {column:?}"),
        });
    }
    let rows = parse_aggregate_csv(text)?;
    let points: Vec<(usize, Option<f64>)> = rows.iter().map(|r| (r.t, r.get(column))).collect();
    fit_loglog_slope(&points, tail)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let pts: Vec<_> = (1..=50)
            .map(|k| (k * 100, Some(((k * 100) as f64).powf(-0.25))))
            .collect();
        assert!((fit_loglog_slope(&pts, 0.3).unwrap() + 0.25).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_slope() {
        let pts: Vec<_> = (1..=20).map(|k| (k, Some(3.0))).collect();
        assert!(fit_loglog_slope(&pts, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn too_few_rows() {
        assert!(fit_loglog_slope(&[(1, Some(1.0))], 1.0).is_err());
        assert!(fit_loglog_slope(&[(1, Some(1.0)), (2, None)], 1.0).is_err());
        assert!(fit_loglog_slope(&[], 0.5).is_err());
        assert!(fit_loglog_slope(&[(1, Some(1.0)), (2, Some(1.0))], 0.0).is_err());
    }
}
