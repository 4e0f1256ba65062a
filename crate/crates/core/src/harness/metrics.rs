//! Evaluation metrics and the metrics CSV format.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};

use crate::mixture::MixtureParams;
use crate::{Error, Result};

pub const CSV_COLUMNS: [&str; 6] = [
    "iteration",
    "train_loss",
    "test_nll",
    "entropy",
    "rmse_min",
    "wall_ms",
];

/// One evaluation row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    /// Number of parameter updates performed so far.
    pub iteration: u64,
    /// Training objective over the whole training split.
    pub train_loss: f64,
    pub test_nll: f64,
    /// Entropy of the mixture weights averaged over the evaluation set.
    pub entropy: f64,
    pub rmse_min: f64,
    /// Cumulative training time, excluding evaluation.
    pub wall_ms: f64,
    /// Component means averaged over the evaluation set, `K x Dy` row-major.
    pub means: Option<Vec<f64>>,
}

/// `-Σ π_k ln π_k` with `0 ln 0 = 0`.
pub fn entropy(weights: ArrayView1<'_, f64>) -> f64 {
    -weights
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Root-mean-square over samples of the distance from `y` to its nearest component mean.
pub fn rmse_min(params: &MixtureParams, y: ArrayView2<'_, f64>) -> Result<f64> {
    let means = params.means();
    let (b, k, dy) = means.dim();
    if y.dim() != (b, dy) {
        return Err(Error::Shape(format!(
            "targets have shape {:?}, expected ({b}, {dy})",
            y.dim()
        )));
    }
    let mut total = 0.0;
    for i in 0..b {
        let nearest = (0..k)
            .map(|j| {
                (0..dy)
                    .map(|d| (means[[i, j, d]] - y[[i, d]]).powi(2))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        total += nearest;
    }
    Ok((total / b as f64).sqrt())
}

fn header(components: Option<(usize, usize)>) -> String {
    let mut cols: Vec<String> = CSV_COLUMNS.iter().map(|s| s.to_string()).collect();
    if let Some((k, dy)) = components {
        for j in 0..k {
            for d in 0..dy {
                cols.push(format!("mu_{j}_{d}"));
            }
        }
    }
    cols.join(",")
}

/// Renders the series as CSV text. Floats use 17 significant digits so
/// parsing recovers them exactly.
///
/// `means_shape` is `(K, Dy)` when the rows carry mean snapshots.
pub fn metrics_to_csv(
    records: &[MetricsRecord],
    means_shape: Option<(usize, usize)>,
) -> Result<String> {
    let width = means_shape.map(|(k, dy)| k * dy);
    let mut out = header(means_shape);
    out.push('\n');
    for r in records {
        let mut fields = vec![r.iteration.to_string()];
        for v in [r.train_loss, r.test_nll, r.entropy, r.rmse_min, r.wall_ms] {
            fields.push(format!("{v:.16e}"));
        }
        match (width, &r.means) {
            (Some(w), Some(m)) if m.len() == w => {
                fields.extend(m.iter().map(|v| format!("{v:.16e}")))
            }
            (None, _) => {}
            _ => {
                return Err(Error::Shape(format!(
                    "metrics row {} has no matching mean snapshot",
                    r.iteration
                )))
            }
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_csv(
    records: &[MetricsRecord],
    means_shape: Option<(usize, usize)>,
    path: &Path,
) -> Result<()> {
    let text = metrics_to_csv(records, means_shape)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Parses a file written by [`emit_csv`].
pub fn parse_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| ingest(path, 1, "", e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| ingest(path, 1, "", e.to_string()))?
        .clone();
    if headers.len() < CSV_COLUMNS.len() || headers.iter().zip(CSV_COLUMNS).any(|(a, b)| a != b) {
        return Err(ingest(path, 1, "", "unexpected metrics header".into()));
    }
    let has_means = headers.len() > CSV_COLUMNS.len();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| ingest(path, line, "", e.to_string()))?;
        let field = |c: usize| -> Result<f64> {
            row[c].parse().map_err(|_| {
                ingest(
                    path,
                    line,
                    &headers[c],
                    format!("not a number: `{}`", &row[c]),
                )
            })
        };
        let iteration = row[0].parse().map_err(|_| {
            ingest(
                path,
                line,
                "iteration",
                format!("not an integer: `{}`", &row[0]),
            )
        })?;
        let means = if has_means {
            Some(
                (CSV_COLUMNS.len()..row.len())
                    .map(field)
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        records.push(MetricsRecord {
            iteration,
            train_loss: field(1)?,
            test_nll: field(2)?,
            entropy: field(3)?,
            rmse_min: field(4)?,
            wall_ms: field(5)?,
            means,
        });
    }
    Ok(records)
}

fn ingest(path: &Path, row: usize, column: &str, message: String) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    }
}
