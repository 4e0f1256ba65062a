//! Synthetic generators, CSV ingestion and seeded mini-batching.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// Two-Gaussians mode centres and isotropic standard deviation.
pub const TWO_GAUSSIANS_MEANS: [[f64; 2]; 2] = [[-2.0, -2.0], [2.0, 2.0]];
pub const TWO_GAUSSIANS_STD: f64 = 0.5;
/// Two-Sinusoids noise variance.
pub const SINUSOID_NOISE_VAR: f64 = 0.1;

/// Per-column z-score statistics (population standard deviation).
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_std: Vec<f64>,
}

/// Known generating density, used for reference likelihoods.
#[derive(Clone, Debug, PartialEq)]
pub enum GroundTruth {
    /// Input-independent equal-weight mixture of isotropic Gaussians.
    Mixture { means: Vec<Vec<f64>>, std: f64 },
    /// `y = ±π sin(x) + ξ` with equal probability.
    TwoSinusoids { noise_std: f64 },
}

impl GroundTruth {
    pub fn log_density(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
        let log_normal = |mean: &[f64], std: f64| -> f64 {
            mean.iter()
                .zip(y.iter())
                .map(|(m, v)| {
                    let z = (v - m) / std;
                    -0.5 * z * z - std.ln() - 0.5 * (2.0 * PI).ln()
                })
                .sum()
        };
        let terms: Vec<f64> = match self {
            GroundTruth::Mixture { means, std } => {
                let lw = -(means.len() as f64).ln();
                means.iter().map(|m| lw + log_normal(m, *std)).collect()
            }
            GroundTruth::TwoSinusoids { noise_std } => {
                let c = PI * x[0].sin();
                vec![
                    0.5f64.ln() + log_normal(&[c], *noise_std),
                    0.5f64.ln() + log_normal(&[-c], *noise_std),
                ]
            }
        };
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    y: Array2<f64>,
    x_names: Vec<String>,
    y_names: Vec<String>,
    norm: Option<NormStats>,
    truth: Option<GroundTruth>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        let x_names = (0..x.ncols()).map(|i| format!("x{i}")).collect();
        let y_names = (0..y.ncols()).map(|i| format!("y{i}")).collect();
        Self::with_names(x, y, x_names, y_names)
    }

    pub fn with_names(
        x: Array2<f64>,
        y: Array2<f64>,
        x_names: Vec<String>,
        y_names: Vec<String>,
    ) -> Result<Self> {
        if x.nrows() == 0 || x.nrows() != y.nrows() {
            return Err(Error::Shape(format!(
                "dataset needs matching non-empty x/y, got {} and {} rows",
                x.nrows(),
                y.nrows()
            )));
        }
        if x.ncols() == 0 || y.ncols() == 0 {
            return Err(Error::Shape(
                "dataset needs at least one feature and one target".into(),
            ));
        }
        if x_names.len() != x.ncols() || y_names.len() != y.ncols() {
            return Err(Error::Shape("column names do not match data width".into()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("dataset contains non-finite values".into()));
        }
        Ok(Self {
            x,
            y,
            x_names,
            y_names,
            norm: None,
            truth: None,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    pub fn y(&self) -> &Array2<f64> {
        &self.y
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn norm(&self) -> Option<&NormStats> {
        self.norm.as_ref()
    }

    pub fn truth(&self) -> Option<&GroundTruth> {
        self.truth.as_ref()
    }

    /// Mean negative log-likelihood of the data under the generating density.
    pub fn ground_truth_nll(&self) -> Option<f64> {
        let truth = self.truth.as_ref()?;
        let total: f64 = self
            .x
            .outer_iter()
            .zip(self.y.outer_iter())
            .map(|(x, y)| truth.log_density(x, y))
            .sum();
        Some(-total / self.len() as f64)
    }

    /// Rows selected by `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), indices),
            y: self.y.select(Axis(0), indices),
            x_names: self.x_names.clone(),
            y_names: self.y_names.clone(),
            norm: self.norm.clone(),
            truth: self.truth.clone(),
        }
    }

    /// Z-scores every column of x and y, keeping the statistics.
    pub fn normalized(&self) -> Self {
        fn stats(a: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
            let mean = a.mean_axis(Axis(0)).expect("non-empty");
            let std = a
                .std_axis(Axis(0), 0.0)
                .mapv(|s| if s > 0.0 { s } else { 1.0 });
            (mean.to_vec(), std.to_vec())
        }
        let (x_mean, x_std) = stats(&self.x);
        let (y_mean, y_std) = stats(&self.y);
        let apply = |a: &Array2<f64>, m: &[f64], s: &[f64]| {
            (a - &Array1::from(m.to_vec())) / &Array1::from(s.to_vec())
        };
        Self {
            x: apply(&self.x, &x_mean, &x_std),
            y: apply(&self.y, &y_mean, &y_std),
            x_names: self.x_names.clone(),
            y_names: self.y_names.clone(),
            norm: Some(NormStats {
                x_mean,
                x_std,
                y_mean,
                y_std,
            }),
            truth: None,
        }
    }

    /// Inverse of [`Dataset::normalized`]; a no-op without statistics.
    pub fn denormalized(&self) -> Self {
        let Some(n) = &self.norm else {
            return self.clone();
        };
        let undo = |a: &Array2<f64>, m: &[f64], s: &[f64]| {
            a * &Array1::from(s.to_vec()) + &Array1::from(m.to_vec())
        };
        Self {
            x: undo(&self.x, &n.x_mean, &n.x_std),
            y: undo(&self.y, &n.y_mean, &n.y_std),
            x_names: self.x_names.clone(),
            y_names: self.y_names.clone(),
            norm: None,
            truth: None,
        }
    }

    /// Writes feature columns then target columns, comma separated with a header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let header: Vec<&str> = self
            .x_names
            .iter()
            .chain(&self.y_names)
            .map(String::as_str)
            .collect();
        let mut text = header.join(",");
        text.push('\n');
        for (x, y) in self.x.outer_iter().zip(self.y.outer_iter()) {
            let row: Vec<String> = x.iter().chain(y.iter()).map(|v| format!("{v:?}")).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        out.write_all(text.as_bytes())
            .and_then(|_| out.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// `2 * n_per_mode` points in R², half around each of [`TWO_GAUSSIANS_MEANS`].
/// The single input feature is the constant 0.
pub fn gen_two_gaussians(n_per_mode: usize, seed: u64) -> Result<Dataset> {
    if n_per_mode == 0 {
        return Err(Error::Config("n_per_mode must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, TWO_GAUSSIANS_STD).expect("valid std");
    let mut y = Array2::zeros((2 * n_per_mode, 2));
    for (mode, centre) in TWO_GAUSSIANS_MEANS.iter().enumerate() {
        for i in 0..n_per_mode {
            let row = mode * n_per_mode + i;
            for d in 0..2 {
                y[[row, d]] = centre[d] + noise.sample(&mut rng);
            }
        }
    }
    let x = Array2::zeros((2 * n_per_mode, 1));
    let mut ds = Dataset::new(x, y)?;
    ds.truth = Some(GroundTruth::Mixture {
        means: TWO_GAUSSIANS_MEANS.iter().map(|m| m.to_vec()).collect(),
        std: TWO_GAUSSIANS_STD,
    });
    Ok(ds)
}

/// `x ~ U(0, 4π)`, exactly `n_per_mode` points on each of `π sin(x)` and
/// `π sin(x + π)`, plus Gaussian noise of variance [`SINUSOID_NOISE_VAR`].
pub fn gen_two_sinusoids(n_per_mode: usize, seed: u64) -> Result<Dataset> {
    if n_per_mode == 0 {
        return Err(Error::Config("n_per_mode must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise_std = SINUSOID_NOISE_VAR.sqrt();
    let noise = Normal::new(0.0, noise_std).expect("valid std");
    let n = 2 * n_per_mode;
    let mut x = Array2::zeros((n, 1));
    let mut y = Array2::zeros((n, 1));
    for row in 0..n {
        let phase = if row < n_per_mode { 0.0 } else { PI };
        let xv: f64 = rng.random_range(0.0..4.0 * PI);
        x[[row, 0]] = xv;
        y[[row, 0]] = PI * (xv + phase).sin() + noise.sample(&mut rng);
    }
    let mut ds = Dataset::new(x, y)?;
    ds.truth = Some(GroundTruth::TwoSinusoids { noise_std });
    Ok(ds)
}

/// Reads a numeric CSV with a header row. Columns named in `target_columns`
/// become y (in the given order); the rest, in file order, become x.
pub fn load_csv(path: &Path, target_columns: &[String], normalize: bool) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let ingest = |row: usize, column: &str, message: String| Error::Ingest {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message,
    };
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| ingest(1, "-", e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if target_columns.is_empty() {
        return Err(ingest(1, "-", "no target columns given".into()));
    }
    let mut target_idx = Vec::with_capacity(target_columns.len());
    for name in target_columns {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ingest(1, name, "unknown target column".into()))?;
        target_idx.push(idx);
    }
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|i| !target_idx.contains(i))
        .collect();
    if feature_idx.is_empty() {
        return Err(ingest(
            1,
            "-",
            "no feature columns left after removing targets".into(),
        ));
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| ingest(row, "-", e.to_string()))?;
        let cell = |idx: usize| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("").trim();
            let v: f64 = raw
                .parse()
                .map_err(|_| ingest(row, &headers[idx], format!("`{raw}` is not a number")))?;
            if !v.is_finite() {
                return Err(ingest(row, &headers[idx], format!("`{raw}` is not finite")));
            }
            Ok(v)
        };
        for &idx in &feature_idx {
            xs.push(cell(idx)?);
        }
        for &idx in &target_idx {
            ys.push(cell(idx)?);
        }
    }
    let n = xs.len() / feature_idx.len();
    if n == 0 {
        return Err(ingest(2, "-", "file has no data rows".into()));
    }
    let x = Array2::from_shape_vec((n, feature_idx.len()), xs).expect("rectangular");
    let y = Array2::from_shape_vec((n, target_idx.len()), ys).expect("rectangular");
    let ds = Dataset::with_names(
        x,
        y,
        feature_idx.iter().map(|&i| headers[i].clone()).collect(),
        target_idx.iter().map(|&i| headers[i].clone()).collect(),
    )?;
    Ok(if normalize { ds.normalized() } else { ds })
}

/// Seeded train/test split. The test set is `None` when `train_frac == 1`.
pub fn split(ds: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
    if !(train_frac > 0.0 && train_frac <= 1.0) {
        return Err(Error::Config(format!(
            "train_frac must be in (0, 1], got {train_frac}"
        )));
    }
    if train_frac == 1.0 {
        return Ok((ds.clone(), None));
    }
    let n_train = (train_frac * ds.len() as f64).round() as usize;
    if n_train == 0 {
        return Err(Error::Config(format!(
            "train_frac {train_frac} leaves no training rows out of {}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let train = ds.subset(&order[..n_train]);
    let test = (n_train < ds.len()).then(|| ds.subset(&order[n_train..]));
    Ok((train, test))
}

/// Per-epoch shuffled mini-batches over a fixed training set.
#[derive(Clone, Debug)]
pub struct Batcher {
    train: Dataset,
    batch_size: usize,
    seed: u64,
}

impl Batcher {
    pub fn new(train: Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(Self {
            train,
            batch_size,
            seed,
        })
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.batch_size)
    }

    /// Row order for `epoch`, shuffled with seed `seed + epoch`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(epoch));
        order.shuffle(&mut rng);
        order
    }

    /// Index batches for `epoch`; the last one may be short.
    pub fn epoch_batches(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.epoch_order(epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Materialised `(x, y)` batches for `epoch`.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = (Array2<f64>, Array2<f64>)> + '_ {
        self.epoch_batches(epoch).into_iter().map(move |idx| {
            (
                self.train.x.select(Axis(0), &idx),
                self.train.y.select(Axis(0), &idx),
            )
        })
    }
}

/// Splits `ds` and wraps the training part in a [`Batcher`].
pub fn split_and_batch(
    ds: &Dataset,
    train_frac: f64,
    batch_size: usize,
    seed: u64,
) -> Result<(Batcher, Option<Dataset>)> {
    let (train, test) = split(ds, train_frac, seed)?;
    Ok((Batcher::new(train, batch_size, seed)?, test))
}
