//! Brute-force verifiers. Nothing in here calls into [`crate::mixture`]:
//! densities, Hessians and gradients are re-derived directly so the checks in
//! [`checks`] compare two independent routes.

pub mod checks;

use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Samples drawn per RNG stream in the Monte-Carlo estimators.
const CHUNK: usize = 8192;

/// Central-difference gradient of `f` at `theta`.
pub fn finite_diff_gradient<F>(f: F, theta: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Sample mean of a matrix-valued statistic with its standard errors.
#[derive(Clone, Debug)]
pub struct McEstimate {
    pub value: Array2<f64>,
    pub std_err: Array2<f64>,
    pub samples: usize,
}

impl McEstimate {
    /// Largest `|value - target|` measured in standard errors. Entries whose
    /// standard error is zero must match to `1e-12` relative, otherwise they
    /// count as infinitely many standard errors away.
    pub fn max_z_score(&self, target: &Array2<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for ((v, se), t) in self.value.iter().zip(&self.std_err).zip(target) {
            let diff = (v - t).abs();
            let z = if *se > 0.0 {
                diff / se
            } else if diff <= 1e-12 * (1.0 + t.abs()) {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(z);
        }
        worst
    }

    /// Largest `|value - target| / |target|` over entries with non-zero target.
    pub fn max_rel_err(&self, target: &Array2<f64>) -> f64 {
        self.value
            .iter()
            .zip(target)
            .filter(|(_, t)| **t != 0.0)
            .map(|(v, t)| ((v - t) / t).abs())
            .fold(0.0, f64::max)
    }

    /// Restriction to the rows and columns in `rows` x `cols`.
    pub fn block(&self, rows: Range<usize>, cols: Range<usize>) -> McEstimate {
        McEstimate {
            value: self
                .value
                .slice(ndarray::s![rows.clone(), cols.clone()])
                .to_owned(),
            std_err: self.std_err.slice(ndarray::s![rows, cols]).to_owned(),
            samples: self.samples,
        }
    }
}

/// Running mean/variance of every entry of a `p x p` statistic (Welford).
struct MatrixAccumulator {
    n: usize,
    mean: Array2<f64>,
    m2: Array2<f64>,
}

impl MatrixAccumulator {
    fn new(p: usize) -> Self {
        Self {
            n: 0,
            mean: Array2::zeros((p, p)),
            m2: Array2::zeros((p, p)),
        }
    }

    fn push(&mut self, sample: &Array2<f64>) {
        self.n += 1;
        let n = self.n as f64;
        ndarray::Zip::from(&mut self.mean)
            .and(&mut self.m2)
            .and(sample)
            .for_each(|mean, m2, &x| {
                let delta = x - *mean;
                *mean += delta / n;
                *m2 += delta * (x - *mean);
            });
    }

    fn finish(self) -> McEstimate {
        let n = self.n as f64;
        let std_err = if self.n > 1 {
            self.m2.mapv(|m2| (m2.max(0.0) / (n - 1.0) / n).sqrt())
        } else {
            Array2::zeros(self.mean.dim())
        };
        McEstimate {
            value: self.mean,
            std_err,
            samples: self.n,
        }
    }
}

/// Runs `draw` once per sample with an RNG that depends only on the seed and
/// the sample's chunk, so results do not depend on how chunks are scheduled.
fn for_each_sample<F>(n_samples: usize, seed: u64, mut draw: F)
where
    F: FnMut(&mut ChaCha8Rng),
{
    let chunks = n_samples.div_ceil(CHUNK);
    for c in 0..chunks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(c as u64);
        let count = CHUNK.min(n_samples - c * CHUNK);
        for _ in 0..count {
            draw(&mut rng);
        }
    }
}

/// Writes the negative Hessian of `log N(x; μ, σ)` (diagonal, per dimension)
/// into `out` at coordinate offsets `mean_at..` and `scale_at..`.
fn add_neg_gaussian_hessian(
    out: &mut Array2<f64>,
    x: &[f64],
    mean: &[f64],
    scale: &[f64],
    mean_at: usize,
    scale_at: usize,
) {
    for d in 0..mean.len() {
        let s = scale[d];
        let r = x[d] - mean[d];
        out[[mean_at + d, mean_at + d]] = 1.0 / (s * s);
        let cross = 2.0 * r / (s * s * s);
        out[[mean_at + d, scale_at + d]] = cross;
        out[[scale_at + d, mean_at + d]] = cross;
        out[[scale_at + d, scale_at + d]] = 3.0 * r * r / (s * s * s * s) - 1.0 / (s * s);
    }
}

/// Monte-Carlo negative expected Hessian of a diagonal Gaussian over the
/// coordinates `[μ_1..μ_D, σ_1..σ_D]`.
pub fn mc_fisher_gaussian(mean: &[f64], scale: &[f64], n_samples: usize, seed: u64) -> McEstimate {
    let dim = mean.len();
    let mut acc = MatrixAccumulator::new(2 * dim);
    let mut hess = Array2::zeros((2 * dim, 2 * dim));
    let mut x = vec![0.0; dim];
    for_each_sample(n_samples, seed, |rng| {
        for d in 0..dim {
            let z: f64 = StandardNormal.sample(rng);
            x[d] = mean[d] + scale[d] * z;
        }
        hess.fill(0.0);
        add_neg_gaussian_hessian(&mut hess, &x, mean, scale, 0, dim);
        acc.push(&hess);
    });
    acc.finish()
}

/// `diag(π) - ππᵀ`.
pub fn categorical_fim(weights: &[f64]) -> Array2<f64> {
    let k = weights.len();
    Array2::from_shape_fn((k, k), |(i, j)| {
        let diag = if i == j { weights[i] } else { 0.0 };
        diag - weights[i] * weights[j]
    })
}

fn sample_category(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (k, w) in weights.iter().enumerate() {
        cum += w;
        if u < cum {
            return k;
        }
    }
    weights.len() - 1
}

/// Monte-Carlo negative expected Hessian of a softmax-parametrized categorical
/// over its logits. The per-sample Hessian `ππᵀ - diag(π)` does not depend on
/// the drawn outcome, so the estimate is exact.
pub fn mc_fisher_categorical(weights: &[f64], n_samples: usize, seed: u64) -> McEstimate {
    let k = weights.len();
    let mut acc = MatrixAccumulator::new(k);
    let mut hess = Array2::zeros((k, k));
    for_each_sample(n_samples, seed, |rng| {
        let _outcome = sample_category(rng, weights);
        for i in 0..k {
            for j in 0..k {
                let d = if i == j { weights[i] } else { 0.0 };
                hess[[i, j]] = -(weights[i] * weights[j] - d);
            }
        }
        acc.push(&hess);
    });
    acc.finish()
}

/// A diagonal Gaussian mixture with explicit weights.
#[derive(Clone, Debug)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub scales: Vec<Vec<f64>>,
}

impl GmmSpec {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Coordinates of component `k`: `[μ_k (D), σ_k (D)]`.
    pub fn gaussian_block(&self, k: usize) -> Range<usize> {
        let w = 2 * self.dim();
        k * w..(k + 1) * w
    }

    /// Coordinates of the logits.
    pub fn categorical_block(&self) -> Range<usize> {
        let start = self.components() * 2 * self.dim();
        start..start + self.components()
    }

    pub fn num_coords(&self) -> usize {
        self.components() * (2 * self.dim() + 1)
    }
}

/// Monte-Carlo complete-data Fisher information of a Gaussian mixture over
/// all means, scales and logits, from `(z, x)` drawn from the joint.
pub fn mc_complete_fim(gmm: &GmmSpec, n_samples: usize, seed: u64) -> McEstimate {
    let (k, dim) = (gmm.components(), gmm.dim());
    let p = gmm.num_coords();
    let cat = gmm.categorical_block();
    let mut acc = MatrixAccumulator::new(p);
    let mut hess = Array2::zeros((p, p));
    let mut x = vec![0.0; dim];
    for_each_sample(n_samples, seed, |rng| {
        let z = sample_category(rng, &gmm.weights);
        for d in 0..dim {
            let e: f64 = StandardNormal.sample(rng);
            x[d] = gmm.means[z][d] + gmm.scales[z][d] * e;
        }
        hess.fill(0.0);
        // log p(x, z) = log π_z + log N(x; μ_z, σ_z): only component z's block
        // and the logit block have non-zero second derivatives.
        let block = gmm.gaussian_block(z);
        add_neg_gaussian_hessian(
            &mut hess,
            &x,
            &gmm.means[z],
            &gmm.scales[z],
            block.start,
            block.start + dim,
        );
        for i in 0..k {
            for j in 0..k {
                let d = if i == j { gmm.weights[i] } else { 0.0 };
                hess[[cat.start + i, cat.start + j]] = d - gmm.weights[i] * gmm.weights[j];
            }
        }
        acc.push(&hess);
    });
    acc.finish()
}

/// The same complete-data FIM estimated as the expected outer product of the
/// score. Unlike the Hessian form, off-diagonal blocks vanish only in
/// expectation, so this route actually tests block-diagonality.
pub fn mc_complete_fim_scores(gmm: &GmmSpec, n_samples: usize, seed: u64) -> McEstimate {
    let dim = gmm.dim();
    let p = gmm.num_coords();
    let cat = gmm.categorical_block();
    let mut acc = MatrixAccumulator::new(p);
    let mut outer = Array2::zeros((p, p));
    let mut score = vec![0.0; p];
    for_each_sample(n_samples, seed, |rng| {
        let z = sample_category(rng, &gmm.weights);
        score.fill(0.0);
        let block = gmm.gaussian_block(z);
        for d in 0..dim {
            let e: f64 = StandardNormal.sample(rng);
            let s = gmm.scales[z][d];
            // x - μ = s·e
            score[block.start + d] = e / s;
            score[block.start + dim + d] = (e * e - 1.0) / s;
        }
        for (j, w) in gmm.weights.iter().enumerate() {
            score[cat.start + j] = f64::from(u8::from(j == z)) - w;
        }
        for i in 0..p {
            for j in 0..p {
                outer[[i, j]] = score[i] * score[j];
            }
        }
        acc.push(&outer);
    });
    acc.finish()
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix from its eigendecomposition,
/// dropping eigenvalues below `1e-12 * max |λ|`.
pub fn pseudo_inverse(a: &Array2<f64>) -> Array2<f64> {
    let m = to_dmatrix(a);
    assert!(
        (&m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0),
        "pseudo_inverse expects a symmetric matrix"
    );
    let eig = m.symmetric_eigen();
    let tol = 1e-12 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let inv = eig
        .eigenvalues
        .map(|l| if l.abs() > tol { 1.0 / l } else { 0.0 });
    let q = &eig.eigenvectors;
    from_dmatrix(&(q * DMatrix::from_diagonal(&inv) * q.transpose()))
}

/// Max-abs residuals of the four Moore-Penrose conditions for candidate `g` of `a`:
/// `AGA = A`, `GAG = G`, `(AG)ᵀ = AG`, `(GA)ᵀ = GA`.
pub fn moore_penrose_residuals(a: &Array2<f64>, g: &Array2<f64>) -> [f64; 4] {
    let max_abs = |m: Array2<f64>| m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let ag = a.dot(g);
    let ga = g.dot(a);
    [
        max_abs(ag.dot(a) - a),
        max_abs(ga.dot(g) - g),
        max_abs(&ag.t() - &ag),
        max_abs(&ga.t() - &ga),
    ]
}

fn normal_pdf(x: f64, mean: f64, scale: f64) -> f64 {
    let z = (x - mean) / scale;
    (-0.5 * z * z).exp() / (scale * (2.0 * PI).sqrt())
}

fn stable_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Mixture density `Σ_k π_k Π_d N(y_d; μ_kd, σ_kd)` by direct summation.
pub fn naive_mixture_density(
    weights: &[f64],
    means: &[Vec<f64>],
    scales: &[Vec<f64>],
    y: &[f64],
) -> f64 {
    weights
        .iter()
        .enumerate()
        .map(|(k, w)| {
            w * y
                .iter()
                .enumerate()
                .map(|(d, &v)| normal_pdf(v, means[k][d], scales[k][d]))
                .product::<f64>()
        })
        .sum()
}

/// Batch-mean NLL of raw head outputs and its gradient with respect to the
/// raw outputs, computed in density space with the quotient rule
/// `∇ log Σ_k π_k N_k = Σ_k ∇(π_k N_k) / Σ_k π_k N_k`.
///
/// Raw layout per row: `K` logits, `K*D` means, `K*D` raw scales with
/// `σ = softplus(raw) + 1e-6`.
pub fn naive_nll_raw_gradient(
    raw: ArrayView2<'_, f64>,
    components: usize,
    y: ArrayView2<'_, f64>,
) -> (f64, Array2<f64>) {
    let (b, dim) = y.dim();
    let k = components;
    let mut grad = Array2::zeros(raw.dim());
    let mut loss = 0.0;
    for i in 0..b {
        let row = raw.row(i);
        let max = (0..k).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let expd: Vec<f64> = (0..k).map(|j| (row[j] - max).exp()).collect();
        let total: f64 = expd.iter().sum();
        let pi: Vec<f64> = expd.iter().map(|e| e / total).collect();
        let mean = |j: usize, d: usize| row[k + j * dim + d];
        let raw_scale = |j: usize, d: usize| row[k + k * dim + j * dim + d];
        let scale = |j: usize, d: usize| stable_softplus(raw_scale(j, d)) + 1e-6;
        let dens: Vec<f64> = (0..k)
            .map(|j| {
                (0..dim)
                    .map(|d| normal_pdf(y[[i, d]], mean(j, d), scale(j, d)))
                    .product()
            })
            .collect();
        let p: f64 = (0..k).map(|j| pi[j] * dens[j]).sum();
        loss -= p.ln();
        for j in 0..k {
            // ∂p/∂ψ_j = π_j (N_j - p)
            grad[[i, j]] = -(pi[j] * (dens[j] - p)) / p;
            for d in 0..dim {
                let (m, s) = (mean(j, d), scale(j, d));
                let r = y[[i, d]] - m;
                let dp_dmean = pi[j] * dens[j] * r / (s * s);
                let dp_dscale = pi[j] * dens[j] * (r * r / (s * s * s) - 1.0 / s);
                let slope = 1.0 / (1.0 + (-raw_scale(j, d)).exp());
                grad[[i, k + j * dim + d]] = -dp_dmean / p;
                grad[[i, k + k * dim + j * dim + d]] = -dp_dscale * slope / p;
            }
        }
    }
    (loss / b as f64, grad / b as f64)
}
