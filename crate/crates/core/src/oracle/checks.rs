//! Numerical checks that pit the library against the independent routes in
//! the parent module. Each returns measured errors alongside the tolerance
//! they are judged by, so callers can print or assert on them.

use std::fmt;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    categorical_fim, finite_diff_gradient, mc_complete_fim, mc_complete_fim_scores,
    mc_fisher_categorical, mc_fisher_gaussian, moore_penrose_residuals, naive_mixture_density,
    naive_nll_raw_gradient, pseudo_inverse, GmmSpec, McEstimate,
};
use crate::diffnet::DenseNet;
use crate::harness::{loss_and_gradient, LossKind};
use crate::mixture::{self, CategoricalMode, MixtureParams, Responsibilities};

/// Monte-Carlo checks pass when every entry lies within this many standard errors.
pub const Z_TOLERANCE: f64 = 3.0;
/// ... and when that band is at most this fraction of the predicted value.
pub const MAX_RELATIVE_BAND: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Error measure; smaller is better.
    pub measured: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(name: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            measured,
            tolerance,
        }
    }

    pub fn passed(&self) -> bool {
        self.measured <= self.tolerance
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4}  {:<58} {:>11.3e}  (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance
        )
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random simplex point with every entry at least `floor / K`.
fn random_simplex(rng: &mut ChaCha8Rng, k: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k)
        .map(|_| rng.random_range(0.0..1.0f64) + floor)
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}

struct Instance {
    net: DenseNet,
    x: Array2<f64>,
    y: Array2<f64>,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let dx = rng.random_range(1..4);
    let hidden: Vec<usize> = (0..rng.random_range(1..3))
        .map(|_| rng.random_range(2..9))
        .collect();
    let k = rng.random_range(1..5);
    let dy = rng.random_range(1..3);
    let b = rng.random_range(1..7);
    let mut sizes = vec![dx];
    sizes.extend(hidden);
    let mut net = DenseNet::init(&sizes, k, dy, rng.random()).expect("valid sizes");
    // non-zero biases and shrunken weights keep densities away from underflow
    for p in net.params_mut() {
        *p = 0.5 * *p + 0.1 * normal(rng);
    }
    let x = Array2::from_shape_fn((b, dx), |_| normal(rng));
    let y = Array2::from_shape_fn((b, dy), |_| normal(rng));
    Instance { net, x, y }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Network-parameter gradients of NLL and of the frozen-responsibility
/// objective agree. NLL is taken both from the library and from the
/// density-space route in the parent module chained through backprop.
pub fn gradient_equality(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let Instance { net, x, y } = random_instance(&mut rng);
        let k = net.head().components;
        let (_, sgem) = loss_and_gradient(
            &net,
            x.view(),
            y.view(),
            LossKind::Sgem,
            CategoricalMode::default(),
        )
        .expect("consistent shapes");
        let (_, nll) = loss_and_gradient(
            &net,
            x.view(),
            y.view(),
            LossKind::Nll,
            CategoricalMode::default(),
        )
        .expect("consistent shapes");
        let (raw, trace) = net.forward(x.view()).expect("consistent shapes");
        let (_, d_raw) = naive_nll_raw_gradient(raw.view(), k, y.view());
        let naive = net.backward(&trace, d_raw.view()).expect("fresh trace");
        worst = worst
            .max(max_abs_diff(&nll, &sgem))
            .max(max_abs_diff(&naive, &sgem));
    }
    Check::new(
        format!("NLL vs sGEM parameter gradient, {instances} nets (max abs)"),
        worst,
        1e-8,
    )
}

/// End-to-end NLL backprop against central differences of the density-space NLL.
pub fn backprop_vs_finite_differences(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let Instance { net, x, y } = random_instance(&mut rng);
        let k = net.head().components;
        let (_, grad) = loss_and_gradient(
            &net,
            x.view(),
            y.view(),
            LossKind::Nll,
            CategoricalMode::default(),
        )
        .expect("consistent shapes");
        let fd = finite_diff_gradient(
            |theta| {
                let mut n = net.clone();
                n.params_mut().copy_from_slice(theta);
                let (raw, _) = n.forward(x.view()).expect("consistent shapes");
                naive_nll_raw_gradient(raw.view(), k, y.view()).0
            },
            net.params(),
            1e-5,
        );
        for (g, f) in grad.iter().zip(&fd) {
            worst = worst.max((g - f).abs() / g.abs().max(f.abs()).max(1e-4));
        }
    }
    Check::new(
        format!("backprop vs finite differences, {instances} nets (max rel)"),
        worst,
        1e-4,
    )
}

fn mc_checks(label: &str, est: &McEstimate, target: &Array2<f64>) -> Vec<Check> {
    // widest standard-error band relative to the predicted entry, over non-zero targets
    let band = est
        .std_err
        .iter()
        .zip(target)
        .filter(|(_, t)| **t != 0.0)
        .map(|(se, t)| Z_TOLERANCE * se / t.abs())
        .fold(0.0, f64::max);
    vec![
        Check::new(
            format!("{label}: max |z|"),
            est.max_z_score(target),
            Z_TOLERANCE,
        ),
        Check::new(
            format!("{label}: 3 SE / |predicted|"),
            band,
            MAX_RELATIVE_BAND,
        ),
    ]
}

/// Gaussian FIM in `(μ, σ)` against `diag(1/σ², 2/σ²)`.
pub fn gaussian_fisher(samples: usize, seed: u64) -> Vec<Check> {
    let cases: [(&[f64], &[f64]); 3] = [
        (&[0.0], &[1.0]),
        (&[1.5], &[2.0]),
        (&[-1.0, 0.5], &[0.7, 1.3]),
    ];
    let mut checks = Vec::new();
    for (i, (mean, scale)) in cases.into_iter().enumerate() {
        let dim = mean.len();
        let est = mc_fisher_gaussian(mean, scale, samples, seed.wrapping_add(i as u64));
        let mut target = Array2::zeros((2 * dim, 2 * dim));
        for d in 0..dim {
            let var = scale[d] * scale[d];
            target[[d, d]] = 1.0 / var;
            target[[dim + d, dim + d]] = 2.0 / var;
        }
        checks.extend(mc_checks(
            &format!("Gaussian FIM, σ={scale:?}"),
            &est,
            &target,
        ));
    }
    checks
}

/// Categorical FIM in logit space and its pseudo-inverse.
pub fn categorical_fisher(samples: usize, seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let mut fim_err: f64 = 0.0;
    let mut fim_band: f64 = 0.0;
    let mut null_err: f64 = 0.0;
    let mut pinv_residual: f64 = 0.0;
    let mut closed_form_12: f64 = 0.0;
    let mut weights_list = vec![vec![0.5, 0.5], vec![0.25; 4]];
    for _ in 0..6 {
        let k = rng.random_range(2..6);
        weights_list.push(random_simplex(&mut rng, k, 0.2));
    }
    for (i, w) in weights_list.iter().enumerate() {
        let closed = categorical_fim(w);
        let est = mc_fisher_categorical(w, samples, seed.wrapping_add(i as u64));
        let [z, band] = <[Check; 2]>::try_from(mc_checks("", &est, &closed)).expect("two checks");
        fim_err = fim_err.max(z.measured);
        fim_band = fim_band.max(band.measured);
        null_err = null_err.max(
            closed
                .sum_axis(ndarray::Axis(1))
                .iter()
                .fold(0.0, |a, v| a.max(v.abs())),
        );
        let pinv = pseudo_inverse(&closed);
        pinv_residual = pinv_residual.max(
            moore_penrose_residuals(&closed, &pinv)
                .into_iter()
                .fold(0.0, f64::max),
        );
        let candidate = closed_form_candidate(w);
        let r = moore_penrose_residuals(&closed, &candidate);
        closed_form_12 = closed_form_12.max(r[0].max(r[1]));
    }
    checks.push(Check::new(
        "categorical FIM vs diag(π) - ππᵀ: max |z|",
        fim_err,
        Z_TOLERANCE,
    ));
    checks.push(Check::new(
        "categorical FIM: 3 SE / |predicted|",
        fim_band,
        MAX_RELATIVE_BAND,
    ));
    checks.push(Check::new(
        "categorical FIM annihilates the ones vector",
        null_err,
        1e-12,
    ));
    checks.push(Check::new(
        "categorical pseudo-inverse: Moore-Penrose residual",
        pinv_residual,
        1e-10,
    ));

    // diag(π)⁻¹ - 11ᵀ is a reflexive generalized inverse for every π, and the
    // Moore-Penrose inverse only when π is uniform.
    checks.push(Check::new(
        "diag(π)⁻¹ - 11ᵀ: conditions AGA=A, GAG=G, any π",
        closed_form_12,
        1e-10,
    ));
    let uniform_residual = [2usize, 3, 5]
        .iter()
        .map(|&k| {
            let w = vec![1.0 / k as f64; k];
            let r = moore_penrose_residuals(&categorical_fim(&w), &closed_form_candidate(&w));
            r.into_iter().fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    checks.push(Check::new(
        "diag(π)⁻¹ - 11ᵀ: all four conditions, uniform π",
        uniform_residual,
        1e-10,
    ));
    checks
}

fn closed_form_candidate(weights: &[f64]) -> Array2<f64> {
    let k = weights.len();
    Array2::from_shape_fn(
        (k, k),
        |(i, j)| if i == j { 1.0 / weights[i] } else { 0.0 } - 1.0,
    )
}

/// The analytic categorical preconditioner applies the explicit pseudo-inverse.
pub fn analytic_preconditioner(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(2..7);
        let w = random_simplex(&mut rng, k, 0.05);
        let g: Array1<f64> = (0..k).map(|_| normal(&mut rng)).collect();
        let rho = Array1::from(random_simplex(&mut rng, k, 0.0));
        let want = pseudo_inverse(&categorical_fim(&w)).dot(&g);
        let got = mixture::precondition_categorical(
            g.view(),
            rho.view(),
            Array1::from(w).view(),
            CategoricalMode::Analytic,
        );
        worst = worst.max(max_abs_diff(
            got.as_slice().unwrap(),
            want.as_slice().unwrap(),
        ));
    }
    Check::new(
        format!("analytic logit preconditioner vs pinv(F)·g, {instances} cases"),
        worst,
        1e-8,
    )
}

/// Complete-data FIM of a two-component mixture is block diagonal with
/// blocks `π_k F_k` and `diag(π) - ππᵀ`.
pub fn complete_fim(samples: usize, seed: u64) -> Vec<Check> {
    let gmms = [
        GmmSpec {
            weights: vec![0.5, 0.5],
            means: vec![vec![-1.0], vec![1.0]],
            scales: vec![vec![1.0], vec![1.0]],
        },
        GmmSpec {
            weights: vec![0.3, 0.7],
            means: vec![vec![-2.0], vec![0.5]],
            scales: vec![vec![0.6], vec![1.4]],
        },
    ];
    let mut checks = Vec::new();
    for (i, gmm) in gmms.iter().enumerate() {
        let target = complete_fim_target(gmm);
        let label = format!("complete FIM, π={:?}", gmm.weights);
        let seed = seed.wrapping_add(i as u64);
        let (off_z, z, band) = block_errors(gmm, &mc_complete_fim(gmm, samples, seed), &target);
        checks.push(Check::new(
            format!("{label}: off-diagonal blocks max |z|"),
            off_z,
            Z_TOLERANCE,
        ));
        checks.push(Check::new(
            format!("{label}: diagonal blocks max |z|"),
            z,
            Z_TOLERANCE,
        ));
        checks.push(Check::new(
            format!("{label}: 3 SE / |predicted|"),
            band,
            MAX_RELATIVE_BAND,
        ));
        // the score form has noisier fourth-moment entries, so only z-scores are judged
        let (off_z, z, _) = block_errors(gmm, &mc_complete_fim_scores(gmm, samples, seed), &target);
        checks.push(Check::new(
            format!("{label}, score form: off-diagonal blocks max |z|"),
            off_z,
            Z_TOLERANCE,
        ));
        checks.push(Check::new(
            format!("{label}, score form: diagonal blocks max |z|"),
            z,
            Z_TOLERANCE,
        ));
    }
    checks
}

/// Worst z-score over off-diagonal blocks, worst z-score and widest relative
/// band over diagonal blocks.
fn block_errors(gmm: &GmmSpec, est: &McEstimate, target: &Array2<f64>) -> (f64, f64, f64) {
    let mut blocks: Vec<_> = (0..gmm.components())
        .map(|k| gmm.gaussian_block(k))
        .collect();
    blocks.push(gmm.categorical_block());
    let mut off_z: f64 = 0.0;
    for (a, ra) in blocks.iter().enumerate() {
        for (b, rb) in blocks.iter().enumerate() {
            if a != b {
                let sub = est.block(ra.clone(), rb.clone());
                off_z = off_z.max(sub.max_z_score(&Array2::zeros(sub.value.dim())));
            }
        }
    }
    let (mut z, mut band): (f64, f64) = (0.0, 0.0);
    for r in &blocks {
        let sub = est.block(r.clone(), r.clone());
        let t = target.slice(ndarray::s![r.clone(), r.clone()]).to_owned();
        let [cz, cb] = <[Check; 2]>::try_from(mc_checks("", &sub, &t)).expect("two checks");
        z = z.max(cz.measured);
        band = band.max(cb.measured);
    }
    (off_z, z, band)
}

fn complete_fim_target(gmm: &GmmSpec) -> Array2<f64> {
    let dim = gmm.dim();
    let mut t = Array2::zeros((gmm.num_coords(), gmm.num_coords()));
    for k in 0..gmm.components() {
        let start = gmm.gaussian_block(k).start;
        for d in 0..dim {
            let var = gmm.scales[k][d] * gmm.scales[k][d];
            t[[start + d, start + d]] = gmm.weights[k] / var;
            t[[start + dim + d, start + dim + d]] = 2.0 * gmm.weights[k] / var;
        }
    }
    let cat = gmm.categorical_block();
    t.slice_mut(ndarray::s![cat.clone(), cat])
        .assign(&categorical_fim(&gmm.weights));
    t
}

/// With one component the natural mean gradient is `σ² ⊙ ∇_μ NLL` and the
/// natural scale gradient `σ²/2 ⊙ ∇_σ NLL`; the NLL side comes from the
/// density-space route.
pub fn single_component_reduction(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let dy = rng.random_range(1..4);
        let b = rng.random_range(1..5);
        let means = Array3::from_shape_fn((b, 1, dy), |_| normal(&mut rng));
        let raw_scales = Array3::from_shape_fn((b, 1, dy), |_| normal(&mut rng));
        let y = Array2::from_shape_fn((b, dy), |_| normal(&mut rng));
        let logits = Array2::from_shape_fn((b, 1), |_| normal(&mut rng));

        let mut raw = Array2::zeros((b, 1 + 2 * dy));
        for i in 0..b {
            raw[[i, 0]] = logits[[i, 0]];
            for d in 0..dy {
                raw[[i, 1 + d]] = means[[i, 0, d]];
                raw[[i, 1 + dy + d]] = raw_scales[[i, 0, d]];
            }
        }
        let head = crate::diffnet::HeadLayout::new(1, dy).expect("K=1");
        let params: MixtureParams = mixture::head_transform(raw.view(), head);
        let rho = Responsibilities::from_array(Array2::ones((b, 1)));
        let natural =
            mixture::natural_gradient(&params, &rho, y.view(), CategoricalMode::default())
                .expect("consistent shapes");

        // per-sample raw gradient of the NLL; undo the batch mean
        let (_, d_raw) = naive_nll_raw_gradient(raw.view(), 1, y.view());
        for i in 0..b {
            for d in 0..dy {
                let s = params.scales()[[i, 0, d]];
                let slope = mixture::sigmoid(raw_scales[[i, 0, d]]);
                let d_mean = d_raw[[i, 1 + d]] * b as f64;
                let d_scale = d_raw[[i, 1 + dy + d]] * b as f64 / slope;
                worst = worst
                    .max((natural.means[[i, 0, d]] - s * s * d_mean).abs())
                    .max((natural.scales[[i, 0, d]] - 0.5 * s * s * d_scale).abs());
            }
        }
    }
    Check::new(
        format!("K=1 natural gradient vs σ²-scaled NLL gradient, {instances} cases"),
        worst,
        1e-10,
    )
}

/// Log mixture density from the library against direct summation.
pub fn mixture_density(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = rng.random_range(1..5);
        let dy = rng.random_range(1..4);
        let w = random_simplex(&mut rng, k, 0.1);
        let means: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dy).map(|_| normal(&mut rng)).collect())
            .collect();
        let scales: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dy).map(|_| rng.random_range(0.3..2.0)).collect())
            .collect();
        let y: Vec<f64> = (0..dy).map(|_| normal(&mut rng)).collect();
        let params = MixtureParams::new(
            Array2::from_shape_fn((1, k), |(_, j)| w[j].ln()),
            Array3::from_shape_fn((1, k, dy), |(_, j, d)| means[j][d]),
            Array3::from_shape_fn((1, k, dy), |(_, j, d)| scales[j][d]),
        )
        .expect("valid mixture");
        let y_row = Array2::from_shape_vec((1, dy), y.clone()).expect("one row");
        let got =
            mixture::log_mixture_density(&params, y_row.view()).expect("consistent shapes")[0];
        let want = naive_mixture_density(&w, &means, &scales, &y).ln();
        worst = worst.max((got - want).abs());
    }
    Check::new(
        format!("log mixture density vs direct summation, {instances} cases"),
        worst,
        1e-12,
    )
}

/// Every check at the given Monte-Carlo sample count.
pub fn all(samples: usize, seed: u64) -> Vec<Check> {
    let mut checks = vec![
        mixture_density(200, seed),
        backprop_vs_finite_differences(20, seed),
        gradient_equality(100, seed),
    ];
    checks.extend(gaussian_fisher(samples, seed));
    checks.extend(categorical_fisher(samples, seed));
    checks.push(analytic_preconditioner(200, seed));
    checks.extend(complete_fim(samples, seed));
    checks.push(single_component_reduction(200, seed));
    checks
}
