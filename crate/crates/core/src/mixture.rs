//! Diagonal Gaussian-mixture head: parametrization, densities, E-step
//! responsibilities, the three training objectives and the Fisher
//! preconditioners for distribution-parameter gradients.
//!
//! Gradients are reported per sample: row `b` of a [`DistGradients`] holds the
//! gradient of sample `b`'s own loss. The gradient of a batch-mean objective is
//! therefore the rows divided by the batch size, which is applied once when the
//! gradients are chained into the network.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::diffnet::HeadLayout;
use crate::{Error, Result};

/// Lower bound added to every scale, `σ = softplus(raw) + SCALE_FLOOR`.
pub const SCALE_FLOOR: f64 = 1e-6;
/// Mixture weights are clamped to at least this value before dividing by them.
pub const WEIGHT_FLOOR: f64 = 1e-6;
/// Upper clamp on responsibility-to-weight ratios in the categorical preconditioner.
pub const RATIO_CAP: f64 = 1e6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw head output that maps to scale `sigma` (`sigma > SCALE_FLOOR`).
pub fn raw_scale_for(sigma: f64) -> f64 {
    let s = sigma - SCALE_FLOOR;
    // inverse softplus: ln(e^s - 1), written to stay accurate for large s
    s + (-(-s).exp_m1()).ln()
}

/// Per-input mixture parameters for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    logits: Array2<f64>,
    log_weights: Array2<f64>,
    means: Array3<f64>,
    scales: Array3<f64>,
    /// dσ/d(raw scale), kept for [`head_backward`].
    scale_slopes: Array3<f64>,
}

impl MixtureParams {
    /// Builds parameters directly from logits `[B x K]`, means and scales `[B x K x Dy]`.
    pub fn new(logits: Array2<f64>, means: Array3<f64>, scales: Array3<f64>) -> Result<Self> {
        let (b, k) = logits.dim();
        let (mb, mk, dy) = means.dim();
        if (mb, mk) != (b, k) || scales.dim() != means.dim() || dy == 0 || k == 0 {
            return Err(Error::Shape(format!(
                "logits {:?}, means {:?}, scales {:?} are inconsistent",
                logits.dim(),
                means.dim(),
                scales.dim()
            )));
        }
        if let Some(s) = scales.iter().find(|&&s| !(s >= SCALE_FLOOR)) {
            return Err(Error::Config(format!(
                "scale {s} is below the floor {SCALE_FLOOR}"
            )));
        }
        let log_weights = log_softmax_rows(logits.view());
        let scale_slopes = scales.mapv(|s| -(-(s - SCALE_FLOOR)).exp_m1());
        Ok(Self {
            logits,
            log_weights,
            means,
            scales,
            scale_slopes,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.logits.nrows()
    }

    pub fn components(&self) -> usize {
        self.logits.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.means.dim().2
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn log_weights(&self) -> &Array2<f64> {
        &self.log_weights
    }

    /// Mixture weights `π = softmax(ψ)` per row.
    pub fn weights(&self) -> Array2<f64> {
        self.log_weights.mapv(f64::exp)
    }

    pub fn means(&self) -> &Array3<f64> {
        &self.means
    }

    pub fn scales(&self) -> &Array3<f64> {
        &self.scales
    }

    fn check_targets(&self, y: ArrayView2<'_, f64>) -> Result<()> {
        if y.dim() != (self.batch_size(), self.target_dim()) {
            return Err(Error::Shape(format!(
                "targets have shape {:?}, mixture expects ({}, {})",
                y.dim(),
                self.batch_size(),
                self.target_dim()
            )));
        }
        Ok(())
    }
}

/// E-step posterior over components, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities(Array2<f64>);

impl Responsibilities {
    pub fn from_array(rho: Array2<f64>) -> Self {
        Self(rho)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Gradients with respect to logits, means and scales.
#[derive(Clone, Debug, PartialEq)]
pub struct DistGradients {
    pub logits: Array2<f64>,
    pub means: Array3<f64>,
    pub scales: Array3<f64>,
    pub preconditioned: bool,
}

impl DistGradients {
    pub fn zeros(batch: usize, components: usize, target_dim: usize) -> Self {
        Self {
            logits: Array2::zeros((batch, components)),
            means: Array3::zeros((batch, components, target_dim)),
            scales: Array3::zeros((batch, components, target_dim)),
            preconditioned: false,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.logits
            .iter()
            .chain(self.means.iter())
            .chain(self.scales.iter())
            .all(|v| v.is_finite())
    }
}

/// How the categorical block is preconditioned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CategoricalMode {
    /// Moore-Penrose pseudo-inverse of `diag(π) - ππᵀ` applied to the logit gradient.
    Analytic,
    /// Logit gradient of the cross-entropy reweighted by `ρ/π`.
    #[default]
    Reference,
}

impl FromStr for CategoricalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "reference" => Ok(Self::Reference),
            other => Err(Error::Config(format!(
                "unknown categorical mode `{other}` (expected analytic or reference)"
            ))),
        }
    }
}

impl fmt::Display for CategoricalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Analytic => "analytic",
            Self::Reference => "reference",
        })
    }
}

pub(crate) fn log_softmax_rows(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let lse = log_sum_exp(row.view());
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn log_sum_exp(v: ArrayView1<'_, f64>) -> f64 {
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Splits raw head outputs into logits, means and positive scales.
pub fn head_transform(raw: ArrayView2<'_, f64>, head: HeadLayout) -> MixtureParams {
    let batch = raw.nrows();
    let (k, dy) = (head.components, head.target_dim);
    assert_eq!(
        raw.ncols(),
        head.width(),
        "raw output width does not match head"
    );
    let logits = raw.slice(ndarray::s![.., head.logits()]).to_owned();
    let means = raw
        .slice(ndarray::s![.., head.means()])
        .to_owned()
        .into_shape_with_order((batch, k, dy))
        .expect("means block");
    let raw_scales = raw
        .slice(ndarray::s![.., head.raw_scales()])
        .to_owned()
        .into_shape_with_order((batch, k, dy))
        .expect("scales block");
    let scales = raw_scales.mapv(|r| softplus(r) + SCALE_FLOOR);
    let scale_slopes = raw_scales.mapv(sigmoid);
    let log_weights = log_softmax_rows(logits.view());
    MixtureParams {
        logits,
        log_weights,
        means,
        scales,
        scale_slopes,
    }
}

/// Chains distribution-parameter gradients back to the raw head outputs.
pub fn head_backward(params: &MixtureParams, grads: &DistGradients) -> Array2<f64> {
    let (b, k, dy) = params.means.dim();
    let mut d_raw = Array2::zeros((b, k + 2 * k * dy));
    for i in 0..b {
        let mut row = d_raw.row_mut(i);
        for j in 0..k {
            row[j] = grads.logits[[i, j]];
            for d in 0..dy {
                row[k + j * dy + d] = grads.means[[i, j, d]];
                row[k + k * dy + j * dy + d] =
                    grads.scales[[i, j, d]] * params.scale_slopes[[i, j, d]];
            }
        }
    }
    d_raw
}

/// Log density of a diagonal Gaussian, in nats.
pub fn gaussian_log_prob(mean: &[f64], scale: &[f64], y: &[f64]) -> f64 {
    mean.iter()
        .zip(scale)
        .zip(y)
        .map(|((&m, &s), &v)| {
            let z = (v - m) / s;
            -(s.ln() + HALF_LN_2PI + 0.5 * z * z)
        })
        .sum()
}

/// `log N(y_b; μ_bk, σ_bk)` for every sample and component.
pub fn log_component_densities(
    params: &MixtureParams,
    y: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    params.check_targets(y)?;
    let (b, k, dy) = params.means.dim();
    let mut out = Array2::zeros((b, k));
    for i in 0..b {
        for j in 0..k {
            let mut acc = 0.0;
            for d in 0..dy {
                let s = params.scales[[i, j, d]];
                let z = (y[[i, d]] - params.means[[i, j, d]]) / s;
                acc -= s.ln() + HALF_LN_2PI + 0.5 * z * z;
            }
            out[[i, j]] = acc;
        }
    }
    Ok(out)
}

/// `log π_k + log N_k` per sample and component.
pub fn log_joint(params: &MixtureParams, y: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    Ok(log_component_densities(params, y)? + &params.log_weights)
}

/// `log p(y_b | x_b)` via log-sum-exp over components.
pub fn log_mixture_density(params: &MixtureParams, y: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let joint = log_joint(params, y)?;
    Ok(joint.map_axis(Axis(1), log_sum_exp))
}

/// Batch-mean negative log-likelihood.
pub fn nll_loss(params: &MixtureParams, y: ArrayView2<'_, f64>) -> Result<f64> {
    let log_density = log_mixture_density(params, y)?;
    Ok(-log_density.mean().unwrap_or(0.0))
}

/// Posterior component probabilities, computed entirely in log space.
pub fn responsibilities(
    params: &MixtureParams,
    y: ArrayView2<'_, f64>,
) -> Result<Responsibilities> {
    let joint = log_joint(params, y)?;
    Ok(Responsibilities(
        log_softmax_rows(joint.view()).mapv(f64::exp),
    ))
}

fn check_rho(params: &MixtureParams, rho: &Responsibilities) -> Result<()> {
    if rho.0.dim() != params.logits.dim() {
        return Err(Error::Shape(format!(
            "responsibilities have shape {:?}, mixture has ({}, {})",
            rho.0.dim(),
            params.batch_size(),
            params.components()
        )));
    }
    Ok(())
}

/// Expected complete-data negative log-likelihood with frozen responsibilities.
pub fn sgem_loss(
    params: &MixtureParams,
    rho: &Responsibilities,
    y: ArrayView2<'_, f64>,
) -> Result<f64> {
    check_rho(params, rho)?;
    let joint = log_joint(params, y)?;
    let per_sample = (&rho.0 * &joint).sum_axis(Axis(1));
    Ok(-per_sample.mean().unwrap_or(0.0))
}

/// The sGEM objective regrouped as `H(ρ, π) - Σ_k ρ_k log N_k`.
pub fn ngem_loss(
    params: &MixtureParams,
    rho: &Responsibilities,
    y: ArrayView2<'_, f64>,
) -> Result<f64> {
    check_rho(params, rho)?;
    let log_normal = log_component_densities(params, y)?;
    let cross_entropy = -(&rho.0 * &params.log_weights).sum_axis(Axis(1));
    let weighted_nll = -(&rho.0 * &log_normal).sum_axis(Axis(1));
    Ok((cross_entropy + weighted_nll).mean().unwrap_or(0.0))
}

/// Per-sample gradients of `-Σ_k w_k (log π_k + log N_k)` with `w` held constant.
pub fn weighted_complete_gradients(
    params: &MixtureParams,
    w: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
) -> Result<DistGradients> {
    params.check_targets(y)?;
    if w.dim() != params.logits.dim() {
        return Err(Error::Shape(format!(
            "component weights have shape {:?}, mixture has {:?}",
            w.dim(),
            params.logits.dim()
        )));
    }
    let (b, k, dy) = params.means.dim();
    let mut grads = DistGradients::zeros(b, k, dy);
    for i in 0..b {
        let total: f64 = w.row(i).sum();
        for j in 0..k {
            let wj = w[[i, j]];
            grads.logits[[i, j]] = params.log_weights[[i, j]].exp() * total - wj;
            for d in 0..dy {
                let s = params.scales[[i, j, d]];
                let r = y[[i, d]] - params.means[[i, j, d]];
                let inv_var = 1.0 / (s * s);
                grads.means[[i, j, d]] = -wj * r * inv_var;
                grads.scales[[i, j, d]] = wj * (1.0 - r * r * inv_var) / s;
            }
        }
    }
    Ok(grads)
}

/// Per-sample gradients of the negative log-likelihood.
///
/// The derivative of the log-sum-exp with respect to each log-joint term is
/// the responsibility, so this is the complete-data gradient weighted by ρ.
pub fn nll_gradients(params: &MixtureParams, y: ArrayView2<'_, f64>) -> Result<DistGradients> {
    let rho = responsibilities(params, y)?;
    weighted_complete_gradients(params, rho.view(), y)
}

/// Per-sample gradients of the sGEM (equivalently nGEM) objective, ρ frozen.
pub fn sgem_gradients(
    params: &MixtureParams,
    rho: &Responsibilities,
    y: ArrayView2<'_, f64>,
) -> Result<DistGradients> {
    check_rho(params, rho)?;
    weighted_complete_gradients(params, rho.view(), y)
}

/// Scales one component's mean/scale gradients by the inverse of `π_k F_k`,
/// with `F_k = diag(1/σ², 2/σ²)`.
pub fn precondition_gaussian(
    d_mean: &[f64],
    d_scale: &[f64],
    scale: &[f64],
    weight: f64,
) -> (Vec<f64>, Vec<f64>) {
    let w = weight.max(WEIGHT_FLOOR);
    let mean = d_mean
        .iter()
        .zip(scale)
        .map(|(&g, &s)| g * s * s / w)
        .collect();
    let scale = d_scale
        .iter()
        .zip(scale)
        .map(|(&g, &s)| g * s * s / (2.0 * w))
        .collect();
    (mean, scale)
}

/// Preconditions one sample's logit gradient.
///
/// `d_logits` is the logit gradient of the cross-entropy term, `π - ρ`.
/// [`CategoricalMode::Analytic`] applies the pseudo-inverse of
/// `diag(π) - ππᵀ`, which is `P diag(π)⁻¹ P` with `P = I - 11ᵀ/K`.
/// [`CategoricalMode::Reference`] returns `-ρ/π + π Σ_k ρ_k/π_k`, the logit
/// gradient of `-Σ_k (ρ_k/π_k) log π_k`, and only reads `ρ` and `π`.
pub fn precondition_categorical(
    d_logits: ArrayView1<'_, f64>,
    rho: ArrayView1<'_, f64>,
    weights: ArrayView1<'_, f64>,
    mode: CategoricalMode,
) -> Array1<f64> {
    match mode {
        CategoricalMode::Analytic => {
            let centre = d_logits.mean().unwrap_or(0.0);
            let scaled: Array1<f64> = d_logits
                .iter()
                .zip(weights)
                .map(|(&g, &p)| ((g - centre) / p.max(WEIGHT_FLOOR)).clamp(-RATIO_CAP, RATIO_CAP))
                .collect();
            let shift = scaled.mean().unwrap_or(0.0);
            scaled - shift
        }
        CategoricalMode::Reference => {
            let ratios: Array1<f64> = rho
                .iter()
                .zip(weights)
                .map(|(&r, &p)| (r / p.max(WEIGHT_FLOOR)).clamp(0.0, RATIO_CAP))
                .collect();
            let total = ratios.sum();
            ratios
                .iter()
                .zip(weights)
                .map(|(&r, &p)| p * total - r)
                .collect()
        }
    }
}

/// Complete-data natural gradient of the nGEM objective with respect to the
/// mixture parameters of every sample.
pub fn natural_gradient(
    params: &MixtureParams,
    rho: &Responsibilities,
    y: ArrayView2<'_, f64>,
    mode: CategoricalMode,
) -> Result<DistGradients> {
    let mut grads = sgem_gradients(params, rho, y)?;
    let (b, k, dy) = params.means.dim();
    let weights = params.weights();
    for i in 0..b {
        for j in 0..k {
            let w = weights[[i, j]].max(WEIGHT_FLOOR);
            for d in 0..dy {
                let s = params.scales[[i, j, d]];
                let var = s * s;
                grads.means[[i, j, d]] *= var / w;
                grads.scales[[i, j, d]] *= var / (2.0 * w);
            }
        }
        let row = precondition_categorical(grads.logits.row(i), rho.0.row(i), weights.row(i), mode);
        grads.logits.row_mut(i).assign(&row);
    }
    grads.preconditioned = true;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    const LN2: f64 = std::f64::consts::LN_2;

    fn random_params(rng: &mut ChaCha8Rng, b: usize, k: usize, dy: usize) -> MixtureParams {
        let logits = Array2::from_shape_fn((b, k), |_| rng.random_range(-2.0..2.0));
        let means = Array3::from_shape_fn((b, k, dy), |_| rng.random_range(-2.0..2.0));
        let scales = Array3::from_shape_fn((b, k, dy), |_| rng.random_range(0.3..2.0));
        MixtureParams::new(logits, means, scales).unwrap()
    }

    fn random_targets(rng: &mut ChaCha8Rng, b: usize, dy: usize) -> Array2<f64> {
        Array2::from_shape_fn((b, dy), |_| rng.random_range(-3.0..3.0))
    }

    fn single(mu: f64, sigma: f64) -> MixtureParams {
        MixtureParams::new(
            array![[0.0]],
            Array3::from_elem((1, 1, 1), mu),
            Array3::from_elem((1, 1, 1), sigma),
        )
        .unwrap()
    }

    #[test]
    fn softplus_head_mapping() {
        let head = HeadLayout::new(1, 1).unwrap();
        let p = head_transform(array![[0.0, 0.0, 0.0]].view(), head);
        assert!((p.scales()[[0, 0, 0]] - (LN2 + 1e-6)).abs() < 1e-15);
        let p = head_transform(array![[0.0, 0.0, -800.0]].view(), head);
        assert_eq!(p.scales()[[0, 0, 0]], SCALE_FLOOR);
        assert!((softplus(raw_scale_for(1.0)) + SCALE_FLOOR - 1.0).abs() < 1e-14);
        assert!((softplus(raw_scale_for(40.0)) + SCALE_FLOOR - 40.0).abs() < 1e-12);
    }

    #[test]
    fn head_blocks_are_ordered_logits_means_scales() {
        let head = HeadLayout::new(2, 2).unwrap();
        let raw = array![[0.1, 0.2, 1.0, 2.0, 3.0, 4.0, 0.5, 0.6, 0.7, 0.8]];
        let p = head_transform(raw.view(), head);
        assert_eq!(p.logits(), &array![[0.1, 0.2]]);
        assert_eq!(p.means()[[0, 1, 0]], 3.0);
        assert_eq!(p.means()[[0, 0, 1]], 2.0);
        assert!((p.scales()[[0, 1, 1]] - softplus(0.8) - SCALE_FLOOR).abs() < 1e-15);
    }

    #[test]
    fn head_backward_matches_finite_differences_on_raw_scales() {
        let head = HeadLayout::new(2, 1).unwrap();
        let raw = array![
            [0.3, -0.2, 0.5, -1.0, 0.2, -0.7],
            [0.0, 0.4, 1.5, 0.1, -2.0, 1.1]
        ];
        let y = array![[0.7], [-0.4]];
        let loss = |r: &Array2<f64>| nll_loss(&head_transform(r.view(), head), y.view()).unwrap();
        let params = head_transform(raw.view(), head);
        let grads = nll_gradients(&params, y.view()).unwrap();
        let d_raw = head_backward(&params, &grads) / raw.nrows() as f64;
        let h = 1e-6;
        for i in 0..raw.nrows() {
            for c in 0..raw.ncols() {
                let mut plus = raw.clone();
                plus[[i, c]] += h;
                let mut minus = raw.clone();
                minus[[i, c]] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!(
                    (fd - d_raw[[i, c]]).abs() < 1e-5,
                    "({i},{c}): fd {fd} vs {}",
                    d_raw[[i, c]]
                );
            }
        }
    }

    #[test]
    fn gaussian_log_prob_values() {
        assert!(
            (gaussian_log_prob(&[0.0], &[1.0], &[0.0]) + 0.918_938_533_204_672_8).abs() < 1e-12
        );
        assert!(
            (gaussian_log_prob(&[0.0, 0.0], &[1.0, 1.0], &[0.0, 0.0]) + 1.837_877_066_409_345_5)
                .abs()
                < 1e-12
        );
        // -0.5 ln 2π - ln 2 - (3-1)^2 / (2*4)
        let expected = -0.918_938_533_204_672_8 - LN2 - 0.5;
        assert!((gaussian_log_prob(&[1.0], &[2.0], &[3.0]) - expected).abs() < 1e-12);
        assert!((expected + 2.112_085_713_764_618).abs() < 1e-12);
    }

    #[test]
    fn mixture_density_reductions() {
        let p = single(0.4, 1.3);
        let y = array![[1.1]];
        let lp = log_mixture_density(&p, y.view()).unwrap()[0];
        assert!((lp - gaussian_log_prob(&[0.4], &[1.3], &[1.1])).abs() < 1e-14);

        let twin = MixtureParams::new(
            array![[0.0, 0.0]],
            Array3::from_elem((1, 2, 1), 0.4),
            Array3::from_elem((1, 2, 1), 1.3),
        )
        .unwrap();
        let lt = log_mixture_density(&twin, y.view()).unwrap()[0];
        assert!((lt - lp).abs() < 1e-14);
    }

    #[test]
    fn log_density_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p = random_params(&mut rng, 4, 3, 2);
            let y = random_targets(&mut rng, 4, 2);
            let lp = log_mixture_density(&p, y.view()).unwrap();
            let w = p.weights();
            for i in 0..4 {
                let mut total = 0.0;
                for j in 0..3 {
                    let mut dens = w[[i, j]];
                    for d in 0..2 {
                        let s = p.scales()[[i, j, d]];
                        let z = (y[[i, d]] - p.means()[[i, j, d]]) / s;
                        dens *= (-0.5 * z * z).exp() / (s * (2.0 * PI).sqrt());
                    }
                    total += dens;
                }
                assert!((lp[i] - total.ln()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn nll_values_and_shift_invariance() {
        let p = single(0.25, 1.0);
        let nll = nll_loss(&p, array![[0.25]].view()).unwrap();
        assert!((nll - 0.918_938_533_204_672_8).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(&mut rng, 5, 3, 1);
        let y = random_targets(&mut rng, 5, 1);
        let shifted =
            MixtureParams::new(p.logits() + 17.5, p.means().clone(), p.scales().clone()).unwrap();
        let a = nll_loss(&p, y.view()).unwrap();
        let b = nll_loss(&shifted, y.view()).unwrap();
        assert!((a - b).abs() < 1e-12);
        let ra = responsibilities(&p, y.view()).unwrap();
        let rb = responsibilities(&shifted, y.view()).unwrap();
        assert!(ra
            .view()
            .iter()
            .zip(rb.view())
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn responsibilities_edge_cases() {
        let twin = MixtureParams::new(
            array![[0.0, 0.0, 0.0]],
            Array3::from_elem((1, 3, 1), 0.4),
            Array3::from_elem((1, 3, 1), 1.3),
        )
        .unwrap();
        let rho = responsibilities(&twin, array![[2.0]].view()).unwrap();
        assert!(rho.view().iter().all(|&r| (r - 1.0 / 3.0).abs() < 1e-15));

        let rho = responsibilities(&single(0.0, 1.0), array![[5.0]].view()).unwrap();
        assert_eq!(rho.view()[[0, 0]], 1.0);

        let far = MixtureParams::new(
            array![[0.0, 0.0]],
            array![[[0.0], [40.0]]],
            Array3::from_elem((1, 2, 1), 1.0),
        )
        .unwrap();
        let rho = responsibilities(&far, array![[0.0]].view()).unwrap();
        assert!((rho.view()[[0, 0]] - 1.0).abs() < 1e-12);
        assert!(rho.view()[[0, 1]] < 1e-12);
    }

    #[test]
    fn responsibility_rows_are_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, 16, 4, 3);
        let y = random_targets(&mut rng, 16, 3) * 5.0;
        let rho = responsibilities(&p, y.view()).unwrap();
        for row in rho.view().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&r| (0.0..=1.0).contains(&r)));
        }
    }

    #[test]
    fn sgem_and_ngem_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let p = random_params(&mut rng, 6, 3, 2);
            let y = random_targets(&mut rng, 6, 2);
            let rho = responsibilities(&p, y.view()).unwrap();
            let nll = nll_loss(&p, y.view()).unwrap();
            let sgem = sgem_loss(&p, &rho, y.view()).unwrap();
            let ngem = ngem_loss(&p, &rho, y.view()).unwrap();
            assert!((sgem - ngem).abs() < 1e-12);
            // sgem - nll is the mean entropy of ρ
            let entropy: f64 = rho
                .view()
                .rows()
                .into_iter()
                .map(|r| {
                    -r.iter()
                        .filter(|&&v| v > 0.0)
                        .map(|&v| v * v.ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / 6.0;
            assert!((sgem - nll - entropy).abs() < 1e-10);
            assert!(sgem >= nll - 1e-12);
        }
        let p = single(0.3, 1.0);
        let y = array![[0.9]];
        let rho = responsibilities(&p, y.view()).unwrap();
        assert!(
            (sgem_loss(&p, &rho, y.view()).unwrap() - nll_loss(&p, y.view()).unwrap()).abs()
                < 1e-15
        );
    }

    #[test]
    fn ngem_loss_at_component_means() {
        let p = MixtureParams::new(
            array![[0.3f64.ln(), 0.7f64.ln()]],
            array![[[1.0], [1.0]]],
            Array3::from_elem((1, 2, 1), 1.0),
        )
        .unwrap();
        let rho = Responsibilities::from_array(p.weights());
        let loss = ngem_loss(&p, &rho, array![[1.0]].view()).unwrap();
        let h = -(0.3f64 * 0.3f64.ln() + 0.7 * 0.7f64.ln());
        assert!((loss - (h + 0.918_938_533_204_672_8)).abs() < 1e-12);
    }

    #[test]
    fn rho_shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng, 3, 2, 1);
        let y = random_targets(&mut rng, 3, 1);
        let rho = Responsibilities::from_array(Array2::from_elem((2, 2), 0.5));
        assert!(matches!(
            sgem_loss(&p, &rho, y.view()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            ngem_loss(&p, &rho, y.view()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            natural_gradient(&p, &rho, y.view(), CategoricalMode::Reference),
            Err(Error::Shape(_))
        ));
        let bad_y = Array2::zeros((3, 2));
        assert!(matches!(nll_loss(&p, bad_y.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn gaussian_preconditioner_values() {
        let (m, s) = precondition_gaussian(&[0.4, -1.0], &[0.6, 2.0], &[1.0, 1.0], 1.0);
        assert_eq!(m, vec![0.4, -1.0]);
        assert_eq!(s, vec![0.3, 1.0]);
        let (m, s) = precondition_gaussian(&[1.0], &[1.0], &[2.0], 0.5);
        assert_eq!(m, vec![8.0]);
        assert_eq!(s, vec![4.0]);
        let (m, _) = precondition_gaussian(&[1.0], &[1.0], &[1.0], 0.0);
        assert_eq!(m, vec![1e6]);
    }

    #[test]
    fn categorical_preconditioner_fixed_points() {
        let uniform = array![0.25, 0.25, 0.25, 0.25];
        let zero = Array1::zeros(4);
        for mode in [CategoricalMode::Analytic, CategoricalMode::Reference] {
            let out = precondition_categorical(zero.view(), uniform.view(), uniform.view(), mode);
            assert!(out.iter().all(|v| v.abs() < 1e-15), "{mode}");
        }
        // Away from uniform weights only the pseudo-inverse vanishes at ρ = π;
        // the reference weighting pulls the logits toward uniform by Kπ - 1.
        let pi = array![0.2, 0.3, 0.5];
        let out = precondition_categorical(
            Array1::zeros(3).view(),
            pi.view(),
            pi.view(),
            CategoricalMode::Analytic,
        );
        assert!(out.iter().all(|v| v.abs() < 1e-15));
        let out = precondition_categorical(
            Array1::zeros(3).view(),
            pi.view(),
            pi.view(),
            CategoricalMode::Reference,
        );
        for (o, p) in out.iter().zip(&pi) {
            assert!((o - (3.0 * p - 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn analytic_mode_is_closed_form_up_to_a_logit_shift() {
        let pi = array![0.1, 0.6, 0.3];
        let rho = array![0.5, 0.2, 0.3];
        let d = &pi - &rho;
        let out =
            precondition_categorical(d.view(), rho.view(), pi.view(), CategoricalMode::Analytic);
        let closed: Array1<f64> = rho.iter().zip(&pi).map(|(r, p)| 1.0 - r / p).collect();
        let diff = &out - &closed;
        assert!(diff.iter().all(|v| (v - diff[0]).abs() < 1e-14));
        assert!(out.sum().abs() < 1e-14);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "analytic".parse::<CategoricalMode>().unwrap(),
            CategoricalMode::Analytic
        );
        assert_eq!(
            "reference".parse::<CategoricalMode>().unwrap(),
            CategoricalMode::Reference
        );
        assert!(matches!(
            "pinv".parse::<CategoricalMode>(),
            Err(Error::Config(_))
        ));
        assert_eq!(CategoricalMode::default(), CategoricalMode::Reference);
    }

    #[test]
    fn natural_gradient_single_component_is_variance_weighted_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = random_params(&mut rng, 7, 1, 3);
        let y = random_targets(&mut rng, 7, 3);
        let rho = responsibilities(&p, y.view()).unwrap();
        let nat = natural_gradient(&p, &rho, y.view(), CategoricalMode::Reference).unwrap();
        let plain = nll_gradients(&p, y.view()).unwrap();
        assert!(nat.preconditioned);
        let var = p.scales().mapv(|s| s * s);
        let expected_mean = &var * &plain.means;
        let expected_scale = &var * &plain.scales / 2.0;
        assert!((&nat.means - &expected_mean)
            .iter()
            .all(|v| v.abs() < 1e-12));
        assert!((&nat.scales - &expected_scale)
            .iter()
            .all(|v| v.abs() < 1e-12));
        assert!(nat.logits.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn natural_gradient_at_unit_scale_keeps_mean_gradient() {
        let p = single(0.5, 1.0);
        let y = array![[2.0]];
        let rho = responsibilities(&p, y.view()).unwrap();
        let nat = natural_gradient(&p, &rho, y.view(), CategoricalMode::Analytic).unwrap();
        let plain = nll_gradients(&p, y.view()).unwrap();
        assert_eq!(nat.means, plain.means);
    }

    #[test]
    fn zero_upstream_gradients_stay_zero() {
        let (m, s) = precondition_gaussian(&[0.0, 0.0], &[0.0, 0.0], &[0.3, 2.0], 0.2);
        assert!(m.iter().chain(&s).all(|&v| v == 0.0));
        let pi = array![0.2, 0.8];
        let out = precondition_categorical(
            Array1::zeros(2).view(),
            pi.view(),
            pi.view(),
            CategoricalMode::Analytic,
        );
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reference_weighting_gives_same_gaussian_blocks() {
        // Folding ρ/π into the loss and then scaling by (σ², σ²/2) is the same
        // Gaussian natural gradient as scaling the ρ-weighted gradient by σ²/π.
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let p = random_params(&mut rng, 5, 3, 2);
        let y = random_targets(&mut rng, 5, 2);
        let rho = responsibilities(&p, y.view()).unwrap();
        let nat = natural_gradient(&p, &rho, y.view(), CategoricalMode::Reference).unwrap();
        let ratio = rho.view().to_owned() / p.weights();
        let folded = weighted_complete_gradients(&p, ratio.view(), y.view()).unwrap();
        let var = p.scales().mapv(|s| s * s);
        let m = &folded.means * &var;
        let s = &folded.scales * &var / 2.0;
        assert!((&nat.means - &m).iter().all(|v| v.abs() < 1e-10));
        assert!((&nat.scales - &s).iter().all(|v| v.abs() < 1e-10));
        assert!((&nat.logits - &folded.logits)
            .iter()
            .all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn plain_gradient_step_decreases_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let head = HeadLayout::new(3, 2).unwrap();
        let raw = Array2::from_shape_fn((8, head.width()), |_| rng.random_range(-1.0..1.0));
        let y = random_targets(&mut rng, 8, 2);
        let params = head_transform(raw.view(), head);
        let rho = responsibilities(&params, y.view()).unwrap();
        let grads = sgem_gradients(&params, &rho, y.view()).unwrap();
        let d_raw = head_backward(&params, &grads) / 8.0;
        let stepped = &raw - &(&d_raw * 1e-3);
        let after = head_transform(stepped.view(), head);
        assert!(nll_loss(&after, y.view()).unwrap() < nll_loss(&params, y.view()).unwrap());
        assert!(
            sgem_loss(&after, &rho, y.view()).unwrap()
                < sgem_loss(&params, &rho, y.view()).unwrap()
        );
        assert!(
            ngem_loss(&after, &rho, y.view()).unwrap()
                < ngem_loss(&params, &rho, y.view()).unwrap()
        );
    }
}
