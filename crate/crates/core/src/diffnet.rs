//! Dense feed-forward network with hand-written forward and backward passes.
//!
//! All parameters live in one flat `Vec<f64>`: for each layer the weight
//! matrix (row-major, `fan_out x fan_in`) followed by its bias. Gradients
//! returned by [`DenseNet::backward`] use the same layout, so optimizers can
//! work on plain slices.
//!
//! The final layer is always an identity "head" whose output is split into
//! three blocks in a fixed order: `K` logits, `K*Dy` means, `K*Dy` raw scales.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::ops::Range;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::mixture;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

/// Component count and target dimension of the mixture head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub components: usize,
    pub target_dim: usize,
}

impl HeadLayout {
    pub fn new(components: usize, target_dim: usize) -> Result<Self> {
        if components == 0 || target_dim == 0 {
            return Err(Error::Config(format!(
                "head needs K >= 1 and Dy >= 1, got K={components}, Dy={target_dim}"
            )));
        }
        Ok(Self {
            components,
            target_dim,
        })
    }

    /// `K + 2*K*Dy`.
    pub fn width(&self) -> usize {
        self.components + 2 * self.components * self.target_dim
    }

    pub fn logits(&self) -> Range<usize> {
        0..self.components
    }

    pub fn means(&self) -> Range<usize> {
        let start = self.components;
        start..start + self.components * self.target_dim
    }

    pub fn raw_scales(&self) -> Range<usize> {
        let start = self.components * (1 + self.target_dim);
        start..start + self.components * self.target_dim
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct LayerShape {
    fan_in: usize,
    fan_out: usize,
    activation: Activation,
    offset: usize,
}

impl LayerShape {
    fn weight_range(&self) -> Range<usize> {
        self.offset..self.offset + self.fan_out * self.fan_in
    }

    fn bias_range(&self) -> Range<usize> {
        let start = self.offset + self.fan_out * self.fan_in;
        start..start + self.fan_out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    params: Vec<f64>,
    layers: Vec<LayerShape>,
    head: HeadLayout,
    version: u64,
}

/// Cached activations of one forward pass, consumed by [`DenseNet::backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    /// Φ(pre) for GELU layers, reused by the backward pass.
    cdf: Vec<Option<Array2<f64>>>,
    version: u64,
    batch: usize,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

impl DenseNet {
    /// Uniform weights of variance `1/fan_in` (bound `√(3/fan_in)`), zero
    /// biases, GELU on hidden layers, identity head.
    ///
    /// `layer_sizes` is `[Dx, hidden_1, ..., hidden_n]`; the head layer mapping
    /// the last entry to `K + 2*K*Dy` outputs is appended. The raw-scale block
    /// of the head bias is set so every initial scale is 1 and the logit bias
    /// is zero.
    ///
    /// The variance is half the usual rectifier choice on purpose: with
    /// `2/fan_in` every layer adds a factor `√2` to the head output, so a deep net on
    /// unnormalized inputs starts with logit gaps in the tens and scales far
    /// from 1, and components that start out starved never recover.
    pub fn init(
        layer_sizes: &[usize],
        components: usize,
        target_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if layer_sizes.is_empty() {
            return Err(Error::Config("layer_sizes must not be empty".into()));
        }
        if let Some(pos) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!(
                "layer size at position {pos} must be positive"
            )));
        }
        let head = HeadLayout::new(components, target_dim)?;
        let mut dims = layer_sizes.to_vec();
        dims.push(head.width());

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        let mut params = Vec::new();
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let activation = if i + 2 == dims.len() {
                Activation::Identity
            } else {
                Activation::Gelu
            };
            let bound = (3.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound)
                .map_err(|e| Error::Config(format!("init bound: {e}")))?;
            layers.push(LayerShape {
                fan_in,
                fan_out,
                activation,
                offset: params.len(),
            });
            params.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }

        let mut net = Self {
            params,
            layers,
            head,
            version: 0,
        };
        let raw_one = mixture::raw_scale_for(1.0);
        let head_bias = net.layers.last().expect("at least one layer").bias_range();
        for i in head.raw_scales() {
            net.params[head_bias.start + i] = raw_one;
        }
        Ok(net)
    }

    /// Builds a network from explicit `(weight [fan_out x fan_in], bias, activation)` triples.
    pub fn from_layers(
        layers: Vec<(Array2<f64>, Array1<f64>, Activation)>,
        head: HeadLayout,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut params = Vec::new();
        let mut prev_out: Option<usize> = None;
        for (i, (w, b, activation)) in layers.into_iter().enumerate() {
            let (fan_out, fan_in) = w.dim();
            if fan_in == 0 || fan_out == 0 {
                return Err(Error::Config(format!(
                    "layer {i} has an empty weight matrix"
                )));
            }
            if b.len() != fan_out {
                return Err(Error::Shape(format!(
                    "layer {i}: bias length {} != fan_out {fan_out}",
                    b.len()
                )));
            }
            if let Some(p) = prev_out {
                if p != fan_in {
                    return Err(Error::Shape(format!(
                        "layer {i}: fan_in {fan_in} does not match previous fan_out {p}"
                    )));
                }
            }
            if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "layer {i} has non-finite parameters"
                )));
            }
            shapes.push(LayerShape {
                fan_in,
                fan_out,
                activation,
                offset: params.len(),
            });
            params.extend(w.iter().copied());
            params.extend(b.iter().copied());
            prev_out = Some(fan_out);
        }
        if prev_out != Some(head.width()) {
            return Err(Error::Shape(format!(
                "output width {} does not match head width {}",
                prev_out.unwrap_or(0),
                head.width()
            )));
        }
        Ok(Self {
            params,
            layers: shapes,
            head,
            version: 0,
        })
    }

    pub fn head(&self) -> HeadLayout {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `[Dx, hidden_1, ..., hidden_n]`, the inverse of [`DenseNet::init`]'s argument.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].fan_in];
        sizes.extend(
            self.layers[..self.layers.len() - 1]
                .iter()
                .map(|l| l.fan_out),
        );
        sizes
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the flat parameters. Invalidates outstanding traces.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn weight(&self, layer: usize) -> ArrayView2<'_, f64> {
        let l = &self.layers[layer];
        ArrayView2::from_shape((l.fan_out, l.fan_in), &self.params[l.weight_range()])
            .expect("layer shape is consistent with parameter layout")
    }

    pub fn bias(&self, layer: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[self.layers[layer].bias_range()])
    }

    /// Range of the head-layer bias inside the flat parameter vector.
    pub fn head_bias_range(&self) -> Range<usize> {
        self.layers.last().expect("non-empty").bias_range()
    }

    /// Range of the head-layer weight inside the flat parameter vector.
    pub fn head_weight_range(&self) -> Range<usize> {
        self.layers.last().expect("non-empty").weight_range()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardTrace)> {
        let (batch, dx) = x.dim();
        if dx != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {dx} features, network expects {}",
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cdf = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Array2::zeros((batch, layer.fan_out));
            z.assign(
                &self
                    .bias(i)
                    .broadcast((batch, layer.fan_out))
                    .expect("bias row"),
            );
            general_mat_mul(1.0, &h, &self.weight(i).t(), 1.0, &mut z);
            let out = match layer.activation {
                Activation::Identity => {
                    cdf.push(None);
                    z.clone()
                }
                Activation::Gelu => {
                    let phi = z.mapv(normal_cdf);
                    let out = &z * &phi;
                    cdf.push(Some(phi));
                    out
                }
            };
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        let trace = ForwardTrace {
            inputs,
            pre,
            cdf,
            version: self.version,
            batch,
        };
        Ok((h, trace))
    }

    /// Gradient of `sum_b <d_raw[b], raw[b]>` with respect to every parameter,
    /// in the flat layout of [`DenseNet::params`].
    pub fn backward(&self, trace: &ForwardTrace, d_raw: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        if trace.version != self.version || trace.pre.len() != self.layers.len() {
            return Err(Error::State(
                "forward trace is stale: parameters changed since the forward pass".into(),
            ));
        }
        let out_width = self.layers.last().expect("non-empty").fan_out;
        if d_raw.dim() != (trace.batch, out_width) {
            return Err(Error::Shape(format!(
                "d_raw has shape {:?}, forward output was ({}, {out_width})",
                d_raw.dim(),
                trace.batch
            )));
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut upstream = d_raw.to_owned();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let d_pre = match (&layer.activation, &trace.cdf[i]) {
                (Activation::Identity, _) => upstream,
                (Activation::Gelu, Some(phi)) => {
                    let mut d = upstream;
                    ndarray::Zip::from(&mut d)
                        .and(&trace.pre[i])
                        .and(phi)
                        .for_each(|d, &z, &p| *d *= p + z * normal_pdf(z));
                    d
                }
                (Activation::Gelu, None) => {
                    return Err(Error::State(format!(
                        "trace for layer {i} is missing GELU cache"
                    )))
                }
            };
            {
                let (w_grad, b_grad) = grad[layer.offset..layer.bias_range().end]
                    .split_at_mut(layer.fan_out * layer.fan_in);
                let mut w_view = ArrayViewMut2::from_shape((layer.fan_out, layer.fan_in), w_grad)
                    .expect("layer shape");
                general_mat_mul(1.0, &d_pre.t(), &trace.inputs[i], 0.0, &mut w_view);
                for (g, s) in b_grad.iter_mut().zip(d_pre.sum_axis(Axis(0))) {
                    *g = s;
                }
            }
            if i == 0 {
                break;
            }
            upstream = d_pre.dot(&self.weight(i));
        }
        Ok(grad)
    }
}

pub fn normal_cdf(v: f64) -> f64 {
    0.5 * libm::erfc(-v * FRAC_1_SQRT_2)
}

pub fn normal_pdf(v: f64) -> f64 {
    (-0.5 * v * v).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `v * Φ(v)`.
pub fn gelu(v: f64) -> f64 {
    v * normal_cdf(v)
}

pub fn gelu_derivative(v: f64) -> f64 {
    normal_cdf(v) + v * normal_pdf(v)
}

pub fn gelu_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| gelu(x)).collect()
}

/// Chains `upstream` (gradient w.r.t. GELU outputs) back to the inputs `pre`.
pub fn gelu_backward(pre: &[f64], upstream: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(upstream)
        .map(|(&z, &g)| g * gelu_derivative(z))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_net(seed: u64) -> DenseNet {
        DenseNet::init(&[3, 5, 4], 2, 2, seed).unwrap()
    }

    #[test]
    fn head_width_follows_component_layout() {
        let net = DenseNet::init(&[1, 4], 2, 1, 0).unwrap();
        assert_eq!(net.head().width(), 6);
        assert_eq!(net.weight(1).dim(), (6, 4));
        let layout = HeadLayout::new(3, 2).unwrap();
        assert_eq!(layout.logits(), 0..3);
        assert_eq!(layout.means(), 3..9);
        assert_eq!(layout.raw_scales(), 9..15);
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(
            DenseNet::init(&[], 2, 1, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            DenseNet::init(&[2, 0], 2, 1, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            DenseNet::init(&[2], 0, 1, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            DenseNet::init(&[2], 1, 0, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = DenseNet::init(&[2, 16, 16], 3, 1, 7).unwrap();
        let b = DenseNet::init(&[2, 16, 16], 3, 1, 7).unwrap();
        assert_eq!(a, b);
        let c = DenseNet::init(&[2, 16, 16], 3, 1, 8).unwrap();
        assert_ne!(a.params(), c.params());
        for layer in 0..a.num_layers() {
            let w = a.weight(layer);
            let bound = (3.0 / w.ncols() as f64).sqrt();
            assert!(w.iter().all(|v| v.abs() <= bound));
        }
        assert_eq!(a.bias(0).iter().filter(|&&v| v != 0.0).count(), 0);
    }

    #[test]
    fn initial_head_bias_gives_uniform_weights_and_unit_scales() {
        let net = DenseNet::init(&[1], 1, 1, 3).unwrap();
        let x = array![[0.0]];
        let (raw, _) = net.forward(x.view()).unwrap();
        let params = mixture::head_transform(raw.view(), net.head());
        assert_eq!(params.weights()[[0, 0]], 1.0);
        assert!((params.scales()[[0, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_net_outputs_zero() {
        let head = HeadLayout::new(1, 1).unwrap();
        let net = DenseNet::from_layers(
            vec![
                (Array2::zeros((4, 2)), Array1::zeros(4), Activation::Gelu),
                (
                    Array2::zeros((3, 4)),
                    Array1::zeros(3),
                    Activation::Identity,
                ),
            ],
            head,
        )
        .unwrap();
        let (raw, _) = net.forward(array![[1.5, -2.0], [0.3, 9.0]].view()).unwrap();
        assert!(raw.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let head = HeadLayout::new(1, 1).unwrap();
        let net = DenseNet::from_layers(
            vec![(
                array![[1.0], [1.0], [1.0]],
                Array1::zeros(3),
                Activation::Identity,
            )],
            head,
        )
        .unwrap();
        let (raw, _) = net.forward(array![[3.0]].view()).unwrap();
        assert_eq!(raw, array![[3.0, 3.0, 3.0]]);
    }

    #[test]
    fn forward_rejects_wrong_feature_count() {
        let net = small_net(1);
        let err = net.forward(Array2::zeros((2, 4)).view()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn backward_rejects_stale_trace_and_bad_shape() {
        let mut net = small_net(1);
        let x = Array2::from_elem((2, 3), 0.5);
        let (raw, trace) = net.forward(x.view()).unwrap();
        let bad = Array2::zeros((2, raw.ncols() + 1));
        assert!(matches!(
            net.backward(&trace, bad.view()),
            Err(Error::Shape(_))
        ));
        net.params_mut()[0] += 1.0;
        let d = Array2::zeros(raw.dim());
        assert!(matches!(
            net.backward(&trace, d.view()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn backward_of_zero_is_zero_and_linear() {
        let net = small_net(4);
        let x = array![[0.1, -0.4, 2.0], [1.0, 0.0, -1.0]];
        let (raw, trace) = net.forward(x.view()).unwrap();
        let zero = net
            .backward(&trace, Array2::zeros(raw.dim()).view())
            .unwrap();
        assert!(zero.iter().all(|&g| g == 0.0));

        let g = raw.mapv(|v| v.sin() + 0.3);
        let base = net.backward(&trace, g.view()).unwrap();
        let scaled = net.backward(&trace, (&g * 2.5).view()).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert!((2.5 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn forward_is_pure() {
        let net = small_net(9);
        let x = array![[0.1, -0.4, 2.0]];
        let (a, _) = net.forward(x.view()).unwrap();
        let (b, _) = net.forward(x.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        assert!(gelu(-10.0).abs() < 1e-6);
        assert!((gelu(30.0) - 30.0).abs() < 1e-12);
        // x * Φ(x) at x = 1: Φ(1) = 0.841344746068543
        assert!((gelu(1.0) - 0.841_344_746_068_543).abs() < 1e-12);
        assert_eq!(gelu_vec(&[0.0, 30.0]), vec![0.0, 30.0]);
    }

    #[test]
    fn gelu_derivative_matches_central_differences() {
        let h = 1e-5;
        for &v in &[-3.1, -0.7, 0.0, 0.42, 1.9, 4.5] {
            let fd = (gelu(v + h) - gelu(v - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(v)).abs() < 1e-6, "v={v}");
        }
        let back = gelu_backward(&[0.5, -1.0], &[2.0, 3.0]);
        assert!((back[0] - 2.0 * gelu_derivative(0.5)).abs() < 1e-15);
        assert!((back[1] - 3.0 * gelu_derivative(-1.0)).abs() < 1e-15);
    }
}
