//! What a run trains: a network, or one mixture shared by every input.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::LossKind;
use crate::diffnet::{DenseNet, HeadLayout};
use crate::mixture::{
    self, CategoricalMode, DistGradients, MixtureParams, Responsibilities, SCALE_FLOOR,
};
use crate::{Error, Result};

/// Mixture parameters fitted directly: logits, means and scales are the
/// trainable coordinates, with no link function on the scales.
///
/// Flat layout is the head layout: `K` logits, `K*Dy` means, `K*Dy` scales.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectGmm {
    head: HeadLayout,
    params: Vec<f64>,
}

impl DirectGmm {
    /// Uniform weights, unit scales, means drawn i.i.d. from N(0, 1).
    pub fn init(components: usize, target_dim: usize, seed: u64) -> Result<Self> {
        let head = HeadLayout::new(components, target_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; head.width()];
        for i in head.means() {
            params[i] = StandardNormal.sample(&mut rng);
        }
        params[head.raw_scales()].fill(1.0);
        Ok(Self { head, params })
    }

    pub fn from_params(head: HeadLayout, params: Vec<f64>) -> Result<Self> {
        if params.len() != head.width() {
            return Err(Error::Shape(format!(
                "{} parameters for a head of width {}",
                params.len(),
                head.width()
            )));
        }
        Ok(Self { head, params })
    }

    pub fn head(&self) -> HeadLayout {
        self.head
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// The shared mixture repeated for `batch` rows. Fails when a scale has
    /// left the admissible range.
    pub fn mixture(&self, batch: usize) -> Result<MixtureParams> {
        let h = self.head;
        let (k, dy) = (h.components, h.target_dim);
        let row = |r: std::ops::Range<usize>| &self.params[r];
        let logits = Array2::from_shape_fn((batch, k), |(_, j)| row(h.logits())[j]);
        let means = Array3::from_shape_fn((batch, k, dy), |(_, j, d)| row(h.means())[j * dy + d]);
        let scales =
            Array3::from_shape_fn((batch, k, dy), |(_, j, d)| row(h.raw_scales())[j * dy + d]);
        MixtureParams::new(logits, means, scales)
    }

    pub fn scales_valid(&self) -> bool {
        self.params[self.head.raw_scales()]
            .iter()
            .all(|&s| s >= SCALE_FLOOR && s.is_finite())
    }

    /// A single-layer network with zero weights whose head bias encodes this
    /// mixture, so it predicts the same distribution for every input.
    pub fn to_net(&self, input_dim: usize) -> Result<DenseNet> {
        if !self.scales_valid() {
            return Err(Error::State("mixture has invalid scales".into()));
        }
        let mut net = DenseNet::init(&[input_dim], self.head.components, self.head.target_dim, 0)?;
        let weights = net.head_weight_range();
        let bias = net.head_bias_range();
        let p = net.params_mut();
        p[weights].fill(0.0);
        for (i, &v) in self.params.iter().enumerate() {
            p[bias.start + i] = if self.head.raw_scales().contains(&i) {
                mixture::raw_scale_for(v)
            } else {
                v
            };
        }
        Ok(net)
    }
}

/// Trainable model of a run.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Net(DenseNet),
    Direct(DirectGmm),
}

impl Model {
    pub fn head(&self) -> HeadLayout {
        match self {
            Model::Net(n) => n.head(),
            Model::Direct(d) => d.head(),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Model::Net(n) => n.params(),
            Model::Direct(d) => d.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Model::Net(n) => n.params_mut(),
            Model::Direct(d) => d.params_mut(),
        }
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<MixtureParams> {
        match self {
            Model::Net(n) => super::predict(n, x),
            Model::Direct(d) => d.mixture(x.nrows()),
        }
    }

    /// Network form, for checkpoints.
    pub fn to_net(&self, input_dim: usize) -> Result<DenseNet> {
        match self {
            Model::Net(n) => Ok(n.clone()),
            Model::Direct(d) => d.to_net(input_dim),
        }
    }

    /// Batch-mean loss and its gradient over [`Model::params`].
    pub fn loss_and_gradient(
        &self,
        x: ArrayView2<'_, f64>,
        y: ArrayView2<'_, f64>,
        loss: LossKind,
        mode: CategoricalMode,
    ) -> Result<(f64, Vec<f64>)> {
        match self {
            Model::Net(n) => super::loss_and_gradient(n, x, y, loss, mode),
            Model::Direct(d) => {
                let params = d.mixture(y.nrows())?;
                let (value, grads) = mixture_loss_and_gradients(&params, y, loss, mode)?;
                let b = y.nrows() as f64;
                let mut flat = Vec::with_capacity(d.params.len());
                flat.extend(grads.logits.sum_axis(Axis(0)).iter().map(|g| g / b));
                flat.extend(grads.means.sum_axis(Axis(0)).iter().map(|g| g / b));
                flat.extend(grads.scales.sum_axis(Axis(0)).iter().map(|g| g / b));
                Ok((value, flat))
            }
        }
    }
}

/// Loss value and per-sample distribution-parameter gradients.
pub(crate) fn mixture_loss_and_gradients(
    params: &MixtureParams,
    y: ArrayView2<'_, f64>,
    loss: LossKind,
    mode: CategoricalMode,
) -> Result<(f64, DistGradients)> {
    Ok(match loss {
        LossKind::Nll => (
            mixture::nll_loss(params, y)?,
            mixture::nll_gradients(params, y)?,
        ),
        LossKind::Sgem => {
            let rho = mixture::responsibilities(params, y)?;
            (
                mixture::sgem_loss(params, &rho, y)?,
                mixture::sgem_gradients(params, &rho, y)?,
            )
        }
        LossKind::Ngem => {
            let rho: Responsibilities = mixture::responsibilities(params, y)?;
            (
                mixture::ngem_loss(params, &rho, y)?,
                mixture::natural_gradient(params, &rho, y, mode)?,
            )
        }
    })
}
