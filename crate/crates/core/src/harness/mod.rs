//! Training loop, evaluation and run configuration.
//!
//! One update is: forward pass, responsibilities, loss-specific gradients
//! with respect to the mixture parameters, optional Fisher preconditioning,
//! backpropagation into the network and an optimizer step.

mod bench;
mod config;
mod metrics;
mod model;

use std::fmt;
use std::time::Instant;

use ndarray::{ArrayView2, Axis};

use crate::data::{self, Batcher, Dataset};
use crate::diffnet::DenseNet;
use crate::mixture::{self, CategoricalMode, MixtureParams};
use crate::optim::OptimizerState;
use crate::Result;

pub use bench::{benchmark_overhead, benchmark_pair, OverheadReport};
pub use config::{DatasetSpec, LossKind, RunConfig};
pub use metrics::{
    emit_csv, entropy, metrics_to_csv, parse_metrics_csv, rmse_min, MetricsRecord, CSV_COLUMNS,
};
pub use model::{DirectGmm, Model};

/// Mixture parameters predicted for every row of `x`.
pub fn predict(net: &DenseNet, x: ArrayView2<'_, f64>) -> Result<MixtureParams> {
    let (raw, _) = net.forward(x)?;
    Ok(mixture::head_transform(raw.view(), net.head()))
}

/// Batch-mean loss and its gradient with respect to the network parameters.
///
/// For `Nll` this is plain backpropagation of the negative log-likelihood.
/// `Sgem` freezes the responsibilities; `Ngem` additionally preconditions the
/// mixture-parameter gradients before they enter the network.
pub fn loss_and_gradient(
    net: &DenseNet,
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    loss: LossKind,
    mode: CategoricalMode,
) -> Result<(f64, Vec<f64>)> {
    let (raw, trace) = net.forward(x)?;
    let params = mixture::head_transform(raw.view(), net.head());
    let (value, grads) = model::mixture_loss_and_gradients(&params, y, loss, mode)?;
    let mut d_raw = mixture::head_backward(&params, &grads);
    d_raw /= x.nrows() as f64;
    Ok((value, net.backward(&trace, d_raw.view())?))
}

/// Where and why a run stopped early.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Divergence {
    /// Update index that produced the non-finite value; it was not applied.
    pub iteration: u64,
    pub tensor: String,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid {} at iteration {}", self.tensor, self.iteration)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricsRecord>,
    pub divergence: Option<Divergence>,
    /// `(K, Dy)` when metric rows carry mean snapshots.
    pub means_shape: Option<(usize, usize)>,
}

/// Builds the dataset a configuration refers to. Generator seeds default to the run seed.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    match &config.dataset {
        DatasetSpec::TwoGaussians { n_per_mode, seed } => {
            data::gen_two_gaussians(*n_per_mode, seed.unwrap_or(config.seed))
        }
        DatasetSpec::TwoSinusoids { n_per_mode, seed } => {
            data::gen_two_sinusoids(*n_per_mode, seed.unwrap_or(config.seed))
        }
        DatasetSpec::Csv {
            path,
            targets,
            normalize,
        } => data::load_csv(path, targets, *normalize),
    }
}

/// Model for a configuration: a fresh network, or a directly fitted
/// mixture when `direct_gmm` is set.
pub fn init_model(config: &RunConfig, input_dim: usize, target_dim: usize) -> Result<Model> {
    if config.direct_gmm {
        return Ok(Model::Direct(DirectGmm::init(
            config.components,
            target_dim,
            config.seed,
        )?));
    }
    let mut sizes = vec![input_dim];
    sizes.extend(&config.hidden_layers);
    Ok(Model::Net(DenseNet::init(
        &sizes,
        config.components,
        target_dim,
        config.seed,
    )?))
}

/// Stateful runner for one configuration.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: RunConfig,
    model: Model,
    optimizer: OptimizerState,
    batcher: Batcher,
    test: Option<Dataset>,
    iteration: u64,
    train_ms: f64,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let ds = load_dataset(config)?;
        Self::with_dataset(config, &ds)
    }

    pub fn with_dataset(config: &RunConfig, ds: &Dataset) -> Result<Self> {
        config.validate()?;
        let (batcher, test) =
            data::split_and_batch(ds, config.train_frac, config.batch_size, config.seed)?;
        let model = init_model(config, ds.input_dim(), ds.target_dim())?;
        let optimizer = OptimizerState::new(config.optimizer, config.lr, model.params().len())?;
        Ok(Self {
            config: config.clone(),
            model,
            optimizer,
            batcher,
            test,
            iteration: 0,
            train_ms: 0.0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn batcher(&self) -> &Batcher {
        &self.batcher
    }

    pub fn train_set(&self) -> &Dataset {
        self.batcher.train()
    }

    /// Held-out split, or the training split when there is none.
    pub fn eval_set(&self) -> &Dataset {
        self.test.as_ref().unwrap_or_else(|| self.batcher.train())
    }

    /// One update on a batch. A non-finite loss, gradient or updated
    /// parameter vector is reported instead of applied, as is a directly
    /// fitted scale stepping below the floor.
    pub fn step(
        &mut self,
        x: ArrayView2<'_, f64>,
        y: ArrayView2<'_, f64>,
    ) -> Result<Option<Divergence>> {
        let (loss, grad) =
            self.model
                .loss_and_gradient(x, y, self.config.loss, self.config.categorical_mode)?;
        let diverged = |tensor: &str| {
            Ok(Some(Divergence {
                iteration: self.iteration + 1,
                tensor: tensor.to_string(),
            }))
        };
        if !loss.is_finite() {
            return diverged("loss");
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return diverged("gradient");
        }
        let mut updated = self.model.params().to_vec();
        self.optimizer.step(&mut updated, &grad)?;
        if updated.iter().any(|p| !p.is_finite()) {
            return diverged("parameters");
        }
        if let Model::Direct(d) = &self.model {
            let mut next = d.clone();
            next.params_mut().copy_from_slice(&updated);
            if !next.scales_valid() {
                return diverged("scales");
            }
        }
        self.model.params_mut().copy_from_slice(&updated);
        self.iteration += 1;
        Ok(None)
    }

    /// Objective on the training split; the remaining columns on the evaluation set.
    pub fn evaluate(&self) -> Result<MetricsRecord> {
        let train = self.train_set();
        let train_params = self.model.predict(train.x().view())?;
        let train_loss = match self.config.loss {
            LossKind::Nll => mixture::nll_loss(&train_params, train.y().view())?,
            LossKind::Sgem | LossKind::Ngem => {
                let rho = mixture::responsibilities(&train_params, train.y().view())?;
                mixture::ngem_loss(&train_params, &rho, train.y().view())?
            }
        };
        let eval = self.eval_set();
        let params = self.model.predict(eval.x().view())?;
        let mean_weights = params
            .weights()
            .mean_axis(Axis(0))
            .expect("non-empty evaluation set");
        let means = self.config.record_means.then(|| {
            params
                .means()
                .mean_axis(Axis(0))
                .expect("non-empty evaluation set")
                .iter()
                .copied()
                .collect()
        });
        Ok(MetricsRecord {
            iteration: self.iteration,
            train_loss,
            test_nll: mixture::nll_loss(&params, eval.y().view())?,
            entropy: entropy(mean_weights.view()),
            rmse_min: rmse_min(&params, eval.y().view())?,
            wall_ms: if self.config.record_time {
                self.train_ms
            } else {
                0.0
            },
            means,
        })
    }

    /// Trains for the configured number of epochs, evaluating at iteration 0,
    /// every `eval_every` updates and after the last update.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let mut metrics = vec![self.evaluate()?];
        let mut divergence = None;
        'epochs: for epoch in 0..self.config.epochs as u64 {
            let batches: Vec<_> = self.batcher.epoch(epoch).collect();
            for (x, y) in batches {
                let start = Instant::now();
                let outcome = self.step(x.view(), y.view())?;
                self.train_ms += start.elapsed().as_secs_f64() * 1e3;
                if let Some(d) = outcome {
                    divergence = Some(d);
                    break 'epochs;
                }
                if self.iteration % self.config.eval_every as u64 == 0 {
                    metrics.push(self.evaluate()?);
                }
            }
        }
        if metrics.last().map(|m| m.iteration) != Some(self.iteration) || divergence.is_some() {
            metrics.push(self.evaluate()?);
        }
        let means_shape = self
            .config
            .record_means
            .then(|| (self.config.components, self.batcher.train().target_dim()));
        Ok(TrainOutcome {
            model: self.model,
            metrics,
            divergence,
            means_shape,
        })
    }
}

/// Runs a configuration end to end.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    Trainer::new(config)?.run()
}
