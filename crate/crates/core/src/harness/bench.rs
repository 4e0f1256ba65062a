//! Wall-clock comparison of two training configurations.

use std::time::{Duration, Instant};

use ndarray::Array2;

use super::{LossKind, RunConfig, Trainer};
use crate::{Error, Result};

const BLOCKS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverheadReport {
    pub updates: usize,
    pub ngem_secs: f64,
    pub nll_secs: f64,
}

impl OverheadReport {
    /// `ngem_secs / nll_secs`.
    pub fn ratio(&self) -> f64 {
        self.ngem_secs / self.nll_secs
    }
}

struct Runner {
    trainer: Trainer,
    batches: Vec<(Array2<f64>, Array2<f64>)>,
    next: usize,
    epoch: u64,
}

impl Runner {
    fn new(config: &RunConfig) -> Result<Self> {
        let trainer = Trainer::new(config)?;
        let batches = trainer.batcher().epoch(0).collect();
        Ok(Self {
            trainer,
            batches,
            next: 0,
            epoch: 0,
        })
    }

    /// Runs `n` updates and returns the time spent inside them.
    fn run(&mut self, n: usize) -> Result<Duration> {
        let mut elapsed = Duration::ZERO;
        for _ in 0..n {
            if self.next == self.batches.len() {
                self.epoch += 1;
                self.batches = self.trainer.batcher().epoch(self.epoch).collect();
                self.next = 0;
            }
            let (x, y) = &self.batches[self.next];
            self.next += 1;
            let start = Instant::now();
            let outcome = self.trainer.step(x.view(), y.view())?;
            elapsed += start.elapsed();
            if let Some(d) = outcome {
                return Err(Error::State(format!("benchmark run diverged: {d}")));
            }
        }
        Ok(elapsed)
    }
}

/// Seconds spent in `updates` updates of each configuration.
///
/// Both runs first take a short untimed warm-up, then alternate in blocks so
/// drift in machine load affects them equally.
pub fn benchmark_pair(a: &RunConfig, b: &RunConfig, updates: usize) -> Result<(f64, f64)> {
    let mut ra = Runner::new(a)?;
    let mut rb = Runner::new(b)?;
    let warmup = (updates / 20).clamp(1, 50);
    if updates > 0 {
        ra.run(warmup)?;
        rb.run(warmup)?;
    }
    let (mut ta, mut tb) = (Duration::ZERO, Duration::ZERO);
    for block in 0..BLOCKS {
        let n = updates / BLOCKS + usize::from(block < updates % BLOCKS);
        // alternate which side goes first
        if block % 2 == 0 {
            ta += ra.run(n)?;
            tb += rb.run(n)?;
        } else {
            tb += rb.run(n)?;
            ta += ra.run(n)?;
        }
    }
    Ok((ta.as_secs_f64(), tb.as_secs_f64()))
}

/// Times nGEM against NLL on `config`, which differ only in the loss.
pub fn benchmark_overhead(config: &RunConfig, updates: usize) -> Result<OverheadReport> {
    let ngem = RunConfig {
        loss: LossKind::Ngem,
        ..config.clone()
    };
    let nll = RunConfig {
        loss: LossKind::Nll,
        ..config.clone()
    };
    let (ngem_secs, nll_secs) = benchmark_pair(&ngem, &nll, updates)?;
    Ok(OverheadReport {
        updates,
        ngem_secs,
        nll_secs,
    })
}
