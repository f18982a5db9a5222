use super::Cnn;
use crate::channel::{apply_channel, generate_symbols, ChannelConfig};
use crate::loss::LossKind;
use crate::rng::substream;
use crate::{Error, Result};

/// The unsupervised balance term pushes every output between the outer
/// constellation points with the same magnitude, so its raw gradient can be
/// large enough to silence all ReLUs in one step.
pub const DEFAULT_CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub iterations: usize,
    pub lr: f64,
    /// Symbols per training sequence; one sequence per iteration.
    pub sequence_symbols: usize,
    pub seed: u64,
    /// Upper bound on the joint kernel-gradient norm of a single step.
    pub clip_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.02,
            sequence_symbols: 1024,
            seed: 0,
            clip_norm: Some(DEFAULT_CLIP_NORM),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Loss of every iteration, before its update.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the last `n` iterations.
    pub fn tail_loss(&self, n: usize) -> f64 {
        let n = n.clamp(1, self.losses.len().max(1));
        let tail = &self.losses[self.losses.len().saturating_sub(n)..];
        tail.iter().sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Fresh sequence → channel → forward → loss → backward → SGD, repeated.
///
/// The iteration-`t` sequence and noise depend only on `(seed, t)`.
pub fn train(cnn: &mut Cnn, channel: &ChannelConfig, loss: &LossKind, opts: &TrainOptions) -> Result<TrainReport> {
    if opts.iterations == 0 {
        return Err(Error::config("training needs at least one iteration"));
    }
    if !(opts.lr >= 0.0 && opts.lr.is_finite()) {
        return Err(Error::config(format!("learning rate {} is invalid", opts.lr)));
    }
    if let Some(c) = opts.clip_norm {
        if !(c > 0.0) {
            return Err(Error::config(format!("clip norm {c} must be positive")));
        }
    }
    channel.validate()?;
    loss.validate()?;
    let scheme = channel.scheme();
    let mut losses = Vec::with_capacity(opts.iterations);
    for t in 0..opts.iterations {
        let x = generate_symbols(opts.sequence_symbols, &scheme, substream(opts.seed, 2 * t as u64))?;
        let y = apply_channel(&x, channel, substream(opts.seed, 2 * t as u64 + 1))?;
        let (z, cache) = cnn.forward(&y.samples)?;
        let targets = scheme.targets(&x);
        let (value, dz) = loss.evaluate(&z, Some(&targets))?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: t,
                loss: value,
            });
        }
        losses.push(value);
        let mut grads = cnn.backward(&cache, &dz)?;
        if let Some(c) = opts.clip_norm {
            grads.clip_norm(c);
        }
        cnn.sgd_step(&grads, opts.lr)?;
    }
    Ok(TrainReport { losses })
}
