//! Third-order Volterra equalizer with symmetric (deduplicated) kernels.
//!
//! Each symbol is predicted from a window of received samples centered on
//! its decision sample (sample `2n` at two samples per symbol). Order `p`
//! uses the centered sub-window of `F_p` samples and one weight per unordered
//! index multiset. Features are standardized to unit RMS on a calibration
//! sequence before training.

use crate::channel::{apply_channel, generate_symbols, ChannelConfig, SAMPLES_PER_SYMBOL};
use crate::eval::Equalizer;
use crate::rng::substream;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_MEMORY: [usize; 3] = [35, 17, 9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolterraSpec {
    /// Taps per order, `F1 ≥ F2 ≥ F3 > 0`.
    pub memory: [usize; 3],
    /// One weight per standardized feature.
    pub weights: Vec<f64>,
    pub include_bias: bool,
    pub bias: f64,
    /// Multiplier applied to each raw feature before the weights.
    pub feature_scale: Vec<f64>,
}

impl Default for VolterraSpec {
    fn default() -> Self {
        Self::zeros(DEFAULT_MEMORY, true).expect("default memory is valid")
    }
}

impl VolterraSpec {
    pub fn zeros(memory: [usize; 3], include_bias: bool) -> Result<Self> {
        validate_memory(memory)?;
        let n = feature_count(memory);
        Ok(Self {
            memory,
            weights: vec![0.0; n],
            include_bias,
            bias: 0.0,
            feature_scale: vec![1.0; n],
        })
    }

    pub fn feature_count(&self) -> usize {
        feature_count(self.memory)
    }

    /// Trainable parameters, bias included when enabled.
    pub fn param_count(&self) -> usize {
        self.feature_count() + usize::from(self.include_bias)
    }

    pub fn validate(&self) -> Result<()> {
        validate_memory(self.memory)?;
        let n = self.feature_count();
        if self.weights.len() != n || self.feature_scale.len() != n {
            return Err(Error::shape(format!(
                "Volterra spec with memory {:?} needs {n} weights and scales",
                self.memory
            )));
        }
        Ok(())
    }

    /// Output for one raw feature vector.
    pub fn predict(&self, features: &[f64]) -> f64 {
        let dot: f64 = features
            .iter()
            .zip(&self.feature_scale)
            .zip(&self.weights)
            .map(|((f, s), w)| f * s * w)
            .sum();
        if self.include_bias {
            dot + self.bias
        } else {
            dot
        }
    }

    /// One output per symbol of an oversampled sequence.
    pub fn equalize(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        let m = FeatureMatrix::build(y, self.memory);
        Ok((0..m.rows).map(|r| self.predict(m.row(r))).collect())
    }
}

impl Equalizer for VolterraSpec {
    fn equalize(&self, y: &[f64]) -> Result<Vec<f64>> {
        VolterraSpec::equalize(self, y)
    }
}

fn validate_memory(f: [usize; 3]) -> Result<()> {
    if !(f[0] >= f[1] && f[1] >= f[2] && f[2] > 0) {
        return Err(Error::config(format!("Volterra memory {f:?} must satisfy F1 >= F2 >= F3 > 0")));
    }
    Ok(())
}

/// `F1 + F2(F2+1)/2 + C(F3+2, 3)`.
pub fn feature_count(f: [usize; 3]) -> usize {
    f[0] + f[1] * (f[1] + 1) / 2 + f[2] * (f[2] + 1) * (f[2] + 2) / 6
}

/// Offset of the centered sub-window of length `len` inside a window of
/// length `total`.
fn centered_start(total: usize, len: usize) -> usize {
    total / 2 - len / 2
}

/// Features of one window centered on the decision sample (index
/// `window.len() / 2`).
pub fn volterra_features(window: &[f64], memory: [usize; 3]) -> Result<Vec<f64>> {
    validate_memory(memory)?;
    if window.len() < memory[0] {
        return Err(Error::shape(format!(
            "window of {} samples is shorter than F1 = {}",
            window.len(),
            memory[0]
        )));
    }
    let mut out = Vec::with_capacity(feature_count(memory));
    push_features(window, memory, &mut out);
    Ok(out)
}

fn push_features(window: &[f64], f: [usize; 3], out: &mut Vec<f64>) {
    let total = window.len();
    let s1 = centered_start(total, f[0]);
    out.extend_from_slice(&window[s1..s1 + f[0]]);
    let w2 = &window[centered_start(total, f[1])..][..f[1]];
    for i in 0..f[1] {
        for j in i..f[1] {
            out.push(w2[i] * w2[j]);
        }
    }
    let w3 = &window[centered_start(total, f[2])..][..f[2]];
    for i in 0..f[2] {
        for j in i..f[2] {
            let p = w3[i] * w3[j];
            for k in j..f[2] {
                out.push(p * w3[k]);
            }
        }
    }
}

/// Row-major raw features, one row per symbol, zero-padded at the edges.
struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    fn build(y: &[f64], memory: [usize; 3]) -> Self {
        let cols = feature_count(memory);
        let rows = y.len() / SAMPLES_PER_SYMBOL;
        let half = memory[0] / 2;
        let mut data = Vec::with_capacity(rows * cols);
        let mut window = vec![0.0; memory[0]];
        for r in 0..rows {
            let center = (r * SAMPLES_PER_SYMBOL) as isize;
            for (j, w) in window.iter_mut().enumerate() {
                let idx = center + j as isize - half as isize;
                *w = if idx >= 0 && (idx as usize) < y.len() { y[idx as usize] } else { 0.0 };
            }
            push_features(&window, memory, &mut data);
        }
        Self { rows, cols, data }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolterraTrainOptions {
    pub iterations: usize,
    pub lr: f64,
    pub sequence_symbols: usize,
    pub seed: u64,
    /// Symbols used to estimate the per-feature RMS.
    pub calibration_symbols: usize,
}

impl Default for VolterraTrainOptions {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 0.01,
            sequence_symbols: 1024,
            seed: 0,
            calibration_symbols: 4096,
        }
    }
}

/// Sets `feature_scale` to the reciprocal RMS of each feature on `y`.
pub fn standardize(spec: &mut VolterraSpec, y: &[f64]) -> Result<()> {
    spec.validate()?;
    let m = FeatureMatrix::build(y, spec.memory);
    if m.rows == 0 {
        return Err(Error::EmptySequence);
    }
    let mut sq = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (s, f) in sq.iter_mut().zip(m.row(r)) {
            *s += f * f;
        }
    }
    for (scale, s) in spec.feature_scale.iter_mut().zip(sq) {
        let rms = (s / m.rows as f64).sqrt();
        *scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    }
    Ok(())
}

/// MSE over `rows` and its gradient with respect to weights and bias.
/// The weight gradient is `(2/N)·Σ e_n·φ_n` on the standardized features.
fn mse_grad(spec: &VolterraSpec, m: &FeatureMatrix, targets: &[f64]) -> (f64, Vec<f64>, f64) {
    let n = m.rows as f64;
    let mut gw = vec![0.0; m.cols];
    let mut gb = 0.0;
    let mut loss = 0.0;
    for (r, &t) in targets.iter().enumerate().take(m.rows) {
        let row = m.row(r);
        let e = spec.predict(row) - t;
        loss += e * e;
        let c = 2.0 * e / n;
        for ((g, f), s) in gw.iter_mut().zip(row).zip(&spec.feature_scale) {
            *g += c * f * s;
        }
        gb += c;
    }
    (loss / n, gw, gb)
}

/// Standardizes on a calibration sequence, then runs SGD on the MSE against
/// the true symbols, one fresh sequence per iteration. Returns the loss
/// trace.
pub fn volterra_train(
    spec: &mut VolterraSpec,
    channel: &ChannelConfig,
    opts: &VolterraTrainOptions,
) -> Result<Vec<f64>> {
    if opts.iterations == 0 {
        return Err(Error::config("training needs at least one iteration"));
    }
    if !(opts.lr >= 0.0 && opts.lr.is_finite()) {
        return Err(Error::config(format!("learning rate {} is invalid", opts.lr)));
    }
    spec.validate()?;
    channel.validate()?;
    let scheme = channel.scheme();
    let calib = generate_symbols(opts.calibration_symbols.max(1), &scheme, substream(opts.seed, 0xCA1))?;
    let yc = apply_channel(&calib, channel, substream(opts.seed, 0xCA2))?;
    standardize(spec, &yc.samples)?;

    let mut losses = Vec::with_capacity(opts.iterations);
    for t in 0..opts.iterations {
        let x = generate_symbols(opts.sequence_symbols, &scheme, substream(opts.seed, 2 * t as u64))?;
        let y = apply_channel(&x, channel, substream(opts.seed, 2 * t as u64 + 1))?;
        let m = FeatureMatrix::build(&y.samples, spec.memory);
        let (loss, gw, gb) = mse_grad(spec, &m, &scheme.targets(&x));
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: t, loss });
        }
        losses.push(loss);
        for (w, g) in spec.weights.iter_mut().zip(gw) {
            *w -= opts.lr * g;
        }
        if spec.include_bias {
            spec.bias -= opts.lr * gb;
        }
    }
    Ok(losses)
}
