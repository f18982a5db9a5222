//! Fixed-point emulation of the forward and backward passes, range
//! profiling for the static formats, and the learnable bit-width search.
//!
//! Value classes: per-layer weights, per-layer activations (the input of
//! each layer, so the received samples count as the first activation
//! class), multiplier outputs, accumulators and gradients. The backward
//! pass has its own multiplier and accumulator formats because gradient
//! magnitudes are orders below forward activations.

use crate::channel::{apply_channel, generate_symbols, ChannelConfig};
use crate::cnn::{
    conv, conv1d_input_grad, conv1d_kernel_grad, relu_backward, Arith, Cnn, Exact, FeatureMap, ForwardCache,
    GradientSet, Numerics,
};
use crate::eval::{evaluate_ber, BerEstimate, Equalizer};
use crate::loss::LossKind;
use crate::rng::substream;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::cell::{Cell, RefCell};

pub const MIN_BITS: f64 = 2.0;
pub const MAX_BITS: f64 = 16.0;

/// Two's-complement (or unsigned) fixed-point format with step
/// `2^-frac_bits`. `frac_bits` may be negative for coarse grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointFormat {
    pub total_bits: u32,
    pub frac_bits: i32,
    #[serde(default = "signed_default")]
    pub signed: bool,
}

fn signed_default() -> bool {
    true
}

impl FixedPointFormat {
    pub fn new(total_bits: u32, frac_bits: i32, signed: bool) -> Result<Self> {
        let f = Self {
            total_bits,
            frac_bits,
            signed,
        };
        f.validate()?;
        Ok(f)
    }

    /// Signed format with `int_bits` integer bits (sign included).
    pub fn with_int_bits(total_bits: u32, int_bits: i32) -> Result<Self> {
        Self::new(total_bits, total_bits as i32 - int_bits, true)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=32).contains(&self.total_bits) {
            return Err(Error::config(format!("{} total bits outside 1..=32", self.total_bits)));
        }
        let max_frac = self.total_bits as i32 - i32::from(self.signed);
        if self.frac_bits > max_frac {
            return Err(Error::config(format!(
                "{} fractional bits exceed {} for a {}-bit {} format",
                self.frac_bits,
                max_frac,
                self.total_bits,
                if self.signed { "signed" } else { "unsigned" }
            )));
        }
        Ok(())
    }

    /// Integer bits, sign included.
    pub fn int_bits(&self) -> i32 {
        self.total_bits as i32 - self.frac_bits
    }

    pub fn step(&self) -> f64 {
        (-self.frac_bits as f64).exp2()
    }

    fn code_range(&self) -> (f64, f64) {
        if self.signed {
            let half = ((self.total_bits - 1) as f64).exp2();
            (-half, half - 1.0)
        } else {
            (0.0, (self.total_bits as f64).exp2() - 1.0)
        }
    }

    pub fn min_value(&self) -> f64 {
        self.code_range().0 * self.step()
    }

    pub fn max_value(&self) -> f64 {
        self.code_range().1 * self.step()
    }

    /// Quantized value and whether it saturated.
    pub fn quantize_checked(&self, x: f64) -> (f64, bool) {
        if x.is_nan() {
            return (0.0, false);
        }
        let (lo, hi) = self.code_range();
        let code = (x / self.step()).round();
        if code > hi {
            (hi * self.step(), true)
        } else if code < lo {
            (lo * self.step(), true)
        } else {
            (code * self.step(), false)
        }
    }

    pub fn quantize(&self, x: f64) -> f64 {
        self.quantize_checked(x).0
    }
}

/// Round to nearest (ties away from zero) on the format's grid, saturating.
pub fn quantize(x: f64, fmt: &FixedPointFormat) -> f64 {
    fmt.quantize(x)
}

/// Integer bits, sign included, covering `max_abs`: `floor(log2 m) + 2`,
/// at least 1. Exact powers of two get the extra bit they need to be
/// representable.
pub fn integer_bits_for(max_abs: f64) -> i32 {
    if !(max_abs > 0.0) || !max_abs.is_finite() {
        return 1;
    }
    (max_abs.log2().floor() as i32 + 2).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftQuant {
    pub value: f64,
    /// d value / d b.
    pub d_b: f64,
    /// Straight-through d value / d x: 1 inside the range, 0 when saturated.
    pub d_x: f64,
}

fn signed_grid(bits: u32, int_bits: i32) -> FixedPointFormat {
    FixedPointFormat {
        total_bits: bits,
        frac_bits: bits as i32 - int_bits,
        signed: true,
    }
}

/// Interpolates between the `⌊b⌋`- and `⌈b⌉`-bit signed grids that share
/// `int_bits` integer bits. At integer `b` the slope is taken towards the
/// next width up (down at the upper bound).
pub fn soft_quantize(x: f64, b: f64, int_bits: i32) -> SoftQuant {
    let b = b.clamp(MIN_BITS, MAX_BITS);
    let lo_bits = b.floor();
    let frac = b - lo_bits;
    let lo = signed_grid(lo_bits as u32, int_bits);
    let (q_lo, sat_lo) = lo.quantize_checked(x);
    let (value, d_b, saturated) = if frac == 0.0 {
        let (nb, sign) = if lo_bits < MAX_BITS { (lo_bits + 1.0, 1.0) } else { (lo_bits - 1.0, -1.0) };
        let q_n = signed_grid(nb as u32, int_bits).quantize(x);
        (q_lo, sign * (q_n - q_lo), sat_lo)
    } else {
        let hi = signed_grid(lo_bits as u32 + 1, int_bits);
        let (q_hi, sat_hi) = hi.quantize_checked(x);
        ((1.0 - frac) * q_lo + frac * q_hi, q_hi - q_lo, sat_lo && sat_hi)
    };
    SoftQuant {
        value,
        d_b,
        d_x: if saturated { 0.0 } else { 1.0 },
    }
}

/// Where accumulator rounding happens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccumulateMode {
    /// After every addition, as a narrow hardware accumulator would.
    #[default]
    Faithful,
    /// Only once on the finished sum.
    Fast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantConfig {
    pub weights: Vec<FixedPointFormat>,
    pub activations: Vec<FixedPointFormat>,
    pub multiplier: FixedPointFormat,
    pub accumulator: FixedPointFormat,
    pub grad_multiplier: FixedPointFormat,
    pub grad_accumulator: FixedPointFormat,
    pub gradient: FixedPointFormat,
    #[serde(default)]
    pub mode: AccumulateMode,
}

/// Total widths of the classes whose integer part is profiled rather than
/// learned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArithWidths {
    pub multiplier: u32,
    pub accumulator: u32,
    pub grad_multiplier: u32,
    pub grad_accumulator: u32,
    pub gradient: u32,
}

impl Default for ArithWidths {
    fn default() -> Self {
        Self {
            multiplier: 24,
            accumulator: 32,
            grad_multiplier: 32,
            grad_accumulator: 32,
            gradient: 32,
        }
    }
}

impl QuantConfig {
    /// Every class in the same format.
    pub fn uniform(layers: usize, fmt: FixedPointFormat) -> Self {
        Self {
            weights: vec![fmt; layers],
            activations: vec![fmt; layers],
            multiplier: fmt,
            accumulator: fmt,
            grad_multiplier: fmt,
            grad_accumulator: fmt,
            gradient: fmt,
            mode: AccumulateMode::Faithful,
        }
    }

    /// Integer parts from `profile`, totals from the given widths.
    pub fn from_profile(
        profile: &RangeProfile,
        weight_bits: &[u32],
        activation_bits: &[u32],
        widths: &ArithWidths,
    ) -> Result<Self> {
        if weight_bits.len() != profile.weights.len() || activation_bits.len() != profile.activations.len() {
            return Err(Error::shape("bit-width lists do not match the profiled layers"));
        }
        let fmt = |bits: u32, max: f64| FixedPointFormat::with_int_bits(bits, integer_bits_for(max).min(bits as i32));
        let cfg = Self {
            weights: weight_bits
                .iter()
                .zip(&profile.weights)
                .map(|(&b, &m)| fmt(b, m))
                .collect::<Result<_>>()?,
            activations: activation_bits
                .iter()
                .zip(&profile.activations)
                .map(|(&b, &m)| fmt(b, m))
                .collect::<Result<_>>()?,
            multiplier: fmt(widths.multiplier, profile.multiplier)?,
            accumulator: fmt(widths.accumulator, profile.accumulator)?,
            grad_multiplier: fmt(widths.grad_multiplier, profile.grad_multiplier)?,
            grad_accumulator: fmt(widths.grad_accumulator, profile.grad_accumulator)?,
            gradient: fmt(widths.gradient, profile.gradient)?,
            mode: AccumulateMode::Faithful,
        };
        cfg.validate(profile.weights.len())?;
        Ok(cfg)
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.weights.len() != layers || self.activations.len() != layers {
            return Err(Error::config(format!(
                "need {layers} weight and activation formats, got {} and {}",
                self.weights.len(),
                self.activations.len()
            )));
        }
        for f in self.weights.iter().chain(&self.activations).chain([
            &self.multiplier,
            &self.accumulator,
            &self.grad_multiplier,
            &self.grad_accumulator,
            &self.gradient,
        ]) {
            f.validate()?;
        }
        if self.accumulator.total_bits < self.multiplier.total_bits
            || self.grad_accumulator.total_bits < self.grad_multiplier.total_bits
        {
            return Err(Error::config("accumulators must be at least as wide as multipliers"));
        }
        Ok(())
    }

    /// Plain mean of the weight and activation widths.
    pub fn avg_bits(&self) -> f64 {
        let all: Vec<u32> = self
            .weights
            .iter()
            .chain(&self.activations)
            .map(|f| f.total_bits)
            .collect();
        all.iter().map(|&b| b as f64).sum::<f64>() / all.len().max(1) as f64
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }
}

/// Mean of a list of bit-widths.
pub fn avg_bits(bits: &[f64]) -> f64 {
    bits.iter().sum::<f64>() / bits.len().max(1) as f64
}

#[derive(Debug, Clone, Copy)]
pub struct QArith<'a> {
    mult: FixedPointFormat,
    acc: FixedPointFormat,
    mode: AccumulateMode,
    saturations: &'a Cell<u64>,
}

impl QArith<'_> {
    #[inline]
    fn q(&self, fmt: &FixedPointFormat, x: f64) -> f64 {
        let (v, sat) = fmt.quantize_checked(x);
        if sat {
            self.saturations.set(self.saturations.get() + 1);
        }
        v
    }
}

impl Arith for QArith<'_> {
    #[inline]
    fn mul(&self, a: f64, b: f64) -> f64 {
        self.q(&self.mult, a * b)
    }

    #[inline]
    fn add(&self, acc: f64, x: f64) -> f64 {
        match self.mode {
            AccumulateMode::Faithful => self.q(&self.acc, acc + x),
            AccumulateMode::Fast => acc + x,
        }
    }

    #[inline]
    fn finish(&self, acc: f64) -> f64 {
        self.q(&self.acc, acc)
    }
}

/// Applies a [`QuantConfig`] to a pass and counts saturation events.
#[derive(Debug)]
pub struct Quantizer<'a> {
    cfg: &'a QuantConfig,
    saturations: Cell<u64>,
}

impl<'a> Quantizer<'a> {
    pub fn new(cfg: &'a QuantConfig) -> Self {
        Self {
            cfg,
            saturations: Cell::new(0),
        }
    }

    pub fn saturations(&self) -> u64 {
        self.saturations.get()
    }

    fn q(&self, fmt: &FixedPointFormat, x: f64) -> f64 {
        let (v, sat) = fmt.quantize_checked(x);
        if sat {
            self.saturations.set(self.saturations.get() + 1);
        }
        v
    }
}

impl Numerics for Quantizer<'_> {
    type Arith<'b>
        = QArith<'b>
    where
        Self: 'b;

    fn forward_arith(&self) -> QArith<'_> {
        QArith {
            mult: self.cfg.multiplier,
            acc: self.cfg.accumulator,
            mode: self.cfg.mode,
            saturations: &self.saturations,
        }
    }

    fn backward_arith(&self) -> QArith<'_> {
        QArith {
            mult: self.cfg.grad_multiplier,
            acc: self.cfg.grad_accumulator,
            mode: self.cfg.mode,
            saturations: &self.saturations,
        }
    }

    fn activation(&self, layer: usize, x: f64) -> f64 {
        self.q(&self.cfg.activations[layer], x)
    }

    fn weight(&self, layer: usize, w: f64) -> f64 {
        self.q(&self.cfg.weights[layer], w)
    }

    fn gradient(&self, g: f64) -> f64 {
        self.q(&self.cfg.gradient, g)
    }
}

pub fn quantized_forward(cnn: &Cnn, y: &[f64], cfg: &QuantConfig) -> Result<(Vec<f64>, ForwardCache)> {
    cfg.validate(cnn.layers().len())?;
    cnn.forward_with(y, &Quantizer::new(cfg))
}

pub fn quantized_backward(cnn: &Cnn, cache: &ForwardCache, dz: &[f64], cfg: &QuantConfig) -> Result<GradientSet> {
    cfg.validate(cnn.layers().len())?;
    cnn.backward_with(cache, dz, &Quantizer::new(cfg))
}

/// A network evaluated through fixed-point arithmetic.
#[derive(Debug, Clone)]
pub struct QuantizedCnn<'a> {
    pub cnn: &'a Cnn,
    pub cfg: &'a QuantConfig,
}

impl Equalizer for QuantizedCnn<'_> {
    fn equalize(&self, y: &[f64]) -> Result<Vec<f64>> {
        Ok(quantized_forward(self.cnn, y, self.cfg)?.0)
    }
}

/// Largest magnitude observed per value class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeProfile {
    pub weights: Vec<f64>,
    pub activations: Vec<f64>,
    pub multiplier: f64,
    pub accumulator: f64,
    pub grad_multiplier: f64,
    pub grad_accumulator: f64,
    pub gradient: f64,
}

#[derive(Debug, Default)]
struct MaxCell(Cell<f64>);

impl MaxCell {
    #[inline]
    fn see(&self, v: f64) {
        if v.abs() > self.0.get() {
            self.0.set(v.abs());
        }
    }
}

#[derive(Debug, Default)]
struct ArithStats {
    mult: MaxCell,
    acc: MaxCell,
}

#[derive(Debug, Clone, Copy)]
struct RecArith<'a>(&'a ArithStats);

impl Arith for RecArith<'_> {
    #[inline]
    fn mul(&self, a: f64, b: f64) -> f64 {
        let p = a * b;
        self.0.mult.see(p);
        p
    }

    #[inline]
    fn add(&self, acc: f64, x: f64) -> f64 {
        let s = acc + x;
        self.0.acc.see(s);
        s
    }
}

struct Profiler {
    activations: RefCell<Vec<f64>>,
    weights: RefCell<Vec<f64>>,
    gradient: MaxCell,
    fwd: ArithStats,
    bwd: ArithStats,
}

impl Numerics for Profiler {
    type Arith<'a> = RecArith<'a>;

    fn forward_arith(&self) -> RecArith<'_> {
        RecArith(&self.fwd)
    }

    fn backward_arith(&self) -> RecArith<'_> {
        RecArith(&self.bwd)
    }

    fn activation(&self, layer: usize, x: f64) -> f64 {
        let mut a = self.activations.borrow_mut();
        a[layer] = a[layer].max(x.abs());
        x
    }

    fn weight(&self, layer: usize, w: f64) -> f64 {
        let mut a = self.weights.borrow_mut();
        a[layer] = a[layer].max(w.abs());
        w
    }

    fn gradient(&self, g: f64) -> f64 {
        self.gradient.see(g);
        g
    }
}

/// Runs forward and backward passes on `sequences` random sequences of
/// `symbols` symbols and records the largest magnitude of every class.
pub fn profile_ranges(
    cnn: &Cnn,
    channel: &ChannelConfig,
    loss: &LossKind,
    sequences: usize,
    symbols: usize,
    seed: u64,
) -> Result<RangeProfile> {
    if sequences == 0 {
        return Err(Error::config("profiling needs at least one sequence"));
    }
    let layers = cnn.layers().len();
    let p = Profiler {
        activations: RefCell::new(vec![0.0; layers]),
        weights: RefCell::new(vec![0.0; layers]),
        gradient: MaxCell::default(),
        fwd: ArithStats::default(),
        bwd: ArithStats::default(),
    };
    let scheme = channel.scheme();
    for s in 0..sequences as u64 {
        let x = generate_symbols(symbols, &scheme, substream(seed, 2 * s))?;
        let y = apply_channel(&x, channel, substream(seed, 2 * s + 1))?;
        let (z, cache) = cnn.forward_with(&y.samples, &p)?;
        let (_, dz) = loss.evaluate(&z, Some(&scheme.targets(&x)))?;
        cnn.backward_with(&cache, &dz, &p)?;
    }
    Ok(RangeProfile {
        weights: p.weights.into_inner(),
        activations: p.activations.into_inner(),
        multiplier: p.fwd.mult.0.get(),
        accumulator: p.fwd.acc.0.get(),
        grad_multiplier: p.bwd.mult.0.get(),
        grad_accumulator: p.bwd.acc.0.get(),
        gradient: p.gradient.0.get(),
    })
}

/// Continuous widths for the learned classes: per-layer weights first,
/// then per-layer activations.
#[derive(Debug, Clone, PartialEq)]
pub struct BitwidthSearchState {
    pub bits: Vec<f64>,
    pub gamma: f64,
}

impl BitwidthSearchState {
    pub fn new(layers: usize, gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!("trade-off factor {gamma} must be finite and >= 0")));
        }
        Ok(Self {
            bits: vec![MAX_BITS; 2 * layers],
            gamma,
        })
    }

    pub fn avg_bits(&self) -> f64 {
        avg_bits(&self.bits)
    }

    /// Widths rounded to the nearest integer.
    pub fn rounded(&self) -> Vec<u32> {
        self.bits.iter().map(|b| b.round() as u32).collect()
    }

    pub fn weight_bits(&self) -> &[f64] {
        &self.bits[..self.bits.len() / 2]
    }

    pub fn activation_bits(&self) -> &[f64] {
        &self.bits[self.bits.len() / 2..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub iterations: usize,
    /// Weight learning rate.
    pub lr: f64,
    /// Bit-width learning rate.
    pub lr_bits: f64,
    /// Largest change of any bit-width in one step.
    pub max_bit_step: f64,
    pub sequence_symbols: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 0.02,
            lr_bits: 20.0,
            max_bit_step: 0.05,
            sequence_symbols: 1024,
            clip_norm: crate::cnn::DEFAULT_CLIP_NORM,
            seed: 0,
        }
    }
}

/// One step of the soft-quantized forward and backward pass. Returns the
/// task loss, the weight gradients and the task-loss gradient of every
/// bit-width.
fn soft_step(
    cnn: &Cnn,
    state: &BitwidthSearchState,
    int_bits: &[i32],
    y: &[f64],
    targets: &[f64],
) -> Result<(f64, Vec<Vec<f64>>, Vec<f64>)> {
    let layers = cnn.layers();
    let n = layers.len();
    let mut bit_grad = vec![0.0; 2 * n];
    let mut inputs = Vec::with_capacity(n);
    let mut act_sq: Vec<Vec<SoftQuant>> = Vec::with_capacity(n);
    let mut w_sq: Vec<Vec<SoftQuant>> = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut x = FeatureMap::from_signal(y);
    for (l, layer) in layers.iter().enumerate() {
        let aq: Vec<SoftQuant> = x
            .as_slice()
            .iter()
            .map(|&v| soft_quantize(v, state.bits[n + l], int_bits[n + l]))
            .collect();
        let xq = FeatureMap::from_vec(x.channels(), x.len(), aq.iter().map(|s| s.value).collect())?;
        let wq: Vec<SoftQuant> = layer
            .weights
            .iter()
            .map(|&w| soft_quantize(w, state.bits[l], int_bits[l]))
            .collect();
        let wv: Vec<f64> = wq.iter().map(|s| s.value).collect();
        let pre = conv::conv1d_pre_activation(&Exact, &xq, &layer.spec, &wv)?;
        inputs.push(xq);
        act_sq.push(aq);
        w_sq.push(wq);
        if layer.spec.relu {
            masks.push(Some(pre.as_slice().iter().map(|&v| v > 0.0).collect::<Vec<bool>>()));
            x = conv::relu(&pre);
        } else {
            masks.push(None);
            x = pre;
        }
    }
    let z = x.into_vec();
    let (loss, dz) = crate::loss::mse_loss(&z, targets)?;

    let mut kernels = vec![Vec::new(); n];
    let mut g = FeatureMap::from_signal(&dz);
    for l in (0..n).rev() {
        let spec = &layers[l].spec;
        if let Some(mask) = &masks[l] {
            g = relu_backward(mask, &g)?;
        }
        let kq = conv1d_kernel_grad(&inputs[l], &g, spec)?;
        bit_grad[l] = kq.iter().zip(&w_sq[l]).map(|(k, s)| k * s.d_b).sum();
        kernels[l] = kq.iter().zip(&w_sq[l]).map(|(k, s)| k * s.d_x).collect();
        let wv: Vec<f64> = w_sq[l].iter().map(|s| s.value).collect();
        let gi = conv1d_input_grad(&g, spec, &wv, inputs[l].len())?;
        bit_grad[n + l] = gi.as_slice().iter().zip(&act_sq[l]).map(|(g, s)| g * s.d_b).sum();
        g = FeatureMap::from_vec(
            gi.channels(),
            gi.len(),
            gi.as_slice().iter().zip(&act_sq[l]).map(|(g, s)| g * s.d_x).collect(),
        )?;
    }
    Ok((loss, kernels, bit_grad))
}

/// Trains weights and bit-widths jointly on MSE + γ·mean(b), starting from
/// `cnn`'s weights and `state`'s widths. Returns the total-loss trace.
pub fn bitwidth_search(
    cnn: &mut Cnn,
    state: &mut BitwidthSearchState,
    int_bits: &[i32],
    channel: &ChannelConfig,
    opts: &SearchOptions,
) -> Result<Vec<f64>> {
    let n = cnn.layers().len();
    if int_bits.len() != 2 * n || state.bits.len() != 2 * n {
        return Err(Error::shape("bit-width state does not match the network"));
    }
    if opts.iterations == 0 {
        return Err(Error::config("bit-width search needs at least one iteration"));
    }
    let scheme = channel.scheme();
    let mut trace = Vec::with_capacity(opts.iterations);
    for t in 0..opts.iterations as u64 {
        let x = generate_symbols(opts.sequence_symbols, &scheme, substream(opts.seed, 2 * t))?;
        let y = apply_channel(&x, channel, substream(opts.seed, 2 * t + 1))?;
        let (task, kernels, bit_grad) = soft_step(cnn, state, int_bits, &y.samples, &scheme.targets(&x))?;
        let total = task + state.gamma * state.avg_bits();
        if !total.is_finite() {
            return Err(Error::Diverged {
                iteration: t as usize,
                loss: total,
            });
        }
        trace.push(total);
        let mut grads = GradientSet {
            kernels,
            inputs: vec![None; n],
        };
        grads.clip_norm(opts.clip_norm);
        cnn.sgd_step(&grads, opts.lr)?;
        let reg = state.gamma / state.bits.len() as f64;
        for (b, g) in state.bits.iter_mut().zip(&bit_grad) {
            let step = (opts.lr_bits * (g + reg)).clamp(-opts.max_bit_step, opts.max_bit_step);
            *b = (*b - step).clamp(MIN_BITS, MAX_BITS);
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoPoint {
    pub gamma: f64,
    pub bits: Vec<u32>,
    pub avg_bits: f64,
    /// BER with the rounded fixed-point formats.
    pub ber: BerEstimate,
    /// BER of the same weights in floating point.
    pub float_ber: BerEstimate,
    pub pareto: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepOptions {
    pub search: SearchOptions,
    pub eval_symbols: usize,
    pub profile_sequences: usize,
    pub widths: ArithWidths,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            search: SearchOptions::default(),
            eval_symbols: 1 << 14,
            profile_sequences: 8,
            widths: ArithWidths::default(),
        }
    }
}

/// Integer bits of the learned classes, profiled on the float model.
pub fn learned_class_int_bits(profile: &RangeProfile) -> Vec<i32> {
    profile
        .weights
        .iter()
        .chain(&profile.activations)
        .map(|&m| integer_bits_for(m))
        .collect()
}

/// One sweep point: search at `gamma`, round, evaluate. `pareto` is left
/// false; see [`mark_pareto`].
pub fn sweep_point(
    base: &Cnn,
    channel: &ChannelConfig,
    profile: &RangeProfile,
    gamma: f64,
    opts: &SweepOptions,
    seed: u64,
) -> Result<ParetoPoint> {
    let n = base.layers().len();
    let int_bits = learned_class_int_bits(profile);
    let mut cnn = base.clone();
    let mut state = BitwidthSearchState::new(n, gamma)?;
    let search = SearchOptions {
        seed: substream(seed, 0x5EA),
        ..opts.search
    };
    bitwidth_search(&mut cnn, &mut state, &int_bits, channel, &search)?;
    let bits = state.rounded();
    let cfg = QuantConfig::from_profile(profile, &bits[..n], &bits[n..], &opts.widths)?;
    let eval_seed = substream(seed, 0xE7A);
    let ber = evaluate_ber(&QuantizedCnn { cnn: &cnn, cfg: &cfg }, channel, opts.eval_symbols, eval_seed)?;
    let float_ber = evaluate_ber(&cnn, channel, opts.eval_symbols, eval_seed)?;
    Ok(ParetoPoint {
        gamma,
        avg_bits: cfg.avg_bits(),
        bits,
        ber,
        float_ber,
        pareto: false,
    })
}

/// Flags the points not dominated in (avg_bits, ber): no other point is at
/// least as good in both and strictly better in one.
pub fn pareto_flags(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(b, e)| {
            !points
                .iter()
                .any(|&(b2, e2)| b2 <= b && e2 <= e && (b2 < b || e2 < e))
        })
        .collect()
}

pub fn mark_pareto(points: &mut [ParetoPoint]) {
    let coords: Vec<(f64, f64)> = points.iter().map(|p| (p.avg_bits, p.ber.ber())).collect();
    for (p, flag) in points.iter_mut().zip(pareto_flags(&coords)) {
        p.pareto = flag;
    }
}

/// Outcome of a sweep: finished points plus the γ values that failed.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<ParetoPoint>,
    pub skipped: Vec<(f64, String)>,
}

/// Profiles `base` once, then runs [`sweep_point`] for every γ in order.
pub fn bitwidth_pareto_sweep(
    base: &Cnn,
    channel: &ChannelConfig,
    gammas: &[f64],
    opts: &SweepOptions,
    seed: u64,
) -> Result<SweepResult> {
    if gammas.is_empty() {
        return Err(Error::config("the sweep needs at least one trade-off factor"));
    }
    let scheme = channel.scheme();
    let profile = profile_ranges(
        base,
        channel,
        &LossKind::mse(scheme.alphabet()),
        opts.profile_sequences,
        opts.search.sequence_symbols,
        substream(seed, 0x9F),
    )?;
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (i, &g) in gammas.iter().enumerate() {
        match sweep_point(base, channel, &profile, g, opts, substream(seed, i as u64)) {
            Ok(p) => points.push(p),
            Err(e @ Error::Diverged { .. }) => skipped.push((g, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    mark_pareto(&mut points);
    Ok(SweepResult { points, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fmt(total: u32, frac: i32) -> FixedPointFormat {
        FixedPointFormat::new(total, frac, true).unwrap()
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(0.3, &fmt(8, 2)), 0.25);
        let f = fmt(4, 2);
        assert_eq!(f.min_value(), -2.0);
        assert_eq!(f.max_value(), 1.75);
        assert_eq!(quantize(10.0, &f), 1.75);
        assert_eq!(quantize(-10.0, &f), -2.0);
        assert_eq!(quantize(0.125, &fmt(8, 2)), 0.25);
        assert_eq!(quantize(-0.125, &fmt(8, 2)), -0.25);
        let u = FixedPointFormat::new(4, 2, false).unwrap();
        assert_eq!(quantize(-1.0, &u), 0.0);
        assert_eq!(quantize(9.0, &u), 3.75);
    }

    #[test]
    fn format_invariants() {
        assert!(FixedPointFormat::new(0, 0, true).is_err());
        assert!(FixedPointFormat::new(33, 0, true).is_err());
        assert!(FixedPointFormat::new(8, 8, true).is_err());
        assert!(FixedPointFormat::new(8, 8, false).is_ok());
        assert!(FixedPointFormat::new(8, -3, true).is_ok());
    }

    #[test]
    fn integer_bit_examples() {
        assert_eq!(integer_bits_for(3.2), 3);
        assert_eq!(integer_bits_for(1.0), 2);
        assert_eq!(integer_bits_for(0.0), 1);
        assert_eq!(integer_bits_for(0.3), 1);
        assert_eq!(integer_bits_for(4.0), 4);
    }

    #[test]
    fn soft_quantize_examples() {
        for x in [0.37, -1.2, 0.0, 5.0] {
            let s = soft_quantize(x, 6.0, 2);
            assert_eq!(s.value, signed_grid(6, 2).quantize(x));
        }
        let x = 0.3;
        let mid = soft_quantize(x, 4.5, 2);
        let a = signed_grid(4, 2).quantize(x);
        let b = signed_grid(5, 2).quantize(x);
        assert!((mid.value - (a + b) / 2.0).abs() < 1e-15);
        assert_eq!(mid.d_b, b - a);
        assert_eq!(soft_quantize(100.0, 5.3, 2).d_x, 0.0);
        assert_eq!(soft_quantize(0.1, 5.3, 2).d_x, 1.0);
    }

    #[test]
    fn soft_quantize_bit_gradient_matches_finite_differences() {
        for &(x, b) in &[(0.3, 4.5), (-0.77, 7.25), (1.3, 10.6), (0.01, 3.3)] {
            let h = 1e-6;
            let fd = (soft_quantize(x, b + h, 2).value - soft_quantize(x, b - h, 2).value) / (2.0 * h);
            let an = soft_quantize(x, b, 2).d_b;
            let scale = an.abs().max(1e-12);
            assert!(((fd - an) / scale).abs() < 1e-6, "x={x} b={b}: {fd} vs {an}");
        }
    }

    #[test]
    fn config_validation_and_average() {
        let mut cfg = QuantConfig::uniform(3, fmt(8, 4));
        assert_eq!(cfg.avg_bits(), 8.0);
        cfg.weights = vec![fmt(8, 4), fmt(12, 4), fmt(10, 4)];
        cfg.activations = vec![fmt(8, 4), fmt(12, 4), fmt(10, 4)];
        assert_eq!(cfg.avg_bits(), 10.0);
        cfg.accumulator = fmt(6, 2);
        assert!(cfg.validate(3).is_err());
        assert!(QuantConfig::uniform(2, fmt(8, 4)).validate(3).is_err());
        assert_eq!(avg_bits(&[8.0, 12.0]), 10.0);
    }

    #[test]
    fn config_toml_round_trip() {
        let mut cfg = QuantConfig::uniform(3, fmt(16, 10));
        cfg.mode = AccumulateMode::Fast;
        let text = cfg.to_toml().unwrap();
        assert_eq!(QuantConfig::from_toml(&text).unwrap(), cfg);
        assert!(QuantConfig::from_toml("bogus = 1").is_err());
    }

    fn random_input(seed: u64, n: usize) -> Vec<f64> {
        use rand::Rng;
        let mut r = crate::rng::seeded(seed);
        (0..n).map(|_| r.random_range(-1.5..1.5)).collect()
    }

    #[test]
    fn wide_formats_track_float_forward() {
        let cnn = Cnn::default_topology(2);
        let y = random_input(1, 256);
        let cfg = QuantConfig::uniform(3, fmt(32, 20));
        let (zq, _) = quantized_forward(&cnn, &y, &cfg).unwrap();
        let z = cnn.infer(&y).unwrap();
        for (a, b) in zq.iter().zip(&z) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn one_fractional_bit_lands_on_half_grid() {
        let cnn = Cnn::default_topology(2);
        let y = random_input(4, 64);
        let cfg = QuantConfig::uniform(3, fmt(16, 1));
        let (z, _) = quantized_forward(&cnn, &y, &cfg).unwrap();
        assert!(z.iter().all(|v| (v * 2.0).fract() == 0.0));
    }

    #[test]
    fn fast_mode_rounds_less_often() {
        let cnn = Cnn::default_topology(5);
        let y = random_input(6, 128);
        let mut cfg = QuantConfig::uniform(3, fmt(20, 12));
        cfg.accumulator = fmt(20, 6);
        let (faithful, _) = quantized_forward(&cnn, &y, &cfg).unwrap();
        cfg.mode = AccumulateMode::Fast;
        let (fast, _) = quantized_forward(&cnn, &y, &cfg).unwrap();
        let z = cnn.infer(&y).unwrap();
        let err = |a: &[f64]| a.iter().zip(&z).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(err(&fast) <= err(&faithful));
        assert_ne!(fast, faithful);
    }

    #[test]
    fn quantized_backward_matches_float_with_wide_formats() {
        let cnn = Cnn::default_topology(3);
        let y = random_input(2, 128);
        let cfg = QuantConfig::uniform(3, fmt(32, 24));
        let (z, cache) = quantized_forward(&cnn, &y, &cfg).unwrap();
        let dz: Vec<f64> = z.iter().map(|v| v * 0.1).collect();
        let gq = quantized_backward(&cnn, &cache, &dz, &cfg).unwrap();
        let (_, fcache) = cnn.forward(&y).unwrap();
        let gf = cnn.backward(&fcache, &dz).unwrap();
        for (a, b) in gq.flat().iter().zip(gf.flat()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn profiling_covers_the_profiling_set() {
        let cnn = Cnn::default_topology(7);
        let ch = ChannelConfig::pam2_default();
        let loss = LossKind::mse(ch.scheme().alphabet());
        let profile = profile_ranges(&cnn, &ch, &loss, 3, 256, 11).unwrap();
        assert!(profile.accumulator >= profile.multiplier);
        assert!(profile.activations.iter().all(|&a| a > 0.0));
        let cfg = QuantConfig::from_profile(&profile, &[32; 3], &[32; 3], &ArithWidths::default()).unwrap();
        let scheme = ch.scheme();
        for s in 0..3u64 {
            let x = generate_symbols(256, &scheme, substream(11, 2 * s)).unwrap();
            let y = apply_channel(&x, &ch, substream(11, 2 * s + 1)).unwrap();
            let q = Quantizer::new(&cfg);
            cnn.forward_with(&y.samples, &q).unwrap();
            assert_eq!(q.saturations(), 0);
        }
        assert!(profile_ranges(&cnn, &ch, &loss, 0, 256, 1).is_err());
    }

    #[test]
    fn pareto_flags_match_brute_force_examples() {
        let pts = [(10.0, 1e-3), (8.0, 2e-3), (12.0, 1e-3), (8.0, 5e-3), (6.0, 1e-2)];
        assert_eq!(pareto_flags(&pts), vec![true, true, false, false, true]);
        assert_eq!(pareto_flags(&[(4.0, 0.1), (4.0, 0.1)]), vec![true, true]);
    }

    #[test]
    fn zero_gamma_keeps_widths_at_the_top() {
        let mut cnn = Cnn::default_topology(1);
        let ch = ChannelConfig::pam2_default();
        let loss = LossKind::mse(ch.scheme().alphabet());
        let profile = profile_ranges(&cnn, &ch, &loss, 2, 256, 1).unwrap();
        let mut state = BitwidthSearchState::new(3, 0.0).unwrap();
        let opts = SearchOptions {
            iterations: 20,
            sequence_symbols: 256,
            ..Default::default()
        };
        bitwidth_search(&mut cnn, &mut state, &learned_class_int_bits(&profile), &ch, &opts).unwrap();
        assert!(state.avg_bits() > MAX_BITS - 0.5, "{:?}", state.bits);
        assert!(BitwidthSearchState::new(3, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn quantize_is_idempotent_monotone_and_close(
            x in -50.0f64..50.0, dx in 0.0f64..5.0, total in 2u32..=24, frac in -2i32..=10,
        ) {
            prop_assume!(frac <= total as i32 - 1);
            let f = fmt(total, frac);
            let q = f.quantize(x);
            prop_assert_eq!(f.quantize(q), q);
            prop_assert!(f.quantize(x + dx) >= q);
            if x >= f.min_value() && x <= f.max_value() {
                prop_assert!((q - x).abs() <= f.step() / 2.0 + 1e-12);
            }
        }

        #[test]
        fn soft_quantize_at_integer_bits_is_exact(x in -8.0f64..8.0, b in 2u32..=16, int_bits in 1i32..=4) {
            let s = soft_quantize(x, b as f64, int_bits);
            prop_assert_eq!(s.value, signed_grid(b, int_bits).quantize(x));
        }

        #[test]
        fn pareto_flags_agree_with_dominance(pts in proptest::collection::vec((2.0f64..16.0, 0.0f64..0.5), 1..12)) {
            let flags = pareto_flags(&pts);
            for (i, &(b, e)) in pts.iter().enumerate() {
                let dominated = pts.iter().enumerate().any(|(j, &(b2, e2))| {
                    j != i && b2 <= b && e2 <= e && (b2 < b || e2 < e)
                });
                prop_assert_eq!(flags[i], !dominated);
            }
            prop_assert!(flags.iter().any(|&f| f));
        }
    }
}
