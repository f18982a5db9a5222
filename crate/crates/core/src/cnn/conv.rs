//! 1D convolution and its two backward convolutions.
//!
//! "Convolution" follows the machine-learning convention and is a
//! cross-correlation:
//!
//! ```text
//! o[c][n] = Σ_ci Σ_j k[c][ci][j] · i[ci][n·S + j·D − P]
//! ```
//!
//! The input gradient is then a genuine convolution of the zero-stuffed
//! output gradient with the flipped, channel-transposed kernel, and the
//! kernel gradient correlates the layer input with the zero-stuffed output
//! gradient over the K valid lags.
//!
//! All three routines are generic over [`Arith`] so the fixed-point
//! emulation runs the same loops with rounding hooks on every multiply and
//! accumulate.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Multiply/accumulate hooks.
pub trait Arith {
    fn mul(&self, a: f64, b: f64) -> f64;
    fn add(&self, acc: f64, x: f64) -> f64;
    /// Applied once to a finished accumulator.
    fn finish(&self, acc: f64) -> f64 {
        acc
    }
}

/// Plain double-precision arithmetic.
#[derive(Debug, Clone, Copy, Default)]
pub struct Exact;

impl Arith for Exact {
    #[inline(always)]
    fn mul(&self, a: f64, b: f64) -> f64 {
        a * b
    }

    #[inline(always)]
    fn add(&self, acc: f64, x: f64) -> f64 {
        acc + x
    }
}

/// Channel-major feature map `[channels × len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    len: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, len: usize) -> Self {
        Self {
            channels,
            len,
            data: vec![0.0; channels * len],
        }
    }

    pub fn from_vec(channels: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * len {
            return Err(Error::shape(format!(
                "{} values for a {channels}×{len} feature map",
                data.len()
            )));
        }
        Ok(Self { channels, len, data })
    }

    /// Single-channel map.
    pub fn from_signal(samples: &[f64]) -> Self {
        Self {
            channels: 1,
            len: samples.len(),
            data: samples.to_vec(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            channels: self.channels,
            len: self.len,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Inserts `stride − 1` zeros between consecutive samples.
    pub fn zero_stuff(&self, stride: usize) -> Self {
        if stride == 1 || self.len == 0 {
            return self.clone();
        }
        let len = (self.len - 1) * stride + 1;
        let mut out = Self::zeros(self.channels, len);
        for c in 0..self.channels {
            let src = self.channel(c);
            let dst = out.channel_mut(c);
            for (n, &v) in src.iter().enumerate() {
                dst[n * stride] = v;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub padding: usize,
    pub stride: usize,
    pub dilation: usize,
    pub relu: bool,
}

impl ConvLayerSpec {
    /// Odd kernel with "same" padding.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize, relu: bool) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            padding: (kernel_size - 1) / 2,
            stride,
            dilation: 1,
            relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.in_channels > 0
            && self.out_channels > 0
            && self.kernel_size % 2 == 1
            && (1..=2).contains(&self.stride)
            && self.dilation >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid layer {self:?}")))
        }
    }

    pub fn weight_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel_size
    }

    /// Receptive extent of one output sample in input samples.
    pub fn span(&self) -> usize {
        self.dilation * (self.kernel_size - 1) + 1
    }

    /// floor((N + 2P − D·(K−1) − 1)/S) + 1, or `None` if the padded input is
    /// shorter than the kernel.
    pub fn output_len(&self, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding;
        (padded >= self.span()).then(|| (padded - self.span()) / self.stride + 1)
    }

    #[inline]
    pub fn weight_index(&self, out_c: usize, in_c: usize, tap: usize) -> usize {
        (out_c * self.in_channels + in_c) * self.kernel_size + tap
    }
}

/// Core correlation loop shared by the forward pass and the input gradient.
///
/// `weights` is `[out × in × taps]`; `pad` may be negative.
#[allow(clippy::too_many_arguments)]
fn correlate<A: Arith>(
    arith: &A,
    input: &FeatureMap,
    weights: &[f64],
    out_channels: usize,
    taps: usize,
    pad: isize,
    stride: usize,
    dilation: usize,
    out_len: usize,
) -> FeatureMap {
    let in_channels = input.channels();
    let n_in = input.len() as isize;
    let mut out = FeatureMap::zeros(out_channels, out_len);
    for c in 0..out_channels {
        let dst = out.channel_mut(c);
        for (n, o) in dst.iter_mut().enumerate() {
            let base = (n * stride) as isize - pad;
            let mut acc = 0.0;
            for ci in 0..in_channels {
                let src = input.channel(ci);
                let w = &weights[(c * in_channels + ci) * taps..(c * in_channels + ci + 1) * taps];
                for (j, &wj) in w.iter().enumerate() {
                    let idx = base + (j * dilation) as isize;
                    if idx >= 0 && idx < n_in {
                        acc = arith.add(acc, arith.mul(wj, src[idx as usize]));
                    }
                }
            }
            *o = arith.finish(acc);
        }
    }
    out
}

fn check_weights(spec: &ConvLayerSpec, weights: &[f64]) -> Result<()> {
    if weights.len() != spec.weight_count() {
        return Err(Error::shape(format!(
            "{} weights for a {}×{}×{} kernel",
            weights.len(),
            spec.out_channels,
            spec.in_channels,
            spec.kernel_size
        )));
    }
    Ok(())
}

/// Pre-activation output `i ⋆ k`.
pub fn conv1d_pre_activation<A: Arith>(
    arith: &A,
    input: &FeatureMap,
    spec: &ConvLayerSpec,
    weights: &[f64],
) -> Result<FeatureMap> {
    check_weights(spec, weights)?;
    if input.channels() != spec.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, layer expects {}",
            input.channels(),
            spec.in_channels
        )));
    }
    let out_len = spec
        .output_len(input.len())
        .ok_or_else(|| Error::shape(format!("input length {} shorter than kernel", input.len())))?;
    Ok(correlate(
        arith,
        input,
        weights,
        spec.out_channels,
        spec.kernel_size,
        spec.padding as isize,
        spec.stride,
        spec.dilation,
        out_len,
    ))
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Forward convolution with optional ReLU.
pub fn conv1d_forward(input: &FeatureMap, spec: &ConvLayerSpec, weights: &[f64]) -> Result<FeatureMap> {
    let pre = conv1d_pre_activation(&Exact, input, spec, weights)?;
    Ok(if spec.relu { relu(&pre) } else { pre })
}

/// `flip(k)` with input and output channel roles swapped: `[in × out × taps]`.
pub fn flip_transpose(spec: &ConvLayerSpec, weights: &[f64]) -> Vec<f64> {
    let k = spec.kernel_size;
    let mut out = vec![0.0; weights.len()];
    for c in 0..spec.out_channels {
        for ci in 0..spec.in_channels {
            for j in 0..k {
                out[(ci * spec.out_channels + c) * k + (k - 1 - j)] = weights[spec.weight_index(c, ci, j)];
            }
        }
    }
    out
}

/// Input gradient: the zero-stuffed output gradient convolved with the
/// flipped kernel. With stride 2 this is a dilated convolution.
pub fn conv1d_input_grad_with<A: Arith>(
    arith: &A,
    grad_out: &FeatureMap,
    spec: &ConvLayerSpec,
    weights: &[f64],
    input_len: usize,
) -> Result<FeatureMap> {
    check_weights(spec, weights)?;
    check_grad_shape(grad_out, spec, input_len)?;
    let stuffed = grad_out.zero_stuff(spec.stride);
    let flipped = flip_transpose(spec, weights);
    let pad = (spec.dilation * (spec.kernel_size - 1)) as isize - spec.padding as isize;
    Ok(correlate(
        arith,
        &stuffed,
        &flipped,
        spec.in_channels,
        spec.kernel_size,
        pad,
        1,
        spec.dilation,
        input_len,
    ))
}

pub fn conv1d_input_grad(
    grad_out: &FeatureMap,
    spec: &ConvLayerSpec,
    weights: &[f64],
    input_len: usize,
) -> Result<FeatureMap> {
    conv1d_input_grad_with(&Exact, grad_out, spec, weights, input_len)
}

/// Kernel gradient `[out × in × taps]`: the layer input correlated with the
/// zero-stuffed output gradient at lags `j·D − P`.
pub fn conv1d_kernel_grad_with<A: Arith>(
    arith: &A,
    input: &FeatureMap,
    grad_out: &FeatureMap,
    spec: &ConvLayerSpec,
) -> Result<Vec<f64>> {
    if input.channels() != spec.in_channels {
        return Err(Error::shape("kernel gradient input channel mismatch"));
    }
    check_grad_shape(grad_out, spec, input.len())?;
    let stuffed = grad_out.zero_stuff(spec.stride);
    let n_in = input.len() as isize;
    let mut grad = vec![0.0; spec.weight_count()];
    for c in 0..spec.out_channels {
        let g = stuffed.channel(c);
        for ci in 0..spec.in_channels {
            let src = input.channel(ci);
            for j in 0..spec.kernel_size {
                let lag = (j * spec.dilation) as isize - spec.padding as isize;
                let mut acc = 0.0;
                for (t, &gt) in g.iter().enumerate() {
                    let idx = t as isize + lag;
                    if idx >= 0 && idx < n_in {
                        acc = arith.add(acc, arith.mul(src[idx as usize], gt));
                    }
                }
                grad[spec.weight_index(c, ci, j)] = arith.finish(acc);
            }
        }
    }
    Ok(grad)
}

pub fn conv1d_kernel_grad(input: &FeatureMap, grad_out: &FeatureMap, spec: &ConvLayerSpec) -> Result<Vec<f64>> {
    conv1d_kernel_grad_with(&Exact, input, grad_out, spec)
}

fn check_grad_shape(grad_out: &FeatureMap, spec: &ConvLayerSpec, input_len: usize) -> Result<()> {
    let expected = spec
        .output_len(input_len)
        .ok_or_else(|| Error::shape(format!("input length {input_len} shorter than kernel")))?;
    if grad_out.channels() != spec.out_channels || grad_out.len() != expected {
        return Err(Error::shape(format!(
            "output gradient is {}×{}, layer output is {}×{expected}",
            grad_out.channels(),
            grad_out.len(),
            spec.out_channels
        )));
    }
    Ok(())
}

/// Passes `g` where the paired pre-activation was positive.
pub fn relu_backward(mask: &[bool], g: &FeatureMap) -> Result<FeatureMap> {
    if mask.len() != g.as_slice().len() {
        return Err(Error::LengthMismatch {
            expected: mask.len(),
            actual: g.as_slice().len(),
        });
    }
    let mut out = g.clone();
    for (v, &m) in out.as_mut_slice().iter_mut().zip(mask) {
        if !m {
            *v = 0.0;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_vec(r: &mut rng::Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    /// Direct triple-loop evaluation with explicit zero padding.
    fn naive_forward(input: &FeatureMap, spec: &ConvLayerSpec, w: &[f64]) -> Vec<f64> {
        let n = input.len();
        let p = spec.padding;
        let mut padded = vec![vec![0.0; n + 2 * p]; spec.in_channels];
        for ci in 0..spec.in_channels {
            padded[ci][p..p + n].copy_from_slice(input.channel(ci));
        }
        let out_len = (n + 2 * p - spec.dilation * (spec.kernel_size - 1) - 1) / spec.stride + 1;
        let mut out = Vec::new();
        for c in 0..spec.out_channels {
            for o in 0..out_len {
                let mut s = 0.0;
                for ci in 0..spec.in_channels {
                    for j in 0..spec.kernel_size {
                        s += w[(c * spec.in_channels + ci) * spec.kernel_size + j]
                            * padded[ci][o * spec.stride + j * spec.dilation];
                    }
                }
                out.push(if spec.relu { s.max(0.0) } else { s });
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let spec = ConvLayerSpec::same(1, 1, 1, 1, false);
        let x = FeatureMap::from_signal(&[1.0, -2.0, 3.5]);
        assert_eq!(conv1d_forward(&x, &spec, &[1.0]).unwrap(), x);
    }

    #[test]
    fn stride_two_output_length() {
        let spec = ConvLayerSpec::same(1, 1, 21, 2, false);
        assert_eq!(spec.output_len(10), Some(5));
        let x = FeatureMap::from_signal(&[0.5; 10]);
        let out = conv1d_forward(&x, &spec, &[0.1; 21]).unwrap();
        assert_eq!(out.len(), 5);
    }

    #[test]
    fn shape_errors() {
        let spec = ConvLayerSpec::same(2, 1, 3, 1, false);
        let x = FeatureMap::from_signal(&[1.0; 8]);
        assert!(conv1d_forward(&x, &spec, &[0.0; 6]).is_err());
        let x2 = FeatureMap::zeros(2, 8);
        assert!(conv1d_forward(&x2, &spec, &[0.0; 5]).is_err());
        let g = FeatureMap::zeros(1, 7);
        assert!(conv1d_input_grad(&g, &spec, &[0.0; 6], 8).is_err());
        assert!(conv1d_kernel_grad(&x2, &g, &spec).is_err());
    }

    #[test]
    fn scalar_kernel_input_grad() {
        let spec = ConvLayerSpec::same(1, 1, 1, 1, false);
        let g = FeatureMap::from_signal(&[1.0, 2.0, -3.0]);
        let gi = conv1d_input_grad(&g, &spec, &[2.5], 3).unwrap();
        assert_eq!(gi.as_slice(), &[2.5, 5.0, -7.5]);
    }

    #[test]
    fn stride_two_input_grad_doubles_length() {
        let spec = ConvLayerSpec::same(3, 1, 21, 2, false);
        let g = FeatureMap::from_signal(&[1.0; 16]);
        let gi = conv1d_input_grad(&g, &spec, &[0.1; 63], 32).unwrap();
        assert_eq!((gi.channels(), gi.len()), (3, 32));
    }

    #[test]
    fn kernel_grad_examples() {
        let spec = ConvLayerSpec::same(1, 1, 1, 1, false);
        let x = FeatureMap::from_signal(&[1.0, 2.0, 3.0]);
        let g = FeatureMap::from_signal(&[0.5, -1.0, 2.0]);
        assert_eq!(conv1d_kernel_grad(&x, &g, &spec).unwrap(), vec![0.5 - 2.0 + 6.0]);
        let spec = ConvLayerSpec::same(2, 3, 5, 2, true);
        let zero = FeatureMap::zeros(2, 12);
        let g = FeatureMap::from_vec(3, 6, vec![1.0; 18]).unwrap();
        assert!(conv1d_kernel_grad(&zero, &g, &spec).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_backward_masks() {
        let g = FeatureMap::from_signal(&[1.0, -2.0, 3.0]);
        assert_eq!(relu_backward(&[true; 3], &g).unwrap(), g);
        assert!(relu_backward(&[false; 3], &g).unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(relu_backward(&[true; 2], &g).is_err());
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut r = rng::seeded(1);
        for _ in 0..300 {
            let spec = ConvLayerSpec {
                in_channels: r.random_range(1..=3),
                out_channels: r.random_range(1..=3),
                kernel_size: [1, 3, 5][r.random_range(0..3)],
                padding: r.random_range(0..=3),
                stride: r.random_range(1..=2),
                dilation: r.random_range(1..=2),
                relu: r.random(),
            };
            let n = r.random_range(spec.span()..=32);
            let x = FeatureMap::from_vec(spec.in_channels, n, random_vec(&mut r, spec.in_channels * n)).unwrap();
            let w = random_vec(&mut r, spec.weight_count());
            let got = conv1d_forward(&x, &spec, &w).unwrap();
            let want = naive_forward(&x, &spec, &w);
            for (a, b) in got.as_slice().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn adjoint_identity(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5, 7]),
                            stride in 1usize..=2, dilation in 1usize..=2, cin in 1usize..=3, cout in 1usize..=3,
                            n in 8usize..=32) {
            let mut r = rng::seeded(seed);
            let spec = ConvLayerSpec { in_channels: cin, out_channels: cout, kernel_size: k,
                padding: (k - 1) / 2 * dilation, stride, dilation, relu: false };
            let x = FeatureMap::from_vec(cin, n, random_vec(&mut r, cin * n)).unwrap();
            let w = random_vec(&mut r, spec.weight_count());
            let y = conv1d_forward(&x, &spec, &w).unwrap();
            let g = FeatureMap::from_vec(cout, y.len(), random_vec(&mut r, cout * y.len())).unwrap();
            let gi = conv1d_input_grad(&g, &spec, &w, n).unwrap();
            prop_assert_eq!((gi.channels(), gi.len()), (cin, n));
            let lhs: f64 = y.as_slice().iter().zip(g.as_slice()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.as_slice().iter().zip(gi.as_slice()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-10, "{} vs {}", lhs, rhs);
            // ⟨conv(i, k), g⟩ is also linear in k with gradient ∇k.
            let gk = conv1d_kernel_grad(&x, &g, &spec).unwrap();
            let rhs_k: f64 = w.iter().zip(&gk).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs_k).abs() < 1e-10);
        }
    }
}
