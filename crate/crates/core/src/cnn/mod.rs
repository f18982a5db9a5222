//! Three-layer 1D-CNN equalizer with a hand-written backward pass.
//!
//! The default network maps two samples per symbol to one output per
//! symbol:
//!
//! | layer | channels | K  | P  | S | activation |
//! |-------|----------|----|----|---|------------|
//! | 1     | 1 → 3    | 21 | 10 | 1 | ReLU       |
//! | 2     | 3 → 3    | 21 | 10 | 1 | ReLU       |
//! | 3     | 3 → 1    | 21 | 10 | 2 | none       |
//!
//! There are no bias terms, so the model has 63 + 189 + 63 = 315 weights.
//! The backward pass never computes the input gradient of the first layer.

pub mod conv;
mod train;

pub use conv::{
    conv1d_forward, conv1d_input_grad, conv1d_input_grad_with, conv1d_kernel_grad, conv1d_kernel_grad_with,
    relu_backward, Arith, ConvLayerSpec, Exact, FeatureMap,
};
pub use train::{train, TrainOptions, TrainReport, DEFAULT_CLIP_NORM};

use crate::rng;
use crate::{Error, Result};
use rand::Rng;
use std::sync::atomic::{AtomicU64, Ordering};

/// Weight layout `[out_channels × in_channels × kernel_size]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub spec: ConvLayerSpec,
    pub weights: Vec<f64>,
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
pub struct Cnn {
    layers: Vec<ConvLayer>,
    /// Changes on every weight update; caches record it.
    revision: u64,
}

impl Clone for Cnn {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            revision: fresh_id(),
        }
    }
}

impl PartialEq for Cnn {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Arithmetic and value conditioning used by [`Cnn::forward_with`] and
/// [`Cnn::backward_with`]. The defaults leave every value untouched.
pub trait Numerics {
    type Arith<'a>: Arith
    where
        Self: 'a;

    fn forward_arith(&self) -> Self::Arith<'_>;
    fn backward_arith(&self) -> Self::Arith<'_>;

    /// Applied to each element of the input of layer `layer`.
    fn activation(&self, _layer: usize, x: f64) -> f64 {
        x
    }

    /// Applied to each weight of layer `layer` when it is read.
    fn weight(&self, _layer: usize, w: f64) -> f64 {
        w
    }

    /// Applied to every gradient tensor element.
    fn gradient(&self, g: f64) -> f64 {
        g
    }
}

impl Numerics for Exact {
    type Arith<'a> = Exact;

    fn forward_arith(&self) -> Exact {
        Exact
    }

    fn backward_arith(&self) -> Exact {
        Exact
    }
}

/// Per-layer inputs and ReLU masks retained by the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub inputs: Vec<FeatureMap>,
    pub masks: Vec<Option<Vec<bool>>>,
    pub output_len: usize,
    revision: u64,
}

/// Kernel gradients per layer, plus the input gradients that were computed
/// on the way (none for the first layer).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub kernels: Vec<Vec<f64>>,
    pub inputs: Vec<Option<FeatureMap>>,
}

impl GradientSet {
    pub fn flat(&self) -> Vec<f64> {
        self.kernels.iter().flatten().copied().collect()
    }

    /// Euclidean norm over all kernel gradients.
    pub fn norm(&self) -> f64 {
        self.kernels.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales the kernel gradients so their joint norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            self.kernels.iter_mut().flatten().for_each(|g| *g *= scale);
        }
        norm
    }
}

impl Cnn {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for (l, layer) in layers.iter().enumerate() {
            layer.spec.validate()?;
            if layer.weights.len() != layer.spec.weight_count() {
                return Err(Error::shape(format!("layer {l} has {} weights", layer.weights.len())));
            }
            if l > 0 && layers[l - 1].spec.out_channels != layer.spec.in_channels {
                return Err(Error::shape(format!("layer {l} input channels do not chain")));
            }
        }
        if layers[0].spec.in_channels != 1 || layers.last().unwrap().spec.out_channels != 1 {
            return Err(Error::shape("network must map one channel to one channel"));
        }
        let total_stride: usize = layers.iter().map(|l| l.spec.stride).product();
        if total_stride != crate::channel::SAMPLES_PER_SYMBOL {
            return Err(Error::config(format!(
                "strides multiply to {total_stride}, need one output per symbol"
            )));
        }
        Ok(Self {
            layers,
            revision: fresh_id(),
        })
    }

    pub fn default_specs() -> Vec<ConvLayerSpec> {
        vec![
            ConvLayerSpec::same(1, 3, 21, 1, true),
            ConvLayerSpec::same(3, 3, 21, 1, true),
            ConvLayerSpec::same(3, 1, 21, 2, false),
        ]
    }

    /// Fan-in uniform initialization in ±1/√(C_in·K).
    pub fn with_specs(specs: &[ConvLayerSpec], seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let layers = specs
            .iter()
            .map(|&spec| {
                let bound = 1.0 / ((spec.in_channels * spec.kernel_size) as f64).sqrt();
                let weights = (0..spec.weight_count()).map(|_| r.random_range(-bound..=bound)).collect();
                ConvLayer { spec, weights }
            })
            .collect();
        Self::new(layers)
    }

    pub fn default_topology(seed: u64) -> Self {
        Self::with_specs(&Self::default_specs(), seed).expect("default topology is valid")
    }

    pub fn zeros(specs: &[ConvLayerSpec]) -> Result<Self> {
        Self::new(
            specs
                .iter()
                .map(|&spec| ConvLayer {
                    spec,
                    weights: vec![0.0; spec.weight_count()],
                })
                .collect(),
        )
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().copied()).collect()
    }

    /// Overwrites every weight from a flat vector in layer order.
    pub fn set_flat_weights(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::LengthMismatch {
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let n = layer.weights.len();
            layer.weights.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        self.revision = fresh_id();
        Ok(())
    }

    fn check_input(y: &[f64]) -> Result<()> {
        if y.is_empty() {
            return Err(Error::EmptySequence);
        }
        if y.len() % 2 != 0 {
            return Err(Error::shape(format!("input length {} is odd", y.len())));
        }
        Ok(())
    }

    /// One output per symbol, plus everything `backward` needs.
    pub fn forward(&self, y: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.forward_with(y, &Exact)
    }

    fn read_weights<N: Numerics>(&self, num: &N, l: usize) -> Vec<f64> {
        self.layers[l].weights.iter().map(|&w| num.weight(l, w)).collect()
    }

    /// Forward pass under custom numerics. The cache keeps the conditioned
    /// layer inputs.
    pub fn forward_with<N: Numerics>(&self, y: &[f64], num: &N) -> Result<(Vec<f64>, ForwardCache)> {
        Self::check_input(y)?;
        let arith = num.forward_arith();
        let mut x = FeatureMap::from_signal(y);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            x = x.map(|v| num.activation(l, v));
            let w = self.read_weights(num, l);
            let pre = conv::conv1d_pre_activation(&arith, &x, &layer.spec, &w)?;
            inputs.push(x);
            if layer.spec.relu {
                masks.push(Some(pre.as_slice().iter().map(|&v| v > 0.0).collect()));
                x = conv::relu(&pre);
            } else {
                masks.push(None);
                x = pre;
            }
        }
        let z = x.into_vec();
        let cache = ForwardCache {
            inputs,
            masks,
            output_len: z.len(),
            revision: self.revision,
        };
        Ok((z, cache))
    }

    /// Forward pass without retaining the cache.
    pub fn infer(&self, y: &[f64]) -> Result<Vec<f64>> {
        Self::check_input(y)?;
        let mut x = FeatureMap::from_signal(y);
        for layer in &self.layers {
            x = conv1d_forward(&x, &layer.spec, &layer.weights)?;
        }
        Ok(x.into_vec())
    }

    pub fn backward(&self, cache: &ForwardCache, dz: &[f64]) -> Result<GradientSet> {
        self.backward_with(cache, dz, &Exact)
    }

    /// Backward pass under custom numerics; `num.gradient` conditions the
    /// incoming output gradient and every gradient tensor produced.
    pub fn backward_with<N: Numerics>(&self, cache: &ForwardCache, dz: &[f64], num: &N) -> Result<GradientSet> {
        if cache.revision != self.revision || cache.inputs.len() != self.layers.len() {
            return Err(Error::shape("forward cache belongs to a different set of weights"));
        }
        if dz.len() != cache.output_len {
            return Err(Error::LengthMismatch {
                expected: cache.output_len,
                actual: dz.len(),
            });
        }
        let arith = num.backward_arith();
        let n = self.layers.len();
        let mut kernels = vec![Vec::new(); n];
        let mut input_grads = vec![None; n];
        let mut g = FeatureMap::from_signal(dz).map(|v| num.gradient(v));
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            if let Some(mask) = &cache.masks[l] {
                g = relu_backward(mask, &g)?;
            }
            let input = &cache.inputs[l];
            let mut k = conv1d_kernel_grad_with(&arith, input, &g, &layer.spec)?;
            k.iter_mut().for_each(|v| *v = num.gradient(*v));
            kernels[l] = k;
            if l > 0 {
                let w = self.read_weights(num, l);
                let gi = conv1d_input_grad_with(&arith, &g, &layer.spec, &w, input.len())?.map(|v| num.gradient(v));
                input_grads[l] = Some(gi.clone());
                g = gi;
            }
        }
        Ok(GradientSet {
            kernels,
            inputs: input_grads,
        })
    }

    /// Plain SGD: k ← k − lr·∇k.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if grads.kernels.len() != self.layers.len() {
            return Err(Error::shape("gradient set has the wrong number of layers"));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.kernels) {
            if g.len() != layer.weights.len() {
                return Err(Error::shape("kernel gradient shape mismatch"));
            }
            for (w, d) in layer.weights.iter_mut().zip(g) {
                *w -= lr * d;
            }
        }
        self.revision = fresh_id();
        Ok(())
    }
}

impl crate::eval::Equalizer for Cnn {
    fn equalize(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.infer(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn random_signal(seed: u64, n: usize) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn default_has_315_parameters() {
        let cnn = Cnn::default_topology(1);
        assert_eq!(cnn.param_count(), 315);
        let per_layer: Vec<usize> = cnn.layers().iter().map(|l| l.weights.len()).collect();
        assert_eq!(per_layer, vec![63, 189, 63]);
    }

    #[test]
    fn output_has_one_sample_per_symbol() {
        let cnn = Cnn::default_topology(2);
        let (z, cache) = cnn.forward(&random_signal(1, 64)).unwrap();
        assert_eq!(z.len(), 32);
        assert_eq!(cache.inputs.len(), 3);
        assert!(cnn.forward(&random_signal(1, 63)).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let cnn = Cnn::zeros(&Cnn::default_specs()).unwrap();
        let z = cnn.infer(&random_signal(3, 40)).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_equals_layer_by_layer() {
        let cnn = Cnn::default_topology(4);
        let y = random_signal(5, 80);
        let mut x = FeatureMap::from_signal(&y);
        for layer in cnn.layers() {
            x = conv1d_forward(&x, &layer.spec, &layer.weights).unwrap();
        }
        let (z, _) = cnn.forward(&y).unwrap();
        assert_eq!(z, x.into_vec());
        assert_eq!(cnn.infer(&y).unwrap(), z);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let cnn = Cnn::default_topology(6);
        let (z, cache) = cnn.forward(&random_signal(7, 64)).unwrap();
        let grads = cnn.backward(&cache, &vec![0.0; z.len()]).unwrap();
        assert!(grads.flat().iter().all(|&g| g == 0.0));
        assert!(grads.inputs[0].is_none());
    }

    #[test]
    fn first_layer_gradient_is_nonzero() {
        let cnn = Cnn::default_topology(8);
        let (z, cache) = cnn.forward(&random_signal(9, 64)).unwrap();
        let grads = cnn.backward(&cache, &z).unwrap();
        assert!(grads.kernels[0].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut cnn = Cnn::default_topology(10);
        let (z, cache) = cnn.forward(&random_signal(11, 64)).unwrap();
        let grads = cnn.backward(&cache, &z).unwrap();
        cnn.sgd_step(&grads, 0.01).unwrap();
        assert!(cnn.backward(&cache, &z).is_err());
        let (z2, cache2) = cnn.forward(&random_signal(11, 64)).unwrap();
        assert!(cnn.backward(&cache2, &z2[..10]).is_err());
    }

    #[test]
    fn end_to_end_gradient_matches_fd() {
        // ½‖z − t‖² so that dz = z − t.
        let cnn = Cnn::default_topology(12);
        let y = random_signal(13, 64);
        let t = random_signal(14, 32);
        let loss = |c: &Cnn| -> f64 {
            c.infer(&y).unwrap().iter().zip(&t).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
        };
        let (z, cache) = cnn.forward(&y).unwrap();
        let dz: Vec<f64> = z.iter().zip(&t).map(|(a, b)| a - b).collect();
        let analytic = cnn.backward(&cache, &dz).unwrap().flat();
        let w0 = cnn.flat_weights();
        let h = 1e-6;
        let mut probe = cnn.clone();
        for p in 0..w0.len() {
            let mut w = w0.clone();
            w[p] += h;
            probe.set_flat_weights(&w).unwrap();
            let up = loss(&probe);
            w[p] -= 2.0 * h;
            probe.set_flat_weights(&w).unwrap();
            let down = loss(&probe);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - analytic[p]).abs() / fd.abs().max(analytic[p].abs()).max(1e-4);
            assert!(err < 1e-5, "param {p}: fd {fd} vs {}", analytic[p]);
        }
    }

    #[test]
    fn sgd_step_examples() {
        let spec = ConvLayerSpec {
            stride: 2,
            ..ConvLayerSpec::same(1, 1, 1, 2, false)
        };
        let mut cnn = Cnn::new(vec![ConvLayer {
            spec,
            weights: vec![0.5],
        }])
        .unwrap();
        let grads = GradientSet {
            kernels: vec![vec![2.0]],
            inputs: vec![None],
        };
        let before = cnn.clone();
        cnn.sgd_step(&grads, 0.0).unwrap();
        assert_eq!(cnn, before);
        cnn.sgd_step(&grads, 0.1).unwrap();
        assert_eq!(cnn.layers()[0].weights, vec![0.5 - 0.1 * 2.0]);
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        // A single-tap model fitted to z = 3·y has loss (w − 3)²·m with m the
        // mean of y² over the decision samples, so each step scales (w − 3)
        // by (1 − 2·lr·m).
        let spec = ConvLayerSpec::same(1, 1, 1, 2, false);
        let mut cnn = Cnn::new(vec![ConvLayer {
            spec,
            weights: vec![0.0],
        }])
        .unwrap();
        let y = random_signal(15, 64);
        let target: Vec<f64> = y.iter().step_by(2).map(|v| 3.0 * v).collect();
        let m = y.iter().step_by(2).map(|v| v * v).sum::<f64>() / 32.0;
        let lr = 0.5;
        let mut last = f64::INFINITY;
        for k in 0..10 {
            let (z, cache) = cnn.forward(&y).unwrap();
            let (loss, dz) = crate::loss::mse_loss(&z, &target).unwrap();
            let expected = 9.0 * m * (1.0 - 2.0 * lr * m).powi(2 * k);
            assert!((loss - expected).abs() < 1e-12 * (1.0 + expected), "step {k}");
            assert!(loss < last);
            last = loss;
            let g = cnn.backward(&cache, &dz).unwrap();
            cnn.sgd_step(&g, lr).unwrap();
        }
    }
}
