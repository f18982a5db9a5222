//! Experiment configuration files (TOML).
//!
//! Every block except `channel` has defaults, so a minimal file is just a
//! seed plus a channel. `configs/experiment.toml` in the repository lists
//! every key.

use crate::channel::ChannelConfig;
use crate::cnn::{Cnn, ConvLayerSpec, TrainOptions, DEFAULT_CLIP_NORM};
use crate::loss::{LossKind, DEFAULT_MU};
use crate::pipeline::{default_depth, BufferMode, ConvDims, Dop, LayerHw, PipelineConfig};
use crate::quant::{ArithWidths, SearchOptions, SweepOptions};
use crate::volterra::{VolterraSpec, VolterraTrainOptions, DEFAULT_MEMORY};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub channel: ChannelConfig,
    #[serde(default)]
    pub model: ModelBlock,
    #[serde(default)]
    pub training: TrainingBlock,
    #[serde(default)]
    pub loss: LossBlock,
    #[serde(default)]
    pub volterra: VolterraBlock,
    #[serde(default)]
    pub quant: QuantBlock,
    #[serde(default)]
    pub pipeline: PipelineBlock,
    #[serde(default)]
    pub sweep: SweepBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    pub layers: Vec<ConvLayerSpec>,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            layers: Cnn::default_specs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingBlock {
    /// Iterations of supervised training from scratch.
    pub initial_iterations: usize,
    /// Iterations per retraining step.
    pub retrain_iterations: usize,
    pub lr: f64,
    pub sequence_symbols: usize,
    /// Gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainingBlock {
    fn default() -> Self {
        Self {
            initial_iterations: 6000,
            retrain_iterations: 500,
            lr: 0.02,
            sequence_symbols: 1024,
            clip_norm: DEFAULT_CLIP_NORM,
        }
    }
}

impl TrainingBlock {
    pub fn options(&self, iterations: usize, seed: u64) -> TrainOptions {
        TrainOptions {
            iterations,
            lr: self.lr,
            sequence_symbols: self.sequence_symbols,
            seed,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossBlock {
    pub mu: f64,
    pub normalize: bool,
}

impl Default for LossBlock {
    fn default() -> Self {
        Self {
            mu: DEFAULT_MU,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VolterraBlock {
    pub memory: [usize; 3],
    pub include_bias: bool,
    pub iterations: usize,
    pub lr: f64,
    pub sequence_symbols: usize,
    pub calibration_symbols: usize,
}

impl Default for VolterraBlock {
    fn default() -> Self {
        let o = VolterraTrainOptions::default();
        Self {
            memory: DEFAULT_MEMORY,
            include_bias: true,
            iterations: o.iterations,
            lr: o.lr,
            sequence_symbols: o.sequence_symbols,
            calibration_symbols: o.calibration_symbols,
        }
    }
}

impl VolterraBlock {
    pub fn spec(&self) -> Result<VolterraSpec> {
        VolterraSpec::zeros(self.memory, self.include_bias)
    }

    pub fn options(&self, seed: u64) -> VolterraTrainOptions {
        VolterraTrainOptions {
            iterations: self.iterations,
            lr: self.lr,
            sequence_symbols: self.sequence_symbols,
            seed,
            calibration_symbols: self.calibration_symbols,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantBlock {
    pub gammas: Vec<f64>,
    pub iterations: usize,
    pub lr: f64,
    pub lr_bits: f64,
    pub max_bit_step: f64,
    pub eval_symbols: usize,
    pub profile_sequences: usize,
    pub widths: ArithWidths,
}

impl Default for QuantBlock {
    fn default() -> Self {
        let o = SweepOptions::default();
        Self {
            gammas: vec![0.0, 0.002, 0.004, 0.006, 0.008, 0.01, 0.015, 0.02, 0.03, 0.1],
            iterations: o.search.iterations,
            lr: o.search.lr,
            lr_bits: o.search.lr_bits,
            max_bit_step: o.search.max_bit_step,
            eval_symbols: o.eval_symbols,
            profile_sequences: o.profile_sequences,
            widths: o.widths,
        }
    }
}

impl QuantBlock {
    pub fn options(&self, training: &TrainingBlock) -> SweepOptions {
        SweepOptions {
            search: SearchOptions {
                iterations: self.iterations,
                lr: self.lr,
                lr_bits: self.lr_bits,
                max_bit_step: self.max_bit_step,
                sequence_symbols: training.sequence_symbols,
                clip_norm: if training.clip_norm > 0.0 {
                    training.clip_norm
                } else {
                    f64::INFINITY
                },
                seed: 0,
            },
            eval_symbols: self.eval_symbols,
            profile_sequences: self.profile_sequences,
            widths: self.widths,
        }
    }
}

/// A named parallelism setting applied to every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DopPoint {
    pub name: String,
    /// Lanes per stage; a value above a layer's dimension is clamped.
    pub dop: Dop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineBlock {
    pub clock_hz: f64,
    /// Cycles per stage; absent means `K + 4`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage_depth: Option<u64>,
    pub loss_depth: u64,
    pub dop_points: Vec<DopPoint>,
    /// Sequence length of the buffer report.
    pub report_symbols: usize,
    /// Iterations in the retraining-time estimate.
    pub retrain_iterations: usize,
    /// Width of a stored word in each feature-map buffer.
    pub activation_bits: Vec<u32>,
}

impl Default for PipelineBlock {
    fn default() -> Self {
        let full = Dop {
            in_channels: 64,
            out_channels: 64,
            kernel: 64,
            instances: 1,
        };
        Self {
            clock_hz: 300e6,
            stage_depth: None,
            loss_depth: 4,
            dop_points: vec![
                DopPoint {
                    name: "serial".into(),
                    dop: Dop::SERIAL,
                },
                DopPoint {
                    name: "kernel7".into(),
                    dop: Dop { kernel: 7, ..Dop::SERIAL },
                },
                DopPoint {
                    name: "kernel21".into(),
                    dop: Dop { kernel: 21, ..Dop::SERIAL },
                },
                DopPoint {
                    name: "full".into(),
                    dop: full,
                },
                DopPoint {
                    name: "full_x4".into(),
                    dop: Dop { instances: 4, ..full },
                },
            ],
            report_symbols: 1518 * 8,
            retrain_iterations: 500,
            activation_bits: vec![10, 10, 10],
        }
    }
}

impl PipelineBlock {
    /// Pipeline model for `specs` with every stage at `dop`.
    pub fn pipeline(&self, specs: &[ConvLayerSpec], dop: &Dop, bits_per_symbol: u32) -> PipelineConfig {
        let layers = specs
            .iter()
            .map(|s| {
                let conv = ConvDims::from(s);
                let depth = self.stage_depth.unwrap_or_else(|| default_depth(s.kernel_size));
                LayerHw {
                    conv,
                    fp_dop: dop.clamped(&conv),
                    bp_dop: None,
                    fp_depth: depth,
                    bp_depth: depth,
                }
            })
            .collect();
        PipelineConfig {
            layers,
            clock_hz: self.clock_hz,
            samples_per_symbol: crate::channel::SAMPLES_PER_SYMBOL,
            bits_per_symbol,
            loss_depth: self.loss_depth,
            bp_slowdown: 1,
            mode: BufferMode::Streaming,
            buffer_capacity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepBlock {
    /// Swept quantity of the dispersion sweep; only `d_cd` is supported.
    pub variable: String,
    /// Dispersion points in ps/(nm·km); the first one is the initial
    /// training point.
    pub values: Vec<f64>,
    pub seeds: usize,
    pub eval_symbols: usize,
    pub snr: SnrBlock,
}

impl Default for SweepBlock {
    fn default() -> Self {
        Self {
            variable: "d_cd".into(),
            values: vec![17.0, 18.8, 20.6, 22.4, 24.2, 26.0],
            seeds: 3,
            eval_symbols: 1 << 14,
            snr: SnrBlock::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SnrBlock {
    /// dB
    pub values: Vec<f64>,
    /// Dispersion points the models are retrained to; each must be one of
    /// the sweep values.
    pub d_cd: Vec<f64>,
}

impl Default for SnrBlock {
    fn default() -> Self {
        Self {
            values: vec![8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0, 22.0, 25.0],
            d_cd: vec![20.6, 24.2],
        }
    }
}

impl ExperimentConfig {
    /// Defaults everywhere around `channel`.
    pub fn with_channel(channel: ChannelConfig, seed: u64) -> Self {
        Self {
            seed,
            output: None,
            channel,
            model: ModelBlock::default(),
            training: TrainingBlock::default(),
            loss: LossBlock::default(),
            volterra: VolterraBlock::default(),
            quant: QuantBlock::default(),
            pipeline: PipelineBlock::default(),
            sweep: SweepBlock::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn cnn(&self, seed: u64) -> Result<Cnn> {
        Cnn::with_specs(&self.model.layers, seed)
    }

    pub fn supervised_loss(&self) -> LossKind {
        let mut l = LossKind::mse(self.channel.scheme().alphabet());
        l.mu = self.loss.mu;
        l.normalize = self.loss.normalize;
        l
    }

    pub fn unsupervised_loss(&self) -> Result<LossKind> {
        let mut l = LossKind::unsupervised(self.channel.scheme().alphabet(), self.loss.mu)?;
        l.normalize = self.loss.normalize;
        Ok(l)
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.cnn(0)?;
        self.unsupervised_loss()?.validate()?;
        self.volterra.spec()?;
        let t = &self.training;
        if t.initial_iterations == 0 || t.retrain_iterations == 0 || t.sequence_symbols == 0 {
            return Err(Error::config("training iterations and sequence length must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(t.clip_norm >= 0.0) {
            return Err(Error::config("training lr must be positive and clip_norm non-negative"));
        }
        let v = &self.volterra;
        if v.iterations == 0 || v.sequence_symbols == 0 || v.calibration_symbols == 0 || !(v.lr > 0.0) {
            return Err(Error::config("volterra iterations, lengths and lr must be positive"));
        }
        let q = &self.quant;
        if q.gammas.len() < 3 {
            return Err(Error::config("the bit-width sweep needs at least 3 trade-off factors"));
        }
        if q.gammas.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return Err(Error::config("trade-off factors must be finite and non-negative"));
        }
        if q.iterations == 0 || q.eval_symbols == 0 || q.profile_sequences == 0 {
            return Err(Error::config("quant iterations, eval symbols and profile sequences must be positive"));
        }
        let p = &self.pipeline;
        if p.dop_points.is_empty() {
            return Err(Error::config("pipeline report needs at least one parallelism point"));
        }
        if p.activation_bits.len() != self.model.layers.len() {
            return Err(Error::config("pipeline.activation_bits needs one width per layer"));
        }
        if p.report_symbols == 0 || p.retrain_iterations == 0 {
            return Err(Error::config("pipeline report length and iterations must be positive"));
        }
        let bits = self.channel.scheme().bits_per_symbol() as u32;
        for point in &p.dop_points {
            self.pipeline(&point.dop, bits).validate()?;
        }
        let s = &self.sweep;
        if s.variable != "d_cd" {
            return Err(Error::config(format!("unsupported sweep variable `{}`", s.variable)));
        }
        if s.values.is_empty() || s.snr.values.is_empty() || s.snr.d_cd.is_empty() {
            return Err(Error::config("sweep value lists must not be empty"));
        }
        if s.values.iter().chain(&s.snr.values).any(|v| !v.is_finite()) {
            return Err(Error::config("sweep values must be finite"));
        }
        if s.seeds == 0 || s.eval_symbols == 0 {
            return Err(Error::config("sweep seeds and eval symbols must be positive"));
        }
        for d in &s.snr.d_cd {
            if !s.values.contains(d) {
                return Err(Error::config(format!("snr dispersion point {d} is not a sweep value")));
            }
        }
        Ok(())
    }

    pub fn pipeline(&self, dop: &Dop, bits_per_symbol: u32) -> PipelineConfig {
        self.pipeline.pipeline(&self.model.layers, dop, bits_per_symbol)
    }

    /// Per-seed sweep seeds: `seed, seed + 1, …`.
    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.sweep.seeds as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }
}
