//! Cost and occupancy model of the streaming training pipeline.
//!
//! Every layer has a forward stage (`FP`) and a gradient stage (`BP`,
//! kernel gradient plus, except for the first layer, input gradient). The
//! stages run concurrently. Between them sit the feature-map buffers: the
//! input of layer `l` is written when it is produced (by the source for the
//! first layer) and released once `BP_l` has consumed it.
//!
//! Time is counted in integer ticks, a fixed fraction of a clock cycle, so
//! fractional per-symbol initiation intervals stay exact.

use crate::cnn::ConvLayerSpec;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Degree of parallelism of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dop {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub instances: usize,
}

fn one() -> usize {
    1
}

impl Dop {
    pub const SERIAL: Dop = Dop {
        in_channels: 1,
        out_channels: 1,
        kernel: 1,
        instances: 1,
    };

    /// Fully unrolled for `conv`, one instance.
    pub fn full(conv: &ConvDims) -> Self {
        Self {
            in_channels: conv.in_channels,
            out_channels: conv.out_channels,
            kernel: conv.kernel_size,
            instances: 1,
        }
    }

    /// Lanes clamped to the layer dimensions.
    pub fn clamped(&self, conv: &ConvDims) -> Self {
        Self {
            in_channels: self.in_channels.clamp(1, conv.in_channels),
            out_channels: self.out_channels.clamp(1, conv.out_channels),
            kernel: self.kernel.clamp(1, conv.kernel_size),
            instances: self.instances.max(1),
        }
    }

    pub fn macs_per_cycle(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.instances
    }
}

/// Hardware view of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvDims {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub padding: usize,
    pub stride: usize,
}

impl From<&ConvLayerSpec> for ConvDims {
    fn from(s: &ConvLayerSpec) -> Self {
        Self {
            in_channels: s.in_channels,
            out_channels: s.out_channels,
            kernel_size: s.kernel_size,
            padding: s.padding,
            stride: s.stride,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerHw {
    pub conv: ConvDims,
    pub fp_dop: Dop,
    /// Gradient-stage parallelism; when absent the stage mirrors the
    /// forward stage's per-symbol initiation interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bp_dop: Option<Dop>,
    /// Cycles from the start of a step to its result.
    pub fp_depth: u64,
    pub bp_depth: u64,
}

/// How the gradient stages get their feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BufferMode {
    /// Gradient stages start as soon as their operands exist.
    #[default]
    Streaming,
    /// The backward pass waits for the whole forward pass.
    StoreAll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub layers: Vec<LayerHw>,
    pub clock_hz: f64,
    pub samples_per_symbol: usize,
    pub bits_per_symbol: u32,
    /// Cycles of the elementwise loss stage.
    pub loss_depth: u64,
    /// Integer factor on every gradient stage's initiation interval.
    #[serde(default = "one_u64")]
    pub bp_slowdown: u64,
    #[serde(default)]
    pub mode: BufferMode,
    /// Optional word capacity per feature-map buffer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_capacity: Option<Vec<u64>>,
}

fn one_u64() -> u64 {
    1
}

/// Default stage depth: `K + 4` cycles.
pub fn default_depth(kernel_size: usize) -> u64 {
    kernel_size as u64 + 4
}

impl PipelineConfig {
    /// One forward/gradient pair per layer with the same parallelism, at
    /// 300 MHz and two samples per symbol.
    pub fn from_specs(specs: &[ConvLayerSpec], dop: Dop, bits_per_symbol: u32) -> Self {
        let layers = specs
            .iter()
            .map(|s| {
                let conv = ConvDims::from(s);
                LayerHw {
                    conv,
                    fp_dop: dop.clamped(&conv),
                    bp_dop: None,
                    fp_depth: default_depth(s.kernel_size),
                    bp_depth: default_depth(s.kernel_size),
                }
            })
            .collect();
        Self {
            layers,
            clock_hz: 300e6,
            samples_per_symbol: crate::channel::SAMPLES_PER_SYMBOL,
            bits_per_symbol,
            loss_depth: 4,
            bp_slowdown: 1,
            mode: BufferMode::Streaming,
            buffer_capacity: None,
        }
    }

    /// Every stage fully unrolled.
    pub fn full_unroll(specs: &[ConvLayerSpec], bits_per_symbol: u32) -> Self {
        let mut cfg = Self::from_specs(specs, Dop::SERIAL, bits_per_symbol);
        for l in &mut cfg.layers {
            l.fp_dop = Dop::full(&l.conv);
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("pipeline needs at least one layer"));
        }
        if !(self.clock_hz > 0.0 && self.clock_hz.is_finite()) {
            return Err(Error::config("clock must be positive"));
        }
        if self.samples_per_symbol == 0 || self.bits_per_symbol == 0 || self.bp_slowdown == 0 {
            return Err(Error::config("samples and bits per symbol and slowdown must be positive"));
        }
        let mut sps = self.samples_per_symbol;
        for (l, layer) in self.layers.iter().enumerate() {
            let c = &layer.conv;
            if c.in_channels == 0 || c.out_channels == 0 || c.kernel_size == 0 || c.stride == 0 {
                return Err(Error::config(format!("layer {l} has a zero dimension")));
            }
            if c.padding >= c.kernel_size {
                return Err(Error::config(format!("layer {l} padding must be below the kernel size")));
            }
            if l > 0 && self.layers[l - 1].conv.out_channels != c.in_channels {
                return Err(Error::config(format!("layer {l} input channels do not chain")));
            }
            for dop in std::iter::once(&layer.fp_dop).chain(layer.bp_dop.as_ref()) {
                if dop.in_channels == 0 || dop.out_channels == 0 || dop.kernel == 0 || dop.instances == 0 {
                    return Err(Error::config(format!("layer {l} has a zero degree of parallelism")));
                }
            }
            if sps % c.stride != 0 {
                return Err(Error::config(format!(
                    "layer {l} stride {} does not divide {sps} samples per symbol",
                    c.stride
                )));
            }
            sps /= c.stride;
        }
        if let Some(cap) = &self.buffer_capacity {
            if cap.len() != self.layers.len() {
                return Err(Error::config("one capacity per feature-map buffer is required"));
            }
        }
        Ok(())
    }

    /// Samples per symbol at the input of each layer, plus the output.
    fn rates(&self) -> Vec<usize> {
        let mut r = vec![self.samples_per_symbol];
        for l in &self.layers {
            let last = *r.last().unwrap();
            r.push(last / l.conv.stride);
        }
        r
    }
}

/// Cycles per output sample: `⌈C_in/d_in⌉·⌈C_out/d_out⌉·⌈K/d_k⌉`, at least
/// one per instance, divided by the instance count.
pub fn initiation_interval(conv: &ConvDims, dop: &Dop) -> f64 {
    let (num, den) = ii_ratio(conv, dop);
    num as f64 / den as f64
}

fn ii_ratio(conv: &ConvDims, dop: &Dop) -> (u64, u64) {
    let d = dop.clamped(conv);
    let prod = conv.in_channels.div_ceil(d.in_channels)
        * conv.out_channels.div_ceil(d.out_channels)
        * conv.kernel_size.div_ceil(d.kernel);
    (prod.max(1) as u64, d.instances as u64)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

/// Exact rational `num/den` cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Cycles {
    num: u64,
    den: u64,
}

impl Cycles {
    fn new(num: u64, den: u64) -> Self {
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    fn max(self, o: Self) -> Self {
        if self.num * o.den >= o.num * self.den {
            self
        } else {
            o
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StageKind {
    Source,
    Forward(usize),
    Loss,
    Backward(usize),
}

impl StageKind {
    fn name(&self) -> String {
        match self {
            StageKind::Source => "source".into(),
            StageKind::Forward(l) => format!("FP{}", l + 1),
            StageKind::Loss => "loss".into(),
            StageKind::Backward(l) => format!("BP{}", l + 1),
        }
    }
}

/// Timing of one stage.
#[derive(Debug, Clone)]
struct StageTiming {
    kind: StageKind,
    per_symbol: Cycles,
    steps_per_symbol: usize,
    depth_cycles: u64,
}

fn stage_timings(cfg: &PipelineConfig) -> Vec<StageTiming> {
    let rates = cfg.rates();
    let n = cfg.layers.len();
    let fp: Vec<Cycles> = cfg
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let (num, den) = ii_ratio(&layer.conv, &layer.fp_dop);
            Cycles::new(num * rates[l + 1] as u64, den)
        })
        .collect();
    let source = fp.iter().copied().fold(Cycles::new(0, 1), Cycles::max);
    let mut out = vec![StageTiming {
        kind: StageKind::Source,
        per_symbol: source,
        steps_per_symbol: rates[0],
        depth_cycles: 1,
    }];
    for (l, layer) in cfg.layers.iter().enumerate() {
        out.push(StageTiming {
            kind: StageKind::Forward(l),
            per_symbol: fp[l],
            steps_per_symbol: rates[l + 1],
            depth_cycles: layer.fp_depth,
        });
    }
    out.push(StageTiming {
        kind: StageKind::Loss,
        per_symbol: source,
        steps_per_symbol: rates[n],
        depth_cycles: cfg.loss_depth,
    });
    for l in (0..n).rev() {
        let layer = &cfg.layers[l];
        let base = match &layer.bp_dop {
            None => fp[l],
            Some(d) => {
                let (num, den) = ii_ratio(&layer.conv, d);
                Cycles::new(num * rates[l] as u64, den)
            }
        };
        out.push(StageTiming {
            kind: StageKind::Backward(l),
            per_symbol: Cycles::new(base.num * cfg.bp_slowdown, base.den),
            steps_per_symbol: rates[l],
            depth_cycles: layer.bp_depth,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRate {
    pub stage: String,
    /// Cycles per symbol.
    pub ii_per_symbol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Throughput {
    pub symbols_per_s: f64,
    pub bits_per_s: f64,
    pub bottleneck: String,
    pub stages: Vec<StageRate>,
}

/// Rate set by the slowest forward or gradient stage; fill and flush are
/// ignored.
pub fn pipeline_throughput(cfg: &PipelineConfig) -> Result<Throughput> {
    cfg.validate()?;
    let stages: Vec<StageRate> = stage_timings(cfg)
        .into_iter()
        .filter(|s| matches!(s.kind, StageKind::Forward(_) | StageKind::Backward(_)))
        .map(|s| StageRate {
            stage: s.kind.name(),
            ii_per_symbol: s.per_symbol.value(),
        })
        .collect();
    let worst = stages
        .iter()
        .fold(&stages[0], |a, b| if b.ii_per_symbol > a.ii_per_symbol { b } else { a });
    let symbols_per_s = cfg.clock_hz / worst.ii_per_symbol;
    Ok(Throughput {
        symbols_per_s,
        bits_per_s: symbols_per_s * cfg.bits_per_symbol as f64,
        bottleneck: worst.stage.clone(),
        stages,
    })
}

/// Sum of MAC lanes over all stages.
pub fn macs_per_cycle(cfg: &PipelineConfig) -> usize {
    cfg.layers
        .iter()
        .map(|l| {
            let fp = l.fp_dop.clamped(&l.conv).macs_per_cycle();
            let bp = l.bp_dop.map(|d| d.clamped(&l.conv).macs_per_cycle()).unwrap_or(fp);
            fp + bp
        })
        .sum()
}

/// Occupancy history of one feature-map buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferSeries {
    pub name: String,
    /// Words per stored sample position.
    pub words_per_sample: u64,
    /// `(tick, occupancy)` after every change.
    pub samples: Vec<(u64, u64)>,
    pub max_occupancy: u64,
    pub produced: u64,
    pub consumed: u64,
    pub final_occupancy: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferTrace {
    pub buffers: Vec<BufferSeries>,
    pub ticks_per_cycle: u64,
    /// Tick at which the last gradient step finished.
    pub makespan: u64,
    /// Completion tick of every step of the first layer's gradient stage.
    pub last_stage_completions: Vec<u64>,
}

impl BufferTrace {
    pub fn max_occupancies(&self) -> Vec<u64> {
        self.buffers.iter().map(|b| b.max_occupancy).collect()
    }

    pub fn total_max_words(&self) -> u64 {
        self.buffers.iter().map(|b| b.max_occupancy).sum()
    }
}

struct StageState {
    timing: StageTiming,
    steps: usize,
    ii_ticks: u64,
    depth_ticks: u64,
    next: usize,
    next_start: u64,
    done: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Effect {
    // Releases sort first so a word freed and one written in the same tick
    // never coexist.
    Release { buffer: usize },
    Write { buffer: usize },
    Done,
}

/// Event-driven run over `symbols` symbols.
pub fn simulate_buffers(cfg: &PipelineConfig, symbols: usize) -> Result<BufferTrace> {
    cfg.validate()?;
    if symbols == 0 {
        return Err(Error::EmptySequence);
    }
    let n_layers = cfg.layers.len();
    let timings = stage_timings(cfg);
    let ticks_per_cycle = timings
        .iter()
        .fold(1, |acc, t| lcm(acc, t.per_symbol.den * t.steps_per_symbol as u64));
    let mut stages: Vec<StageState> = timings
        .into_iter()
        .map(|t| {
            let steps = symbols * t.steps_per_symbol;
            let ii_ticks = t.per_symbol.num * ticks_per_cycle / (t.per_symbol.den * t.steps_per_symbol as u64);
            StageState {
                steps,
                ii_ticks: ii_ticks.max(1),
                depth_ticks: t.depth_cycles.max(1) * ticks_per_cycle,
                next: 0,
                next_start: 0,
                done: Vec::with_capacity(steps),
                timing: t,
            }
        })
        .collect();
    // Stage order: source, FP1..FPn, loss, BPn..BP1.
    let src = 0;
    let fp = |l: usize| 1 + l;
    let loss = 1 + n_layers;
    let bp = |l: usize| 2 + n_layers + (n_layers - 1 - l);

    let words: Vec<u64> = cfg.layers.iter().map(|l| l.conv.in_channels as u64).collect();
    let capacity = cfg.buffer_capacity.clone();
    let mut occupancy = vec![0u64; n_layers];
    let mut reserved = vec![0u64; n_layers];
    let mut series: Vec<BufferSeries> = (0..n_layers)
        .map(|l| BufferSeries {
            name: if l == 0 { "input".into() } else { format!("layer{}_input", l + 1) },
            words_per_sample: words[l],
            samples: vec![(0, 0)],
            max_occupancy: 0,
            produced: 0,
            consumed: 0,
            final_occupancy: 0,
        })
        .collect();
    let mut events: BinaryHeap<Reverse<(u64, Effect)>> = BinaryHeap::new();

    // Producer step that must have finished before step `m` of `s` starts.
    let dependency = |s: usize, m: usize, stages: &[StageState]| -> Option<(usize, usize)> {
        let clamp = |idx: isize, len: usize| idx.clamp(0, len as isize - 1) as usize;
        if s == src {
            return None;
        }
        if s == loss {
            let last = fp(n_layers - 1);
            return Some(match cfg.mode {
                BufferMode::Streaming => (last, m),
                BufferMode::StoreAll => (last, stages[last].steps - 1),
            });
        }
        for l in 0..n_layers {
            let c = &cfg.layers[l].conv;
            if s == fp(l) {
                let producer = if l == 0 { src } else { fp(l - 1) };
                let need = (m * c.stride) as isize - c.padding as isize + c.kernel_size as isize - 1;
                return Some((producer, clamp(need, stages[producer].steps)));
            }
            if s == bp(l) {
                let producer = if l == n_layers - 1 { loss } else { bp(l + 1) };
                let need = (m + c.padding) / c.stride;
                return Some((producer, need.min(stages[producer].steps - 1)));
            }
        }
        unreachable!("stage index out of range")
    };
    // Buffer written by stage `s`, and buffer released by stage `s`.
    let writes = |s: usize| -> Option<usize> {
        if s == src {
            Some(0)
        } else {
            (0..n_layers.saturating_sub(1)).find(|&l| s == fp(l)).map(|l| l + 1)
        }
    };
    let releases = |s: usize| -> Option<usize> { (0..n_layers).find(|&l| s == bp(l)) };

    let total_steps: usize = stages.iter().map(|s| s.steps).sum();
    let mut started = 0usize;
    let mut now = 0u64;
    let mut makespan = 0u64;
    loop {
        while let Some(&Reverse((t, effect))) = events.peek() {
            if t > now {
                break;
            }
            events.pop();
            match effect {
                Effect::Write { buffer } => {
                    occupancy[buffer] += words[buffer];
                    series[buffer].produced += words[buffer];
                }
                Effect::Release { buffer } => {
                    occupancy[buffer] -= words[buffer];
                    reserved[buffer] -= words[buffer];
                    series[buffer].consumed += words[buffer];
                }
                Effect::Done => {}
            }
            let b = match effect {
                Effect::Write { buffer } | Effect::Release { buffer } => buffer,
                Effect::Done => continue,
            };
            let s = &mut series[b];
            s.max_occupancy = s.max_occupancy.max(occupancy[b]);
            match s.samples.last_mut() {
                Some(last) if last.0 == t => last.1 = occupancy[b],
                _ => s.samples.push((t, occupancy[b])),
            }
        }

        let mut progressed = true;
        while progressed {
            progressed = false;
            for s in 0..stages.len() {
                let m = stages[s].next;
                if m >= stages[s].steps || stages[s].next_start > now {
                    continue;
                }
                if let Some((p, r)) = dependency(s, m, &stages) {
                    if stages[p].next <= r || stages[p].done[r] > now {
                        continue;
                    }
                }
                if let Some(b) = writes(s) {
                    if let Some(cap) = &capacity {
                        if reserved[b] + words[b] > cap[b] {
                            continue;
                        }
                    }
                    reserved[b] += words[b];
                }
                let st = &mut stages[s];
                let finish = now + st.depth_ticks;
                st.done.push(finish);
                st.next += 1;
                st.next_start = now + st.ii_ticks;
                started += 1;
                if let Some(b) = writes(s) {
                    events.push(Reverse((finish, Effect::Write { buffer: b })));
                }
                if let Some(b) = releases(s) {
                    events.push(Reverse((finish, Effect::Release { buffer: b })));
                }
                if writes(s).is_none() && releases(s).is_none() {
                    events.push(Reverse((finish, Effect::Done)));
                }
                makespan = makespan.max(finish);
                progressed = true;
            }
        }

        if started == total_steps && events.is_empty() {
            break;
        }
        let next_event = events.peek().map(|Reverse((t, _))| *t);
        let next_start = stages
            .iter()
            .filter(|s| s.next < s.steps && s.next_start > now)
            .map(|s| s.next_start)
            .min();
        now = match (next_event, next_start) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => {
                let blocked: Vec<String> = stages
                    .iter()
                    .filter(|s| s.next < s.steps)
                    .map(|s| format!("{} at step {}/{}", s.timing.kind.name(), s.next, s.steps))
                    .collect();
                return Err(Error::Deadlock(format!(
                    "no stage can advance at tick {now}; waiting: {}; occupancy {:?}",
                    blocked.join(", "),
                    occupancy
                )));
            }
        };
    }
    for (s, occ) in series.iter_mut().zip(&occupancy) {
        s.final_occupancy = *occ;
    }
    Ok(BufferTrace {
        buffers: series,
        ticks_per_cycle,
        makespan,
        last_stage_completions: stages[bp(0)].done.clone(),
    })
}

/// Steady-state symbol rate measured from the event run: gradient steps of
/// the first layer finished over the middle half of the sequence.
pub fn simulated_symbol_rate(cfg: &PipelineConfig, trace: &BufferTrace) -> f64 {
    let done = &trace.last_stage_completions;
    let n = done.len();
    let (a, b) = (n / 4, 3 * n / 4);
    let ticks = (done[b] - done[a]) as f64;
    let steps_per_symbol = cfg.samples_per_symbol as f64;
    let symbols = (b - a) as f64 / steps_per_symbol;
    symbols / (ticks / trace.ticks_per_cycle as f64) * cfg.clock_hz
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub symbols: usize,
    /// Per buffer: (name, naive words, pipelined words, bits per word).
    pub buffers: Vec<(String, u64, u64, u32)>,
    pub naive_words: u64,
    pub pipelined_words: u64,
    pub naive_bits: u64,
    pub pipelined_bits: u64,
}

impl MemoryReport {
    pub fn ratio(&self) -> f64 {
        self.pipelined_bits as f64 / self.naive_bits.max(1) as f64
    }
}

/// Words every inter-pass feature map needs when the whole sequence is
/// kept: samples at the layer input times its channel count.
pub fn naive_words(cfg: &PipelineConfig, symbols: usize) -> Vec<u64> {
    let rates = cfg.rates();
    cfg.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| (symbols * rates[l] * layer.conv.in_channels) as u64)
        .collect()
}

/// Full-sequence storage against the streaming buffers. `activation_bits`
/// holds one width per buffer.
pub fn memory_report(cfg: &PipelineConfig, symbols: usize, activation_bits: &[u32]) -> Result<MemoryReport> {
    if activation_bits.len() != cfg.layers.len() {
        return Err(Error::config("one activation width per buffer is required"));
    }
    let mut streaming = cfg.clone();
    streaming.mode = BufferMode::Streaming;
    streaming.buffer_capacity = None;
    let trace = simulate_buffers(&streaming, symbols)?;
    let naive = naive_words(cfg, symbols);
    let buffers: Vec<(String, u64, u64, u32)> = trace
        .buffers
        .iter()
        .zip(&naive)
        .zip(activation_bits)
        .map(|((b, &n), &bits)| (b.name.clone(), n, b.max_occupancy, bits))
        .collect();
    let naive_words: u64 = buffers.iter().map(|b| b.1).sum();
    let pipelined_words: u64 = buffers.iter().map(|b| b.2).sum();
    let naive_bits = buffers.iter().map(|b| b.1 * b.3 as u64).sum();
    let pipelined_bits = buffers.iter().map(|b| b.2 * b.3 as u64).sum();
    Ok(MemoryReport {
        symbols,
        buffers,
        naive_words,
        pipelined_words,
        naive_bits,
        pipelined_bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::Cnn;
    use proptest::prelude::*;

    fn default_cfg(dop: Dop) -> PipelineConfig {
        PipelineConfig::from_specs(&Cnn::default_specs(), dop, 1)
    }

    fn layer2() -> ConvDims {
        ConvDims {
            in_channels: 3,
            out_channels: 3,
            kernel_size: 21,
            padding: 10,
            stride: 1,
        }
    }

    #[test]
    fn initiation_interval_examples() {
        let c = layer2();
        assert_eq!(initiation_interval(&c, &Dop::full(&c)), 1.0);
        assert_eq!(initiation_interval(&c, &Dop::SERIAL), 189.0);
        let quad = Dop {
            instances: 4,
            ..Dop::full(&c)
        };
        assert_eq!(initiation_interval(&c, &quad), 0.25);
        // Two samples per symbol at the layer output.
        assert_eq!(initiation_interval(&c, &quad) * 2.0, 0.5);
        let big = Dop {
            in_channels: 9,
            out_channels: 9,
            kernel: 50,
            instances: 1,
        };
        assert_eq!(initiation_interval(&c, &big), 1.0);
    }

    #[test]
    fn full_unroll_throughput() {
        let cfg = PipelineConfig::full_unroll(&Cnn::default_specs(), 1);
        let t = pipeline_throughput(&cfg).unwrap();
        assert!((t.symbols_per_s - 150e6).abs() < 1e-3);
        assert!((t.bits_per_s - 150e6).abs() < 1e-3);
    }

    #[test]
    fn bottleneck_stage_limits_throughput() {
        let specs = Cnn::default_specs();
        let base = PipelineConfig::from_specs(&specs, Dop::SERIAL, 1);
        let mut faster = base.clone();
        for l in faster.layers.iter_mut().skip(1) {
            l.fp_dop = Dop::full(&l.conv);
        }
        let a = pipeline_throughput(&base).unwrap();
        let b = pipeline_throughput(&faster).unwrap();
        // Layers 2 and 3 sped up, but the serial layer 2 was the bottleneck
        // only until layer 1 takes over.
        assert!(b.symbols_per_s >= a.symbols_per_s);
        let mut only_first = base.clone();
        only_first.layers[0].fp_dop = Dop::full(&only_first.layers[0].conv);
        let c = pipeline_throughput(&only_first).unwrap();
        assert_eq!(c.symbols_per_s, a.symbols_per_s);
        assert_eq!(a.bottleneck, "FP2");
    }

    #[test]
    fn balanced_occupancy_is_independent_of_length() {
        for dop in [Dop::SERIAL, Dop { kernel: 7, ..Dop::SERIAL }] {
            let cfg = default_cfg(dop);
            let occ: Vec<Vec<u64>> = [256, 2048, 16384]
                .iter()
                .map(|&n| simulate_buffers(&cfg, n).unwrap().max_occupancies())
                .collect();
            assert_eq!(occ[0], occ[1]);
            assert_eq!(occ[1], occ[2]);
        }
    }

    #[test]
    fn store_all_grows_linearly() {
        let mut cfg = default_cfg(Dop::full(&layer2()));
        cfg.mode = BufferMode::StoreAll;
        let a = simulate_buffers(&cfg, 1024).unwrap().total_max_words() as f64;
        let b = simulate_buffers(&cfg, 2048).unwrap().total_max_words() as f64;
        let r = b / a;
        assert!((1.9..=2.1).contains(&r), "{r}");
    }

    #[test]
    fn slow_backward_grows_linearly() {
        let mut cfg = default_cfg(Dop::full(&layer2()));
        cfg.bp_slowdown = 2;
        let a = simulate_buffers(&cfg, 4096).unwrap().total_max_words() as f64;
        let b = simulate_buffers(&cfg, 8192).unwrap().total_max_words() as f64;
        assert!((1.9..=2.1).contains(&(b / a)), "{}", b / a);
    }

    #[test]
    fn conservation_and_nonnegativity() {
        let trace = simulate_buffers(&default_cfg(Dop::SERIAL), 300).unwrap();
        for b in &trace.buffers {
            assert_eq!(b.produced - b.consumed, b.final_occupancy);
            assert_eq!(b.final_occupancy, 0);
            assert_eq!(b.produced, 600 * b.words_per_sample);
        }
    }

    #[test]
    fn single_stage_occupancy_is_bounded_by_depth() {
        let spec = ConvLayerSpec {
            in_channels: 1,
            out_channels: 1,
            kernel_size: 1,
            padding: 0,
            stride: 1,
            dilation: 1,
            relu: false,
        };
        let cfg = PipelineConfig::from_specs(&[spec], Dop::SERIAL, 1);
        let trace = simulate_buffers(&cfg, 500).unwrap();
        let l = &cfg.layers[0];
        let depth = 1 + l.fp_depth + cfg.loss_depth + l.bp_depth;
        assert!(trace.buffers[0].max_occupancy <= depth, "{}", trace.buffers[0].max_occupancy);
    }

    #[test]
    fn tiny_capacity_deadlocks() {
        let mut cfg = default_cfg(Dop::SERIAL);
        cfg.buffer_capacity = Some(vec![4, 6, 6]);
        let err = simulate_buffers(&cfg, 64).unwrap_err();
        assert!(matches!(err, Error::Deadlock(_)), "{err}");
        let need = simulate_buffers(&default_cfg(Dop::SERIAL), 64).unwrap().max_occupancies();
        cfg.buffer_capacity = Some(need);
        assert!(simulate_buffers(&cfg, 64).is_ok());
    }

    #[test]
    fn memory_report_against_enumeration() {
        let cfg = default_cfg(Dop::SERIAL);
        let n = 1518 * 8;
        let rep = memory_report(&cfg, n, &[10, 10, 10]).unwrap();
        let mut enumerated = 0u64;
        for layer in &cfg.layers {
            // No stride before the last layer: every buffer sees two samples per symbol.
            for _sample in 0..n * 2 {
                enumerated += layer.conv.in_channels as u64;
            }
        }
        assert_eq!(rep.naive_words, enumerated);
        assert_eq!(rep.naive_words, (n * 2 * 7) as u64);
        assert!(rep.ratio() < 0.01, "{}", rep.ratio());
    }

    #[test]
    fn short_sequence_keeps_nearly_everything() {
        let cfg = PipelineConfig::from_specs(&Cnn::default_specs(), Dop::full(&layer2()), 1);
        let n = 12;
        let rep = memory_report(&cfg, n, &[8, 8, 8]).unwrap();
        assert!(rep.ratio() > 0.8, "{}", rep.ratio());
        assert!(rep.ratio() <= 1.0);
    }

    #[test]
    fn validation() {
        let mut cfg = default_cfg(Dop::SERIAL);
        cfg.layers[2].conv.stride = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = default_cfg(Dop::SERIAL);
        cfg.buffer_capacity = Some(vec![1]);
        assert!(cfg.validate().is_err());
        assert!(simulate_buffers(&default_cfg(Dop::SERIAL), 0).is_err());
    }

    fn arb_dop() -> impl Strategy<Value = Dop> {
        (1usize..=3, 1usize..=3, 1usize..=21, 1usize..=4).prop_map(|(a, b, k, i)| Dop {
            in_channels: a,
            out_channels: b,
            kernel: k,
            instances: i,
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn simulated_rate_matches_closed_form(d1 in arb_dop(), d2 in arb_dop(), d3 in arb_dop()) {
            let mut cfg = default_cfg(Dop::SERIAL);
            for (l, d) in cfg.layers.iter_mut().zip([d1, d2, d3]) {
                l.fp_dop = d.clamped(&l.conv);
            }
            let trace = simulate_buffers(&cfg, 1000).unwrap();
            let sim = simulated_symbol_rate(&cfg, &trace);
            let model = pipeline_throughput(&cfg).unwrap().symbols_per_s;
            prop_assert!(((sim - model) / model).abs() < 0.02, "{} vs {}", sim, model);
            for b in &trace.buffers {
                prop_assert_eq!(b.produced - b.consumed, b.final_occupancy);
            }
        }

        #[test]
        fn throughput_is_monotone_in_every_dop(d in arb_dop(), layer in 0usize..3, which in 0usize..4) {
            let mut cfg = default_cfg(Dop::SERIAL);
            cfg.layers[layer].fp_dop = d.clamped(&cfg.layers[layer].conv);
            let before = pipeline_throughput(&cfg).unwrap().symbols_per_s;
            let dop = &mut cfg.layers[layer].fp_dop;
            match which {
                0 => dop.in_channels += 1,
                1 => dop.out_channels += 1,
                2 => dop.kernel += 1,
                _ => dop.instances += 1,
            }
            let after = pipeline_throughput(&cfg).unwrap().symbols_per_s;
            prop_assert!(after >= before);
        }
    }
}
