//! Desk-scale experiment drivers and their CSV artifacts.
//!
//! Every random draw is derived from the run seed through labelled
//! substreams, and rows are sorted before they are written, so the output
//! does not depend on the worker count or on completion order.

use crate::channel::ChannelConfig;
use crate::cnn::{train, Cnn};
use crate::config::ExperimentConfig;
use crate::eval::{evaluate_ber, BerEstimate, Equalizer};
use crate::loss::LossKind;
use crate::pipeline::{memory_report, pipeline_throughput, MemoryReport, Throughput};
use crate::quant::{mark_pareto, profile_ranges, sweep_point, ParetoPoint};
use crate::rng::substream;
use crate::volterra::volterra_train;
use crate::{Error, Result};
use rayon::prelude::*;
use std::io::Write;

pub const DISPERSION_SCHEMA: &str = "# schema: ueq/sweep-dispersion/v1";
pub const SNR_SCHEMA: &str = "# schema: ueq/sweep-snr/v1";
pub const PARETO_SCHEMA: &str = "# schema: ueq/quant-pareto/v1";
pub const PIPELINE_SCHEMA: &str = "# schema: ueq/pipeline-report/v1";
pub const EVALUATE_SCHEMA: &str = "# schema: ueq/evaluate/v1";

/// Retraining time of the hardware reference design, shown next to the
/// model's estimate.
pub const REFERENCE_RETRAIN_MS: f64 = 3.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    /// Trained from scratch at every point.
    Baseline,
    NoRetrain,
    Supervised,
    Unsupervised,
    Volterra,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Baseline, Arm::NoRetrain, Arm::Supervised, Arm::Unsupervised, Arm::Volterra];

    pub fn as_str(&self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::NoRetrain => "no_retrain",
            Arm::Supervised => "supervised",
            Arm::Unsupervised => "unsupervised",
            Arm::Volterra => "volterra",
        }
    }
}

/// One BER point, or the reason there is none.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Measured(BerEstimate),
    Failed(String),
}

impl Outcome {
    pub fn estimate(&self) -> Option<BerEstimate> {
        match self {
            Outcome::Measured(e) => Some(*e),
            Outcome::Failed(_) => None,
        }
    }

    /// BER with the zero-error floor `1/bits`; NaN when failed.
    pub fn ber(&self) -> f64 {
        self.estimate().map_or(f64::NAN, |e| e.ber_or_floor())
    }

    fn ber_field(&self) -> String {
        match self {
            Outcome::Measured(e) if e.errors == 0 => format!("<{:.6e}", 1.0 / e.bits.max(1) as f64),
            Outcome::Measured(e) => format!("{:.6e}", e.ber()),
            Outcome::Failed(_) => "nan".into(),
        }
    }

    fn counts(&self) -> (String, String, &str) {
        match self {
            Outcome::Measured(e) => (e.errors.to_string(), e.bits.to_string(), "ok"),
            Outcome::Failed(_) => (String::new(), String::new(), "diverged"),
        }
    }
}

fn outcome(r: Result<BerEstimate>) -> Result<Outcome> {
    match r {
        Ok(e) => Ok(Outcome::Measured(e)),
        Err(e @ Error::Diverged { .. }) => Ok(Outcome::Failed(e.to_string())),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BerRow {
    /// Index into the sweep values.
    pub point: usize,
    pub d_cd: f64,
    /// SNR in dB; only set by the SNR sweep.
    pub snr_db: Option<f64>,
    pub arm: Arm,
    pub seed: u64,
    pub outcome: Outcome,
}

fn sort_rows(rows: &mut [BerRow]) {
    rows.sort_by(|a, b| {
        (a.point, a.snr_db.map(f64::to_bits), a.arm, a.seed).cmp(&(b.point, b.snr_db.map(f64::to_bits), b.arm, b.seed))
    });
}

/// Runs `f` on a pool of `workers` threads (0 picks the rayon default).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

mod label {
    pub const INIT_WEIGHTS: u64 = 0x1417;
    pub const INIT_TRAIN: u64 = 0x1A17;
    pub const RETRAIN: u64 = 0x5E7_0000;
    pub const BASELINE_WEIGHTS: u64 = 0xBA5E_0000;
    pub const BASELINE_TRAIN: u64 = 0xBA5F_0000;
    pub const VOLTERRA: u64 = 0x7011_0000;
    pub const EVAL: u64 = 0xE7A1_0000;
    pub const SNR_EVAL: u64 = 0x5A1_0000;
    pub const QUANT: u64 = 0x0A47;
}

fn channel_at(cfg: &ExperimentConfig, point: usize) -> ChannelConfig {
    cfg.channel.with_dispersion(cfg.sweep.values[point])
}

/// Supervised training from scratch on `channel`.
pub fn train_from_scratch(cfg: &ExperimentConfig, channel: &ChannelConfig, seed: u64) -> Result<Cnn> {
    let mut cnn = cfg.cnn(substream(seed, label::INIT_WEIGHTS))?;
    let opts = cfg
        .training
        .options(cfg.training.initial_iterations, substream(seed, label::INIT_TRAIN));
    train(&mut cnn, channel, &cfg.supervised_loss(), &opts)?;
    Ok(cnn)
}

/// Supervised training from scratch at the first sweep point.
pub fn initial_model(cfg: &ExperimentConfig, seed: u64) -> Result<Cnn> {
    train_from_scratch(cfg, &channel_at(cfg, 0), seed)
}

/// Continues training `start` along the sweep points `1..=last`, one
/// retraining step per point. Entry `k` is the model used at point `k`;
/// once a step diverges, that entry and all later ones hold the error.
pub fn retrain_chain(
    cfg: &ExperimentConfig,
    start: &Cnn,
    loss: &LossKind,
    seed: u64,
    last: usize,
) -> Result<Vec<std::result::Result<Cnn, String>>> {
    let mut out: Vec<std::result::Result<Cnn, String>> = vec![Ok(start.clone())];
    let mut model = start.clone();
    for k in 1..=last {
        if let Some(Err(msg)) = out.last() {
            let msg = msg.clone();
            out.push(Err(msg));
            continue;
        }
        let opts = cfg
            .training
            .options(cfg.training.retrain_iterations, substream(seed, label::RETRAIN + k as u64));
        match train(&mut model, &channel_at(cfg, k), loss, &opts) {
            Ok(_) => out.push(Ok(model.clone())),
            Err(e @ Error::Diverged { .. }) => out.push(Err(e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn eval_seed(seed: u64, point: usize) -> u64 {
    substream(seed, label::EVAL + point as u64)
}

fn evaluate_at<E: Equalizer + ?Sized>(cfg: &ExperimentConfig, eq: &E, point: usize, seed: u64) -> Result<BerEstimate> {
    evaluate_ber(eq, &channel_at(cfg, point), cfg.sweep.eval_symbols, eval_seed(seed, point))
}

#[derive(Debug, Clone, Copy)]
enum Task {
    NoRetrain,
    Chain(Arm),
    Baseline(usize),
    Volterra(usize),
}

fn run_seed_dispersion(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<BerRow>> {
    let points = cfg.sweep.values.len();
    let initial = match initial_model(cfg, seed) {
        Ok(m) => Ok(m),
        Err(e @ Error::Diverged { .. }) => Err(e.to_string()),
        Err(e) => return Err(e),
    };
    let mut tasks = vec![Task::NoRetrain, Task::Chain(Arm::Supervised), Task::Chain(Arm::Unsupervised)];
    tasks.extend((0..points).map(Task::Baseline));
    tasks.extend((0..points).map(Task::Volterra));
    let row = |point: usize, arm: Arm, outcome: Outcome| BerRow {
        point,
        d_cd: cfg.sweep.values[point],
        snr_db: None,
        arm,
        seed,
        outcome,
    };
    let chunks: Vec<Vec<BerRow>> = tasks
        .par_iter()
        .map(|task| -> Result<Vec<BerRow>> {
            match *task {
                Task::Volterra(k) => {
                    let mut spec = cfg.volterra.spec()?;
                    let opts = cfg.volterra.options(substream(seed, label::VOLTERRA + k as u64));
                    let trained = volterra_train(&mut spec, &channel_at(cfg, k), &opts).map(|_| ());
                    let o = outcome(trained.and_then(|_| evaluate_at(cfg, &spec, k, seed)))?;
                    Ok(vec![row(k, Arm::Volterra, o)])
                }
                _ if initial.is_err() => {
                    let msg = initial.as_ref().unwrap_err().clone();
                    let (arm, ks): (Arm, Vec<usize>) = match *task {
                        Task::NoRetrain => (Arm::NoRetrain, (0..points).collect()),
                        Task::Chain(a) => (a, (0..points).collect()),
                        Task::Baseline(k) if k == 0 => (Arm::Baseline, vec![0]),
                        Task::Baseline(_) => (Arm::Baseline, vec![]),
                        Task::Volterra(_) => unreachable!(),
                    };
                    let mut rows: Vec<BerRow> =
                        ks.into_iter().map(|k| row(k, arm, Outcome::Failed(msg.clone()))).collect();
                    if let Task::Baseline(k) = *task {
                        if k > 0 {
                            rows.push(row(k, Arm::Baseline, baseline_at(cfg, seed, k)?));
                        }
                    }
                    Ok(rows)
                }
                Task::NoRetrain => {
                    let m = initial.as_ref().unwrap();
                    (0..points)
                        .map(|k| Ok(row(k, Arm::NoRetrain, Outcome::Measured(evaluate_at(cfg, m, k, seed)?))))
                        .collect()
                }
                Task::Chain(arm) => {
                    let loss = match arm {
                        Arm::Supervised => cfg.supervised_loss(),
                        _ => cfg.unsupervised_loss()?,
                    };
                    let chain = retrain_chain(cfg, initial.as_ref().unwrap(), &loss, seed, points - 1)?;
                    chain
                        .iter()
                        .enumerate()
                        .map(|(k, m)| {
                            let o = match m {
                                Ok(m) => Outcome::Measured(evaluate_at(cfg, m, k, seed)?),
                                Err(msg) => Outcome::Failed(msg.clone()),
                            };
                            Ok(row(k, arm, o))
                        })
                        .collect()
                }
                Task::Baseline(0) => {
                    let m = initial.as_ref().unwrap();
                    Ok(vec![row(0, Arm::Baseline, Outcome::Measured(evaluate_at(cfg, m, 0, seed)?))])
                }
                Task::Baseline(k) => Ok(vec![row(k, Arm::Baseline, baseline_at(cfg, seed, k)?)]),
            }
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

fn baseline_at(cfg: &ExperimentConfig, seed: u64, k: usize) -> Result<Outcome> {
    let mut cnn = cfg.cnn(substream(seed, label::BASELINE_WEIGHTS + k as u64))?;
    let opts = cfg.training.options(
        cfg.training.initial_iterations,
        substream(seed, label::BASELINE_TRAIN + k as u64),
    );
    let trained = train(&mut cnn, &channel_at(cfg, k), &cfg.supervised_loss(), &opts).map(|_| ());
    outcome(trained.and_then(|_| evaluate_at(cfg, &cnn, k, seed)))
}

/// Five arms over the dispersion points for every run seed.
pub fn sweep_dispersion(cfg: &ExperimentConfig) -> Result<Vec<BerRow>> {
    cfg.validate()?;
    let per_seed: Vec<Vec<BerRow>> = cfg
        .run_seeds()
        .par_iter()
        .map(|&s| run_seed_dispersion(cfg, s))
        .collect::<Result<_>>()?;
    let mut rows: Vec<BerRow> = per_seed.into_iter().flatten().collect();
    sort_rows(&mut rows);
    Ok(rows)
}

/// No-retrain, supervised and unsupervised models at the configured
/// dispersion points, evaluated over the SNR grid. Retraining happens at
/// the channel's nominal SNR.
pub fn sweep_snr(cfg: &ExperimentConfig) -> Result<Vec<BerRow>> {
    cfg.validate()?;
    let targets: Vec<usize> = cfg
        .sweep
        .snr
        .d_cd
        .iter()
        .map(|d| cfg.sweep.values.iter().position(|v| v == d).expect("validated"))
        .collect();
    let last = *targets.iter().max().expect("validated");
    let per_seed: Vec<Vec<BerRow>> = cfg
        .run_seeds()
        .par_iter()
        .map(|&seed| -> Result<Vec<BerRow>> {
            let initial = initial_model(cfg, seed)?;
            let chains: Vec<(Arm, Vec<std::result::Result<Cnn, String>>)> = [Arm::Supervised, Arm::Unsupervised]
                .par_iter()
                .map(|&arm| {
                    let loss = match arm {
                        Arm::Supervised => cfg.supervised_loss(),
                        _ => cfg.unsupervised_loss()?,
                    };
                    Ok((arm, retrain_chain(cfg, &initial, &loss, seed, last)?))
                })
                .collect::<Result<_>>()?;
            let jobs: Vec<(usize, usize, Arm)> = targets
                .iter()
                .flat_map(|&k| {
                    (0..cfg.sweep.snr.values.len())
                        .flat_map(move |j| [Arm::NoRetrain, Arm::Supervised, Arm::Unsupervised].map(|a| (k, j, a)))
                })
                .collect();
            jobs.par_iter()
                .map(|&(k, j, arm)| {
                    let snr = cfg.sweep.snr.values[j];
                    let model: std::result::Result<&Cnn, String> = match arm {
                        Arm::NoRetrain => Ok(&initial),
                        _ => {
                            let chain = &chains.iter().find(|(a, _)| *a == arm).unwrap().1;
                            chain[k].as_ref().map_err(Clone::clone)
                        }
                    };
                    let o = match model {
                        Ok(m) => {
                            let ch = channel_at(cfg, k).with_snr(snr);
                            let s = substream(seed, label::SNR_EVAL + (k * 1000 + j) as u64);
                            Outcome::Measured(evaluate_ber(m, &ch, cfg.sweep.eval_symbols, s)?)
                        }
                        Err(msg) => Outcome::Failed(msg),
                    };
                    Ok(BerRow {
                        point: k,
                        d_cd: cfg.sweep.values[k],
                        snr_db: Some(snr),
                        arm,
                        seed,
                        outcome: o,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rows: Vec<BerRow> = per_seed.into_iter().flatten().collect();
    sort_rows(&mut rows);
    Ok(rows)
}

fn csv_writer<W: Write>(mut out: W, schema: &str) -> Result<csv::Writer<W>> {
    writeln!(out, "{schema}")?;
    Ok(csv::Writer::from_writer(out))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

pub fn write_dispersion_csv<W: Write>(rows: &[BerRow], out: W) -> Result<()> {
    let mut w = csv_writer(out, DISPERSION_SCHEMA)?;
    w.write_record(["d_cd", "arm", "ber", "seed", "errors", "bits", "status"])
        .map_err(csv_err)?;
    for r in rows {
        let (errors, bits, status) = r.outcome.counts();
        w.write_record([
            num(r.d_cd),
            r.arm.as_str().into(),
            r.outcome.ber_field(),
            r.seed.to_string(),
            errors,
            bits,
            status.into(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_snr_csv<W: Write>(rows: &[BerRow], out: W) -> Result<()> {
    let mut w = csv_writer(out, SNR_SCHEMA)?;
    w.write_record(["d_cd", "snr_db", "arm", "ber", "seed", "errors", "bits", "status"])
        .map_err(csv_err)?;
    for r in rows {
        let (errors, bits, status) = r.outcome.counts();
        w.write_record([
            num(r.d_cd),
            r.snr_db.map(num).unwrap_or_default(),
            r.arm.as_str().into(),
            r.outcome.ber_field(),
            r.seed.to_string(),
            errors,
            bits,
            status.into(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Median over seeds of `arm` at sweep point `point`, with failed runs
/// excluded.
pub fn median_ber(rows: &[BerRow], arm: Arm, point: usize) -> Option<f64> {
    let mut v: Vec<f64> = rows
        .iter()
        .filter(|r| r.arm == arm && r.point == point && r.snr_db.is_none())
        .filter_map(|r| r.outcome.estimate().map(|e| e.ber_or_floor()))
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Human-readable medians per point and arm.
pub fn dispersion_summary(cfg: &ExperimentConfig, rows: &[BerRow]) -> String {
    let mut s = format!("{:>7}", "d_cd");
    for a in Arm::ALL {
        s += &format!(" {:>13}", a.as_str());
    }
    s.push('\n');
    for (k, d) in cfg.sweep.values.iter().enumerate() {
        s += &format!("{d:>7.1}");
        for a in Arm::ALL {
            match median_ber(rows, a, k) {
                Some(b) => s += &format!(" {b:>13.3e}"),
                None => s += &format!(" {:>13}", "-"),
            }
        }
        s.push('\n');
    }
    let last = cfg.sweep.values.len() - 1;
    if let (Some(nr), Some(un)) = (median_ber(rows, Arm::NoRetrain, last), median_ber(rows, Arm::Unsupervised, last)) {
        s += &format!(
            "median no-retrain / unsupervised BER at d_cd = {}: {:.2}\n",
            cfg.sweep.values[last],
            nr / un
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoRun {
    pub float_ber: BerEstimate,
    pub points: Vec<ParetoPoint>,
    pub skipped: Vec<(f64, String)>,
}

/// Bit-width sweep on a model trained at the configured channel; γ values
/// run concurrently.
pub fn quant_pareto(cfg: &ExperimentConfig) -> Result<ParetoRun> {
    cfg.validate()?;
    let seed = cfg.seed;
    let channel = &cfg.channel;
    let base = train_from_scratch(cfg, channel, seed)?;
    let sweep = cfg.quant.options(&cfg.training);
    let qseed = substream(seed, label::QUANT);
    let float_ber = evaluate_ber(&base, channel, sweep.eval_symbols, substream(qseed, 0xF1))?;
    let profile = profile_ranges(
        &base,
        channel,
        &cfg.supervised_loss(),
        sweep.profile_sequences,
        sweep.search.sequence_symbols,
        substream(qseed, 0x9F),
    )?;
    let results: Vec<(f64, Result<ParetoPoint>)> = cfg
        .quant
        .gammas
        .par_iter()
        .enumerate()
        .map(|(i, &g)| (g, sweep_point(&base, channel, &profile, g, &sweep, substream(qseed, i as u64))))
        .collect();
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for (g, r) in results {
        match r {
            Ok(p) => points.push(p),
            Err(e @ Error::Diverged { .. }) => skipped.push((g, e.to_string())),
            Err(e) => return Err(e),
        }
    }
    mark_pareto(&mut points);
    Ok(ParetoRun {
        float_ber,
        points,
        skipped,
    })
}

fn join_bits(bits: &[u32]) -> String {
    bits.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

pub fn write_pareto_csv<W: Write>(run: &ParetoRun, out: W) -> Result<()> {
    let mut w = csv_writer(out, PARETO_SCHEMA)?;
    w.write_record([
        "gamma",
        "avg_bits",
        "ber",
        "pareto",
        "float_ber",
        "errors",
        "bits",
        "weight_bits",
        "activation_bits",
        "status",
    ])
    .map_err(csv_err)?;
    for p in &run.points {
        let n = p.bits.len() / 2;
        w.write_record([
            num(p.gamma),
            format!("{:.4}", p.avg_bits),
            Outcome::Measured(p.ber).ber_field(),
            u8::from(p.pareto).to_string(),
            Outcome::Measured(p.float_ber).ber_field(),
            p.ber.errors.to_string(),
            p.ber.bits.to_string(),
            join_bits(&p.bits[..n]),
            join_bits(&p.bits[n..]),
            "ok".into(),
        ])
        .map_err(csv_err)?;
    }
    for (g, _) in &run.skipped {
        w.write_record([num(*g), String::new(), "nan".into(), "0".into(), String::new(), String::new(), String::new(), String::new(), String::new(), "diverged".into()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelinePoint {
    pub name: String,
    pub macs_per_cycle: usize,
    pub throughput: Throughput,
    /// Worst stage, cycles per symbol.
    pub ii_per_symbol: f64,
    /// Estimated retraining time in seconds.
    pub retrain_s: f64,
    pub memory: MemoryReport,
}

/// Throughput, retraining time and buffer sizes for every parallelism
/// point.
pub fn pipeline_report(cfg: &ExperimentConfig) -> Result<Vec<PipelinePoint>> {
    cfg.validate()?;
    let bits = cfg.channel.scheme().bits_per_symbol() as u32;
    cfg.pipeline
        .dop_points
        .par_iter()
        .map(|p| {
            let pc = cfg.pipeline(&p.dop, bits);
            let throughput = pipeline_throughput(&pc)?;
            let ii = throughput.stages.iter().map(|s| s.ii_per_symbol).fold(0.0, f64::max);
            let sequence_cycles = cfg.training.sequence_symbols as f64 * ii;
            let retrain_s = cfg.pipeline.retrain_iterations as f64 * sequence_cycles / pc.clock_hz;
            let memory = memory_report(&pc, cfg.pipeline.report_symbols, &cfg.pipeline.activation_bits)?;
            Ok(PipelinePoint {
                name: p.name.clone(),
                macs_per_cycle: crate::pipeline::macs_per_cycle(&pc),
                throughput,
                ii_per_symbol: ii,
                retrain_s,
                memory,
            })
        })
        .collect()
}

pub fn write_pipeline_csv<W: Write>(points: &[PipelinePoint], out: W) -> Result<()> {
    let mut w = csv_writer(out, PIPELINE_SCHEMA)?;
    w.write_record([
        "dop_point",
        "macs_per_cycle",
        "ii_per_symbol",
        "throughput_sym_s",
        "throughput_bit_s",
        "bottleneck",
        "retrain_ms",
        "buffer",
        "max_occupancy_words",
        "naive_words",
        "word_bits",
    ])
    .map_err(csv_err)?;
    for p in points {
        for (name, naive, piped, bits) in &p.memory.buffers {
            w.write_record([
                p.name.clone(),
                p.macs_per_cycle.to_string(),
                num(p.ii_per_symbol),
                num(p.throughput.symbols_per_s),
                num(p.throughput.bits_per_s),
                p.throughput.bottleneck.clone(),
                format!("{:.6}", p.retrain_s * 1e3),
                name.clone(),
                piped.to_string(),
                naive.to_string(),
                bits.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn pipeline_summary(cfg: &ExperimentConfig, points: &[PipelinePoint]) -> String {
    let mut s = format!(
        "{:<10} {:>8} {:>10} {:>12} {:>11} {:>12} {:>12} {:>8}\n",
        "dop", "MAC/cyc", "II/symbol", "Msym/s", "retrain ms", "buffer bits", "naive bits", "ratio"
    );
    for p in points {
        s += &format!(
            "{:<10} {:>8} {:>10.3} {:>12.3} {:>11.3} {:>12} {:>12} {:>7.3}%\n",
            p.name,
            p.macs_per_cycle,
            p.ii_per_symbol,
            p.throughput.symbols_per_s / 1e6,
            p.retrain_s * 1e3,
            p.memory.pipelined_bits,
            p.memory.naive_bits,
            100.0 * p.memory.ratio()
        );
    }
    s += &format!(
        "retraining time: {} iterations of {} symbols; reference hardware: {REFERENCE_RETRAIN_MS} ms\n",
        cfg.pipeline.retrain_iterations, cfg.training.sequence_symbols
    );
    s += &format!("buffer sequence length: {} symbols\n", cfg.pipeline.report_symbols);
    s
}

/// BER of a stored model at every dispersion point, one seed.
pub fn evaluate_model<E: Equalizer + Sync + ?Sized>(cfg: &ExperimentConfig, eq: &E) -> Result<Vec<BerRow>> {
    cfg.validate()?;
    (0..cfg.sweep.values.len())
        .into_par_iter()
        .map(|k| {
            Ok(BerRow {
                point: k,
                d_cd: cfg.sweep.values[k],
                snr_db: None,
                arm: Arm::NoRetrain,
                seed: cfg.seed,
                outcome: Outcome::Measured(evaluate_at(cfg, eq, k, cfg.seed)?),
            })
        })
        .collect()
}

pub fn write_evaluate_csv<W: Write>(rows: &[BerRow], out: W) -> Result<()> {
    let mut w = csv_writer(out, EVALUATE_SCHEMA)?;
    w.write_record(["d_cd", "ber", "seed", "errors", "bits"]).map_err(csv_err)?;
    for r in rows {
        let (errors, bits, _) = r.outcome.counts();
        w.write_record([num(r.d_cd), r.outcome.ber_field(), r.seed.to_string(), errors, bits])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
