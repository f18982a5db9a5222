use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use ueq_core::checkpoint::{self, Model};
use ueq_core::config::ExperimentConfig;
use ueq_core::experiment::{self as exp, with_workers};
use ueq_core::selftest::{run_selftest, Mutation};
use ueq_core::volterra::volterra_train;
use ueq_core::{channel::ChannelConfig, Error};

/// Testbench for a blindly retrained CNN equalizer on a dispersive IM/DD link.
#[derive(Parser, Debug)]
#[command(name = "ueq", version)]
struct Cli {
    /// Experiment configuration (TOML). Defaults to the built-in PAM-2 setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; CSV commands write to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Five equalizer arms over the dispersion drift.
    SweepDispersion,
    /// BER against SNR for models retrained to the configured dispersions.
    SweepSnr,
    /// Learned bit-widths over the trade-off factors, with the Pareto front.
    QuantPareto,
    /// Throughput, retraining time and buffer sizes per parallelism point.
    PipelineReport,
    /// Gradient, convolution, loss and buffer property suites.
    Selftest {
        /// Deliberately broken build used to check that the suites fail.
        #[arg(long, value_enum, hide = true)]
        mutation: Option<MutationArg>,
    },
    /// Trains one model at the configured channel and writes a checkpoint.
    Train {
        #[arg(long, value_enum, default_value_t = ModelKind::Cnn)]
        model: ModelKind,
    },
    /// BER of a checkpoint at every dispersion point.
    Evaluate {
        /// Checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModelKind {
    Cnn,
    Volterra,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum MutationArg {
    WrongFlip,
}

/// Failure outside the library's validation, e.g. a failing self-test.
#[derive(Debug)]
struct ExperimentFailure(String);

impl std::fmt::Display for ExperimentFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ExperimentFailure {}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("{}: {io}", p.display())),
            other => other,
        })?,
        None => ExperimentConfig::with_channel(ChannelConfig::pam2_default(), 1),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn output_path(cli: &Cli, cfg: &ExperimentConfig) -> Option<PathBuf> {
    cli.out.clone().or_else(|| cfg.output.clone())
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let f = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            Box::new(BufWriter::new(f))
        }
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    cfg.validate()?;
    let out = output_path(cli, &cfg);
    match &cli.command {
        Command::SweepDispersion => {
            let rows = with_workers(cli.workers, || exp::sweep_dispersion(&cfg))??;
            exp::write_dispersion_csv(&rows, open_output(out.as_deref())?)?;
            eprint!("{}", exp::dispersion_summary(&cfg, &rows));
        }
        Command::SweepSnr => {
            let rows = with_workers(cli.workers, || exp::sweep_snr(&cfg))??;
            exp::write_snr_csv(&rows, open_output(out.as_deref())?)?;
            eprintln!("{} rows", rows.len());
        }
        Command::QuantPareto => {
            let run = with_workers(cli.workers, || exp::quant_pareto(&cfg))??;
            exp::write_pareto_csv(&run, open_output(out.as_deref())?)?;
            eprintln!("float BER {:.3e}", run.float_ber.ber());
            for p in &run.points {
                eprintln!(
                    "gamma {:<6} avg bits {:>6.2}  BER {:.3e}{}",
                    p.gamma,
                    p.avg_bits,
                    p.ber.ber(),
                    if p.pareto { "  pareto" } else { "" }
                );
            }
            for (g, why) in &run.skipped {
                eprintln!("gamma {g} skipped: {why}");
            }
        }
        Command::PipelineReport => {
            let points = with_workers(cli.workers, || exp::pipeline_report(&cfg))??;
            exp::write_pipeline_csv(&points, open_output(out.as_deref())?)?;
            eprint!("{}", exp::pipeline_summary(&cfg, &points));
        }
        Command::Selftest { mutation } => {
            let mutation = match mutation {
                Some(MutationArg::WrongFlip) => Mutation::WrongFlip,
                None => Mutation::None,
            };
            let suites = run_selftest(cfg.seed, mutation)?;
            let mut failed = 0;
            for s in &suites {
                println!(
                    "{:<18} {}  {} cases, {}",
                    s.name,
                    if s.passed() { "PASS" } else { "FAIL" },
                    s.cases,
                    s.detail
                );
                failed += usize::from(!s.passed());
            }
            if failed > 0 {
                return Err(ExperimentFailure(format!("{failed} self-test suite(s) failed")).into());
            }
        }
        Command::Train { model } => {
            let Some(path) = out else {
                bail!(Error::Config("train needs --out for the checkpoint".into()));
            };
            let model = match model {
                ModelKind::Cnn => {
                    Model::Cnn(exp::train_from_scratch(&cfg, &cfg.channel, cfg.seed)?)
                }
                ModelKind::Volterra => {
                    let mut spec = cfg.volterra.spec()?;
                    let losses = volterra_train(&mut spec, &cfg.channel, &cfg.volterra.options(cfg.seed))?;
                    eprintln!("final loss {:.5}", losses.last().copied().unwrap_or(f64::NAN));
                    Model::Volterra(spec)
                }
            };
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            checkpoint::save(&model, &path)?;
            eprintln!("wrote {} checkpoint to {}", model.kind(), path.display());
        }
        Command::Evaluate { model } => {
            let m = checkpoint::load(model)?;
            let rows = with_workers(cli.workers, || match &m {
                Model::Cnn(c) => exp::evaluate_model(&cfg, c),
                Model::Volterra(v) => exp::evaluate_model(&cfg, v),
            })??;
            exp::write_evaluate_csv(&rows, open_output(out.as_deref())?)?;
        }
    }
    Ok(())
}

/// 1 for invalid input, 2 for a failed experiment.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ExperimentFailure>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Diverged { .. } | Error::Deadlock(_) | Error::Io(_)) => 2,
        Some(_) => 1,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
