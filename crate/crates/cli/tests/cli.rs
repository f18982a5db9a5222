use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 11

[channel]
modulation = "pam2"
symbol_rate_gbd = 25.0
snr_db = 20.0
front_end = "ac_normalized"

[training]
initial_iterations = 30
retrain_iterations = 5
sequence_symbols = 128

[volterra]
iterations = 10
sequence_symbols = 128
calibration_symbols = 256

[quant]
gammas = [0.0, 0.01, 0.1]
iterations = 3
eval_symbols = 256
profile_sequences = 1

[pipeline]
report_symbols = 256

[sweep]
seeds = 2
eval_symbols = 256

[sweep.snr]
values = [10.0, 20.0]
d_cd = [18.8]
"#;

fn ueq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ueq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn run_to_file(dir: &Path, config: &Path, verb: &str, name: &str, extra: &[&str]) -> String {
    let out = dir.join(name);
    let mut args = vec![verb, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = ueq(&args);
    assert!(o.status.success(), "{verb}: {}", String::from_utf8_lossy(&o.stderr));
    std::fs::read_to_string(out).unwrap()
}

#[test]
fn selftest_passes_and_mutant_fails() {
    let ok = ueq(&["selftest"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = ueq(&["selftest", "--mutation", "wrong-flip"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("gradient           FAIL"));
}

#[test]
fn validation_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ueq(&["no-such-verb"]).status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, TINY.replace("seeds = 2", "seeds = 0")).unwrap();
    let o = ueq(&["pipeline-report", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(ueq(&["pipeline-report", "--config", "/nonexistent.toml"]).status.code(), Some(1));
    // `train` without a destination.
    let cfg = tiny_config(dir.path());
    assert_eq!(ueq(&["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, "not a checkpoint").unwrap();
    let o = ueq(&["evaluate", "--config", cfg.to_str().unwrap(), "--model", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_dispersion_is_deterministic_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = run_to_file(dir.path(), &cfg, "sweep-dispersion", "a.csv", &["--workers", "1"]);
    let b = run_to_file(dir.path(), &cfg, "sweep-dispersion", "b.csv", &["--workers", "3"]);
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert!(lines[0].starts_with("# schema: "));
    assert_eq!(lines[1], "d_cd,arm,ber,seed,errors,bits,status");
    assert_eq!(lines.len(), 2 + 5 * 6 * 2);
    let c = run_to_file(dir.path(), &cfg, "sweep-dispersion", "c.csv", &["--seed", "12"]);
    assert_ne!(a, c);
}

#[test]
fn snr_quant_and_pipeline_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for verb in ["sweep-snr", "quant-pareto", "pipeline-report"] {
        let a = run_to_file(dir.path(), &cfg, verb, "a.csv", &[]);
        let b = run_to_file(dir.path(), &cfg, verb, "b.csv", &[]);
        assert_eq!(a, b, "{verb}");
        assert!(a.starts_with("# schema: ueq/"), "{verb}");
    }
    let pareto = run_to_file(dir.path(), &cfg, "quant-pareto", "p.csv", &[]);
    assert!(pareto.lines().nth(1).unwrap().starts_with("gamma,avg_bits,ber,pareto"));
    let snr = run_to_file(dir.path(), &cfg, "sweep-snr", "s.csv", &[]);
    assert_eq!(snr.lines().count(), 2 + 2 * 3 * 2);
}

#[test]
fn train_then_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for kind in ["cnn", "volterra"] {
        let ckpt = dir.path().join(format!("{kind}.ckpt"));
        let o = ueq(&[
            "train",
            "--model",
            kind,
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            ckpt.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = std::fs::read_to_string(&ckpt).unwrap();
        assert!(text.starts_with(&format!("ueq-checkpoint 1\ntype {kind}\n")));
        let m = ckpt.to_str().unwrap();
        let a = run_to_file(dir.path(), &cfg, "evaluate", "ea.csv", &["--model", m]);
        let b = run_to_file(dir.path(), &cfg, "evaluate", "eb.csv", &["--model", m]);
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 2 + 6);
    }
}

#[test]
fn checked_in_config_is_accepted() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/experiment.toml");
    let o = ueq(&["pipeline-report", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("3.3 ms"));
}
