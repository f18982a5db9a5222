//! Built-in property suites: gradients against finite differences, the
//! convolution against a direct loop, the blind-loss laws and the buffer
//! invariance of the pipeline model.
//!
//! The suites are deterministic in their seed. [`Mutation::WrongFlip`]
//! swaps in an input-gradient path that forgets to reverse the kernel; the
//! gradient suite must catch it.

use crate::cnn::{conv1d_forward, conv1d_input_grad, conv1d_kernel_grad, Cnn, ConvLayerSpec, FeatureMap};
use crate::loss::{unsup_loss_pam2, unsup_loss_pam4, LossKind};
use crate::pipeline::{simulate_buffers, BufferMode, Dop, PipelineConfig};
use crate::rng::{self, substream};
use crate::Result;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Input gradient computed with the kernel taps in forward order.
    WrongFlip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed error of the suite's metric.
    pub worst: f64,
    pub detail: String,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

fn random_vec(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let v = x[i];
            x[i] = v + h;
            let up = f(&x);
            x[i] = v - h;
            let down = f(&x);
            x[i] = v;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn reverse_taps(spec: &ConvLayerSpec, w: &[f64]) -> Vec<f64> {
    let k = spec.kernel_size;
    w.chunks(k).flat_map(|c| c.iter().rev().copied()).collect()
}

/// Input and kernel gradients of `⟨g, conv(x, w)⟩` against central
/// differences on random instances with `C ≤ 3`, `N ≤ 32`,
/// `K ∈ {1, 3, 5, 21}`, `S ∈ {1, 2}`.
pub fn gradient_suite(cases: usize, seed: u64, mutation: Mutation) -> Result<SuiteOutcome> {
    let mut r = rng::seeded(substream(seed, 0x6AD));
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut first_failure = String::new();
    for case in 0..cases {
        let k = [1usize, 3, 5, 21][r.random_range(0..4)];
        let spec = ConvLayerSpec {
            in_channels: r.random_range(1..=3),
            out_channels: r.random_range(1..=3),
            kernel_size: k,
            padding: (k - 1) / 2,
            stride: r.random_range(1..=2),
            dilation: 1,
            relu: false,
        };
        let n = r.random_range(2..=32);
        let x = random_vec(&mut r, spec.in_channels * n);
        let w = random_vec(&mut r, spec.weight_count());
        let out_len = spec.output_len(n).expect("same padding always fits");
        let g = random_vec(&mut r, spec.out_channels * out_len);
        let objective = |x: &[f64], w: &[f64]| -> f64 {
            let xm = FeatureMap::from_vec(spec.in_channels, n, x.to_vec()).unwrap();
            let y = conv1d_forward(&xm, &spec, w).unwrap();
            y.as_slice().iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let gm = FeatureMap::from_vec(spec.out_channels, out_len, g.clone())?;
        let xm = FeatureMap::from_vec(spec.in_channels, n, x.clone())?;
        let w_for_input = match mutation {
            Mutation::None => w.clone(),
            Mutation::WrongFlip => reverse_taps(&spec, &w),
        };
        let gi = conv1d_input_grad(&gm, &spec, &w_for_input, n)?;
        let gk = conv1d_kernel_grad(&xm, &gm, &spec)?;
        let fd_x = central_diff(|x| objective(x, &w), &x, 1e-5);
        let fd_w = central_diff(|w| objective(&x, w), &w, 1e-5);
        let err = gi
            .as_slice()
            .iter()
            .zip(&fd_x)
            .chain(gk.iter().zip(&fd_w))
            .map(|(a, b)| rel_err(*a, *b))
            .fold(0.0, f64::max);
        worst = worst.max(err);
        if err >= 1e-5 {
            failures += 1;
            if first_failure.is_empty() {
                first_failure = format!("case {case}: {spec:?}, n = {n}, rel err {err:.2e}");
            }
        }
    }
    Ok(SuiteOutcome {
        name: "gradient",
        cases,
        failures,
        worst,
        detail: if failures == 0 {
            format!("max relative error {worst:.2e}")
        } else {
            first_failure
        },
    })
}

/// Direct evaluation with explicit zero padding.
pub fn naive_conv(input: &FeatureMap, spec: &ConvLayerSpec, w: &[f64]) -> Vec<f64> {
    let n = input.len();
    let p = spec.padding;
    let mut padded = vec![vec![0.0; n + 2 * p]; spec.in_channels];
    for (ci, row) in padded.iter_mut().enumerate() {
        row[p..p + n].copy_from_slice(input.channel(ci));
    }
    let out_len = (n + 2 * p - spec.dilation * (spec.kernel_size - 1) - 1) / spec.stride + 1;
    let mut out = Vec::with_capacity(spec.out_channels * out_len);
    for c in 0..spec.out_channels {
        for o in 0..out_len {
            let mut s = 0.0;
            for (ci, row) in padded.iter().enumerate() {
                for j in 0..spec.kernel_size {
                    s += w[(c * spec.in_channels + ci) * spec.kernel_size + j] * row[o * spec.stride + j * spec.dilation];
                }
            }
            out.push(if spec.relu { s.max(0.0) } else { s });
        }
    }
    out
}

/// The convolution against [`naive_conv`], absolute tolerance 1e-12.
pub fn conv_oracle_suite(cases: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut r = rng::seeded(substream(seed, 0xC0));
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let spec = ConvLayerSpec {
            in_channels: r.random_range(1..=3),
            out_channels: r.random_range(1..=3),
            kernel_size: [1, 3, 5, 21][r.random_range(0..4)],
            padding: r.random_range(0..=10),
            stride: r.random_range(1..=2),
            dilation: r.random_range(1..=2),
            relu: r.random(),
        };
        let n = r.random_range(spec.span()..=spec.span() + 32);
        let x = FeatureMap::from_vec(spec.in_channels, n, random_vec(&mut r, spec.in_channels * n))?;
        let w = random_vec(&mut r, spec.weight_count());
        let got = conv1d_forward(&x, &spec, &w)?;
        let want = naive_conv(&x, &spec, &w);
        let err = if got.as_slice().len() != want.len() {
            f64::INFINITY
        } else {
            got.as_slice().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        worst = worst.max(err);
        if err >= 1e-12 {
            failures += 1;
        }
    }
    Ok(SuiteOutcome {
        name: "conv-oracle",
        cases,
        failures,
        worst,
        detail: format!("max absolute error {worst:.2e}"),
    })
}

const PAM2: [f64; 2] = [-1.0, 1.0];
const PAM4: [f64; 4] = [-1.5, -0.5, 0.5, 1.5];

/// Blind-loss laws: the pull term vanishes exactly on the constellation
/// and only there, equal symbol counts balance the PAM-4 term exactly, and
/// both analytic gradients match central differences away from kinks.
pub fn loss_suite(cases: usize, seed: u64) -> Result<SuiteOutcome> {
    let mut r = rng::seeded(substream(seed, 0x105));
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut notes = Vec::new();
    for _ in 0..cases {
        // On the points: zero pull; one sample nudged off: positive pull.
        let n = r.random_range(1..=16);
        let mut z: Vec<f64> = (0..n).map(|_| PAM4[r.random_range(0..4)]).collect();
        let on = unsup_loss_pam4(&z, &PAM4, 4.0);
        let i = r.random_range(0..n);
        z[i] += r.random_range(0.01..0.4);
        let off = unsup_loss_pam4(&z, &PAM4, 4.0);
        if on.loss_a != 0.0 || off.loss_a <= 0.0 {
            failures += 1;
            notes.push("pull term");
        }

        // Equidistributed PAM-4 symbols in random order.
        let reps = r.random_range(1..=6);
        let mut eq: Vec<f64> = PAM4.iter().flat_map(|&p| std::iter::repeat_n(p, reps)).collect();
        for j in (1..eq.len()).rev() {
            eq.swap(j, r.random_range(0..=j));
        }
        if unsup_loss_pam4(&eq, &PAM4, 4.0).loss_b != 0.0 {
            failures += 1;
            notes.push("balance term");
        }

        // Gradients, skipping draws that sit on a kink.
        for (points, range) in [(&PAM2[..], (-2.0, 2.0)), (&PAM4[..], (-2.0, 2.0))] {
            let kind = LossKind::unsupervised(points, 4.0)?;
            let z: Vec<f64> = (0..r.random_range(1..=8)).map(|_| r.random_range(range.0..range.1)).collect();
            if z.iter().any(|v| points.iter().any(|a| (v - a).abs() < 1e-4)) {
                continue;
            }
            let kinks: Vec<f64> = if points.len() == 2 {
                let l = unsup_loss_pam2(&z, &PAM2, 4.0);
                vec![l.distances[0] - l.distances[1]]
            } else {
                let l = unsup_loss_pam4(&z, &PAM4, 4.0);
                let e: Vec<f64> = l.distances.iter().zip([1.0, 1.5, 1.5, 1.0]).map(|(d, w)| d * w).collect();
                vec![e[0] - e[3], e[1] - e[2], e[0] - e[1], e[3] - e[2]]
            };
            if kinks.iter().any(|k| k.abs() < 1e-4) {
                continue;
            }
            let (_, grad) = kind.evaluate(&z, None)?;
            let fd = central_diff(|z| kind.evaluate(z, None).unwrap().0, &z, 1e-6);
            let err = grad.iter().zip(&fd).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f64::max);
            worst = worst.max(err);
            if err >= 1e-6 {
                failures += 1;
                notes.push("gradient");
            }
        }
    }
    notes.dedup();
    Ok(SuiteOutcome {
        name: "loss",
        cases,
        failures,
        worst,
        detail: if failures == 0 {
            format!("max gradient relative error {worst:.2e}")
        } else {
            format!("failed: {}", notes.join(", "))
        },
    })
}

/// Buffer invariance of the default network: equal max occupancy for
/// N ∈ {256, 2048, 16384} symbols, and linear growth of the store-all mode.
pub fn buffer_suite() -> Result<SuiteOutcome> {
    let specs = Cnn::default_specs();
    let mut failures = 0;
    let mut notes = Vec::new();
    let mut cases = 0;
    for dop in [Dop::SERIAL, Dop { kernel: 7, ..Dop::SERIAL }, Dop { kernel: 21, in_channels: 3, out_channels: 3, instances: 1 }] {
        let cfg = PipelineConfig::from_specs(&specs, dop, 1);
        let occ = [256, 2048, 16384]
            .iter()
            .map(|&n| simulate_buffers(&cfg, n).map(|t| t.max_occupancies()))
            .collect::<Result<Vec<_>>>()?;
        cases += 1;
        if occ[0] != occ[1] || occ[1] != occ[2] {
            failures += 1;
            notes.push(format!("streaming occupancy varies with length: {occ:?}"));
        }
        let mut naive = cfg.clone();
        naive.mode = BufferMode::StoreAll;
        let a = simulate_buffers(&naive, 1024)?.total_max_words() as f64;
        let b = simulate_buffers(&naive, 2048)?.total_max_words() as f64;
        cases += 1;
        if !(1.9..=2.1).contains(&(b / a)) {
            failures += 1;
            notes.push(format!("store-all growth ratio {:.3}", b / a));
        }
    }
    Ok(SuiteOutcome {
        name: "buffer-invariance",
        cases,
        failures,
        worst: 0.0,
        detail: if failures == 0 {
            "streaming occupancy independent of length".into()
        } else {
            notes.join("; ")
        },
    })
}

/// All suites at their standard sizes.
pub fn run_selftest(seed: u64, mutation: Mutation) -> Result<Vec<SuiteOutcome>> {
    Ok(vec![
        gradient_suite(120, seed, mutation)?,
        conv_oracle_suite(1000, seed)?,
        loss_suite(200, seed)?,
        buffer_suite()?,
    ])
}
