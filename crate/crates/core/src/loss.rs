//! Training objectives: supervised MSE and the blind PAM-2 / PAM-4 losses.
//!
//! The blind losses have two parts. `loss_a = Σ_n p(z_n)` with
//! `p(z) = Π_i (z − A_i)²` pulls every output onto some constellation
//! point. `loss_b` compares the accumulated distances `d_i = Σ_n |z_n − A_i|`
//! and is zero when the outputs are spread evenly over the points, which
//! stops `loss_a` from collapsing every output onto a single point.
//!
//! For four points the inner points are closer to the rest of the
//! constellation, so their distances are scaled by `c(A_1)/c(A_i)` where
//! `c(A_i) = Σ_{j≠i} |A_i − A_j|` (3/2 for a uniform constellation).
//!
//! Subgradients use `sign(0) = 0`.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Mse,
    UnsupPam2,
    UnsupPam4,
}

/// Objective used by the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LossKind {
    pub variant: LossVariant,
    /// Sorted target points.
    pub constellation: Vec<f64>,
    pub mu: f64,
    /// Divide the blind losses by the sequence length.
    pub normalize: bool,
}

pub const DEFAULT_MU: f64 = 4.0;

impl LossKind {
    pub fn mse(constellation: &[f64]) -> Self {
        Self {
            variant: LossVariant::Mse,
            constellation: constellation.to_vec(),
            mu: DEFAULT_MU,
            normalize: true,
        }
    }

    /// The blind loss matching the constellation size.
    pub fn unsupervised(constellation: &[f64], mu: f64) -> Result<Self> {
        let variant = match constellation.len() {
            2 => LossVariant::UnsupPam2,
            4 => LossVariant::UnsupPam4,
            m => return Err(Error::config(format!("no blind loss for {m} points"))),
        };
        let kind = Self {
            variant,
            constellation: constellation.to_vec(),
            mu,
            normalize: true,
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config(format!("mu = {} must be finite and ≥ 0", self.mu)));
        }
        if self.constellation.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("constellation must be sorted"));
        }
        let expected = match self.variant {
            LossVariant::Mse => None,
            LossVariant::UnsupPam2 => Some(2),
            LossVariant::UnsupPam4 => Some(4),
        };
        if let Some(m) = expected {
            if self.constellation.len() != m {
                return Err(Error::config(format!(
                    "{:?} needs {m} points, got {}",
                    self.variant,
                    self.constellation.len()
                )));
            }
        }
        Ok(())
    }

    pub fn is_supervised(&self) -> bool {
        self.variant == LossVariant::Mse
    }

    /// Loss value and gradient with respect to `z`. `targets` is required
    /// for MSE and ignored otherwise.
    pub fn evaluate(&self, z: &[f64], targets: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
        let (loss, mut grad) = match self.variant {
            LossVariant::Mse => {
                let x = targets.ok_or_else(|| Error::config("MSE needs target symbols"))?;
                return mse_loss(z, x);
            }
            LossVariant::UnsupPam2 => {
                let a = [self.constellation[0], self.constellation[1]];
                let l = unsup_loss_pam2(z, &a, self.mu);
                (l.total, l.grad)
            }
            LossVariant::UnsupPam4 => {
                let a = [
                    self.constellation[0],
                    self.constellation[1],
                    self.constellation[2],
                    self.constellation[3],
                ];
                let l = unsup_loss_pam4(z, &a, self.mu);
                (l.total, l.grad)
            }
        };
        if self.normalize && !z.is_empty() {
            let scale = 1.0 / z.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            Ok((loss * scale, grad))
        } else {
            Ok((loss, grad))
        }
    }
}

/// (1/N)·Σ(z − x)² and its gradient 2(z − x)/N.
pub fn mse_loss(z: &[f64], x: &[f64]) -> Result<(f64, Vec<f64>)> {
    if z.len() != x.len() {
        return Err(Error::LengthMismatch {
            expected: x.len(),
            actual: z.len(),
        });
    }
    if z.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = z.len() as f64;
    let loss = z.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let grad = z.iter().zip(x).map(|(a, b)| 2.0 * (a - b) / n).collect();
    Ok((loss, grad))
}

/// p(z) = Π_i (z − A_i)².
pub fn poly_push(z: f64, points: &[f64]) -> f64 {
    points.iter().map(|a| (z - a) * (z - a)).product()
}

/// dp/dz by the product rule.
pub fn poly_push_grad(z: f64, points: &[f64]) -> f64 {
    (0..points.len())
        .map(|i| {
            let rest: f64 = points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, a)| (z - a) * (z - a))
                .product();
            2.0 * (z - points[i]) * rest
        })
        .sum()
}

/// c(A_i) = Σ_{j≠i} |A_i − A_j|.
pub fn c_weight(points: &[f64], i: usize) -> f64 {
    points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, a)| (points[i] - a).abs())
        .sum()
}

/// Components of a blind loss evaluation, unnormalized.
#[derive(Debug, Clone, PartialEq)]
pub struct UnsupervisedLoss {
    pub loss_a: f64,
    pub loss_b: f64,
    /// Accumulated distances d_i.
    pub distances: Vec<f64>,
    pub total: f64,
    pub grad: Vec<f64>,
}

fn distances(z: &[f64], points: &[f64]) -> Vec<f64> {
    points.iter().map(|a| z.iter().map(|v| (v - a).abs()).sum()).collect()
}

fn loss_a_and_grad(z: &[f64], points: &[f64]) -> (f64, Vec<f64>) {
    let loss = z.iter().map(|&v| poly_push(v, points)).sum();
    let grad = z.iter().map(|&v| poly_push_grad(v, points)).collect();
    (loss, grad)
}

/// loss_a + μ·|d_1 − d_2|.
pub fn unsup_loss_pam2(z: &[f64], points: &[f64; 2], mu: f64) -> UnsupervisedLoss {
    let (loss_a, mut grad) = loss_a_and_grad(z, points);
    let d = distances(z, points);
    let loss_b = (d[0] - d[1]).abs();
    let s = sign(d[0] - d[1]);
    for (g, &v) in grad.iter_mut().zip(z) {
        *g += mu * s * (sign(v - points[0]) - sign(v - points[1]));
    }
    UnsupervisedLoss {
        loss_a,
        loss_b,
        distances: d,
        total: loss_a + mu * loss_b,
        grad,
    }
}

/// loss_a + μ·(|e_1 − e_4| + |e_2 − e_3| + |e_1 − e_2| + |e_4 − e_3|) with
/// e_i = d_i·c(A_1)/c(A_i).
pub fn unsup_loss_pam4(z: &[f64], points: &[f64; 4], mu: f64) -> UnsupervisedLoss {
    let (loss_a, mut grad) = loss_a_and_grad(z, points);
    let d = distances(z, points);
    let c1 = c_weight(points, 0);
    let w: Vec<f64> = (0..4).map(|i| c1 / c_weight(points, i)).collect();
    let e: Vec<f64> = d.iter().zip(&w).map(|(d, w)| d * w).collect();
    let loss_b = (e[0] - e[3]).abs() + (e[1] - e[2]).abs() + (e[0] - e[1]).abs() + (e[3] - e[2]).abs();

    let s14 = sign(e[0] - e[3]);
    let s23 = sign(e[1] - e[2]);
    let s12 = sign(e[0] - e[1]);
    let s43 = sign(e[3] - e[2]);
    let de = [s14 + s12, s23 - s12, -s23 - s43, -s14 + s43];
    for (g, &v) in grad.iter_mut().zip(z) {
        let db: f64 = (0..4).map(|i| de[i] * w[i] * sign(v - points[i])).sum();
        *g += mu * db;
    }
    UnsupervisedLoss {
        loss_a,
        loss_b,
        distances: d,
        total: loss_a + mu * loss_b,
        grad,
    }
}
