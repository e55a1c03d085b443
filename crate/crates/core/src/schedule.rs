//! Variance schedules and the closed-form maps of the forward/reverse process.
//!
//! Conventions: `alpha(t)` is the *signal* coefficient, the square root of the
//! cumulative product of `1 - beta`, so that `x_t = alpha_t * x_0 +
//! sqrt(1 - alpha_t^2) * eps`. Steps are 1-based; `alpha(0) = 1`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything the diffusion maps can act on: scalars, matrices, point states.
pub trait StateTensor: Clone {
    fn shape(&self) -> (usize, usize);

    /// `a * self + b * other`, elementwise.
    fn lin_comb(&self, a: f64, other: &Self, b: f64) -> Self;

    fn scaled(&self, a: f64) -> Self;
}

impl StateTensor for f64 {
    fn shape(&self) -> (usize, usize) {
        (1, 1)
    }

    fn lin_comb(&self, a: f64, other: &Self, b: f64) -> Self {
        a * self + b * other
    }

    fn scaled(&self, a: f64) -> Self {
        a * self
    }
}

impl StateTensor for DMatrix<f64> {
    fn shape(&self) -> (usize, usize) {
        DMatrix::shape(self)
    }

    fn lin_comb(&self, a: f64, other: &Self, b: f64) -> Self {
        self.zip_map(other, |x, y| a * x + b * y)
    }

    fn scaled(&self, a: f64) -> Self {
        self * a
    }
}

fn check_shapes<T: StateTensor>(a: &T, b: &T) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            actual: b.shape(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant {
        beta: f64,
    },
    Linear {
        beta_start: f64,
        beta_end: f64,
    },
    /// `beta_t = start + (end - start) * ((t - 1) / (T - 1))^power`
    Polynomial {
        beta_start: f64,
        beta_end: f64,
        power: f64,
    },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Linear {
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

pub const DEFAULT_STEPS: usize = 1000;

fn check_beta(name: &str, beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "{name} = {beta} must lie in (0, 1)"
        )));
    }
    Ok(())
}

impl ScheduleKind {
    fn betas(&self, total: usize) -> Result<Vec<f64>> {
        // fraction of the way through the schedule for 1-based step t
        let frac = |t: usize| {
            if total == 1 {
                0.0
            } else {
                (t - 1) as f64 / (total - 1) as f64
            }
        };
        match *self {
            ScheduleKind::Constant { beta } => {
                check_beta("beta", beta)?;
                Ok(vec![beta; total])
            }
            ScheduleKind::Linear {
                beta_start,
                beta_end,
            } => {
                check_beta("beta_start", beta_start)?;
                check_beta("beta_end", beta_end)?;
                if beta_start > beta_end {
                    return Err(Error::InvalidParameter(format!(
                        "beta_start = {beta_start} exceeds beta_end = {beta_end}"
                    )));
                }
                Ok((1..=total)
                    .map(|t| beta_start + (beta_end - beta_start) * frac(t))
                    .collect())
            }
            ScheduleKind::Polynomial {
                beta_start,
                beta_end,
                power,
            } => {
                check_beta("beta_start", beta_start)?;
                check_beta("beta_end", beta_end)?;
                if beta_start > beta_end {
                    return Err(Error::InvalidParameter(format!(
                        "beta_start = {beta_start} exceeds beta_end = {beta_end}"
                    )));
                }
                if !(power > 0.0 && power.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "power = {power} must be positive"
                    )));
                }
                Ok((1..=total)
                    .map(|t| beta_start + (beta_end - beta_start) * frac(t).powf(power))
                    .collect())
            }
        }
    }
}

/// Precomputed `beta`, `alpha` and `sigma` tables for a `T`-step chain.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    /// length T + 1, `alphas[0] = 1`
    alphas: Vec<f64>,
    /// `1 - alpha_t^2`, accumulated directly to avoid cancellation near t = 0
    one_minus_alpha_sq: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::InvalidParameter("total_steps must be >= 1".into()));
        }
        let betas = kind.betas(total_steps)?;

        let mut alphas = Vec::with_capacity(total_steps + 1);
        let mut one_minus_alpha_sq = Vec::with_capacity(total_steps + 1);
        let mut prod = 1.0;
        alphas.push(1.0);
        one_minus_alpha_sq.push(0.0);
        for &beta in &betas {
            prod *= 1.0 - beta;
            alphas.push(prod.sqrt());
            one_minus_alpha_sq.push(1.0 - prod);
        }

        let sigmas = (1..=total_steps)
            .map(|t| {
                let ratio = one_minus_alpha_sq[t - 1] / one_minus_alpha_sq[t];
                (ratio * betas[t - 1]).sqrt()
            })
            .collect();

        Ok(Self {
            kind,
            betas,
            alphas,
            one_minus_alpha_sq,
            sigmas,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.total_steps() {
            return Err(Error::StepOutOfRange {
                step: t,
                total: self.total_steps(),
            });
        }
        Ok(())
    }

    /// `beta_t`, 1-based. Panics outside `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Signal coefficient, defined for `0..=T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// `sqrt(1 - alpha_t^2)`, defined for `0..=T`.
    pub fn noise_level(&self, t: usize) -> f64 {
        self.one_minus_alpha_sq[t].sqrt()
    }

    /// Posterior standard deviation used by the ancestral step into `t - 1`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Coefficients `(alpha_t / alpha_{t-1}, sqrt(1 - alpha_t^2 / alpha_{t-1}^2))`
    /// that re-noise a state at `t - 1` back to level `t`.
    pub fn projection_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let ratio = self.alphas[t] / self.alphas[t - 1];
        // alpha_t^2 / alpha_{t-1}^2 = 1 - beta_t exactly
        Ok((ratio, self.betas[t - 1].sqrt()))
    }

    /// `alpha_t * x0 + sqrt(1 - alpha_t^2) * eps`
    pub fn forward_diffuse<T: StateTensor>(&self, x0: &T, t: usize, eps: &T) -> Result<T> {
        self.check_step(t)?;
        check_shapes(x0, eps)?;
        Ok(x0.lin_comb(self.alpha(t), eps, self.noise_level(t)))
    }

    /// Mean of the reverse step `x_t -> x_{t-1}` given a noise prediction.
    pub fn posterior_mean<T: StateTensor>(&self, xt: &T, eps_pred: &T, t: usize) -> Result<T> {
        self.check_step(t)?;
        check_shapes(xt, eps_pred)?;
        let beta = self.beta(t);
        let inv = 1.0 / (1.0 - beta).sqrt();
        Ok(xt.lin_comb(inv, eps_pred, -inv * beta / self.noise_level(t)))
    }

    /// One-step denoised estimate `(x_t - sqrt(1 - alpha_t^2) * eps) / alpha_t`.
    pub fn t0_estimate<T: StateTensor>(&self, xt: &T, eps_pred: &T, t: usize) -> Result<T> {
        self.check_step(t)?;
        check_shapes(xt, eps_pred)?;
        let alpha = self.alpha(t);
        Ok(xt.lin_comb(1.0 / alpha, eps_pred, -self.noise_level(t) / alpha))
    }
}
