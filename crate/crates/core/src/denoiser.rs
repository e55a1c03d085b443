//! Closed-form noise predictors.
//!
//! For a Gaussian target `N(m, s^2 I)` the noised marginal at step `t` is
//! `N(alpha_t m, (alpha_t^2 s^2 + 1 - alpha_t^2) I)`, whose score is known in
//! closed form. The optimal noise prediction is `-sqrt(1 - alpha_t^2)` times
//! that score. A mixture target gives the responsibility-weighted average of
//! the per-component predictions.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::geomstate::PointState;
use crate::schedule::{NoiseSchedule, StateTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: PointState,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserSpec {
    /// Always predicts zero noise.
    Zero,
    Gaussian { mean: PointState, scale: f64 },
    Mixture(Vec<MixtureComponent>),
}

/// Per-component quantities at a given noise level.
struct Component<'a> {
    log_weight: f64,
    mean: &'a PointState,
    scale: f64,
}

impl DenoiserSpec {
    /// Isotropic standard normal target centered at the origin.
    pub fn standard(n_atoms: usize, n_features: usize) -> Self {
        DenoiserSpec::Gaussian {
            mean: PointState::from_parts_unchecked(
                DMatrix::zeros(n_atoms, 3),
                DMatrix::zeros(n_atoms, n_features),
                true,
            ),
            scale: 1.0,
        }
    }

    /// Checks the spec against the shape of the states it will see.
    pub fn validate(&self, n_atoms: usize, n_features: usize) -> Result<()> {
        let check_mean = |mean: &PointState, scale: f64| -> Result<()> {
            if mean.n_atoms() != n_atoms || mean.n_features() != n_features {
                return Err(Error::InvalidSpec(format!(
                    "mean has shape {}x(3+{}), states are {}x(3+{})",
                    mean.n_atoms(),
                    mean.n_features(),
                    n_atoms,
                    n_features
                )));
            }
            if !(scale >= 0.0 && scale.is_finite()) {
                return Err(Error::InvalidSpec(format!("scale {scale} must be >= 0")));
            }
            if mean.cog_constrained() && mean.max_column_mean() > crate::geomstate::COG_TOLERANCE
            {
                return Err(Error::InvalidSpec("mean is not centered".into()));
            }
            Ok(())
        };
        match self {
            DenoiserSpec::Zero => Ok(()),
            DenoiserSpec::Gaussian { mean, scale } => check_mean(mean, *scale),
            DenoiserSpec::Mixture(components) => {
                if components.is_empty() {
                    return Err(Error::InvalidSpec("mixture has no components".into()));
                }
                let mut total = 0.0;
                for c in components {
                    if c.weight.is_nan() || c.weight <= 0.0 {
                        return Err(Error::InvalidSpec(format!(
                            "mixture weight {} must be positive",
                            c.weight
                        )));
                    }
                    total += c.weight;
                    check_mean(&c.mean, c.scale)?;
                }
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidSpec(format!(
                        "mixture weights sum to {total}"
                    )));
                }
                Ok(())
            }
        }
    }

    fn components(&self) -> Vec<Component<'_>> {
        match self {
            DenoiserSpec::Zero => Vec::new(),
            DenoiserSpec::Gaussian { mean, scale } => vec![Component {
                log_weight: 0.0,
                mean,
                scale: *scale,
            }],
            DenoiserSpec::Mixture(cs) => cs
                .iter()
                .map(|c| Component {
                    log_weight: c.weight.ln(),
                    mean: &c.mean,
                    scale: c.scale,
                })
                .collect(),
        }
    }

    /// Noise prediction for `state` at step `t`.
    pub fn predict_noise(
        &self,
        state: &PointState,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<PointState> {
        sched.check_step(t)?;
        if !state.is_finite() {
            return Err(Error::NonFinite("denoiser input"));
        }
        let posterior = self.posterior(state, t, sched)?;
        let noise = sched.noise_level(t);
        let mut out = state.zeros_like();
        for (r, _, score) in &posterior {
            out = out.lin_comb(1.0, score, -noise * r);
        }
        Ok(out)
    }

    /// Product of the noise-prediction Jacobian with `v`. The Jacobian is
    /// `-sqrt(1 - alpha_t^2)` times the Hessian of the log density and is
    /// therefore symmetric, so this is also the vector-Jacobian product.
    pub fn noise_jvp(
        &self,
        state: &PointState,
        t: usize,
        sched: &NoiseSchedule,
        v: &PointState,
    ) -> Result<PointState> {
        sched.check_step(t)?;
        let posterior = self.posterior(state, t, sched)?;
        let noise = sched.noise_level(t);
        let mut out = state.zeros_like();
        let mut mean_score = state.zeros_like();
        for (r, var, score) in &posterior {
            // sum_k r_k (v / v_k - (s_k . v) s_k)
            out = out.lin_comb(1.0, v, r / var);
            out = out.lin_comb(1.0, score, -r * score.dot(v));
            mean_score = mean_score.lin_comb(1.0, score, *r);
        }
        out = out.lin_comb(1.0, &mean_score, mean_score.dot(v));
        Ok(out.scaled(noise))
    }

    /// `(responsibility, marginal variance, score)` for each component.
    fn posterior(
        &self,
        state: &PointState,
        t: usize,
        sched: &NoiseSchedule,
    ) -> Result<Vec<(f64, f64, PointState)>> {
        let alpha = sched.alpha(t);
        let noise_sq = sched.noise_level(t).powi(2);
        let comps = self.components();
        for c in &comps {
            if c.mean.n_atoms() != state.n_atoms() || c.mean.n_features() != state.n_features() {
                return Err(Error::InvalidSpec("mean shape does not match state".into()));
            }
        }
        // dimension of the space the Gaussian lives on
        let n = state.n_atoms();
        let pos_dim = if state.cog_constrained() { 3 * (n - 1) } else { 3 * n };
        let dim = (pos_dim + n * state.n_features()) as f64;

        let mut terms: Vec<(f64, f64, PointState)> = comps
            .iter()
            .map(|c| {
                let var = alpha * alpha * c.scale * c.scale + noise_sq;
                let diff = state.lin_comb(1.0, c.mean, -alpha);
                let log_r =
                    c.log_weight - 0.5 * dim * var.ln() - 0.5 * diff.dot(&diff) / var;
                (log_r, var, diff.scaled(-1.0 / var))
            })
            .collect();

        if terms.len() == 1 {
            terms[0].0 = 1.0;
            return Ok(terms);
        }
        let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = terms.iter().map(|t| (t.0 - max).exp()).sum();
        for term in &mut terms {
            term.0 = (term.0 - max).exp() / norm;
        }
        Ok(terms)
    }
}

/// Maps a latent state to the space the property and the oracle see.
pub trait Decoder: Send + Sync {
    fn decode(&self, latent: &PointState) -> PointState;

    /// Pulls a gradient with respect to decoded positions back to latent
    /// positions.
    fn pullback(&self, latent: &PointState, grad: &DMatrix<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDecoder;

impl Decoder for IdentityDecoder {
    fn decode(&self, latent: &PointState) -> PointState {
        latent.clone()
    }

    fn pullback(&self, _latent: &PointState, grad: &DMatrix<f64>) -> DMatrix<f64> {
        grad.clone()
    }
}

/// Scales positions by a constant; features pass through.
#[derive(Debug, Clone, Copy)]
pub struct ScalingDecoder {
    pub factor: f64,
}

impl Decoder for ScalingDecoder {
    fn decode(&self, latent: &PointState) -> PointState {
        latent.with_positions(latent.positions() * self.factor)
    }

    fn pullback(&self, _latent: &PointState, grad: &DMatrix<f64>) -> DMatrix<f64> {
        grad * self.factor
    }
}
