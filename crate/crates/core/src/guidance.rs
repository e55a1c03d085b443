//! Guidance gradients.
//!
//! All three mechanisms use the squared loss `(y - F)^2` and return the
//! negative loss gradient `2 (y - F) dF/dx`, so the guidance scale `s` is the
//! only free multiplier. Every output is a positions block: features never
//! receive guidance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Decoder, DenoiserSpec};
use crate::error::{Error, Result};
use crate::geomstate::{sample_perturbation, NormalSource, PointState};
use crate::schedule::{NoiseSchedule, StateTensor};
use crate::toyoracle::{radius_of_gyration, Scalarization};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Oracle guidance scale (the only scale in single-guidance modes).
    pub scale: f64,
    /// Property guidance scale used by the bilevel modes.
    pub property_scale: f64,
    /// SPSA perturbation size.
    pub zeta: f64,
    /// Guide steps with `t <= window`.
    pub window: usize,
    /// Guide only steps with `t % skip == 0`.
    pub skip: usize,
    /// Gradient-descent steps for clean guidance.
    pub clean_steps: usize,
    pub clean_lr: f64,
    /// Property target.
    pub target: f64,
    /// Oracle target; stability guidance drives the force towards zero.
    pub oracle_target: f64,
    pub scalarization: Scalarization,
    /// Independent SPSA probes averaged per guidance step.
    pub probes: usize,
    /// Optional cap on the Frobenius norm of a guidance gradient.
    pub max_norm: Option<f64>,
    /// Project perturbations to zero column means.
    pub center_perturbation: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 1e-4,
            property_scale: 0.0,
            zeta: 1e-6,
            window: 400,
            skip: 1,
            clean_steps: 1,
            clean_lr: 0.1,
            target: 0.0,
            oracle_target: 0.0,
            scalarization: Scalarization::Rms,
            probes: 1,
            max_norm: None,
            center_perturbation: true,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, total_steps: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return bad(format!("zeta = {} must be > 0", self.zeta));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return bad(format!("scale = {} must be >= 0", self.scale));
        }
        if !(self.property_scale >= 0.0 && self.property_scale.is_finite()) {
            return bad(format!(
                "property_scale = {} must be >= 0",
                self.property_scale
            ));
        }
        if self.skip == 0 {
            return bad("skip must be >= 1".into());
        }
        if self.window > total_steps {
            return bad(format!(
                "window = {} exceeds total steps {total_steps}",
                self.window
            ));
        }
        if self.clean_steps == 0 {
            return bad("clean_steps must be >= 1".into());
        }
        if !(self.clean_lr >= 0.0 && self.clean_lr.is_finite()) {
            return bad(format!("clean_lr = {} must be >= 0", self.clean_lr));
        }
        if self.probes == 0 {
            return bad("probes must be >= 1".into());
        }
        if let Some(cap) = self.max_norm {
            if cap.is_nan() || cap <= 0.0 {
                return bad(format!("max_norm = {cap} must be > 0"));
            }
        }
        Ok(())
    }

    /// Whether the reverse step out of `t` receives guidance.
    pub fn is_guided_step(&self, t: usize) -> bool {
        t >= 1 && t <= self.window && t.is_multiple_of(self.skip)
    }

    /// Number of guided steps in a chain.
    pub fn guided_step_count(&self) -> usize {
        self.window / self.skip
    }

    fn cap(&self, mut g: DMatrix<f64>) -> DMatrix<f64> {
        if let Some(cap) = self.max_norm {
            let norm = g.norm();
            if norm > cap {
                g *= cap / norm;
            }
        }
        g
    }
}

/// A differentiable property of decoded states.
pub trait Property: Send + Sync {
    /// Value and gradient with respect to positions.
    fn evaluate(&self, state: &PointState) -> (f64, DMatrix<f64>);
}

impl<F> Property for F
where
    F: Fn(&PointState) -> (f64, DMatrix<f64>) + Send + Sync,
{
    fn evaluate(&self, state: &PointState) -> (f64, DMatrix<f64>) {
        self(state)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RadiusOfGyration;

impl Property for RadiusOfGyration {
    fn evaluate(&self, state: &PointState) -> (f64, DMatrix<f64>) {
        radius_of_gyration(state.positions())
    }
}

/// Objective for oracle guidance: `F(z) = f(D(t0(z)))`, or `f(D(z))` at
/// `t = 0`. Scalarizes the oracle gradient; `None` on oracle failure.
pub fn composed_objective<'a>(
    oracle: &'a dyn crate::toyoracle::Oracle,
    decoder: &'a dyn Decoder,
    denoiser: &'a DenoiserSpec,
    sched: &'a NoiseSchedule,
    t: usize,
    scalarization: Scalarization,
) -> impl Fn(&PointState) -> Option<f64> + 'a {
    move |z: &PointState| {
        let clean = if t == 0 {
            z.clone()
        } else {
            let eps = denoiser.predict_noise(z, t, sched).ok()?;
            sched.t0_estimate(z, &eps, t).ok()?
        };
        let decoded = decoder.decode(&clean);
        crate::toyoracle::scalar_objective(oracle, decoded.positions(), scalarization)
    }
}

/// SPSA estimate of the oracle guidance gradient.
///
/// Evaluates `F` at the state and at `x +/- zeta U` for each probe, and
/// returns `2 (y - F(x))` times the probe-averaged `d U`, where
/// `d = (F(x + zeta U) - F(x - zeta U)) / (2 zeta)`. Any failed evaluation
/// zeroes the whole estimate.
pub fn spsa_oracle_gradient<F, S>(
    state: &PointState,
    objective: F,
    cfg: &GuidanceConfig,
    noise: &mut S,
) -> DMatrix<f64>
where
    F: Fn(&PointState) -> Option<f64>,
    S: NormalSource + ?Sized,
{
    let n = state.n_atoms();
    let probes: Vec<DMatrix<f64>> = (0..cfg.probes)
        .map(|_| sample_perturbation(n, noise, cfg.center_perturbation))
        .collect();
    let zero = || DMatrix::zeros(n, 3);

    let Some(value) = objective(state) else {
        return zero();
    };
    let mut sum = zero();
    for u in &probes {
        let step = u * cfg.zeta;
        let plus = objective(&state.with_positions(state.positions() + &step));
        let minus = objective(&state.with_positions(state.positions() - &step));
        match (plus, minus) {
            (Some(p), Some(m)) => sum += u * ((p - m) / (2.0 * cfg.zeta)),
            _ => return zero(),
        }
    }
    let prefactor = 2.0 * (cfg.oracle_target - value);
    cfg.cap(sum * (prefactor / cfg.probes as f64))
}

/// Property guidance through the one-step denoised estimate.
///
/// The property gradient at `D(x0_hat)` is pulled back through the decoder
/// and through `x0_hat = (x_t - sqrt(1 - a^2) eps(x_t)) / a`, whose Jacobian
/// is `(I - sqrt(1 - a^2) d eps/dx_t) / a`.
pub fn noisy_guidance_gradient(
    state: &PointState,
    t: usize,
    denoiser: &DenoiserSpec,
    decoder: &dyn Decoder,
    property: &dyn Property,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<DMatrix<f64>> {
    let eps = denoiser.predict_noise(state, t, sched)?;
    let x0 = sched.t0_estimate(state, &eps, t)?;
    let decoded = decoder.decode(&x0);
    let (value, grad_decoded) = property.evaluate(&decoded);
    let grad_x0 = decoder.pullback(&x0, &grad_decoded);

    let v = x0.zeros_like().with_positions(grad_x0);
    let jv = denoiser.noise_jvp(state, t, sched, &v)?;
    let alpha = sched.alpha(t);
    let pulled = v.lin_comb(1.0 / alpha, &jv, -sched.noise_level(t) / alpha);
    let mut grad = pulled.positions() * (2.0 * (cfg.target - value));
    if state.cog_constrained() {
        grad = crate::geomstate::project_zero_cog(&grad)?;
    }
    Ok(cfg.cap(grad))
}

/// `K` gradient-descent steps on `delta -> (y - f(x0_hat + delta))^2`,
/// starting from zero. Returns the final delta (positions) and the loss
/// before each step.
pub fn clean_guidance_delta(
    state: &PointState,
    t: usize,
    denoiser: &DenoiserSpec,
    property: &dyn Property,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let eps = denoiser.predict_noise(state, t, sched)?;
    let x0 = sched.t0_estimate(state, &eps, t)?;
    Ok(descend_clean(&x0, property, cfg))
}

pub(crate) fn descend_clean(
    x0: &PointState,
    property: &dyn Property,
    cfg: &GuidanceConfig,
) -> (DMatrix<f64>, Vec<f64>) {
    let mut delta = DMatrix::zeros(x0.n_atoms(), 3);
    let mut trace = Vec::with_capacity(cfg.clean_steps);
    for _ in 0..cfg.clean_steps {
        let shifted = x0.with_positions(x0.positions() + &delta);
        let (value, grad) = property.evaluate(&shifted);
        let residual = cfg.target - value;
        trace.push(residual * residual);
        // d/d delta (y - f)^2 = -2 (y - f) grad f
        delta += grad * (2.0 * residual * cfg.clean_lr);
    }
    (delta, trace)
}

/// Folds a clean-space shift back into the noise prediction:
/// `eps_tilde = eps - a / sqrt(1 - a^2) * delta`, and recomposes
/// `x_t = a (x0_hat + delta) + sqrt(1 - a^2) eps_tilde`, which equals the
/// original noisy state.
pub fn clean_recompose<T: StateTensor>(
    x_hat0: &T,
    delta: &T,
    eps_pred: &T,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<(T, T)> {
    sched.check_step(t)?;
    if x_hat0.shape() != delta.shape() || delta.shape() != eps_pred.shape() {
        return Err(Error::ShapeMismatch {
            expected: x_hat0.shape(),
            actual: if x_hat0.shape() != delta.shape() {
                delta.shape()
            } else {
                eps_pred.shape()
            },
        });
    }
    let alpha = sched.alpha(t);
    let noise = sched.noise_level(t);
    let eps_tilde = eps_pred.lin_comb(1.0, delta, -alpha / noise);
    let shifted = x_hat0.lin_comb(1.0, delta, 1.0);
    let xt = shifted.lin_comb(alpha, &eps_tilde, noise);
    Ok((xt, eps_tilde))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::IdentityDecoder;
    use crate::schedule::ScheduleKind;
    use crate::toyoracle::{Bond, ToyPotential};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Hands out one fixed block, then panics.
    struct Fixed(Option<DMatrix<f64>>);

    impl NormalSource for Fixed {
        fn position_block(&mut self, _n: usize) -> DMatrix<f64> {
            self.0.take().expect("only one block")
        }
        fn feature_block(&mut self, _n: usize, _d: usize) -> DMatrix<f64> {
            unreachable!()
        }
    }

    fn constant_sched() -> NoiseSchedule {
        NoiseSchedule::build(ScheduleKind::Constant { beta: 0.1 }, 3).unwrap()
    }

    fn uncentered(rows: &[f64]) -> PointState {
        let n = rows.len() / 3;
        PointState::new(DMatrix::from_row_slice(n, 3, rows), DMatrix::zeros(n, 0), false).unwrap()
    }

    #[test]
    fn spsa_exact_on_quadratic() {
        let state = uncentered(&[1.0, 0.0, 0.0]);
        let cfg = GuidanceConfig {
            center_perturbation: false,
            ..Default::default()
        };
        let quad = |s: &PointState| Some(s.positions().norm_squared());
        let mut fixed = Fixed(Some(DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0])));
        let g = spsa_oracle_gradient(&state, quad, &cfg, &mut fixed);
        for c in 0..3 {
            assert!((g[(0, c)] + 4.0).abs() < 1e-8, "{g}");
        }
    }

    #[test]
    fn spsa_constant_and_failing_objectives_give_zero() {
        let state = uncentered(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let cfg = GuidanceConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = spsa_oracle_gradient(&state, |_: &PointState| Some(3.0), &cfg, &mut rng);
        assert_eq!(g.amax(), 0.0);
        let g = spsa_oracle_gradient(&state, |_: &PointState| None, &cfg, &mut rng);
        assert_eq!(g.amax(), 0.0);
        // failure only on the perturbed side
        let x = state.positions().clone();
        let flaky = move |s: &PointState| (s.positions() == &x).then_some(1.0);
        let g = spsa_oracle_gradient(&state, flaky, &cfg, &mut rng);
        assert_eq!(g.amax(), 0.0);
    }

    #[test]
    fn spsa_mean_direction_is_unbiased() {
        let state = uncentered(&[1.0, 0.0, 0.0]);
        let cfg = GuidanceConfig {
            center_perturbation: false,
            ..Default::default()
        };
        let quad = |s: &PointState| Some(s.positions().norm_squared());
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let m = 100_000;
        let mut sum = DMatrix::zeros(1, 3);
        for _ in 0..m {
            // prefactor is 2 (0 - 1) = -2, divide it back out
            sum += spsa_oracle_gradient(&state, quad, &cfg, &mut rng) / -2.0;
        }
        let mean = sum / m as f64;
        let exact = DMatrix::from_row_slice(1, 3, &[2.0, 0.0, 0.0]);
        assert!((&mean - &exact).norm() / exact.norm() < 0.02, "{mean}");
    }

    #[test]
    fn spsa_centered_output_has_zero_column_means() {
        let pot = ToyPotential::new(vec![Bond { i: 0, j: 1, k: 1.0, r0: 1.0 }, Bond { i: 1, j: 2, k: 1.0, r0: 1.0 }], None);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let state = PointState::from_positions(rng.position_block(3)).unwrap();
        let cfg = GuidanceConfig {
            probes: 4,
            ..Default::default()
        };
        let obj = |s: &PointState| Some(pot.objective(s.positions()));
        let g = spsa_oracle_gradient(&state, obj, &cfg, &mut rng);
        assert!(g.amax() > 0.0);
        assert!(crate::geomstate::max_column_mean(&g) < 1e-10);
    }

    #[test]
    fn max_norm_caps_gradient() {
        let state = uncentered(&[1.0, 0.0, 0.0]);
        let cfg = GuidanceConfig {
            center_perturbation: false,
            max_norm: Some(1.0),
            ..Default::default()
        };
        let quad = |s: &PointState| Some(s.positions().norm_squared());
        let mut fixed = Fixed(Some(DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0])));
        let g = spsa_oracle_gradient(&state, quad, &cfg, &mut fixed);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }

    fn two_atoms() -> PointState {
        PointState::from_positions(DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0]))
            .unwrap()
    }

    #[test]
    fn noisy_guidance_zero_denoiser_example() {
        let s = constant_sched(); // alpha_2 = 0.9
        let cfg = GuidanceConfig {
            target: 2.0,
            ..Default::default()
        };
        // with a zero noise prediction x0_hat = x_t / 0.9, so atoms at
        // (+-0.9, 0, 0) give x0_hat at (+-1, 0, 0) and Rg = 1
        let state = PointState::from_positions(DMatrix::from_row_slice(
            2,
            3,
            &[0.9, 0.0, 0.0, -0.9, 0.0, 0.0],
        ))
        .unwrap();
        let g = noisy_guidance_gradient(
            &state,
            2,
            &DenoiserSpec::Zero,
            &IdentityDecoder,
            &RadiusOfGyration,
            &cfg,
            &s,
        )
        .unwrap();
        assert!((g[(0, 0)] - 1.0 / 0.9).abs() < 1e-12);
        assert_eq!((g[(0, 1)], g[(0, 2)]), (0.0, 0.0));
        assert!((1.0f64 / 0.9 - 1.1111).abs() < 1e-4);
    }

    #[test]
    fn noisy_guidance_vanishes_at_target() {
        let s = constant_sched();
        let state = two_atoms();
        let cfg = GuidanceConfig {
            target: 1.0 / 0.9, // Rg of x0_hat = x / 0.9
            ..Default::default()
        };
        let g = noisy_guidance_gradient(&state, 2, &DenoiserSpec::Zero, &IdentityDecoder, &RadiusOfGyration, &cfg, &s)
            .unwrap();
        assert!(g.amax() < 1e-12);
    }

    /// Loss `(y - Rg(D(t0(x))))^2` differentiated numerically along random
    /// centered directions.
    #[test]
    fn noisy_guidance_matches_finite_differences() {
        use crate::denoiser::{MixtureComponent, ScalingDecoder};
        let s = NoiseSchedule::build(ScheduleKind::default(), 1000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mean = PointState::from_positions(rng.position_block(5) * 1.5).unwrap();
        let other = PointState::from_positions(rng.position_block(5)).unwrap();
        let specs = [
            DenoiserSpec::Gaussian { mean: mean.clone(), scale: 0.4 },
            DenoiserSpec::Mixture(vec![
                MixtureComponent { weight: 0.4, mean: mean.clone(), scale: 0.4 },
                MixtureComponent { weight: 0.6, mean: other, scale: 0.8 },
            ]),
        ];
        let decoder = ScalingDecoder { factor: 1.3 };
        let cfg = GuidanceConfig { target: 0.7, ..Default::default() };
        for spec in &specs {
            for t in [10, 250, 600] {
                let x = PointState::from_positions(rng.position_block(5)).unwrap();
                let loss = |z: &PointState| {
                    let eps = spec.predict_noise(z, t, &s).unwrap();
                    let x0 = s.t0_estimate(z, &eps, t).unwrap();
                    let (v, _) = RadiusOfGyration.evaluate(&decoder.decode(&x0));
                    (cfg.target - v).powi(2)
                };
                let g = noisy_guidance_gradient(&x, t, spec, &decoder, &RadiusOfGyration, &cfg, &s).unwrap();
                for _ in 0..3 {
                    let dir = crate::geomstate::project_zero_cog(&rng.position_block(5)).unwrap();
                    let h = 1e-6;
                    let fd = (loss(&x.with_positions(x.positions() + &dir * h))
                        - loss(&x.with_positions(x.positions() - &dir * h)))
                        / (2.0 * h);
                    // guidance is the negative loss gradient
                    let analytic = -g.dot(&dir);
                    let rel = (fd - analytic).abs() / analytic.abs().max(1e-8);
                    assert!(rel < 1e-5, "t={t} fd={fd} analytic={analytic}");
                }
            }
        }
    }

    #[test]
    fn clean_delta_trivial_cases() {
        let s = constant_sched();
        let state = two_atoms();
        let no_lr = GuidanceConfig { clean_lr: 0.0, clean_steps: 5, target: 3.0, ..Default::default() };
        let (d, trace) = clean_guidance_delta(&state, 2, &DenoiserSpec::Zero, &RadiusOfGyration, &no_lr, &s).unwrap();
        assert_eq!(d.amax(), 0.0);
        assert_eq!(trace.len(), 5);
        let at_target = GuidanceConfig { target: 1.0 / 0.9, clean_steps: 7, ..Default::default() };
        let (d, _) = clean_guidance_delta(&state, 2, &DenoiserSpec::Zero, &RadiusOfGyration, &at_target, &s).unwrap();
        assert!(d.amax() < 1e-14);
    }

    #[test]
    fn clean_delta_reaches_linear_minimizer() {
        // f(x) = <b, x>; gradient descent from 0 converges to the minimum-norm
        // solution delta* = (y - <b, x0>) b / |b|^2
        let s = constant_sched();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = crate::geomstate::project_zero_cog(&rng.position_block(3)).unwrap();
        let bb = b.clone();
        let linear = move |st: &PointState| (bb.dot(st.positions()), bb.clone());
        let state = PointState::from_positions(rng.position_block(3)).unwrap();
        let cfg = GuidanceConfig {
            target: 1.5,
            clean_steps: 100,
            clean_lr: 0.25 / b.norm_squared(),
            ..Default::default()
        };
        let (delta, trace) = clean_guidance_delta(&state, 3, &DenoiserSpec::Zero, &linear, &cfg, &s).unwrap();
        let x0 = state.positions() / s.alpha(3);
        let expected = &b * ((1.5 - b.dot(&x0)) / b.norm_squared());
        assert!((&delta - &expected).amax() < 1e-3);
        assert!(trace[99] < trace[0]);
    }

    #[test]
    fn recompose_examples() {
        let s = constant_sched();
        let (xt, eps) = clean_recompose(&2.0, &0.0, &0.5, 2, &s).unwrap();
        assert_eq!(eps, 0.5);
        assert!((xt - s.forward_diffuse(&2.0, 2, &0.5).unwrap()).abs() < 1e-15);
        let (xt, eps) = clean_recompose(&2.0, &0.1, &0.5, 2, &s).unwrap();
        assert!((eps - 0.293526).abs() < 1e-6);
        assert!((xt - 2.017945).abs() < 1e-6);
        assert!(clean_recompose(&2.0, &0.1, &0.5, 4, &s).is_err());
    }

    proptest! {
        #[test]
        fn recompose_preserves_noisy_state(seed in any::<u64>(), t in 1usize..=1000) {
            let s = NoiseSchedule::build(ScheduleKind::default(), 1000).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = rng.position_block(4);
            let delta = rng.position_block(4);
            let eps = rng.position_block(4);
            let (xt, _) = clean_recompose(&x0, &delta, &eps, t, &s).unwrap();
            let direct = s.forward_diffuse(&x0, t, &eps).unwrap();
            prop_assert!((xt - direct).amax() <= 1e-12 * (1.0 + x0.amax() + delta.amax() + eps.amax()));
        }
    }
}
