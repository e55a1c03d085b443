//! Reverse-diffusion chains, unguided and guided.
//!
//! Each chain owns two normal streams: `sampling` feeds the initial state,
//! the ancestral noise and the bilevel re-noising step; `guidance` feeds SPSA
//! perturbations and evolutionary variants. Guidance therefore never shifts
//! the sampling stream, and a guided chain with a zero scale, an empty window
//! or a skip that lands outside the window reproduces the unguided chain bit
//! for bit.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Decoder, DenoiserSpec};
use crate::error::{Error, Result};
use crate::geomstate::{sample_perturbation, NormalSource, PointState};
use crate::guidance::{
    clean_recompose, composed_objective, descend_clean, noisy_guidance_gradient,
    spsa_oracle_gradient, GuidanceConfig, Property,
};
use crate::schedule::{NoiseSchedule, StateTensor};
use crate::toyoracle::Oracle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Unguided,
    Oracle,
    Noisy,
    Clean,
    BilevelNoisy,
    BilevelClean,
    Evolutionary,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Unguided,
        Mode::Oracle,
        Mode::Noisy,
        Mode::Clean,
        Mode::BilevelNoisy,
        Mode::BilevelClean,
        Mode::Evolutionary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Unguided => "unguided",
            Mode::Oracle => "oracle",
            Mode::Noisy => "noisy",
            Mode::Clean => "clean",
            Mode::BilevelNoisy => "bilevel-noisy",
            Mode::BilevelClean => "bilevel-clean",
            Mode::Evolutionary => "evolutionary",
        }
    }

    pub fn needs_oracle(self) -> bool {
        matches!(
            self,
            Mode::Oracle | Mode::BilevelNoisy | Mode::BilevelClean | Mode::Evolutionary
        )
    }

    pub fn needs_property(self) -> bool {
        matches!(
            self,
            Mode::Noisy | Mode::Clean | Mode::BilevelNoisy | Mode::BilevelClean
        )
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvoConfig {
    /// Population size after a spawn, the unperturbed state included.
    pub variant_size: usize,
    /// Spawn variants when `t % interval == 0`.
    pub interval: usize,
    pub variant_scale: f64,
}

impl Default for EvoConfig {
    fn default() -> Self {
        Self {
            variant_size: 5,
            interval: 50,
            variant_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub n_samples: usize,
    pub n_atoms: usize,
    pub n_features: usize,
    pub seed: u64,
    pub mode: Mode,
    pub guidance: GuidanceConfig,
    pub evo: Option<EvoConfig>,
}

impl RunConfig {
    pub fn new(mode: Mode, n_samples: usize, n_atoms: usize, seed: u64) -> Self {
        Self {
            n_samples,
            n_atoms,
            n_features: 0,
            seed,
            mode,
            guidance: GuidanceConfig::default(),
            evo: (mode == Mode::Evolutionary).then(EvoConfig::default),
        }
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidParameter("n_samples must be >= 1".into()));
        }
        if self.n_atoms == 0 {
            return Err(Error::InvalidParameter("n_atoms must be >= 1".into()));
        }
        self.guidance.validate(total_steps)?;
        if self.mode == Mode::Evolutionary {
            let evo = self.evo.ok_or_else(|| {
                Error::InvalidParameter("evolutionary mode needs an evo config".into())
            })?;
            if evo.variant_size == 0 || evo.interval == 0 {
                return Err(Error::InvalidParameter(
                    "variant_size and interval must be >= 1".into(),
                ));
            }
            if !(evo.variant_scale > 0.0 && evo.variant_scale.is_finite()) {
                return Err(Error::InvalidParameter(
                    "variant_scale must be > 0".into(),
                ));
            }
        }
        Ok(())
    }
}

/// The two normal streams a chain draws from.
pub struct ChainNoise<'n> {
    pub sampling: &'n mut dyn NormalSource,
    pub guidance: &'n mut dyn NormalSource,
}

/// Independent, reproducible streams for chain `index` of a run.
pub fn chain_rngs(seed: u64, index: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut sampling = ChaCha8Rng::seed_from_u64(seed);
    sampling.set_stream(2 * index as u64);
    let mut guidance = ChaCha8Rng::seed_from_u64(seed);
    guidance.set_stream(2 * index as u64 + 1);
    (sampling, guidance)
}

/// Index of the smallest squared objective; failed evaluations never win
/// unless every evaluation failed. Ties go to the lowest index.
pub fn select_best(objectives: &[Option<f64>]) -> usize {
    let key = |v: &Option<f64>| match v {
        Some(x) if !x.is_nan() => x * x,
        _ => f64::INFINITY,
    };
    let mut best = 0;
    for (i, v) in objectives.iter().enumerate().skip(1) {
        if key(v) < key(&objectives[best]) {
            best = i;
        }
    }
    best
}

pub struct Sampler<'a> {
    pub schedule: &'a NoiseSchedule,
    pub denoiser: &'a DenoiserSpec,
    pub decoder: &'a dyn Decoder,
    pub oracle: Option<&'a dyn Oracle>,
    pub property: Option<&'a dyn Property>,
    pub config: &'a RunConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(
        schedule: &'a NoiseSchedule,
        denoiser: &'a DenoiserSpec,
        decoder: &'a dyn Decoder,
        oracle: Option<&'a dyn Oracle>,
        property: Option<&'a dyn Property>,
        config: &'a RunConfig,
    ) -> Result<Self> {
        config.validate(schedule.total_steps())?;
        denoiser.validate(config.n_atoms, config.n_features)?;
        let sampler = Self {
            schedule,
            denoiser,
            decoder,
            oracle,
            property,
            config,
        };
        sampler.check_mode(config.mode)?;
        Ok(sampler)
    }

    fn check_mode(&self, mode: Mode) -> Result<()> {
        if mode.needs_oracle() && self.oracle.is_none() {
            return Err(Error::Config(format!("mode {mode} needs an oracle")));
        }
        if mode.needs_property() && self.property.is_none() {
            return Err(Error::Config(format!("mode {mode} needs a property")));
        }
        if mode == Mode::Evolutionary && self.config.evo.is_none() {
            return Err(Error::Config("mode evolutionary needs an evo config".into()));
        }
        Ok(())
    }

    /// All chains of the configured mode, in chain order.
    pub fn run(&self) -> Result<Vec<PointState>> {
        self.run_mode(self.config.mode)
    }

    pub fn run_mode(&self, mode: Mode) -> Result<Vec<PointState>> {
        self.check_mode(mode)?;
        (0..self.config.n_samples)
            .into_par_iter()
            .map(|i| self.run_chain(mode, i))
            .collect()
    }

    pub fn sample_unguided(&self) -> Result<Vec<PointState>> {
        self.run_mode(Mode::Unguided)
    }

    pub fn sample_oracle_guided(&self) -> Result<Vec<PointState>> {
        self.run_mode(Mode::Oracle)
    }

    pub fn sample_noisy_guided(&self) -> Result<Vec<PointState>> {
        self.run_mode(Mode::Noisy)
    }

    pub fn sample_clean_guided(&self) -> Result<Vec<PointState>> {
        self.run_mode(Mode::Clean)
    }

    pub fn sample_bilevel_noisy(&self) -> Result<Vec<PointState>> {
        self.run_mode(Mode::BilevelNoisy)
    }

    pub fn sample_bilevel_clean(&self) -> Result<Vec<PointState>> {
        self.run_mode(Mode::BilevelClean)
    }

    pub fn sample_evolutionary(&self) -> Result<Vec<PointState>> {
        self.run_mode(Mode::Evolutionary)
    }

    /// One chain with its default streams.
    pub fn run_chain(&self, mode: Mode, index: usize) -> Result<PointState> {
        let (mut sampling, mut guidance) = chain_rngs(self.config.seed, index);
        let noise = ChainNoise {
            sampling: &mut sampling,
            guidance: &mut guidance,
        };
        self.run_chain_with(mode, noise, &mut |_, _| {})
    }

    /// One chain with caller-supplied streams. `observer` sees the state at
    /// every level from `T` down to 0.
    pub fn run_chain_with(
        &self,
        mode: Mode,
        noise: ChainNoise<'_>,
        observer: &mut dyn FnMut(usize, &PointState),
    ) -> Result<PointState> {
        self.check_mode(mode)?;
        let ChainNoise { sampling, guidance } = noise;
        let total = self.schedule.total_steps();
        let mut z = self.initial_state(sampling)?;
        observer(total, &z);
        for t in (1..=total).rev() {
            let guided = self.config.guidance.is_guided_step(t);
            z = match mode {
                Mode::Unguided => self.unguided_step(&z, t, sampling)?,
                Mode::Oracle if guided => self.oracle_step(&z, t, sampling, guidance)?,
                Mode::Noisy if guided => self.noisy_step(&z, t, sampling)?,
                Mode::Clean if guided => self.clean_step(&z, t, sampling)?,
                Mode::BilevelNoisy if guided => {
                    self.bilevel_noisy_step(&z, t, sampling, guidance)?
                }
                Mode::BilevelClean if guided => {
                    self.bilevel_clean_step(&z, t, sampling, guidance)?
                }
                Mode::Evolutionary => self.evolutionary_step(&z, t, sampling, guidance)?,
                _ => self.unguided_step(&z, t, sampling)?,
            };
            observer(t - 1, &z);
        }
        Ok(z)
    }

    fn initial_state(&self, sampling: &mut dyn NormalSource) -> Result<PointState> {
        let n = self.config.n_atoms;
        let positions = sample_perturbation(n, sampling, true);
        let features = sampling.feature_block(n, self.config.n_features);
        PointState::new(positions, features, true)
    }

    /// Draws `x_{t-1} ~ N(mean + shift, sigma_t^2 I)` and re-centers.
    fn finish_step(
        &self,
        mean: PointState,
        shift: Option<DMatrix<f64>>,
        t: usize,
        sampling: &mut dyn NormalSource,
    ) -> PointState {
        let n = mean.n_atoms();
        let sigma = self.schedule.sigma(t);
        let pos_noise = sample_perturbation(n, sampling, true);
        let feat_noise = sampling.feature_block(n, mean.n_features());
        let mut positions = mean.positions().clone();
        if let Some(shift) = shift {
            positions += shift;
        }
        positions += pos_noise * sigma;
        let features = mean.features() + feat_noise * sigma;
        let mut next = PointState::from_parts_unchecked(positions, features, true);
        next.recenter();
        next
    }

    fn mean_of(&self, z: &PointState, t: usize) -> Result<PointState> {
        let eps = self.denoiser.predict_noise(z, t, self.schedule)?;
        self.schedule.posterior_mean(z, &eps, t)
    }

    /// `s * sigma_t^2 * g`
    fn shift(&self, scale: f64, t: usize, g: DMatrix<f64>) -> DMatrix<f64> {
        g * (scale * self.schedule.sigma(t).powi(2))
    }

    fn oracle(&self) -> &'a dyn Oracle {
        self.oracle.expect("checked by check_mode")
    }

    fn property(&self) -> &'a dyn Property {
        self.property.expect("checked by check_mode")
    }

    fn oracle_gradient(
        &self,
        at: &PointState,
        t: usize,
        guidance: &mut dyn NormalSource,
    ) -> DMatrix<f64> {
        let cfg = &self.config.guidance;
        let objective = composed_objective(
            self.oracle(),
            self.decoder,
            self.denoiser,
            self.schedule,
            t,
            cfg.scalarization,
        );
        spsa_oracle_gradient(at, objective, cfg, guidance)
    }

    fn unguided_step(
        &self,
        z: &PointState,
        t: usize,
        sampling: &mut dyn NormalSource,
    ) -> Result<PointState> {
        let mean = self.mean_of(z, t)?;
        Ok(self.finish_step(mean, None, t, sampling))
    }

    fn oracle_step(
        &self,
        z: &PointState,
        t: usize,
        sampling: &mut dyn NormalSource,
        guidance: &mut dyn NormalSource,
    ) -> Result<PointState> {
        let scale = self.config.guidance.scale;
        if scale == 0.0 {
            return self.unguided_step(z, t, sampling);
        }
        let g = self.oracle_gradient(z, t, guidance);
        let mean = self.mean_of(z, t)?;
        Ok(self.finish_step(mean, Some(self.shift(scale, t, g)), t, sampling))
    }

    fn noisy_step(
        &self,
        z: &PointState,
        t: usize,
        sampling: &mut dyn NormalSource,
    ) -> Result<PointState> {
        let cfg = &self.config.guidance;
        if cfg.scale == 0.0 {
            return self.unguided_step(z, t, sampling);
        }
        let g = noisy_guidance_gradient(
            z,
            t,
            self.denoiser,
            self.decoder,
            self.property(),
            cfg,
            self.schedule,
        )?;
        let mean = self.mean_of(z, t)?;
        Ok(self.finish_step(mean, Some(self.shift(cfg.scale, t, g)), t, sampling))
    }

    /// Noise prediction with a clean-space shift of `scale * delta` folded in.
    fn clean_noise(
        &self,
        z: &PointState,
        t: usize,
        scale: f64,
    ) -> Result<(PointState, PointState)> {
        let eps = self.denoiser.predict_noise(z, t, self.schedule)?;
        let x0 = self.schedule.t0_estimate(z, &eps, t)?;
        if scale == 0.0 {
            return Ok((eps, x0));
        }
        let (delta, _) = descend_clean(&x0, self.property(), &self.config.guidance);
        let delta = x0.zeros_like().with_positions(delta * scale);
        let (_, eps_tilde) = clean_recompose(&x0, &delta, &eps, t, self.schedule)?;
        let shifted = x0.lin_comb(1.0, &delta, 1.0);
        Ok((eps_tilde, shifted))
    }

    fn clean_step(
        &self,
        z: &PointState,
        t: usize,
        sampling: &mut dyn NormalSource,
    ) -> Result<PointState> {
        let scale = self.config.guidance.scale;
        if scale == 0.0 {
            return self.unguided_step(z, t, sampling);
        }
        let (eps_tilde, _) = self.clean_noise(z, t, scale)?;
        let mean = self.schedule.posterior_mean(z, &eps_tilde, t)?;
        Ok(self.finish_step(mean, None, t, sampling))
    }

    fn bilevel_noisy_step(
        &self,
        z: &PointState,
        t: usize,
        sampling: &mut dyn NormalSource,
        guidance: &mut dyn NormalSource,
    ) -> Result<PointState> {
        let cfg = &self.config.guidance;

        // lower level: property-guided step to t - 1
        let mean = self.mean_of(z, t)?;
        let shift = if cfg.property_scale > 0.0 {
            let g = noisy_guidance_gradient(
                z,
                t,
                self.denoiser,
                self.decoder,
                self.property(),
                cfg,
                self.schedule,
            )?;
            Some(self.shift(cfg.property_scale, t, g))
        } else {
            None
        };
        let lower = self.finish_step(mean, shift, t, sampling);

        // re-noise back to level t
        let (keep, fresh) = self.schedule.projection_coefficients(t)?;
        let n = lower.n_atoms();
        let eps_pos = sample_perturbation(n, sampling, true);
        let eps_feat = sampling.feature_block(n, lower.n_features());
        let eps = PointState::from_parts_unchecked(eps_pos, eps_feat, true);
        let mut projected = lower.lin_comb(keep, &eps, fresh);
        projected.recenter();

        // upper level: oracle-guided step from the projected state
        let shift = if cfg.scale > 0.0 {
            let g = self.oracle_gradient(&projected, t, guidance);
            Some(self.shift(cfg.scale, t, g))
        } else {
            None
        };
        let mean = self.mean_of(&projected, t)?;
        Ok(self.finish_step(mean, shift, t, sampling))
    }

    fn bilevel_clean_step(
        &self,
        z: &PointState,
        t: usize,
        sampling: &mut dyn NormalSource,
        guidance: &mut dyn NormalSource,
    ) -> Result<PointState> {
        let cfg = &self.config.guidance;
        let (eps_tilde, clean) = self.clean_noise(z, t, cfg.property_scale)?;
        let shift = if cfg.scale > 0.0 {
            // the oracle sees the shifted clean estimate directly
            let g = self.oracle_gradient(&clean, 0, guidance);
            Some(self.shift(cfg.scale, t, g))
        } else {
            None
        };
        let mean = self.schedule.posterior_mean(z, &eps_tilde, t)?;
        Ok(self.finish_step(mean, shift, t, sampling))
    }

    fn evolutionary_step(
        &self,
        z: &PointState,
        t: usize,
        sampling: &mut dyn NormalSource,
        guidance: &mut dyn NormalSource,
    ) -> Result<PointState> {
        let evo = self.config.evo.expect("checked by check_mode");
        let mut population = vec![z.clone()];
        if t.is_multiple_of(evo.interval) {
            let n = z.n_atoms();
            for _ in 1..evo.variant_size {
                let pos = sample_perturbation(n, guidance, true);
                let feat = guidance.feature_block(n, z.n_features());
                let eps = PointState::from_parts_unchecked(pos, feat, true);
                let mut variant = z.lin_comb(1.0, &eps, evo.variant_scale);
                variant.recenter();
                population.push(variant);
            }
        }
        let stepped = population
            .iter()
            .map(|member| self.unguided_step(member, t, sampling))
            .collect::<Result<Vec<_>>>()?;
        if stepped.len() == 1 {
            return Ok(stepped.into_iter().next().expect("one member"));
        }
        let objective = composed_objective(
            self.oracle(),
            self.decoder,
            self.denoiser,
            self.schedule,
            t - 1,
            self.config.guidance.scalarization,
        );
        let scores: Vec<Option<f64>> = stepped.iter().map(&objective).collect();
        let best = select_best(&scores);
        Ok(stepped.into_iter().nth(best).expect("index in range"))
    }
}
