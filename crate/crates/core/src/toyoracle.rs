//! Analytic molecular-mechanics oracle: harmonic bonds plus Lennard-Jones.
//!
//! Gradients are stored as raw `dE/dx` (no minus sign). Force RMS and the
//! stationarity test are insensitive to the sign.

use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomstate::{project_zero_cog, PointState};

/// Atom pairs closer than this make the oracle report failure.
pub const COINCIDENT_DISTANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub k: f64,
    pub r0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LennardJones {
    pub epsilon: f64,
    pub sigma: f64,
    /// Hard cutoff, no shifting or smoothing.
    pub cutoff: f64,
}

impl LennardJones {
    fn energy_and_derivative(&self, r: f64) -> (f64, f64) {
        let s6 = (self.sigma / r).powi(6);
        let s12 = s6 * s6;
        let energy = 4.0 * self.epsilon * (s12 - s6);
        // dE/dr
        let de_dr = 4.0 * self.epsilon * (-12.0 * s12 + 6.0 * s6) / r;
        (energy, de_dr)
    }
}

/// Energy, gradient and a success flag from any black-box oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEval {
    pub energy: f64,
    /// `dE/dx`, `N x 3`.
    pub gradient: DMatrix<f64>,
    pub converged: bool,
}

impl OracleEval {
    pub fn failed(n_atoms: usize) -> Self {
        Self {
            energy: f64::NAN,
            gradient: DMatrix::zeros(n_atoms, 3),
            converged: false,
        }
    }
}

/// A black-box energy/gradient oracle over `N x 3` positions.
pub trait Oracle: Send + Sync {
    fn evaluate(&self, positions: &DMatrix<f64>) -> OracleEval;
}

/// Oracles that can also locally relax a geometry.
pub trait Relaxer: Oracle {
    fn relax(&self, positions: &DMatrix<f64>, max_iters: usize, tol: f64) -> Relaxation;
}

/// How a per-atom gradient is reduced to the scalar guidance objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scalarization {
    /// `sqrt(sum of squared components / 3N)`
    #[default]
    Rms,
    /// Mean over atoms of the per-atom gradient norm.
    MeanNorm,
}

impl Scalarization {
    pub fn reduce(self, gradient: &DMatrix<f64>) -> f64 {
        match self {
            Scalarization::Rms => crate::metrics::force_rms(gradient),
            Scalarization::MeanNorm => {
                let n = gradient.nrows() as f64;
                gradient.row_iter().map(|r| r.norm()).sum::<f64>() / n
            }
        }
    }
}

/// Scalar guidance objective for an oracle. Returns `None` when the oracle
/// fails so the caller can zero the guidance contribution; note the value
/// itself is 0 in that case, matching the failure convention of the oracle.
pub fn scalar_objective<O: Oracle + ?Sized>(
    oracle: &O,
    positions: &DMatrix<f64>,
    scalarization: Scalarization,
) -> Option<f64> {
    let eval = oracle.evaluate(positions);
    eval.converged.then(|| scalarization.reduce(&eval.gradient))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPotential {
    pub bonds: Vec<Bond>,
    pub lj: Option<LennardJones>,
}

impl ToyPotential {
    pub fn new(bonds: Vec<Bond>, lj: Option<LennardJones>) -> Self {
        Self { bonds, lj }
    }

    pub fn validate(&self, n_atoms: usize) -> Result<()> {
        for b in &self.bonds {
            if b.i == b.j || b.i >= n_atoms || b.j >= n_atoms {
                return Err(Error::InvalidParameter(format!(
                    "bond ({}, {}) invalid for {n_atoms} atoms",
                    b.i, b.j
                )));
            }
            if !(b.k > 0.0 && b.r0 > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "bond ({}, {}) needs k > 0 and r0 > 0",
                    b.i, b.j
                )));
            }
        }
        if let Some(lj) = &self.lj {
            if !(lj.epsilon >= 0.0 && lj.sigma > 0.0 && lj.cutoff > 0.0) {
                return Err(Error::InvalidParameter(
                    "Lennard-Jones needs epsilon >= 0, sigma > 0, cutoff > 0".into(),
                ));
            }
        }
        Ok(())
    }

    fn bonded_pairs(&self) -> HashSet<(usize, usize)> {
        self.bonds
            .iter()
            .map(|b| (b.i.min(b.j), b.i.max(b.j)))
            .collect()
    }

    pub fn evaluate(&self, positions: &DMatrix<f64>) -> OracleEval {
        let n = positions.nrows();
        if !positions.iter().all(|x| x.is_finite()) {
            return OracleEval::failed(n);
        }
        let pos = |i: usize| Vector3::new(positions[(i, 0)], positions[(i, 1)], positions[(i, 2)]);
        let mut energy = 0.0;
        let mut grad = DMatrix::<f64>::zeros(n, 3);
        let mut add_pair = |i: usize, j: usize, de_dr: f64, d: &Vector3<f64>, r: f64| {
            let g = d * (de_dr / r);
            for c in 0..3 {
                grad[(i, c)] += g[c];
                grad[(j, c)] -= g[c];
            }
        };

        for b in &self.bonds {
            let d = pos(b.i) - pos(b.j);
            let r = d.norm();
            if r <= COINCIDENT_DISTANCE {
                return OracleEval::failed(n);
            }
            let dr = r - b.r0;
            energy += 0.5 * b.k * dr * dr;
            add_pair(b.i, b.j, b.k * dr, &d, r);
        }

        if let Some(lj) = &self.lj {
            let bonded = self.bonded_pairs();
            for i in 0..n {
                for j in i + 1..n {
                    if bonded.contains(&(i, j)) {
                        continue;
                    }
                    let d = pos(i) - pos(j);
                    let r = d.norm();
                    if r <= COINCIDENT_DISTANCE {
                        return OracleEval::failed(n);
                    }
                    if r > lj.cutoff {
                        continue;
                    }
                    let (e, de_dr) = lj.energy_and_derivative(r);
                    energy += e;
                    add_pair(i, j, de_dr, &d, r);
                }
            }
        }

        if !energy.is_finite() || !grad.iter().all(|x| x.is_finite()) {
            return OracleEval::failed(n);
        }
        OracleEval {
            energy,
            gradient: grad,
            converged: true,
        }
    }

    /// Force RMS of the potential at `positions`; 0 on oracle failure.
    pub fn objective(&self, positions: &DMatrix<f64>) -> f64 {
        scalar_objective(self, positions, Scalarization::Rms).unwrap_or(0.0)
    }

    /// Gradient descent with Armijo backtracking.
    pub fn relax(&self, positions: &DMatrix<f64>, max_iters: usize, tol: f64) -> Relaxation {
        relax_with(self, positions, &RelaxSettings::new(max_iters, tol))
    }
}

impl Oracle for ToyPotential {
    fn evaluate(&self, positions: &DMatrix<f64>) -> OracleEval {
        ToyPotential::evaluate(self, positions)
    }
}

impl Relaxer for ToyPotential {
    fn relax(&self, positions: &DMatrix<f64>, max_iters: usize, tol: f64) -> Relaxation {
        ToyPotential::relax(self, positions, max_iters, tol)
    }
}

/// Counts evaluations made through it.
pub struct CountingOracle<O> {
    inner: O,
    calls: AtomicUsize,
}

impl<O: Oracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }
}

impl<O: Oracle> Oracle for CountingOracle<O> {
    fn evaluate(&self, positions: &DMatrix<f64>) -> OracleEval {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.evaluate(positions)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelaxSettings {
    pub max_iters: usize,
    /// Stop once force RMS drops below this.
    pub tol: f64,
    pub initial_step: f64,
    pub shrink: f64,
    pub armijo_c: f64,
    /// Consecutive backtracking failures before giving up.
    pub max_backtracks: usize,
}

impl RelaxSettings {
    pub fn new(max_iters: usize, tol: f64) -> Self {
        Self {
            max_iters,
            tol,
            initial_step: 0.1,
            shrink: 0.5,
            armijo_c: 1e-4,
            max_backtracks: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Relaxation {
    pub positions: DMatrix<f64>,
    pub energy: f64,
    pub converged: bool,
    /// Accepted descent steps.
    pub iterations: usize,
    /// Energy of every accepted iterate, starting with the input.
    pub energy_trace: Vec<f64>,
}

/// Steepest descent with backtracking line search on any oracle.
pub fn relax_with<O: Oracle + ?Sized>(
    oracle: &O,
    positions: &DMatrix<f64>,
    settings: &RelaxSettings,
) -> Relaxation {
    let recenter = |p: &DMatrix<f64>| project_zero_cog(p).unwrap_or_else(|_| p.clone());
    let mut x = positions.clone();
    let mut eval = oracle.evaluate(&x);
    if !eval.converged {
        return Relaxation {
            positions: recenter(&x),
            energy: eval.energy,
            converged: false,
            iterations: 0,
            energy_trace: vec![eval.energy],
        };
    }
    let mut trace = vec![eval.energy];
    let mut iterations = 0;
    loop {
        let rms = crate::metrics::force_rms(&eval.gradient);
        if rms < settings.tol {
            return Relaxation {
                positions: recenter(&x),
                energy: eval.energy,
                converged: true,
                iterations,
                energy_trace: trace,
            };
        }
        if iterations >= settings.max_iters {
            break;
        }
        let g_sq = eval.gradient.norm_squared();
        let mut step = settings.initial_step;
        let mut accepted = None;
        for _ in 0..settings.max_backtracks {
            let trial = &x - &eval.gradient * step;
            let trial_eval = oracle.evaluate(&trial);
            if trial_eval.converged
                && trial_eval.energy <= eval.energy - settings.armijo_c * step * g_sq
            {
                accepted = Some((trial, trial_eval));
                break;
            }
            step *= settings.shrink;
        }
        match accepted {
            Some((trial, trial_eval)) => {
                x = trial;
                eval = trial_eval;
                trace.push(eval.energy);
                iterations += 1;
            }
            None => break,
        }
    }
    Relaxation {
        positions: recenter(&x),
        energy: eval.energy,
        converged: false,
        iterations,
        energy_trace: trace,
    }
}

/// Radius of gyration of a centered state and its gradient, standing in for
/// a learned property regressor.
pub fn surrogate_property(state: &PointState) -> (f64, DMatrix<f64>) {
    radius_of_gyration(state.positions())
}

pub fn radius_of_gyration(positions: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
    let n = positions.nrows() as f64;
    let rg = (positions.norm_squared() / n).sqrt();
    if rg == 0.0 {
        return (0.0, DMatrix::zeros(positions.nrows(), 3));
    }
    (rg, positions / (n * rg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomstate::{random_rotation, rotate_rows, NormalSource};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(distance: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 3, &[0.0, 0.0, 0.0, distance, 0.0, 0.0])
    }

    fn spring() -> ToyPotential {
        ToyPotential::new(vec![Bond { i: 0, j: 1, k: 1.0, r0: 1.0 }], None)
    }

    fn lj_pair() -> ToyPotential {
        ToyPotential::new(
            Vec::new(),
            Some(LennardJones {
                epsilon: 0.7,
                sigma: 1.2,
                cutoff: 10.0,
            }),
        )
    }

    /// Five atoms, a bonded chain with cross LJ terms.
    fn mixed() -> ToyPotential {
        let bonds = (0..4)
            .map(|i| Bond {
                i,
                j: i + 1,
                k: 2.0 + i as f64,
                r0: 1.0,
            })
            .collect();
        ToyPotential::new(
            bonds,
            Some(LennardJones {
                epsilon: 0.3,
                sigma: 0.9,
                cutoff: 50.0,
            }),
        )
    }

    #[test]
    fn stretched_bond() {
        let e = spring().evaluate(&pair(2.0));
        assert!(e.converged);
        assert_eq!(e.energy, 0.5);
        assert_eq!(e.gradient, DMatrix::from_row_slice(2, 3, &[-1., 0., 0., 1., 0., 0.]));
        let rest = spring().evaluate(&pair(1.0));
        assert_eq!(rest.energy, 0.0);
        assert_eq!(rest.gradient.amax(), 0.0);
    }

    #[test]
    fn lj_minimum() {
        let pot = lj_pair();
        let r = 2f64.powf(1.0 / 6.0) * 1.2;
        let e = pot.evaluate(&pair(r));
        assert!((e.energy + 0.7).abs() < 1e-12);
        assert!(e.gradient.amax() < 1e-12);
    }

    #[test]
    fn coincident_atoms_fail_softly() {
        let e = lj_pair().evaluate(&pair(0.0));
        assert!(!e.converged);
        assert_eq!(e.gradient, DMatrix::zeros(2, 3));
        assert_eq!(lj_pair().objective(&pair(0.0)), 0.0);
    }

    #[test]
    fn lj_skips_bonded_pairs_and_pairs_beyond_cutoff() {
        let bonded = ToyPotential::new(
            vec![Bond { i: 0, j: 1, k: 1.0, r0: 1.0 }],
            Some(LennardJones {
                epsilon: 1.0,
                sigma: 1.0,
                cutoff: 5.0,
            }),
        );
        assert_eq!(bonded.evaluate(&pair(1.0)).energy, 0.0);
        let far = ToyPotential::new(
            Vec::new(),
            Some(LennardJones {
                epsilon: 1.0,
                sigma: 1.0,
                cutoff: 2.0,
            }),
        );
        assert_eq!(far.evaluate(&pair(2.5)).energy, 0.0);
    }

    #[test]
    fn objective_examples() {
        assert_eq!(spring().objective(&pair(1.0)), 0.0);
        assert!((spring().objective(&pair(2.0)) - 0.577350).abs() < 1e-6);
    }

    #[test]
    fn validation() {
        assert!(spring().validate(2).is_ok());
        assert!(spring().validate(1).is_err());
        let selfbond = ToyPotential::new(vec![Bond { i: 0, j: 0, k: 1.0, r0: 1.0 }], None);
        assert!(selfbond.validate(2).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let pot = mixed();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let x = rng.position_block(5) * 1.5;
            let analytic = pot.evaluate(&x).gradient;
            let h = 1e-6;
            let mut fd = DMatrix::zeros(5, 3);
            for i in 0..5 {
                for c in 0..3 {
                    let mut p = x.clone();
                    p[(i, c)] += h;
                    let mut m = x.clone();
                    m[(i, c)] -= h;
                    fd[(i, c)] = (pot.evaluate(&p).energy - pot.evaluate(&m).energy) / (2.0 * h);
                }
            }
            let rel = (&fd - &analytic).norm() / analytic.norm();
            assert!(rel < 1e-5, "rel = {rel}");
        }
    }

    #[test]
    fn symmetries() {
        let pot = mixed();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let x = rng.position_block(5) * 1.5;
            let base = pot.evaluate(&x);
            let mut shifted = x.clone();
            for mut row in shifted.row_iter_mut() {
                row[0] += 0.25;
                row[1] -= 0.5;
                row[2] += 1.0;
            }
            let e_shift = pot.evaluate(&shifted).energy;
            assert!((e_shift - base.energy).abs() <= 1e-12 * base.energy.abs().max(1.0));
            let r = random_rotation(&mut rng);
            let rot = pot.evaluate(&rotate_rows(&x, &r));
            assert!((rot.energy - base.energy).abs() < 1e-10);
            assert!((rot.gradient - rotate_rows(&base.gradient, &r)).amax() < 1e-10);
            let net: f64 = base.gradient.row_sum().amax();
            assert!(net < 1e-10);
        }
    }

    #[test]
    fn relax_stretched_pair() {
        let out = spring().relax(&pair(2.0), 10_000, 1e-9);
        assert!(out.converged);
        let d = (out.positions.row(0) - out.positions.row(1)).norm();
        assert!((d - 1.0).abs() < 1e-4);
        assert!(out.energy < 1e-8);
        assert!(out.positions.row_sum().amax() < 1e-12);
    }

    #[test]
    fn relax_at_minimum_is_a_no_op() {
        let start = project_zero_cog(&pair(1.0)).unwrap();
        let out = spring().relax(&start, 100, 1e-9);
        assert!(out.converged);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.positions, start);
    }

    #[test]
    fn relax_lj_cluster_descends() {
        let pot = ToyPotential::new(
            Vec::new(),
            Some(LennardJones {
                epsilon: 1.0,
                sigma: 1.0,
                cutoff: 10.0,
            }),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let start = rng.position_block(4) * 0.6 + DMatrix::from_fn(4, 3, |i, c| (i == c) as u8 as f64 * 1.2);
        let initial = pot.evaluate(&start).energy;
        let out = pot.relax(&start, 20_000, 1e-6);
        assert!(out.converged);
        assert!(pot.objective(&out.positions) < 1e-6);
        assert!(out.energy <= initial);
        assert!(out.energy_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn radius_of_gyration_examples() {
        let s = PointState::from_positions(DMatrix::from_row_slice(
            2,
            3,
            &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0],
        ))
        .unwrap();
        let (rg, g) = surrogate_property(&s);
        assert_eq!(rg, 1.0);
        assert_eq!((g[(0, 0)], g[(0, 1)], g[(0, 2)]), (0.5, 0.0, 0.0));
        let origin = PointState::from_positions(DMatrix::zeros(3, 3)).unwrap();
        let (rg0, g0) = surrogate_property(&origin);
        assert_eq!(rg0, 0.0);
        assert_eq!(g0.amax(), 0.0);
        let (rg3, _) = radius_of_gyration(&(s.positions() * 3.0));
        assert!((rg3 - 3.0).abs() < 1e-15);
    }

    #[test]
    fn scalarizations() {
        let g = DMatrix::from_row_slice(1, 3, &[3.0, 4.0, 0.0]);
        assert!((Scalarization::Rms.reduce(&g) - 2.886751).abs() < 1e-6);
        assert_eq!(Scalarization::MeanNorm.reduce(&g), 5.0);
    }
}
