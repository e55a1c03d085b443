//! A small synthetic system for end-to-end runs: a cluster of atoms held by
//! harmonic springs between every pair, and a Gaussian denoiser whose mean is
//! the same cluster stretched outward.
//!
//! Unguided samples therefore sit away from the potential minimum, which
//! gives force-based guidance something to fix. The radius-of-gyration target
//! is taken from the unstretched cluster. Reference points are spread over a
//! sphere so that, with every pair bonded, the minimum has no soft modes.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserSpec;
use crate::error::{Error, Result};
use crate::geomstate::PointState;
use crate::metrics::min_pair_distance;
use crate::toyoracle::{radius_of_gyration, Bond, ToyPotential};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestbedSpec {
    pub n_atoms: usize,
    /// Shortest distance between two atoms at the minimum.
    pub bond_length: f64,
    pub spring: f64,
    /// Factor applied to the cluster for the denoiser mean.
    pub stretch: f64,
    /// Per-coordinate standard deviation of the denoiser target.
    pub spread: f64,
}

impl Default for TestbedSpec {
    fn default() -> Self {
        Self {
            n_atoms: 6,
            bond_length: 1.0,
            spring: 1.0,
            stretch: 1.3,
            spread: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Testbed {
    pub spec: TestbedSpec,
    /// Centered minimum-energy geometry.
    pub reference: DMatrix<f64>,
    pub potential: ToyPotential,
    pub denoiser: DenoiserSpec,
    pub rg_target: f64,
}

impl TestbedSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_atoms < 2 {
            return Err(Error::InvalidParameter("testbed needs >= 2 atoms".into()));
        }
        for (name, v) in [
            ("bond_length", self.bond_length),
            ("spring", self.spring),
            ("stretch", self.stretch),
            ("spread", self.spread),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Testbed> {
        self.validate()?;
        let reference = cluster(self.n_atoms, self.bond_length);
        let n = self.n_atoms;
        let mut bonds = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                bonds.push(Bond {
                    i,
                    j,
                    k: self.spring,
                    r0: (reference.row(i) - reference.row(j)).norm(),
                });
            }
        }
        let potential = ToyPotential::new(bonds, None);
        potential.validate(n)?;
        let mean = PointState::from_positions(&reference * self.stretch)?;
        let denoiser = DenoiserSpec::Gaussian {
            mean,
            scale: self.spread,
        };
        let rg_target = radius_of_gyration(&reference).0;
        Ok(Testbed {
            spec: *self,
            reference,
            potential,
            denoiser,
            rg_target,
        })
    }
}

/// `n` points on a Fibonacci sphere, centered and scaled so the closest
/// pair is `min_distance` apart.
pub fn cluster(n: usize, min_distance: f64) -> DMatrix<f64> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut points = DMatrix::from_fn(n, 3, |i, c| {
        let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - y * y).sqrt();
        let phi = golden * i as f64;
        match c {
            0 => r * phi.cos(),
            1 => y,
            _ => r * phi.sin(),
        }
    });
    for mut col in points.column_iter_mut() {
        let m = col.mean();
        col.add_scalar_mut(-m);
    }
    let closest = min_pair_distance(&points);
    points * (min_distance / closest)
}
