//! Sample-quality metrics and SPSA diagnostics.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::geomstate::{sample_perturbation, NormalSource};
use crate::toyoracle::{Relaxation, Relaxer};

pub const HISTOGRAM_BINS: usize = 50;

/// Root mean square over all `3N` gradient components.
pub fn force_rms(gradient: &DMatrix<f64>) -> f64 {
    let count = gradient.len();
    if count == 0 {
        return 0.0;
    }
    (gradient.norm_squared() / count as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyGap {
    /// `E(state) - E(relaxed)`
    pub value: f64,
    pub relaxed_energy: f64,
    pub relaxation_converged: bool,
}

/// Energy released by locally relaxing `positions`.
pub fn energy_above_ground_state<R: Relaxer + ?Sized>(
    oracle: &R,
    positions: &DMatrix<f64>,
    max_iters: usize,
    tol: f64,
) -> EnergyGap {
    let start = oracle.evaluate(positions);
    let relaxed: Relaxation = oracle.relax(positions, max_iters, tol);
    EnergyGap {
        value: start.energy - relaxed.energy,
        relaxed_energy: relaxed.energy,
        relaxation_converged: relaxed.converged && start.converged,
    }
}

pub fn property_mae(values: &[f64], target: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    sorted_sum(values.iter().map(|v| (v - target).abs())) / values.len() as f64
}

pub fn min_pair_distance(positions: &DMatrix<f64>) -> f64 {
    let n = positions.nrows();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            best = best.min((positions.row(i) - positions.row(j)).norm());
        }
    }
    best
}

/// Geometric stand-in for chemical validity: the structure relaxes within
/// budget and no two atoms are closer than `min_dist`.
pub fn toy_validity<R: Relaxer + ?Sized>(
    oracle: &R,
    positions: &DMatrix<f64>,
    max_iters: usize,
    tol: f64,
    min_dist: f64,
) -> bool {
    let closest = min_pair_distance(positions);
    if closest.is_nan() || closest <= min_dist {
        return false;
    }
    oracle.relax(positions, max_iters, tol).converged
}

pub fn cosine(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return f64::NAN;
    }
    a.dot(b) / denom
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CosineDiagnostic {
    /// Cosine of every single-probe estimate against the analytic gradient.
    pub per_probe: Vec<f64>,
    /// Cosine of the probe-averaged estimate, one per state.
    pub mean_estimate: Vec<f64>,
    /// Relative L2 error of the probe-averaged estimate, one per state.
    pub mean_estimate_rel_error: Vec<f64>,
    /// States whose analytic gradient vanished; their cosines are NaN.
    pub degenerate_states: usize,
}

impl CosineDiagnostic {
    pub fn median_per_probe(&self) -> f64 {
        median(&self.per_probe)
    }

    pub fn min_mean_estimate(&self) -> f64 {
        self.mean_estimate
            .iter()
            .copied()
            .filter(|c| !c.is_nan())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.mean_estimate_rel_error
            .iter()
            .copied()
            .filter(|c| !c.is_nan())
            .fold(0.0, f64::max)
    }
}

/// Compares raw SPSA directional estimates `d * U` with an analytic gradient.
///
/// `objective` returns `None` for failed evaluations; those probes count as a
/// zero estimate.
pub fn spsa_cosine_diagnostic<F, G, S>(
    objective: F,
    analytic_gradient: G,
    states: &[DMatrix<f64>],
    n_probes: usize,
    zeta: f64,
    center: bool,
    noise: &mut S,
) -> CosineDiagnostic
where
    F: Fn(&DMatrix<f64>) -> Option<f64>,
    G: Fn(&DMatrix<f64>) -> DMatrix<f64>,
    S: NormalSource + ?Sized,
{
    let mut out = CosineDiagnostic {
        per_probe: Vec::with_capacity(states.len() * n_probes),
        mean_estimate: Vec::with_capacity(states.len()),
        mean_estimate_rel_error: Vec::with_capacity(states.len()),
        degenerate_states: 0,
    };
    for x in states {
        let exact = analytic_gradient(x);
        let degenerate = exact.norm() == 0.0;
        let mut sum = DMatrix::zeros(x.nrows(), 3);
        for _ in 0..n_probes {
            let u = sample_perturbation(x.nrows(), noise, center);
            let plus = objective(&(x + &u * zeta));
            let minus = objective(&(x - &u * zeta));
            let estimate = match (plus, minus) {
                (Some(p), Some(m)) => &u * ((p - m) / (2.0 * zeta)),
                _ => DMatrix::zeros(x.nrows(), 3),
            };
            out.per_probe.push(cosine(&estimate, &exact));
            sum += estimate;
        }
        let mean = sum / n_probes.max(1) as f64;
        if degenerate {
            out.degenerate_states += 1;
            out.mean_estimate.push(f64::NAN);
            out.mean_estimate_rel_error.push(f64::NAN);
        } else {
            out.mean_estimate.push(cosine(&mean, &exact));
            out.mean_estimate_rel_error
                .push((&mean - &exact).norm() / exact.norm());
        }
    }
    out
}

/// Sums after sorting so the result does not depend on input order.
fn sorted_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    sorted_sum(values.iter().copied()) / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges spanning `[0, max]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Non-finite values, kept out of the bins.
    pub non_finite: usize,
}

impl Histogram {
    /// Uniform bins over `[0, max]`. Negative values land in the first bin.
    pub fn build(values: &[f64], bins: usize) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let max = finite.iter().copied().fold(0.0, f64::max);
        let width = if max > 0.0 { max / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for v in &finite {
            let idx = ((v / width).floor().max(0.0) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Self {
            edges,
            counts,
            non_finite: values.len() - finite.len(),
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.non_finite
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub force_rms: f64,
    pub energy: f64,
    pub energy_above_gs: f64,
    pub property_value: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_samples: usize,
    pub n_valid: usize,
    pub mean_force_rms: f64,
    pub median_force_rms: f64,
    /// RMS over every gradient component of every sample.
    pub pooled_force_rms: f64,
    pub mean_energy_above_gs: f64,
    pub median_energy_above_gs: f64,
    pub mean_property: f64,
    pub property_mae: Option<f64>,
    pub validity: f64,
    pub force_rms_histogram: Histogram,
    pub energy_above_gs_histogram: Histogram,
}

impl Aggregates {
    /// `target` enables the property MAE; `pooled_sq_sum` and
    /// `pooled_count` carry the raw gradient components.
    pub fn from_records(
        records: &[SampleRecord],
        target: Option<f64>,
        pooled_sq_sum: f64,
        pooled_count: usize,
    ) -> Self {
        let col = |f: fn(&SampleRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
        let rms = col(|r| r.force_rms);
        let gap = col(|r| r.energy_above_gs);
        let prop = col(|r| r.property_value);
        let n_valid = records.iter().filter(|r| r.valid).count();
        Self {
            n_samples: records.len(),
            n_valid,
            mean_force_rms: mean(&rms),
            median_force_rms: median(&rms),
            pooled_force_rms: if pooled_count > 0 {
                (pooled_sq_sum / pooled_count as f64).sqrt()
            } else {
                f64::NAN
            },
            mean_energy_above_gs: mean(&gap),
            median_energy_above_gs: median(&gap),
            mean_property: mean(&prop),
            property_mae: target.map(|y| property_mae(&prop, y)),
            validity: if records.is_empty() {
                f64::NAN
            } else {
                n_valid as f64 / records.len() as f64
            },
            force_rms_histogram: Histogram::build(&rms, HISTOGRAM_BINS),
            energy_above_gs_histogram: Histogram::build(&gap, HISTOGRAM_BINS),
        }
    }
}
