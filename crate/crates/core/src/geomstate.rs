//! The diffused object: atom positions plus per-atom features.

use std::collections::VecDeque;

use nalgebra::{DMatrix, Matrix3};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::schedule::StateTensor;

/// Column means of a centered state must stay below this.
pub const COG_TOLERANCE: f64 = 1e-10;

/// `N x 3` positions and `N x d` features.
#[derive(Debug, Clone, PartialEq)]
pub struct PointState {
    positions: DMatrix<f64>,
    features: DMatrix<f64>,
    cog_constrained: bool,
}

impl PointState {
    /// Validates shapes, finiteness and (when constrained) the zero
    /// center-of-gravity invariant. Does not re-center.
    pub fn new(
        positions: DMatrix<f64>,
        features: DMatrix<f64>,
        cog_constrained: bool,
    ) -> Result<Self> {
        let n = positions.nrows();
        if n == 0 {
            return Err(Error::InvalidParameter("state needs at least one atom".into()));
        }
        if positions.ncols() != 3 {
            return Err(Error::ShapeMismatch {
                expected: (n, 3),
                actual: positions.shape(),
            });
        }
        if features.nrows() != n {
            return Err(Error::ShapeMismatch {
                expected: (n, features.ncols()),
                actual: features.shape(),
            });
        }
        if !positions.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("positions"));
        }
        if !features.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        if cog_constrained {
            let worst = max_column_mean(&positions);
            if worst > COG_TOLERANCE {
                return Err(Error::InvalidParameter(format!(
                    "positions are not centered (|column mean| = {worst:e})"
                )));
            }
        }
        Ok(Self {
            positions,
            features,
            cog_constrained,
        })
    }

    /// Projects the positions onto the zero center-of-gravity subspace first.
    pub fn centered(positions: DMatrix<f64>, features: DMatrix<f64>) -> Result<Self> {
        let positions = project_zero_cog(&positions)?;
        Self::new(positions, features, true)
    }

    /// Centered state with no features.
    pub fn from_positions(positions: DMatrix<f64>) -> Result<Self> {
        let n = positions.nrows();
        Self::centered(positions, DMatrix::zeros(n, 0))
    }

    pub(crate) fn from_parts_unchecked(
        positions: DMatrix<f64>,
        features: DMatrix<f64>,
        cog_constrained: bool,
    ) -> Self {
        Self {
            positions,
            features,
            cog_constrained,
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.positions.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn positions(&self) -> &DMatrix<f64> {
        &self.positions
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn cog_constrained(&self) -> bool {
        self.cog_constrained
    }

    /// Same features and constraint flag, new positions.
    pub fn with_positions(&self, positions: DMatrix<f64>) -> Self {
        debug_assert_eq!(positions.shape(), self.positions.shape());
        Self {
            positions,
            features: self.features.clone(),
            cog_constrained: self.cog_constrained,
        }
    }

    /// Same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            positions: DMatrix::zeros(self.n_atoms(), 3),
            features: DMatrix::zeros(self.n_atoms(), self.n_features()),
            cog_constrained: self.cog_constrained,
        }
    }

    /// Re-centers positions in place when the state is constrained.
    pub fn recenter(&mut self) {
        if self.cog_constrained {
            subtract_column_means(&mut self.positions);
        }
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.positions.dot(&other.positions) + self.features.dot(&other.features)
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().chain(self.features.iter()).all(|x| x.is_finite())
    }

    pub fn max_column_mean(&self) -> f64 {
        max_column_mean(&self.positions)
    }
}

impl StateTensor for PointState {
    fn shape(&self) -> (usize, usize) {
        (self.n_atoms(), 3 + self.n_features())
    }

    fn lin_comb(&self, a: f64, other: &Self, b: f64) -> Self {
        Self {
            positions: self.positions.lin_comb(a, &other.positions, b),
            features: self.features.lin_comb(a, &other.features, b),
            cog_constrained: self.cog_constrained,
        }
    }

    fn scaled(&self, a: f64) -> Self {
        Self {
            positions: &self.positions * a,
            features: &self.features * a,
            cog_constrained: self.cog_constrained,
        }
    }
}

/// Element symbols, one per atom.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AtomLabels(pub Vec<String>);

impl AtomLabels {
    pub fn uniform(symbol: &str, n: usize) -> Self {
        Self(vec![symbol.to_string(); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check_pairs_with(&self, n_atoms: usize) -> Result<()> {
        if self.len() != n_atoms {
            return Err(Error::LabelMismatch {
                labels: self.len(),
                atoms: n_atoms,
            });
        }
        Ok(())
    }
}

pub fn max_column_mean(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows() as f64;
    m.column_iter()
        .map(|c| (c.sum() / n).abs())
        .fold(0.0, f64::max)
}

fn subtract_column_means(m: &mut DMatrix<f64>) {
    let n = m.nrows() as f64;
    for mut col in m.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
    }
}

/// Subtracts the per-axis mean over atoms.
pub fn project_zero_cog(positions: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if positions.nrows() == 0 {
        return Err(Error::InvalidParameter("no atoms to center".into()));
    }
    if !positions.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("positions"));
    }
    let mut out = positions.clone();
    subtract_column_means(&mut out);
    Ok(out)
}

/// Source of standard-normal blocks. Every random draw made by the sampler
/// and the guidance routines goes through this trait, so a run can be
/// replayed from a recorded (and possibly rotated) noise stream.
pub trait NormalSource {
    /// `n x 3` block of i.i.d. N(0, 1) draws, filled row by row.
    fn position_block(&mut self, n: usize) -> DMatrix<f64>;

    /// `n x d` block of i.i.d. N(0, 1) draws, filled row by row.
    fn feature_block(&mut self, n: usize, d: usize) -> DMatrix<f64>;
}

fn normal_block<R: RngCore + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let values: Vec<f64> = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut *rng))
        .collect();
    DMatrix::from_row_slice(rows, cols, &values)
}

impl<R: RngCore> NormalSource for R {
    fn position_block(&mut self, n: usize) -> DMatrix<f64> {
        normal_block(self, n, 3)
    }

    fn feature_block(&mut self, n: usize, d: usize) -> DMatrix<f64> {
        normal_block(self, n, d)
    }
}

/// Draws a perturbation matrix with i.i.d. standard-normal entries,
/// optionally projected to zero column means.
pub fn sample_perturbation<S: NormalSource + ?Sized>(
    n_atoms: usize,
    source: &mut S,
    center: bool,
) -> DMatrix<f64> {
    assert!(n_atoms >= 1, "perturbation needs at least one atom");
    let mut u = source.position_block(n_atoms);
    if center {
        subtract_column_means(&mut u);
    }
    u
}

/// Maps positions to `positions * Rᵀ` (each row rotated by `R`).
pub fn apply_rotation(state: &PointState, rotation: &Matrix3<f64>) -> Result<PointState> {
    check_orthogonal(rotation)?;
    Ok(state.with_positions(rotate_rows(state.positions(), rotation)))
}

pub fn rotate_rows(m: &DMatrix<f64>, rotation: &Matrix3<f64>) -> DMatrix<f64> {
    let rt = DMatrix::from_iterator(3, 3, rotation.transpose().iter().copied());
    m * rt
}

pub fn check_orthogonal(rotation: &Matrix3<f64>) -> Result<()> {
    let dev = (rotation.transpose() * rotation - Matrix3::identity()).amax();
    if dev.is_nan() || dev > 1e-10 {
        return Err(Error::NotOrthogonal(dev));
    }
    Ok(())
}

/// Uniformly random rotation from a unit quaternion.
pub fn random_rotation<S: NormalSource + ?Sized>(source: &mut S) -> Matrix3<f64> {
    let q = source.feature_block(1, 4);
    let q = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
    nalgebra::UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}

#[derive(Debug, Clone)]
pub enum NoiseBlock {
    Positions(DMatrix<f64>),
    Features(DMatrix<f64>),
}

/// Wraps a source and keeps a copy of every block it hands out.
pub struct Recorder<S> {
    inner: S,
    blocks: Vec<NoiseBlock>,
}

impl<S: NormalSource> Recorder<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            blocks: Vec::new(),
        }
    }

    pub fn into_blocks(self) -> Vec<NoiseBlock> {
        self.blocks
    }
}

impl<S: NormalSource> NormalSource for Recorder<S> {
    fn position_block(&mut self, n: usize) -> DMatrix<f64> {
        let b = self.inner.position_block(n);
        self.blocks.push(NoiseBlock::Positions(b.clone()));
        b
    }

    fn feature_block(&mut self, n: usize, d: usize) -> DMatrix<f64> {
        let b = self.inner.feature_block(n, d);
        self.blocks.push(NoiseBlock::Features(b.clone()));
        b
    }
}

/// Replays recorded blocks, rotating every position block by `R`.
/// Panics if the consumer asks for blocks in a different order or shape.
pub struct RotatedReplay {
    blocks: VecDeque<NoiseBlock>,
    rotation: Matrix3<f64>,
}

impl RotatedReplay {
    pub fn new(blocks: Vec<NoiseBlock>, rotation: Matrix3<f64>) -> Self {
        Self {
            blocks: blocks.into(),
            rotation,
        }
    }

    pub fn remaining(&self) -> usize {
        self.blocks.len()
    }
}

impl NormalSource for RotatedReplay {
    fn position_block(&mut self, n: usize) -> DMatrix<f64> {
        match self.blocks.pop_front() {
            Some(NoiseBlock::Positions(b)) if b.nrows() == n => rotate_rows(&b, &self.rotation),
            other => panic!("replay out of sync: wanted {n}x3 positions, found {other:?}"),
        }
    }

    fn feature_block(&mut self, n: usize, d: usize) -> DMatrix<f64> {
        match self.blocks.pop_front() {
            Some(NoiseBlock::Features(b)) if b.shape() == (n, d) => b,
            other => panic!("replay out of sync: wanted {n}x{d} features, found {other:?}"),
        }
    }
}
