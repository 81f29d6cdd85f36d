//! Signal and observation model: generators, observation levels, simplex
//! points, tangent directions and the (true, approximate) model pair.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tolerance::{ROW_SUM_TOL, SIMPLEX_SUM_TOL, TANGENT_SUM_TOL};

/// Transition intensity matrix of a finite-state continuous-time chain.
///
/// Rows sum to zero and off-diagonal entries are nonnegative. The chain is
/// called mixing when every off-diagonal intensity is strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct GeneratorMatrix {
    entries: DMatrix<f64>,
    mixing: bool,
}

impl GeneratorMatrix {
    /// Validates a row-major matrix of intensities.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        for row in rows {
            if row.len() != d {
                return Err(Error::NonSquare { rows: d, cols: row.len() });
            }
        }
        let entries = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
        Self::new(entries)
    }

    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = entries.shape();
        if rows != cols {
            return Err(Error::NonSquare { rows, cols });
        }
        if rows < 2 {
            return Err(Error::TooFewStates(rows));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("generator"));
        }
        let mut mixing = true;
        for i in 0..rows {
            for j in 0..cols {
                if i == j {
                    continue;
                }
                let value = entries[(i, j)];
                if value < 0.0 {
                    return Err(Error::NegativeOffDiagonal { row: i, col: j, value });
                }
                if value == 0.0 {
                    mixing = false;
                }
            }
            let sum: f64 = entries.row(i).iter().sum();
            if sum.abs() > ROW_SUM_TOL {
                return Err(Error::RowSumNonzero { row: i, sum });
            }
        }
        Ok(Self { entries, mixing })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_mixing(&self) -> bool {
        self.mixing
    }

    /// Fails with `NotMixing` naming the first zero off-diagonal entry.
    pub fn require_mixing(&self) -> Result<()> {
        if self.mixing {
            return Ok(());
        }
        let d = self.dim();
        for i in 0..d {
            for j in 0..d {
                if i != j && self.entries[(i, j)] == 0.0 {
                    return Err(Error::NotMixing { row: i, col: j });
                }
            }
        }
        unreachable!("non-mixing generator without a zero off-diagonal")
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }

    /// Total exit rate `|λ_ii|` of state `i`.
    pub fn exit_rate(&self, i: usize) -> f64 {
        -self.entries[(i, i)]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.entries
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    /// `(1 - w) * self + w * other`; convex combinations of generators are
    /// generators, and mixing is kept whenever `self` mixes and `w < 1`.
    pub fn interpolate(&self, other: &GeneratorMatrix, w: f64) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        let mut entries = &self.entries * (1.0 - w) + &other.entries * w;
        // Re-close the diagonal so rounding cannot push row sums off zero.
        let d = self.dim();
        for i in 0..d {
            let off: f64 = (0..d).filter(|&j| j != i).map(|j| entries[(i, j)]).sum();
            entries[(i, i)] = -off;
        }
        Self::new(entries)
    }

    /// Stationary law solving `Λ* π = 0`, `Σ π = 1`.
    pub fn stationary_distribution(&self) -> Result<Vec<f64>> {
        let d = self.dim();
        // Replace the last balance equation by the normalisation constraint.
        let mut a = self.entries.transpose();
        for j in 0..d {
            a[(d - 1, j)] = 1.0;
        }
        let mut b = DVector::zeros(d);
        b[d - 1] = 1.0;
        let solution = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::InvalidExperiment("generator has no unique stationary law".into()))?;
        Ok(solution.iter().copied().collect())
    }
}

impl From<GeneratorMatrix> for Vec<Vec<f64>> {
    fn from(g: GeneratorMatrix) -> Self {
        g.to_rows()
    }
}

impl TryFrom<Vec<Vec<f64>>> for GeneratorMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_rows(&rows)
    }
}

/// Per-state observation levels `h^i`; `H = diag h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<f64>", try_from = "Vec<f64>")]
pub struct ObservationMap {
    levels: Vec<f64>,
}

impl ObservationMap {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("observation levels"));
        }
        Ok(Self { levels })
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn max_abs(&self) -> f64 {
        self.levels.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `max_{k,l} |h^k - h^l|`.
    pub fn oscillation(&self) -> f64 {
        let (lo, hi) = self
            .levels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        hi - lo
    }

    /// `h* π`.
    pub fn mean(&self, weights: &[f64]) -> f64 {
        self.levels.iter().zip(weights).map(|(h, p)| h * p).sum()
    }

    pub fn interpolate(&self, other: &ObservationMap, w: f64) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        Self::new(
            self.levels
                .iter()
                .zip(&other.levels)
                .map(|(a, b)| (1.0 - w) * a + w * b)
                .collect(),
        )
    }

    /// ℓ₁ distance `Σ_k |h^k - g^k|`.
    pub fn l1_distance(&self, other: &ObservationMap) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(l1_distance(&self.levels, &other.levels))
    }
}

impl From<ObservationMap> for Vec<f64> {
    fn from(h: ObservationMap) -> Self {
        h.levels
    }
}

impl TryFrom<Vec<f64>> for ObservationMap {
    type Error = Error;

    fn try_from(levels: Vec<f64>) -> Result<Self> {
        Self::new(levels)
    }
}

/// A probability vector. Points built with [`SimplexPoint::new`] are interior;
/// [`SimplexPoint::with_boundary`] also admits zero weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<f64>", try_from = "Vec<f64>")]
pub struct SimplexPoint {
    weights: Vec<f64>,
    interior: bool,
}

impl SimplexPoint {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let point = Self::with_boundary(weights)?;
        point.require_interior()?;
        Ok(point)
    }

    pub fn with_boundary(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("simplex weights"));
        }
        if let Some((index, &value)) = weights.iter().enumerate().find(|(_, &x)| x < 0.0) {
            return Err(Error::NonPositiveEntry { index, value });
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::NotProbability { sum });
        }
        let interior = weights.iter().all(|&x| x > 0.0);
        Ok(Self { weights, interior })
    }

    /// Uniform law on `d` states.
    pub fn uniform(d: usize) -> Self {
        Self { weights: vec![1.0 / d as f64; d], interior: true }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_interior(&self) -> bool {
        self.interior
    }

    pub fn require_interior(&self) -> Result<()> {
        match self.weights.iter().position(|&x| x <= 0.0) {
            Some(index) => Err(Error::BoundaryInitialCondition { index }),
            None => Ok(()),
        }
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn l1_distance(&self, other: &SimplexPoint) -> f64 {
        l1_distance(&self.weights, &other.weights)
    }

    pub fn interpolate(&self, other: &SimplexPoint, w: f64) -> Result<Self> {
        check_dim(self.dim(), other.dim())?;
        let mut weights: Vec<f64> = self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (1.0 - w) * a + w * b)
            .collect();
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|x| *x /= sum);
        Self::with_boundary(weights)
    }

    /// Direction `other - self`, tangent to the simplex.
    pub fn direction_to(&self, other: &SimplexPoint) -> TangentVector {
        TangentVector {
            components: other.weights.iter().zip(&self.weights).map(|(b, a)| b - a).collect(),
        }
    }

    pub(crate) fn from_normalized_unchecked(weights: Vec<f64>) -> Self {
        let interior = weights.iter().all(|&x| x > 0.0);
        Self { weights, interior }
    }
}

impl From<SimplexPoint> for Vec<f64> {
    fn from(p: SimplexPoint) -> Self {
        p.weights
    }
}

impl TryFrom<Vec<f64>> for SimplexPoint {
    type Error = Error;

    fn try_from(weights: Vec<f64>) -> Result<Self> {
        Self::with_boundary(weights)
    }
}

/// A direction in the tangent space of the simplex (components sum to 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentVector {
    components: Vec<f64>,
}

impl TangentVector {
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("tangent vector"));
        }
        let sum: f64 = components.iter().sum();
        if sum.abs() > TANGENT_SUM_TOL {
            return Err(Error::NotTangent { sum });
        }
        Ok(Self { components })
    }

    /// Projects an arbitrary vector onto the tangent space by removing its mean.
    pub fn project(mut components: Vec<f64>) -> Self {
        let mean = components.iter().sum::<f64>() / components.len() as f64;
        components.iter_mut().for_each(|x| *x -= mean);
        Self { components }
    }

    pub fn zeros(d: usize) -> Self {
        Self { components: vec![0.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn l1_norm(&self) -> f64 {
        self.components.iter().map(|x| x.abs()).sum()
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self { components: self.components.iter().map(|x| alpha * x).collect() }
    }

    pub fn add(&self, other: &TangentVector) -> Self {
        Self {
            components: self.components.iter().zip(&other.components).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &TangentVector) -> Self {
        Self {
            components: self.components.iter().zip(&other.components).map(|(a, b)| a - b).collect(),
        }
    }

    pub(crate) fn from_raw(components: Vec<f64>) -> Self {
        Self { components }
    }
}

/// Initial law, generator and observation levels of one hidden Markov model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub initial: SimplexPoint,
    pub generator: GeneratorMatrix,
    pub levels: ObservationMap,
}

impl Model {
    pub fn new(initial: SimplexPoint, generator: GeneratorMatrix, levels: ObservationMap) -> Result<Self> {
        let d = generator.dim();
        check_dim(d, initial.dim())?;
        check_dim(d, levels.dim())?;
        Ok(Self { initial, generator, levels })
    }

    pub fn dim(&self) -> usize {
        self.generator.dim()
    }

    /// Mixing generator and interior initial law, as bound evaluation needs.
    pub fn require_bound_hypotheses(&self) -> Result<()> {
        self.generator.require_mixing()?;
        self.initial.require_interior()
    }
}

/// The model generating the data and the (possibly wrong) model used by the
/// approximate filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPair {
    pub truth: Model,
    pub approx: Model,
}

impl ModelPair {
    pub fn new(truth: Model, approx: Model) -> Result<Self> {
        check_dim(truth.dim(), approx.dim())?;
        Ok(Self { truth, approx })
    }

    /// Both filters built from the true model.
    pub fn exact(truth: Model) -> Self {
        Self { approx: truth.clone(), truth }
    }

    pub fn dim(&self) -> usize {
        self.truth.dim()
    }

    pub fn require_bound_hypotheses(&self) -> Result<()> {
        self.truth.require_bound_hypotheses()?;
        self.approx.require_bound_hypotheses()
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
