//! Derivatives of the filter with respect to its initial law.
//!
//! Two independent routes to the first derivative are provided: the flow
//! route `Dπ_{s,t}(μ)·v = DΣ(Uμ)·Uv` and the smoothing route built from the
//! conditional law of the initial state given the observations and the
//! terminal state. Every formula below is homogeneous of degree zero in the
//! flow, so the log-scale of a [`FlowMatrix`] never has to be restored.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constants::mixing_rate;
use crate::error::{Error, Result};
use crate::filter::{check_positive, run_filter, zakai_flow, CellIntegrator, FlowMatrix, ModelTag};
use crate::model::{check_dim, l1_distance, GeneratorMatrix, ModelPair, ObservationMap, SimplexPoint, TangentVector};
use crate::signal::ObservationPath;

fn apply(matrix: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (matrix * DVector::from_column_slice(x)).iter().copied().collect()
}

/// `DΣ(x)·y = (y - (Σy) Σ(x)) / |x|₁`.
fn normalize_derivative(x: &[f64], y: &[f64]) -> Vec<f64> {
    let norm: f64 = x.iter().sum();
    let total: f64 = y.iter().sum();
    x.iter().zip(y).map(|(xi, yi)| (yi - total * xi / norm) / norm).collect()
}

/// `DΣ(U μ)·U v` for a precomputed flow.
pub fn derivative_from_flow(flow: &FlowMatrix, mu: &SimplexPoint, v: &TangentVector) -> Result<TangentVector> {
    check_dim(flow.dim(), mu.dim())?;
    check_dim(flow.dim(), v.dim())?;
    let x = apply(&flow.entries, mu.weights());
    check_positive(&x)?;
    let y = apply(&flow.entries, v.components());
    Ok(TangentVector::from_raw(normalize_derivative(&x, &y)))
}

/// `Σ_{k,l} D²Σ^{ikl}(Uμ)(Uv)^k(Uv)^l` for a precomputed flow. With
/// `D²Σ^{ikl}(x) = -(DΣ^{ik}(x) + DΣ^{il}(x))/|x|` the bilinear form collapses
/// to `-2 (Σ Uv) DΣ(Uμ)·Uv / |Uμ|`.
pub fn second_derivative_from_flow(
    flow: &FlowMatrix,
    mu: &SimplexPoint,
    v: &TangentVector,
) -> Result<TangentVector> {
    check_dim(flow.dim(), mu.dim())?;
    check_dim(flow.dim(), v.dim())?;
    let x = apply(&flow.entries, mu.weights());
    check_positive(&x)?;
    let y = apply(&flow.entries, v.components());
    Ok(TangentVector::from_raw(normalize_second_derivative(&x, &y)))
}

fn normalize_second_derivative(x: &[f64], y: &[f64]) -> Vec<f64> {
    let norm: f64 = x.iter().sum();
    let total: f64 = y.iter().sum();
    normalize_derivative(x, y).iter().map(|f| -2.0 * total * f / norm).collect()
}

/// First derivative `Dπ_{s,t}(μ)·v` by the flow route.
pub fn derivative_flow(
    mu: &SimplexPoint,
    v: &TangentVector,
    start: usize,
    end: usize,
    observations: &ObservationPath,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
) -> Result<TangentVector> {
    mu.require_interior()?;
    let flow = zakai_flow(start, end, observations, generator, levels)?;
    derivative_from_flow(&flow, mu, v)
}

/// Second derivative `D²π_{s,t}(μ)·(v, v)` by the flow route.
pub fn second_derivative_flow(
    mu: &SimplexPoint,
    v: &TangentVector,
    start: usize,
    end: usize,
    observations: &ObservationPath,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
) -> Result<TangentVector> {
    mu.require_interior()?;
    let flow = zakai_flow(start, end, observations, generator, levels)?;
    second_derivative_from_flow(&flow, mu, v)
}

/// `ρ^{ji} = P(X_s = a_j | observations, X_t = a_i)`: row `j` is the initial
/// state, column `i` the terminal state.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingMatrix {
    pub entries: DMatrix<f64>,
}

impl SmoothingMatrix {
    /// `ρ^{ji} = ν^j U^{ij} / Σ_k ν^k U^{ik}`.
    pub fn from_flow(flow: &FlowMatrix, nu: &SimplexPoint) -> Result<Self> {
        nu.require_interior()?;
        check_dim(flow.dim(), nu.dim())?;
        let d = flow.dim();
        let w = nu.weights();
        let u = &flow.entries;
        let mut entries = DMatrix::zeros(d, d);
        for i in 0..d {
            let denominator: f64 = (0..d).map(|k| w[k] * u[(i, k)]).sum();
            for j in 0..d {
                entries[(j, i)] = w[j] * u[(i, j)] / denominator;
            }
        }
        Ok(Self { entries })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// `max_{j,k,l} |ρ^{jk} - ρ^{jl}|`.
    pub fn column_spread(&self) -> f64 {
        self.entries
            .row_iter()
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let min = row.iter().copied().fold(f64::INFINITY, f64::min);
                max - min
            })
            .fold(0.0, f64::max)
    }
}

/// Smoothing matrix over cells `start..end` for a filter started at `ν`.
pub fn smoothing_matrix(
    nu: &SimplexPoint,
    start: usize,
    end: usize,
    observations: &ObservationPath,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
) -> Result<SmoothingMatrix> {
    let flow = zakai_flow(start, end, observations, generator, levels)?;
    SmoothingMatrix::from_flow(&flow, nu)
}

/// `exp(-β (t - s))`, the bound on [`SmoothingMatrix::column_spread`].
pub fn smoothing_spread_bound(generator: &GeneratorMatrix, horizon: f64) -> Result<f64> {
    Ok((-mixing_rate(generator)? * horizon).exp())
}

/// `(Dπ(ν)·v)^i = π^i Σ_{j,k} (v^j/ν^j) π^k (ρ^{ji} - ρ^{jk})` from a flow.
pub fn derivative_smoothing_from_flow(flow: &FlowMatrix, nu: &SimplexPoint, v: &TangentVector) -> Result<TangentVector> {
    check_dim(flow.dim(), v.dim())?;
    let smoothing = SmoothingMatrix::from_flow(flow, nu)?;
    let pi = normalize_vector(&apply(&flow.entries, nu.weights()))?;
    let d = nu.dim();
    let rho = &smoothing.entries;
    let ratio: Vec<f64> = v.components().iter().zip(nu.weights()).map(|(a, b)| a / b).collect();
    // Σ_j (v^j/ν^j) ρ^{ji} for each terminal state i
    let weighted: Vec<f64> = (0..d).map(|i| (0..d).map(|j| ratio[j] * rho[(j, i)]).sum()).collect();
    let average: f64 = (0..d).map(|k| pi[k] * weighted[k]).sum();
    Ok(TangentVector::from_raw((0..d).map(|i| pi[i] * (weighted[i] - average)).collect()))
}

/// First derivative `Dπ_{s,t}(ν)·v` by the smoothing route.
pub fn derivative_smoothing_route(
    nu: &SimplexPoint,
    v: &TangentVector,
    start: usize,
    end: usize,
    observations: &ObservationPath,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
) -> Result<TangentVector> {
    let flow = zakai_flow(start, end, observations, generator, levels)?;
    derivative_smoothing_from_flow(&flow, nu, v)
}

/// Filter started at `μ` rebuilt from the smoothing data of the filter
/// started at `ν`: `π^i(μ) ∝ π^i(ν) Σ_j (μ^j/ν^j) ρ^{ji}`.
pub fn tilted_filter(flow: &FlowMatrix, nu: &SimplexPoint, mu: &SimplexPoint) -> Result<SimplexPoint> {
    check_dim(nu.dim(), mu.dim())?;
    let smoothing = SmoothingMatrix::from_flow(flow, nu)?;
    let pi = normalize_vector(&apply(&flow.entries, nu.weights()))?;
    let d = nu.dim();
    let unnormalized: Vec<f64> = (0..d)
        .map(|i| pi[i] * (0..d).map(|j| mu.weights()[j] / nu.weights()[j] * smoothing.entries[(j, i)]).sum::<f64>())
        .collect();
    let sum: f64 = unnormalized.iter().sum();
    SimplexPoint::with_boundary(unnormalized.iter().map(|x| x / sum).collect())
}

fn normalize_vector(x: &[f64]) -> Result<Vec<f64>> {
    check_positive(x)?;
    let sum: f64 = x.iter().sum();
    Ok(x.iter().map(|v| v / sum).collect())
}

fn weighted_l1(v: &[f64], mu: &SimplexPoint) -> f64 {
    v.iter().zip(mu.weights()).map(|(a, b)| a.abs() / b).sum()
}

/// `Σ_k |v^k|/μ^k · exp(-β (t - s))` with `β` the mixing rate of `generator`.
pub fn derivative_bound(mu: &SimplexPoint, v: &TangentVector, horizon: f64, generator: &GeneratorMatrix) -> Result<f64> {
    mu.require_interior()?;
    check_dim(mu.dim(), v.dim())?;
    Ok(weighted_l1(v.components(), mu) * (-mixing_rate(generator)? * horizon).exp())
}

/// `C |μ₂ - μ₁|₁ exp(-β (t - s))` with `C = max_k (1/μ₁^k ∨ 1/μ₂^k)`.
pub fn lipschitz_bound(mu1: &SimplexPoint, mu2: &SimplexPoint, horizon: f64, generator: &GeneratorMatrix) -> Result<f64> {
    mu1.require_interior()?;
    mu2.require_interior()?;
    check_dim(mu1.dim(), mu2.dim())?;
    let c = mu1.weights().iter().chain(mu2.weights()).map(|w| 1.0 / w).fold(0.0, f64::max);
    Ok(c * mu1.l1_distance(mu2) * (-mixing_rate(generator)? * horizon).exp())
}

/// `2 Σ_k (|v^k + w^k|/μ^k) Σ_j (|v^j - w^j|/μ^j) exp(-β (t - s))`, the bound
/// on `|D²π·v - D²π·w|₁`.
pub fn second_derivative_difference_bound(
    mu: &SimplexPoint,
    v: &TangentVector,
    w: &TangentVector,
    horizon: f64,
    generator: &GeneratorMatrix,
) -> Result<f64> {
    mu.require_interior()?;
    check_dim(mu.dim(), v.dim())?;
    check_dim(mu.dim(), w.dim())?;
    let sum = weighted_l1(v.add(w).components(), mu);
    let diff = weighted_l1(v.sub(w).components(), mu);
    Ok(2.0 * sum * diff * (-mixing_rate(generator)? * horizon).exp())
}

/// Which computation produced a derivative value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    Flow,
    Smoothing,
    FiniteDifference,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::Flow => "flow",
            Route::Smoothing => "smoothing",
            Route::FiniteDifference => "finite-difference",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeRecord {
    pub direction: TangentVector,
    pub value: TangentVector,
    pub route: Route,
    pub start: usize,
    pub end: usize,
    /// Analytic bound on `|value|₁`, when one applies.
    pub bound: Option<f64>,
}

/// Writes records as `route,s,t,v1..vd,dv1..dvd,norm,bound`.
pub fn write_derivative_csv<W: Write>(out: W, records: &[DerivativeRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let d = records.first().map_or(0, |r| r.direction.dim());
    let mut header = vec!["route".to_string(), "s".into(), "t".into()];
    header.extend((1..=d).map(|i| format!("v{i}")));
    header.extend((1..=d).map(|i| format!("dv{i}")));
    header.push("norm".into());
    header.push("bound".into());
    writer.write_record(&header)?;
    for record in records {
        check_dim(d, record.direction.dim())?;
        let mut row = vec![record.route.as_str().to_string(), record.start.to_string(), record.end.to_string()];
        row.extend(record.direction.components().iter().map(|x| x.to_string()));
        row.extend(record.value.components().iter().map(|x| x.to_string()));
        row.push(record.value.l1_norm().to_string());
        row.push(record.bound.map_or(String::new(), |b| b.to_string()));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Both sides of the exact-model error representation at the final node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRepresentation {
    /// `π̆_t - π_t(μ)`, misspecified minus exact filter from the same start.
    pub lhs: Vec<f64>,
    /// `∫₀ᵗ Dπ_{s,t}(π̆_s)·((Λ̃* - Λ*) π̆_s) ds` by the trapezoid rule.
    pub rhs: Vec<f64>,
    pub residual: f64,
}

/// One side of the pathwise inequality
/// `|π_t(ν) - π̃_t(μ)|₁ ≤ |π̃_t(ν) - π̃_t(μ)|₁ + ∫₀ᵗ |Dπ̃_{s,t}(π_s)·((Λ* - Λ̃*) π_s)|₁ ds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimpleBound {
    pub lhs: f64,
    pub rhs: f64,
}

/// One-cell propagators of the Zakai equation, each scaled to unit entry sum.
fn cell_propagators(
    observations: &ObservationPath,
    end: usize,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
) -> Result<Vec<DMatrix<f64>>> {
    let d = generator.dim();
    let mut integrator = CellIntegrator::forward(generator, levels, observations.dt)?;
    let mut cells = Vec::with_capacity(end);
    for &dy in &observations.increments[..end] {
        let mut m = DMatrix::<f64>::identity(d, d);
        integrator.advance(m.as_mut_slice(), d, dy);
        let sum = m.sum();
        cells.push(m / sum);
    }
    Ok(cells)
}

/// `∫₀ᵗ Dπ_{s,t}(p_s)·w(p_s) ds` by the trapezoid rule on the grid, where
/// `Dπ` belongs to `(generator, levels)` and `p` is a trajectory.
fn derivative_integral(
    observations: &ObservationPath,
    end: usize,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
    trajectory: impl Fn(usize) -> Vec<f64>,
    direction: impl Fn(&[f64]) -> Vec<f64>,
    mut accumulate: impl FnMut(f64, &[f64]),
) -> Result<()> {
    let d = generator.dim();
    let cells = cell_propagators(observations, end, generator, levels)?;
    // backward products U_{s_k,t}, rescaled freely since DΣ(αx)αy = DΣ(x)y
    let mut backward = DMatrix::<f64>::identity(d, d);
    for k in (0..=end).rev() {
        if k < end {
            backward = &backward * &cells[k];
            let sum = backward.sum();
            backward /= sum;
        }
        let p = trajectory(k);
        let w = direction(&p);
        let x = apply(&backward, &p);
        check_positive(&x)?;
        let y = apply(&backward, &w);
        let weight = if k == 0 || k == end { 0.5 } else { 1.0 } * observations.dt;
        accumulate(weight, &normalize_derivative(&x, &y));
    }
    Ok(())
}

fn generator_action(generator: &GeneratorMatrix, p: &[f64]) -> Vec<f64> {
    let d = p.len();
    (0..d).map(|i| (0..d).map(|j| generator.get(j, i) * p[j]).sum()).collect()
}

fn require_same_levels(pair: &ModelPair) -> Result<()> {
    if pair.truth.levels != pair.approx.levels {
        return Err(Error::ObservationMismatch);
    }
    Ok(())
}

/// Evaluates both sides of
/// `π̆_t - π_t(μ) = ∫₀ᵗ Dπ_{s,t}(π̆_s)·((Λ̃* - Λ*) π̆_s) ds`
/// over cells `0..end`, where `π̆` is the filter built from `pair.approx`, `π`
/// the filter of `pair.truth`, both started at `pair.approx.initial`.
pub fn error_representation_check(pair: &ModelPair, end: usize, observations: &ObservationPath) -> Result<ErrorRepresentation> {
    require_same_levels(pair)?;
    if end > observations.len() {
        return Err(Error::GridMismatch(format!("{end} cells requested from a path of {}", observations.len())));
    }
    let mu = &pair.approx.initial;
    let levels = &pair.truth.levels;
    let prefix = ObservationPath::new(observations.dt, observations.increments[..end].to_vec())?;
    let approx = run_filter(ModelTag::Approx, mu, &prefix, &pair.approx.generator, levels)?;
    let exact = run_filter(ModelTag::True, mu, &prefix, &pair.truth.generator, levels)?;
    let lhs: Vec<f64> = approx.last().iter().zip(exact.last()).map(|(a, b)| a - b).collect();

    let d = pair.dim();
    let mut rhs = vec![0.0; d];
    derivative_integral(
        &prefix,
        end,
        &pair.truth.generator,
        levels,
        |k| approx.at(k).to_vec(),
        |p| {
            let a = generator_action(&pair.approx.generator, p);
            let b = generator_action(&pair.truth.generator, p);
            a.iter().zip(&b).map(|(x, y)| x - y).collect()
        },
        |weight, value| rhs.iter_mut().zip(value).for_each(|(r, v)| *r += weight * v),
    )?;
    let residual = l1_distance(&lhs, &rhs);
    Ok(ErrorRepresentation { lhs, rhs, residual })
}

/// Evaluates both sides of the triangle-inequality bound on
/// `|π_t(ν) - π̃_t(μ)|₁` over cells `0..end` (requires `h̃ = h`).
pub fn simple_bound_check(pair: &ModelPair, end: usize, observations: &ObservationPath) -> Result<SimpleBound> {
    require_same_levels(pair)?;
    if end > observations.len() {
        return Err(Error::GridMismatch(format!("{end} cells requested from a path of {}", observations.len())));
    }
    let nu = &pair.truth.initial;
    let mu = &pair.approx.initial;
    let levels = &pair.truth.levels;
    let prefix = ObservationPath::new(observations.dt, observations.increments[..end].to_vec())?;
    let exact = run_filter(ModelTag::True, nu, &prefix, &pair.truth.generator, levels)?;
    let approx_mu = run_filter(ModelTag::Approx, mu, &prefix, &pair.approx.generator, levels)?;
    let approx_nu = run_filter(ModelTag::Approx, nu, &prefix, &pair.approx.generator, levels)?;

    let lhs = l1_distance(exact.last(), approx_mu.last());
    let mut integral = 0.0;
    derivative_integral(
        &prefix,
        end,
        &pair.approx.generator,
        levels,
        |k| exact.at(k).to_vec(),
        |p| {
            let a = generator_action(&pair.truth.generator, p);
            let b = generator_action(&pair.approx.generator, p);
            a.iter().zip(&b).map(|(x, y)| x - y).collect()
        },
        |weight, value| integral += weight * value.iter().map(|x| x.abs()).sum::<f64>(),
    )?;
    let rhs = l1_distance(approx_nu.last(), approx_mu.last()) + integral;
    Ok(SimpleBound { lhs, rhs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{filter_semiflow, gauge_filter};
    use crate::model::Model;
    use crate::signal::{simulate_trial, TimeGrid};
    use approx::assert_relative_eq;

    fn gen(rows: &[&[f64]]) -> GeneratorMatrix {
        GeneratorMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn three_state() -> Model {
        Model::new(
            SimplexPoint::new(vec![0.2, 0.3, 0.5]).unwrap(),
            gen(&[&[-2.0, 1.0, 1.0], &[0.5, -1.0, 0.5], &[1.5, 0.5, -2.0]]),
            ObservationMap::new(vec![-1.0, 0.0, 2.0]).unwrap(),
        )
        .unwrap()
    }

    fn path(model: &Model, t: f64, seed: u64) -> ObservationPath {
        let grid = TimeGrid::new(t, 1e-3).unwrap();
        simulate_trial(model, &grid, seed).unwrap().1
    }

    fn tangent(c: &[f64]) -> TangentVector {
        TangentVector::new(c.to_vec()).unwrap()
    }

    #[test]
    fn zero_horizon_derivative_is_identity() {
        let model = three_state();
        let obs = path(&model, 0.1, 1);
        let v = tangent(&[0.1, -0.3, 0.2]);
        let out = derivative_flow(&model.initial, &v, 40, 40, &obs, &model.generator, &model.levels).unwrap();
        assert!(l1_distance(out.components(), v.components()) < 1e-15);
    }

    #[test]
    fn first_derivative_routes_agree() {
        let model = three_state();
        let obs = path(&model, 1.0, 2);
        let mu = &model.initial;
        let v = tangent(&[0.05, 0.1, -0.15]);
        let (g, h) = (&model.generator, &model.levels);
        let flow = derivative_flow(mu, &v, 0, 1000, &obs, g, h).unwrap();
        let smooth = derivative_smoothing_route(mu, &v, 0, 1000, &obs, g, h).unwrap();

        let eps = 1e-6;
        let plus: Vec<f64> = mu.weights().iter().zip(v.components()).map(|(a, b)| a + eps * b).collect();
        let minus: Vec<f64> = mu.weights().iter().zip(v.components()).map(|(a, b)| a - eps * b).collect();
        let fp = gauge_filter(&plus, 0, 1000, &obs, g, h).unwrap().direction;
        let fm = gauge_filter(&minus, 0, 1000, &obs, g, h).unwrap().direction;
        let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();

        let scale = flow.l1_norm();
        assert!(l1_distance(flow.components(), smooth.components()) <= 1e-10 * scale);
        assert!(l1_distance(flow.components(), &fd) <= 1e-4 * scale);
        assert!(flow.components().iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn smoothing_matrix_columns_are_laws() {
        let model = three_state();
        let obs = path(&model, 2.0, 3);
        let s = smoothing_matrix(&model.initial, 0, 2000, &obs, &model.generator, &model.levels).unwrap();
        for i in 0..3 {
            assert_relative_eq!(s.entries.column(i).sum(), 1.0, epsilon = 1e-12);
        }
        assert!(s.entries.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let identity = smoothing_matrix(&model.initial, 5, 5, &obs, &model.generator, &model.levels).unwrap();
        assert_eq!(identity.entries, DMatrix::identity(3, 3));
        assert_eq!(identity.column_spread(), 1.0);
        let bound = smoothing_spread_bound(&model.generator, 2.0).unwrap();
        assert!(s.column_spread() <= bound, "{} > {bound}", s.column_spread());
    }

    #[test]
    fn tilted_filter_matches_direct_filter() {
        let model = three_state();
        let obs = path(&model, 1.5, 4);
        let flow = zakai_flow(0, 1500, &obs, &model.generator, &model.levels).unwrap();
        let mu = SimplexPoint::new(vec![0.7, 0.2, 0.1]).unwrap();
        let tilted = tilted_filter(&flow, &model.initial, &mu).unwrap();
        let direct = filter_semiflow(&mu, 0, 1500, &obs, &model.generator, &model.levels).unwrap();
        assert!(tilted.l1_distance(&direct) < 1e-10);
    }

    #[test]
    fn bound_examples() {
        let g = gen(&[&[-1.0, 1.0], &[1.0, -1.0]]);
        let mu = SimplexPoint::new(vec![0.5, 0.5]).unwrap();
        let v = tangent(&[1.0, -1.0]);
        assert_relative_eq!(derivative_bound(&mu, &v, 1.0, &g).unwrap(), 4.0 * (-2.0f64).exp(), epsilon = 1e-15);
        assert_eq!(derivative_bound(&mu, &v, 0.0, &g).unwrap(), 4.0);
        assert_eq!(lipschitz_bound(&mu, &mu, 1.0, &g).unwrap(), 0.0);
        let mu2 = SimplexPoint::new(vec![0.25, 0.75]).unwrap();
        assert_relative_eq!(lipschitz_bound(&mu, &mu2, 0.5, &g).unwrap(), 4.0 * 0.5 * (-1.0f64).exp(), epsilon = 1e-15);
        let w = tangent(&[0.5, -0.5]);
        // 2 · (3 + 3) · (1 + 1) · e^{-2}
        assert_relative_eq!(
            second_derivative_difference_bound(&mu, &v, &w, 1.0, &g).unwrap(),
            24.0 * (-2.0f64).exp(),
            epsilon = 1e-14
        );
        let lazy = gen(&[&[0.0, 0.0], &[1.0, -1.0]]);
        assert!(matches!(derivative_bound(&mu, &v, 1.0, &lazy), Err(Error::NotMixing { .. })));
    }

    #[test]
    fn second_derivative_matches_finite_differences() {
        let model = three_state();
        let obs = path(&model, 0.5, 6);
        let (g, h) = (&model.generator, &model.levels);
        let mu = &model.initial;
        let v = tangent(&[0.3, -0.1, -0.2]);
        let exact = second_derivative_flow(mu, &v, 0, 500, &obs, g, h).unwrap();
        let eps = 1e-4;
        let at = |e: f64| {
            let x: Vec<f64> = mu.weights().iter().zip(v.components()).map(|(a, b)| a + e * b).collect();
            gauge_filter(&x, 0, 500, &obs, g, h).unwrap().direction
        };
        let (p, c, m) = (at(eps), at(0.0), at(-eps));
        let fd: Vec<f64> = (0..3).map(|i| (p[i] - 2.0 * c[i] + m[i]) / (eps * eps)).collect();
        assert!(l1_distance(exact.components(), &fd) <= 1e-2 * exact.l1_norm());

        // at zero horizon a tangent direction keeps Σ linear
        let at_start = second_derivative_flow(mu, &v, 0, 0, &obs, g, h).unwrap();
        assert!(at_start.l1_norm() < 1e-15);
    }

    #[test]
    fn normalize_second_derivative_matches_finite_differences() {
        let x = [1.0, 2.0, 3.0];
        let y = [0.5, -0.2, 0.4];
        let exact = normalize_second_derivative(&x, &y);
        let eps = 1e-4;
        let sigma = |e: f64| {
            let z: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + e * b).collect();
            crate::filter::normalize(&z).unwrap().weights().to_vec()
        };
        let (p, c, m) = (sigma(eps), sigma(0.0), sigma(-eps));
        let fd: Vec<f64> = (0..3).map(|i| (p[i] - 2.0 * c[i] + m[i]) / (eps * eps)).collect();
        let scale: f64 = exact.iter().map(|v| v.abs()).sum();
        assert!(l1_distance(&exact, &fd) <= 1e-2 * scale);
    }

    #[test]
    fn error_representation_closes() {
        let truth = Model::new(
            SimplexPoint::new(vec![0.5, 0.5]).unwrap(),
            gen(&[&[-1.0, 1.0], &[1.0, -1.0]]),
            ObservationMap::new(vec![0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let approx = Model::new(
            SimplexPoint::new(vec![0.4, 0.6]).unwrap(),
            gen(&[&[-1.1, 1.1], &[0.9, -0.9]]),
            ObservationMap::new(vec![0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let pair = ModelPair::new(truth.clone(), approx).unwrap();
        let obs = path(&truth, 2.0, 9);
        let rep = error_representation_check(&pair, 2000, &obs).unwrap();
        assert!(rep.residual < 1e-4, "residual {}", rep.residual);
        assert!(l1_distance(&rep.lhs, &[0.0, 0.0]) > 1e-3);

        let same = ModelPair::exact(truth.clone());
        let zero = error_representation_check(&same, 2000, &obs).unwrap();
        assert_eq!(zero.residual, 0.0);

        let bound = simple_bound_check(&pair, 2000, &obs).unwrap();
        assert!(bound.lhs <= bound.rhs);

        let mut other = pair.clone();
        other.approx.levels = ObservationMap::new(vec![0.0, 1.1]).unwrap();
        assert_eq!(error_representation_check(&other, 2000, &obs).unwrap_err(), Error::ObservationMismatch);
    }

    #[test]
    fn derivative_csv_layout() {
        let v = tangent(&[0.5, -0.5]);
        let record = DerivativeRecord { direction: v.clone(), value: v, route: Route::Smoothing, start: 0, end: 10, bound: Some(2.0) };
        let mut buffer = Vec::new();
        write_derivative_csv(&mut buffer, &[record]).unwrap();
        let text = String::from_utf8(buffer).unwrap();
        assert_eq!(text.lines().next().unwrap(), "route,s,t,v1,v2,dv1,dv2,norm,bound");
        assert_eq!(text.lines().nth(1).unwrap(), "smoothing,0,10,0.5,-0.5,0.5,-0.5,1,2");
    }
}
