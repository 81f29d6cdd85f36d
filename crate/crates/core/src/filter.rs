//! Exact and misspecified Wonham filters.
//!
//! The reference integrator is the pathwise (gauge) form of the Zakai
//! equation. With `Λ* = S + T`, `S` diagonal and `T ≥ 0` off-diagonal, the
//! transform `f = L ρ`, `L_{s,t} = exp((½H² - S)(t-s) - H(Y_t - Y_s))`,
//! turns the Zakai SDE into the random linear ODE `f' = L T L⁻¹ f`. Inside a
//! grid cell `Y` is interpolated linearly, the gauge is restarted at the
//! cell's left node and the ODE is advanced by one classical Runge-Kutta
//! step. The coefficient matrix is entrywise nonnegative, so every stage of
//! the step stays in the positive orthant.
//!
//! Unnormalised quantities are stored as a unit-ℓ₁ vector (or unit-sum
//! matrix) together with an accumulated natural-log scale.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_dim, GeneratorMatrix, ObservationMap, SimplexPoint};
use crate::signal::ObservationPath;
use crate::tolerance::{EM_CLIP_FLOOR, EM_COLLAPSE_LEVEL, FLOW_CONDITION_LIMIT};

/// `Σ(x) = x / |x|₁` for a positive vector.
pub fn normalize(x: &[f64]) -> Result<SimplexPoint> {
    check_positive(x)?;
    let max = x.iter().copied().fold(0.0, f64::max);
    let scaled: Vec<f64> = x.iter().map(|v| v / max).collect();
    let sum: f64 = scaled.iter().sum();
    Ok(SimplexPoint::from_normalized_unchecked(scaled.iter().map(|v| v / sum).collect()))
}

/// `[DΣ(x)]_{ij} = (δ_ij - Σ_i(x)) / |x|₁`.
pub fn normalize_jacobian(x: &[f64]) -> Result<DMatrix<f64>> {
    check_positive(x)?;
    let norm: f64 = x.iter().sum();
    let d = x.len();
    Ok(DMatrix::from_fn(d, d, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        (delta - x[i] / norm) / norm
    }))
}

pub(crate) fn check_positive(x: &[f64]) -> Result<()> {
    match x.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        Some(index) => Err(Error::NonPositiveEntry { index, value: x[index] }),
        None => Ok(()),
    }
}

/// One Euler-Maruyama step of the Wonham equation followed by clipping at
/// `1e-14` and renormalisation. Diagnostic only.
pub fn wonham_step(
    pi: &SimplexPoint,
    dy: f64,
    dt: f64,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
) -> Result<SimplexPoint> {
    let d = generator.dim();
    check_dim(d, pi.dim())?;
    check_dim(d, levels.dim())?;
    let mut next = pi.weights().to_vec();
    euler_maruyama_in_place(&mut next, dy, dt, generator, levels)?;
    Ok(SimplexPoint::from_normalized_unchecked(next))
}

fn euler_maruyama_in_place(
    pi: &mut [f64],
    dy: f64,
    dt: f64,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
) -> Result<()> {
    let d = pi.len();
    let h = levels.levels();
    let mean = levels.mean(pi);
    let innovation = dy - mean * dt;
    let previous = pi.to_vec();
    for i in 0..d {
        let drift: f64 = (0..d).map(|j| generator.get(j, i) * previous[j]).sum();
        pi[i] = previous[i] + drift * dt + (h[i] - mean) * previous[i] * innovation;
    }
    if let Some(index) = pi.iter().position(|&v| v < EM_COLLAPSE_LEVEL) {
        return Err(Error::StateCollapse { index, value: pi[index] });
    }
    pi.iter_mut().for_each(|v| *v = v.max(EM_CLIP_FLOOR));
    let sum: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= sum);
    Ok(())
}

/// One-cell integrator for the gauge-transformed linear equation
/// `f' = E(τ) N E(τ)⁻¹ f`, `E(τ) = diag(exp(a_i τ))`,
/// `a_i = base_i + noise_i · ΔY / dt`, followed by `x ← E(dt)⁻¹ f`.
///
/// The forward Zakai flow uses `base = ½h² - λ_ii`, `noise = -h`,
/// `N = Λ*` off the diagonal; the inverse flow (acting on the transpose of
/// `U⁻¹`) uses the negated base and noise with `N = -Λ` off the diagonal.
#[derive(Debug, Clone)]
pub struct CellIntegrator {
    d: usize,
    dt: f64,
    coupling: Vec<f64>,
    base: Vec<f64>,
    noise: Vec<f64>,
    a: Vec<f64>,
    half: Vec<f64>,
    full: Vec<f64>,
    stage: Vec<f64>,
    k: [Vec<f64>; 4],
}

impl CellIntegrator {
    fn with_parts(coupling: Vec<f64>, base: Vec<f64>, noise: Vec<f64>, dt: f64) -> Self {
        let d = base.len();
        Self {
            d,
            dt,
            coupling,
            base,
            noise,
            a: vec![0.0; d],
            half: vec![0.0; d],
            full: vec![0.0; d],
            stage: Vec::new(),
            k: [Vec::new(), Vec::new(), Vec::new(), Vec::new()],
        }
    }

    /// Integrator of the forward Zakai equation `dρ = Λ*ρ dt + Hρ dY`.
    pub fn forward(generator: &GeneratorMatrix, levels: &ObservationMap, dt: f64) -> Result<Self> {
        let d = generator.dim();
        check_dim(d, levels.dim())?;
        let h = levels.levels();
        let mut coupling = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    coupling[i * d + j] = generator.get(j, i);
                }
            }
        }
        let base = (0..d).map(|i| 0.5 * h[i] * h[i] - generator.get(i, i)).collect();
        let noise = h.iter().map(|x| -x).collect();
        Ok(Self::with_parts(coupling, base, noise, dt))
    }

    /// Integrator of `dZ = (H² - Λ) Z dt - H Z dY`, the equation solved by
    /// `Z = (U⁻¹)ᵀ`.
    pub fn inverse(generator: &GeneratorMatrix, levels: &ObservationMap, dt: f64) -> Result<Self> {
        let d = generator.dim();
        check_dim(d, levels.dim())?;
        let h = levels.levels();
        let mut coupling = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    coupling[i * d + j] = -generator.get(i, j);
                }
            }
        }
        let base = (0..d).map(|i| -(0.5 * h[i] * h[i] - generator.get(i, i))).collect();
        let noise = h.to_vec();
        Ok(Self::with_parts(coupling, base, noise, dt))
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances `cols` column vectors stored column-major in `x` across one
    /// cell with increment `dy`. Returns the log of a common scalar factor
    /// that was taken out of `x` (the caller adds it to its log-scale).
    pub fn advance(&mut self, x: &mut [f64], cols: usize, dy: f64) -> f64 {
        let d = self.d;
        let dt = self.dt;
        debug_assert_eq!(x.len(), d * cols);
        let slope = dy / dt;
        for i in 0..d {
            self.a[i] = self.base[i] + self.noise[i] * slope;
        }
        // Shift the exponents by their mean; the shift is a common factor.
        let shift = self.a.iter().sum::<f64>() / d as f64;
        for i in 0..d {
            self.a[i] -= shift;
            self.half[i] = (0.5 * self.a[i] * dt).exp();
            self.full[i] = self.half[i] * self.half[i];
        }
        let n = d * cols;
        self.stage.resize(n, 0.0);
        for k in self.k.iter_mut() {
            k.resize(n, 0.0);
        }

        // k1 = N x
        apply_gauged(&self.coupling, None, d, cols, x, &mut self.k[0]);
        // k2 = M(dt/2)(x + dt/2 k1)
        for (s, (xi, ki)) in self.stage.iter_mut().zip(x.iter().zip(&self.k[0])) {
            *s = xi + 0.5 * dt * ki;
        }
        apply_gauged(&self.coupling, Some(&self.half), d, cols, &self.stage, &mut self.k[1]);
        // k3 = M(dt/2)(x + dt/2 k2)
        for (s, (xi, ki)) in self.stage.iter_mut().zip(x.iter().zip(&self.k[1])) {
            *s = xi + 0.5 * dt * ki;
        }
        apply_gauged(&self.coupling, Some(&self.half), d, cols, &self.stage, &mut self.k[2]);
        // k4 = M(dt)(x + dt k3)
        for (s, (xi, ki)) in self.stage.iter_mut().zip(x.iter().zip(&self.k[2])) {
            *s = xi + dt * ki;
        }
        apply_gauged(&self.coupling, Some(&self.full), d, cols, &self.stage, &mut self.k[3]);

        let [k1, k2, k3, k4] = &self.k;
        for c in 0..cols {
            for i in 0..d {
                let idx = c * d + i;
                let f = x[idx] + dt / 6.0 * (k1[idx] + 2.0 * k2[idx] + 2.0 * k3[idx] + k4[idx]);
                x[idx] = f / self.full[i];
            }
        }
        -shift * dt
    }
}

/// `out = E N E⁻¹ x` column by column, with `E = diag(gauge)` (identity when `None`).
fn apply_gauged(coupling: &[f64], gauge: Option<&[f64]>, d: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for c in 0..cols {
        let xc = &x[c * d..(c + 1) * d];
        let oc = &mut out[c * d..(c + 1) * d];
        for i in 0..d {
            let row = &coupling[i * d..(i + 1) * d];
            let mut acc = 0.0;
            match gauge {
                Some(e) => {
                    for j in 0..d {
                        acc += row[j] * xc[j] / e[j];
                    }
                    acc *= e[i];
                }
                None => {
                    for j in 0..d {
                        acc += row[j] * xc[j];
                    }
                }
            }
            oc[i] = acc;
        }
    }
}

fn check_span(observations: &ObservationPath, start: usize, end: usize) -> Result<()> {
    if start > end || end > observations.len() {
        return Err(Error::GridMismatch(format!(
            "cell range [{start}, {end}] outside a path of {} cells",
            observations.len()
        )));
    }
    Ok(())
}

/// Unnormalised filter `ρ = exp(log_scale) · direction` with `|direction|₁ = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledVector {
    pub direction: Vec<f64>,
    pub log_scale: f64,
}

impl ScaledVector {
    pub fn from_positive(x: &[f64]) -> Result<Self> {
        check_positive(x)?;
        let mut out = Self { direction: x.to_vec(), log_scale: 0.0 };
        out.renormalize();
        Ok(out)
    }

    fn renormalize(&mut self) {
        let sum: f64 = self.direction.iter().sum();
        self.direction.iter_mut().for_each(|v| *v /= sum);
        self.log_scale += sum.ln();
    }

    /// The unnormalised vector itself; may overflow for long horizons.
    pub fn value(&self) -> Vec<f64> {
        let scale = self.log_scale.exp();
        self.direction.iter().map(|v| v * scale).collect()
    }
}

/// Streaming gauge filter for one model: advance one cell at a time.
#[derive(Debug, Clone)]
pub struct PathwiseFilter {
    integrator: CellIntegrator,
    state: ScaledVector,
}

impl PathwiseFilter {
    pub fn new(generator: &GeneratorMatrix, levels: &ObservationMap, initial: &[f64], dt: f64) -> Result<Self> {
        check_dim(generator.dim(), initial.len())?;
        Ok(Self {
            integrator: CellIntegrator::forward(generator, levels, dt)?,
            state: ScaledVector::from_positive(initial)?,
        })
    }

    pub fn step(&mut self, dy: f64) {
        let shift = self.integrator.advance(&mut self.state.direction, 1, dy);
        self.state.log_scale += shift;
        self.state.renormalize();
    }

    /// Like [`PathwiseFilter::step`] but leaves the log-scale untouched, for
    /// callers that only need the conditional law.
    pub fn step_law(&mut self, dy: f64) {
        self.integrator.advance(&mut self.state.direction, 1, dy);
        let sum: f64 = self.state.direction.iter().sum();
        self.state.direction.iter_mut().for_each(|v| *v /= sum);
    }

    /// Conditional law at the current node.
    pub fn probabilities(&self) -> &[f64] {
        &self.state.direction
    }

    pub fn unnormalized(&self) -> &ScaledVector {
        &self.state
    }
}

/// `ρ_{s,t}(μ)` for a positive `μ`, integrated over cells `start..end`.
pub fn gauge_filter(
    initial: &[f64],
    start: usize,
    end: usize,
    observations: &ObservationPath,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
) -> Result<ScaledVector> {
    check_span(observations, start, end)?;
    let mut filter = PathwiseFilter::new(generator, levels, initial, observations.dt)?;
    for &dy in &observations.increments[start..end] {
        filter.step(dy);
    }
    Ok(filter.state)
}

/// `π_{s,t}(μ) = Σ(ρ_{s,t}(μ))`.
pub fn filter_semiflow(
    initial: &SimplexPoint,
    start: usize,
    end: usize,
    observations: &ObservationPath,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
) -> Result<SimplexPoint> {
    let rho = gauge_filter(initial.weights(), start, end, observations, generator, levels)?;
    Ok(SimplexPoint::from_normalized_unchecked(rho.direction))
}

/// A linear flow `exp(log_scale) · entries` over the cells `start..end`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMatrix {
    pub entries: DMatrix<f64>,
    pub log_scale: f64,
    pub start: usize,
    pub end: usize,
}

impl FlowMatrix {
    pub fn identity(d: usize, at: usize) -> Self {
        Self { entries: DMatrix::identity(d, d), log_scale: 0.0, start: at, end: at }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// 2-norm condition number of the flow.
    pub fn condition_number(&self) -> f64 {
        let sv = self.entries.clone().singular_values();
        let max = sv.iter().copied().fold(0.0, f64::max);
        let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
        if min == 0.0 { f64::INFINITY } else { max / min }
    }

    /// `IllConditioned` once the condition number exceeds `1e12`.
    pub fn check_conditioning(&self) -> Result<()> {
        let cond = self.condition_number();
        if cond > FLOW_CONDITION_LIMIT {
            return Err(Error::IllConditioned(cond));
        }
        Ok(())
    }

    /// `self ∘ earlier`, i.e. `U_{r,t} U_{s,r}` for `self = U_{r,t}`.
    pub fn compose(&self, earlier: &FlowMatrix) -> Result<FlowMatrix> {
        if earlier.end != self.start {
            return Err(Error::GridMismatch(format!(
                "cannot compose flows over [{}, {}] and [{}, {}]",
                earlier.start, earlier.end, self.start, self.end
            )));
        }
        let product = &self.entries * &earlier.entries;
        let sum: f64 = product.iter().map(|v| v.abs()).sum();
        Ok(FlowMatrix {
            entries: product / sum,
            log_scale: self.log_scale + earlier.log_scale + sum.ln(),
            start: earlier.start,
            end: self.end,
        })
    }

    /// The flow with its scale restored; may overflow for long horizons.
    pub fn value(&self) -> DMatrix<f64> {
        &self.entries * self.log_scale.exp()
    }

    /// `U x`, returned as a scaled vector when the image is positive.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let v = &self.entries * nalgebra::DVector::from_column_slice(x);
        v.iter().copied().collect()
    }
}

fn integrate_flow(
    mut integrator: CellIntegrator,
    start: usize,
    end: usize,
    observations: &ObservationPath,
) -> FlowMatrix {
    let d = integrator.dim();
    let mut flow = FlowMatrix::identity(d, start);
    let buffer = flow.entries.as_mut_slice();
    let mut log_scale = 0.0;
    for &dy in &observations.increments[start..end] {
        log_scale += integrator.advance(buffer, d, dy);
        let sum: f64 = buffer.iter().map(|v| v.abs()).sum();
        buffer.iter_mut().for_each(|v| *v /= sum);
        log_scale += sum.ln();
    }
    flow.log_scale = log_scale;
    flow.end = end;
    flow
}

/// Zakai propagator `U_{s,t}` over cells `start..end`: every column is
/// advanced by the gauge integrator, so entries stay nonnegative.
pub fn zakai_flow(
    start: usize,
    end: usize,
    observations: &ObservationPath,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
) -> Result<FlowMatrix> {
    check_span(observations, start, end)?;
    let integrator = CellIntegrator::forward(generator, levels, observations.dt)?;
    Ok(integrate_flow(integrator, start, end, observations))
}

/// `U_{s,t}⁻¹` integrated from its own equation
/// `dU⁻¹ = -U⁻¹Λ* dt + U⁻¹H² dt - U⁻¹H dY`. Diagnostic only.
pub fn inverse_zakai_flow(
    start: usize,
    end: usize,
    observations: &ObservationPath,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
) -> Result<FlowMatrix> {
    check_span(observations, start, end)?;
    let integrator = CellIntegrator::inverse(generator, levels, observations.dt)?;
    let mut flow = integrate_flow(integrator, start, end, observations);
    flow.entries.transpose_mut();
    Ok(flow)
}

/// Which filter a trajectory belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    True,
    Approx,
}

/// Filter values at every grid node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTrajectory {
    pub tag: ModelTag,
    pub dim: usize,
    pub dt: f64,
    pub initial: SimplexPoint,
    /// Row-major `(n_steps + 1) × dim`.
    pub values: Vec<f64>,
    pub log_scale: Vec<f64>,
}

impl FilterTrajectory {
    pub fn len(&self) -> usize {
        self.log_scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_scale.is_empty()
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.at(self.len() - 1)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|i| format!("pi{i}")));
        header.push("log_scale".into());
        writer.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![(k as f64 * self.dt).to_string()];
            row.extend(self.at(k).iter().map(|v| v.to_string()));
            row.push(self.log_scale[k].to_string());
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Gauge filter from `initial` over the whole observation path.
pub fn run_filter(
    tag: ModelTag,
    initial: &SimplexPoint,
    observations: &ObservationPath,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
) -> Result<FilterTrajectory> {
    let d = generator.dim();
    let mut filter = PathwiseFilter::new(generator, levels, initial.weights(), observations.dt)?;
    let n = observations.len();
    let mut values = Vec::with_capacity((n + 1) * d);
    let mut log_scale = Vec::with_capacity(n + 1);
    values.extend_from_slice(filter.probabilities());
    log_scale.push(filter.unnormalized().log_scale);
    for &dy in &observations.increments {
        filter.step(dy);
        values.extend_from_slice(filter.probabilities());
        log_scale.push(filter.unnormalized().log_scale);
    }
    Ok(FilterTrajectory { tag, dim: d, dt: observations.dt, initial: initial.clone(), values, log_scale })
}

/// Euler-Maruyama filter over the whole path. Diagnostic only.
pub fn run_euler_maruyama(
    initial: &SimplexPoint,
    observations: &ObservationPath,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
) -> Result<Vec<f64>> {
    check_dim(generator.dim(), initial.dim())?;
    let d = generator.dim();
    let mut pi = initial.weights().to_vec();
    let mut values = Vec::with_capacity((observations.len() + 1) * d);
    values.extend_from_slice(&pi);
    for &dy in &observations.increments {
        euler_maruyama_in_place(&mut pi, dy, observations.dt, generator, levels)?;
        values.extend_from_slice(&pi);
    }
    Ok(values)
}
