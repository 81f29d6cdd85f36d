//! Closed-form constants of the stability and robustness bounds.
//!
//! Everything here is a direct function of the model parameters; no
//! simulation is involved.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{check_dim, GeneratorMatrix, ModelPair, ObservationMap, SimplexPoint};

/// Forgetting rate `β = 2 min_{p≠q} sqrt(λ_pq λ_qp)` of a mixing generator.
pub fn mixing_rate(generator: &GeneratorMatrix) -> Result<f64> {
    generator.require_mixing()?;
    let d = generator.dim();
    let mut min = f64::INFINITY;
    for p in 0..d {
        for q in 0..d {
            if p != q {
                min = min.min((generator.get(p, q) * generator.get(q, p)).sqrt());
            }
        }
    }
    Ok(2.0 * min)
}

/// `sup { |(Λ̃* - Λ*) τ|₁ : τ in the simplex }`.
///
/// The supremum of a convex function over the simplex sits at a vertex, and
/// vertex `e_j` picks out row `j` of `Λ̃ - Λ`, so this is the largest row ℓ₁
/// norm of the difference.
pub fn generator_gap(truth: &GeneratorMatrix, approx: &GeneratorMatrix) -> Result<f64> {
    check_dim(truth.dim(), approx.dim())?;
    let d = truth.dim();
    Ok((0..d)
        .map(|j| (0..d).map(|i| (approx.get(j, i) - truth.get(j, i)).abs()).sum::<f64>())
        .fold(0.0, f64::max))
}

/// Upper bound on `sup_t E(1 / min_i π_t^i)` for the exact filter:
/// `Σ_i max(1/ν^i, K₂ⁱ/K₁ⁱ)` with `K₁ⁱ = min_{j≠i} λ_ji` and
/// `K₂ⁱ = |λ_ii| + K₁ⁱ + max_j (h^i - h^j)²`.
pub fn inverse_moment_constant(
    initial: &SimplexPoint,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
) -> Result<f64> {
    generator.require_mixing()?;
    initial.require_interior()?;
    let d = generator.dim();
    check_dim(d, initial.dim())?;
    check_dim(d, levels.dim())?;
    let h = levels.levels();
    let mut total = 0.0;
    for i in 0..d {
        let k1 = (0..d)
            .filter(|&j| j != i)
            .map(|j| generator.get(j, i))
            .fold(f64::INFINITY, f64::min);
        let spread = h.iter().map(|hj| (h[i] - hj).powi(2)).fold(0.0, f64::max);
        let k2 = generator.exit_rate(i) + k1 + spread;
        total += (1.0 / initial.weights()[i]).max(k2 / k1);
    }
    Ok(total)
}

/// Bound on `E (π_t^i)^{-k}`:
/// `(ν^i)^{-k} exp(-k λ_ii t + ½ k(k+1) max_j (h^i - h^j)² t)`.
pub fn inverse_power_moment_bound(
    initial: &SimplexPoint,
    generator: &GeneratorMatrix,
    levels: &ObservationMap,
    state: usize,
    power: u32,
    t: f64,
) -> Result<f64> {
    initial.require_interior()?;
    check_dim(generator.dim(), initial.dim())?;
    check_dim(generator.dim(), levels.dim())?;
    let h = levels.levels();
    let k = power as f64;
    let spread = h.iter().map(|hj| (h[state] - hj).powi(2)).fold(0.0, f64::max);
    let exponent = -k * generator.get(state, state) * t + 0.5 * k * (k + 1.0) * spread * t;
    Ok(initial.weights()[state].powf(-k) * exponent.exp())
}

/// Sizes of the three misspecifications entering the robustness bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationGaps {
    /// `|μ - ν|₁`
    pub initial: f64,
    /// `|h̃ - h|₁`
    pub levels: f64,
    /// `|Λ̃* - Λ*|`
    pub generator: f64,
}

impl PerturbationGaps {
    pub fn of(pair: &ModelPair) -> Result<Self> {
        Ok(Self {
            initial: pair.truth.initial.l1_distance(&pair.approx.initial),
            levels: pair.truth.levels.l1_distance(&pair.approx.levels)?,
            generator: generator_gap(&pair.truth.generator, &pair.approx.generator)?,
        })
    }

    pub fn is_zero(&self) -> bool {
        self.initial == 0.0 && self.levels == 0.0 && self.generator == 0.0
    }
}

/// Constants `C₁, C₂, C₃` of the uniform-in-time robustness bound
/// `sup_t E‖π̃_t(μ) - π_t(ν)‖² ≤ C₁|μ-ν| + C₂|h̃-h| + C₃|Λ̃*-Λ*|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub beta: f64,
    /// `Σ_i max(1/ν^i, K₂ⁱ/K₁ⁱ)`, the bound on `sup_t E(1/min π_t)`.
    pub inverse_moment: f64,
    /// `2 max|h| + max|h̃|`
    pub k: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl BoundConstants {
    /// Full bound, valid at every time.
    pub fn bound(&self, gaps: &PerturbationGaps) -> f64 {
        self.c1 * gaps.initial + self.c2 * gaps.levels + self.c3 * gaps.generator
    }

    /// Long-time bound without the initial-condition term.
    pub fn asymptotic_bound(&self, gaps: &PerturbationGaps) -> f64 {
        self.c2 * gaps.levels + self.c3 * gaps.generator
    }
}

/// Assembles `C₁, C₂, C₃`.
///
/// * `C₃ = β⁻¹ Σ_i max(1/ν^i, K₂ⁱ/K₁ⁱ)`
/// * `C₂ = β⁻¹ [K(d+1) + (d+1) max|h| + d osc(h̃) + d(d+1)(osc(h) + osc(h̃))]`
///   with `K = 2 max|h| + max|h̃|` and `osc(g) = max_{k,l} |g^k - g^l|`
/// * `C₁ = 6 max_k (1/μ^k ∨ 1/ν^k)`, using `‖x‖₂ ≤ |x|₁`.
///
/// `β` is the mixing rate of the approximate generator.
pub fn bound_constants(pair: &ModelPair) -> Result<BoundConstants> {
    pair.require_bound_hypotheses()?;
    let d = pair.dim() as f64;
    let beta = mixing_rate(&pair.approx.generator)?;
    let inverse_moment =
        inverse_moment_constant(&pair.truth.initial, &pair.truth.generator, &pair.truth.levels)?;
    let h = &pair.truth.levels;
    let h_approx = &pair.approx.levels;
    let k = 2.0 * h.max_abs() + h_approx.max_abs();

    let drift_term = (d + 1.0) * k;
    let mean_term = (d + 1.0) * h.max_abs() + d * h_approx.oscillation();
    let second_order_term = d * (d + 1.0) * (h.oscillation() + h_approx.oscillation());
    let c2 = (drift_term + mean_term + second_order_term) / beta;

    let c3 = inverse_moment / beta;

    let max_inverse = pair
        .truth
        .initial
        .weights()
        .iter()
        .chain(pair.approx.initial.weights())
        .map(|w| 1.0 / w)
        .fold(0.0, f64::max);
    let c1 = 6.0 * max_inverse;

    Ok(BoundConstants { beta, inverse_moment, k, c1, c2, c3 })
}

/// Bound on `E|π_t(ν) - π̃_t(μ)|₁` when `h̃ = h`:
/// `|μ-ν| max_k(1/μ^k ∨ 1/ν^k) e^{-βt} + |Λ*-Λ̃*| β⁻¹ sup_s E(1/min π_s)`.
pub fn same_levels_l1_bound(pair: &ModelPair, t: f64) -> Result<f64> {
    let constants = bound_constants(pair)?;
    let gaps = PerturbationGaps::of(pair)?;
    let max_inverse = constants.c1 / 6.0;
    Ok(gaps.initial * max_inverse * (-constants.beta * t).exp() + gaps.generator * constants.c3)
}
