//! Pinned numerical tolerances.
//!
//! Validation tolerances sit about two orders of magnitude above f64
//! round-off for state spaces up to 16 states. Integrator tolerances are
//! budgets for the gauge integrator at the default step `dt = 1e-3`.

/// Largest admissible `|Σ_j λ_ij|` for a generator row.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Largest admissible `|Σ_i p_i - 1|` for a probability vector.
pub const SIMPLEX_SUM_TOL: f64 = 1e-10;

/// Largest admissible `|Σ_i v_i|` for a tangent vector.
pub const TANGENT_SUM_TOL: f64 = 1e-10;

/// Sum-to-one tolerance checked at every node of a filter trajectory.
pub const TRAJECTORY_SUM_TOL: f64 = 1e-8;

/// Sum-to-zero tolerance for derivative outputs.
pub const DERIVATIVE_TANGENCY_TOL: f64 = 1e-8;

/// Default step of the filter grid.
pub const DEFAULT_DT: f64 = 1e-3;

/// Coarsest step admitted for bound-verification runs.
pub const MAX_VERIFICATION_DT: f64 = 0.01;

/// Minimum additive allowance for pathwise bound checks (ℓ₁).
pub const INTEGRATOR_TOL: f64 = 1e-6;

/// Pathwise allowance is this multiple of the measured dt-refinement error.
pub const REFINEMENT_ALLOWANCE_FACTOR: f64 = 10.0;

/// Floor of the diagnostic Euler-Maruyama projection.
pub const EM_CLIP_FLOOR: f64 = 1e-14;

/// A post-step Euler-Maruyama component below this is a collapse.
pub const EM_COLLAPSE_LEVEL: f64 = -0.5;

/// Condition number above which a flow is reported as ill-conditioned.
pub const FLOW_CONDITION_LIMIT: f64 = 1e12;

/// Cross-route agreement of the filter at `t = 1` (ℓ₁).
pub const CROSS_ROUTE_TOL: f64 = 1e-5;

/// Relative flow composition tolerance `‖U_{r,t}U_{s,r} - U_{s,t}‖ / ‖U_{s,t}‖`.
pub const FLOW_COMPOSITION_TOL: f64 = 1e-6;

/// Semiflow composition tolerance (ℓ₁).
pub const SEMIFLOW_COMPOSITION_TOL: f64 = 1e-6;

/// Inverse flow check `‖U⁻¹U - I‖` for horizons up to 2.
pub const INVERSE_FLOW_TOL: f64 = 1e-5;

/// Relative agreement between first-derivative routes.
pub const FIRST_DERIVATIVE_REL_TOL: f64 = 1e-4;

/// Relative agreement of the second derivative with finite differences.
pub const SECOND_DERIVATIVE_REL_TOL: f64 = 1e-2;

/// Central-difference step for first derivatives.
pub const FD_STEP_FIRST: f64 = 1e-6;

/// Central-difference step for second derivatives.
pub const FD_STEP_SECOND: f64 = 1e-4;

/// Denominator floor for relative comparisons of vanishing derivatives.
pub const RELATIVE_FLOOR: f64 = 1e-12;

/// Residual budget of the error representation at `t = 2`.
pub const ERROR_REPRESENTATION_TOL: f64 = 1e-4;

/// Width of Monte Carlo confidence bands in standard errors.
pub const CLT_SIGMAS: f64 = 3.0;

/// Minimum number of trials behind any reported statistic.
pub const MIN_TRIALS: usize = 100;

/// Forgetting-rate slack: fitted slope must not exceed `-β + FORGETTING_RATE_SLACK`.
pub const FORGETTING_RATE_SLACK: f64 = 0.1;

/// Smallest averaged gap used in a decay-rate regression.
pub const FORGETTING_FIT_FLOOR: f64 = 1e-13;

/// Required error reduction when the step is halved.
pub const REFINEMENT_RATIO_FLOOR: f64 = 2.0;

/// Spacing of the dense grid approximating the supremum over time.
pub const SUP_GRID_SPACING: f64 = 0.1;
