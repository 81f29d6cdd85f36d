use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use super::stats::Summary;
use super::{measure_refinement_error, run_trials, ExperimentSpec, PILOT_PATHS};
use crate::constants::mixing_rate;
use crate::error::{Error, Result};
use crate::filter::{
    filter_semiflow, inverse_zakai_flow, normalize, run_euler_maruyama, zakai_flow, FlowMatrix, ModelTag,
    PathwiseFilter,
};
use crate::model::{l1_distance, Model, SimplexPoint, TangentVector};
use crate::sensitivity::{
    derivative_bound, derivative_from_flow, derivative_smoothing_from_flow, error_representation_check,
    lipschitz_bound, second_derivative_difference_bound, second_derivative_from_flow, simple_bound_check,
    SmoothingMatrix,
};
use crate::signal::{simulate_trial, stream_rng, trial_seed, ObservationPath, TimeGrid};
use crate::tolerance::{
    CLT_SIGMAS, CROSS_ROUTE_TOL, DERIVATIVE_TANGENCY_TOL, ERROR_REPRESENTATION_TOL, FD_STEP_FIRST, FD_STEP_SECOND,
    FIRST_DERIVATIVE_REL_TOL, FLOW_COMPOSITION_TOL, INTEGRATOR_TOL, INVERSE_FLOW_TOL, RELATIVE_FLOOR,
    REFINEMENT_RATIO_FLOOR, SECOND_DERIVATIVE_REL_TOL, SEMIFLOW_COMPOSITION_TOL,
};

const AUDIT_HORIZONS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
const DIRECTIONS_PER_PATH: usize = 10;
const DRAW_STREAM: u64 = 2;
const REPRESENTATION_HORIZON: f64 = 2.0;
const LINEARITY_TOL: f64 = 1e-10;
// Round-off of a central difference is about this many ulps of a filter value
// divided by the step (first) or its square (second).
const DIFFERENCE_ROUNDOFF_ULPS: f64 = 100.0;

/// Outcome of one family of comparisons: a failure is a draw whose value
/// exceeds its limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub draws: usize,
    pub failures: usize,
    /// Largest `value - limit` over all draws.
    pub worst_excess: f64,
    /// Largest compared value.
    pub worst_value: f64,
    /// Reported but not counted as a violation.
    pub diagnostic: bool,
    pub passed: bool,
}

impl Check {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            draws: 0,
            failures: 0,
            worst_excess: f64::NEG_INFINITY,
            worst_value: f64::NEG_INFINITY,
            diagnostic: false,
            passed: true,
        }
    }

    fn diagnostic(name: &str) -> Self {
        Self { diagnostic: true, ..Self::new(name) }
    }

    fn record(&mut self, value: f64, limit: f64) {
        self.draws += 1;
        let excess = value - limit;
        // NaN counts as a failure
        if value.is_nan() || value > limit {
            self.failures += 1;
            self.passed = false;
        }
        self.worst_excess = self.worst_excess.max(excess);
        self.worst_value = self.worst_value.max(value);
    }

    fn merge(&mut self, other: &Check) {
        self.draws += other.draws;
        self.failures += other.failures;
        self.worst_excess = self.worst_excess.max(other.worst_excess);
        self.worst_value = self.worst_value.max(other.worst_value);
        self.passed &= other.passed;
    }

    fn counts(&self) -> bool {
        !self.diagnostic && !self.passed
    }
}

pub(crate) fn write_checks<W: Write>(checks: &[Check], writer: &mut csv::Writer<W>) -> Result<()> {
    writer.write_record(["check", "draws", "failures", "worst_value", "worst_excess", "diagnostic", "passed"])?;
    for c in checks {
        writer.write_record([
            c.name.clone(),
            c.draws.to_string(),
            c.failures.to_string(),
            c.worst_value.to_string(),
            c.worst_excess.to_string(),
            c.diagnostic.to_string(),
            c.passed.to_string(),
        ])?;
    }
    Ok(())
}

fn merge_all(results: Vec<Vec<Check>>) -> Vec<Check> {
    let mut iter = results.into_iter();
    let mut total = iter.next().unwrap_or_default();
    for checks in iter {
        total.iter_mut().zip(&checks).for_each(|(a, b)| a.merge(b));
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub master_seed: u64,
    pub n_trials: usize,
    pub horizons: Vec<f64>,
    pub directions_per_path: usize,
    pub refinement_error: f64,
    pub allowance: f64,
    pub checks: Vec<Check>,
    pub violations: usize,
}

fn random_law(rng: &mut ChaCha8Rng, d: usize) -> SimplexPoint {
    let raw: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let sum: f64 = raw.iter().sum();
    SimplexPoint::new(raw.iter().map(|x| 0.9 * x / sum + 0.1 / d as f64).collect()).expect("mixture of laws is a law")
}

fn random_tangent(rng: &mut ChaCha8Rng, d: usize) -> TangentVector {
    let raw: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mean = raw.iter().sum::<f64>() / d as f64;
    let centred: Vec<f64> = raw.iter().map(|x| x - mean).collect();
    let norm: f64 = centred.iter().map(|x| x.abs()).sum();
    TangentVector::project(centred.iter().map(|x| x / norm).collect())
}

/// Flows `U_{0,t}` at each of the given nodes, built by composing segments.
fn flows_at(model: &Model, observations: &ObservationPath, nodes: &[usize]) -> Result<Vec<FlowMatrix>> {
    let mut out: Vec<FlowMatrix> = Vec::with_capacity(nodes.len());
    let mut from = 0;
    for &node in nodes {
        let segment = zakai_flow(from, node, observations, &model.generator, &model.levels)?;
        let flow = match out.last() {
            Some(previous) => segment.compose(previous)?,
            None => segment,
        };
        out.push(flow);
        from = node;
    }
    Ok(out)
}

/// Filter laws at each node for a positive (not necessarily normalised) start.
fn laws_at(model: &Model, initial: &[f64], observations: &ObservationPath, nodes: &[usize]) -> Result<Vec<Vec<f64>>> {
    let mut filter = PathwiseFilter::new(&model.generator, &model.levels, initial, observations.dt)?;
    let mut out = Vec::with_capacity(nodes.len());
    let last = nodes.iter().copied().max().unwrap_or(0);
    let mut next = 0;
    for k in 0..=last {
        if k > 0 {
            filter.step_law(observations.increments[k - 1]);
        }
        while next < nodes.len() && nodes[next] == k {
            out.push(filter.probabilities().to_vec());
            next += 1;
        }
    }
    Ok(out)
}

fn shifted(mu: &SimplexPoint, v: &TangentVector, eps: f64) -> Vec<f64> {
    mu.weights().iter().zip(v.components()).map(|(a, b)| a + eps * b).collect()
}

fn relative_gap(value: &[f64], reference: &[f64]) -> f64 {
    let scale: f64 = reference.iter().map(|x| x.abs()).sum();
    l1_distance(value, reference) / scale.max(RELATIVE_FLOOR)
}

fn horizon_nodes(grid: &TimeGrid) -> Vec<(f64, usize)> {
    AUDIT_HORIZONS.iter().filter_map(|&t| grid.index_of(t).map(|k| (t, k))).collect()
}

fn nodes_for(observations: &ObservationPath, horizons: &[(f64, usize)]) -> Vec<usize> {
    horizons.iter().map(|&(t, _)| (t / observations.dt).round() as usize).collect()
}

/// Check names in report order.
const AUDIT_CHECKS: [&str; 14] = [
    "flow-vs-smoothing",
    "flow-vs-finite-difference",
    "smoothing-vs-finite-difference",
    "second-derivative-vs-finite-difference",
    "tangency",
    "linearity",
    "tilted-filter",
    "smoothing-spread",
    "derivative-bound",
    "lipschitz-bound",
    "second-derivative-difference-bound",
    "semiflow-injectivity",
    "error-representation",
    "simple-bound",
];

/// First and second derivatives by every route, the smoothing spread, and
/// the pathwise derivative and Lipschitz bounds of the approximate model.
pub fn run_derivative_audit(spec: &ExperimentSpec) -> Result<AuditReport> {
    spec.validate()?;
    let truth = &spec.pair.truth;
    let approx = &spec.pair.approx;
    spec.pair.require_bound_hypotheses()?;
    let d = spec.pair.dim();
    let horizons = horizon_nodes(&spec.grid);
    if horizons.is_empty() {
        return Err(Error::InvalidExperiment(format!(
            "the derivative audit needs a horizon of at least {}",
            AUDIT_HORIZONS[0]
        )));
    }
    let beta_truth = mixing_rate(&truth.generator)?;
    let representation_node = (truth.levels == approx.levels)
        .then(|| spec.grid.index_of(REPRESENTATION_HORIZON))
        .flatten();

    // pilot directions for the allowance
    let pilot_mu = SimplexPoint::new((1..=d).map(|i| i as f64 / (d * (d + 1) / 2) as f64).collect())?;
    let pilot_nu = SimplexPoint::new(pilot_mu.weights().iter().rev().copied().collect())?;
    let mut pilot_v = vec![0.0; d];
    pilot_v[0] = 0.5;
    pilot_v[d - 1] = -0.5;
    let pilot_v = TangentVector::new(pilot_v)?;
    let refinement_error = measure_refinement_error(spec, PILOT_PATHS, |obs| {
        let flows = flows_at(approx, obs, &nodes_for(obs, &horizons))?;
        let mut out = Vec::new();
        for flow in &flows {
            let a = normalize(&flow.apply(pilot_mu.weights()))?;
            let b = normalize(&flow.apply(pilot_nu.weights()))?;
            out.extend(a.weights().iter().zip(b.weights()).map(|(x, y)| x - y));
            out.extend_from_slice(derivative_from_flow(flow, &pilot_mu, &pilot_v)?.components());
            out.extend_from_slice(second_derivative_from_flow(flow, &pilot_mu, &pilot_v)?.components());
        }
        Ok(out)
    })?;
    let allowance = spec.allowance(refinement_error);
    let spread_allowance = if spec.strict { 0.0 } else { INTEGRATOR_TOL };
    let first_floor = DIFFERENCE_ROUNDOFF_ULPS * f64::EPSILON / FD_STEP_FIRST;
    let second_floor = DIFFERENCE_ROUNDOFF_ULPS * f64::EPSILON / (FD_STEP_SECOND * FD_STEP_SECOND);

    let results = run_trials(spec, 0, spec.n_trials, |i, obs| {
        let mut checks: Vec<Check> = AUDIT_CHECKS.iter().map(|n| Check::new(n)).collect();
        let mut rng = stream_rng(trial_seed(spec.master_seed, i as u64), DRAW_STREAM);
        let nodes: Vec<usize> = horizons.iter().map(|h| h.1).collect();

        // routes on the true model
        let truth_flows = flows_at(truth, obs, &nodes)?;
        let mu = random_law(&mut rng, d);
        let v = random_tangent(&mut rng, d);
        let w = random_tangent(&mut rng, d);
        let other = random_law(&mut rng, d);
        let (alpha, gamma): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let plus = laws_at(truth, &shifted(&mu, &v, FD_STEP_FIRST), obs, &nodes)?;
        let minus = laws_at(truth, &shifted(&mu, &v, -FD_STEP_FIRST), obs, &nodes)?;
        let plus2 = laws_at(truth, &shifted(&mu, &v, FD_STEP_SECOND), obs, &nodes)?;
        let centre = laws_at(truth, mu.weights(), obs, &nodes)?;
        let minus2 = laws_at(truth, &shifted(&mu, &v, -FD_STEP_SECOND), obs, &nodes)?;
        let direct_other = laws_at(truth, other.weights(), obs, &nodes)?;
        for (h, flow) in truth_flows.iter().enumerate() {
            let by_flow = derivative_from_flow(flow, &mu, &v)?;
            let by_smoothing = derivative_smoothing_from_flow(flow, &mu, &v)?;
            let fd: Vec<f64> = (0..d).map(|j| (plus[h][j] - minus[h][j]) / (2.0 * FD_STEP_FIRST)).collect();
            checks[0].record(relative_gap(by_smoothing.components(), by_flow.components()), FIRST_DERIVATIVE_REL_TOL);
            checks[1].record(
                l1_distance(&fd, by_flow.components()),
                FIRST_DERIVATIVE_REL_TOL * by_flow.l1_norm() + first_floor,
            );
            checks[2].record(
                l1_distance(&fd, by_smoothing.components()),
                FIRST_DERIVATIVE_REL_TOL * by_smoothing.l1_norm() + first_floor,
            );

            let second = second_derivative_from_flow(flow, &mu, &v)?;
            let fd2: Vec<f64> = (0..d)
                .map(|j| (plus2[h][j] - 2.0 * centre[h][j] + minus2[h][j]) / (FD_STEP_SECOND * FD_STEP_SECOND))
                .collect();
            checks[3].record(
                l1_distance(&fd2, second.components()),
                SECOND_DERIVATIVE_REL_TOL * second.l1_norm() + second_floor,
            );

            let by_w = derivative_from_flow(flow, &mu, &w)?;
            let combined = derivative_from_flow(flow, &mu, &v.scale(alpha).add(&w.scale(gamma)))?;
            for value in [&by_flow, &by_smoothing, &second, &by_w, &combined] {
                checks[4].record(value.components().iter().sum::<f64>().abs(), DERIVATIVE_TANGENCY_TOL);
            }
            let expected = by_flow.scale(alpha).add(&by_w.scale(gamma));
            let scale = 1.0f64.max(alpha.abs() * by_flow.l1_norm() + gamma.abs() * by_w.l1_norm());
            checks[5].record(l1_distance(combined.components(), expected.components()), LINEARITY_TOL * scale);

            let tilted = crate::sensitivity::tilted_filter(flow, &mu, &other)?;
            checks[6].record(l1_distance(tilted.weights(), &direct_other[h]), CROSS_ROUTE_TOL);

            let spread = SmoothingMatrix::from_flow(flow, &truth.initial)?.column_spread();
            checks[7].record(spread, (-beta_truth * horizons[h].0).exp() + spread_allowance);
        }

        // pathwise bounds of the approximate model
        let approx_flows = flows_at(approx, obs, &nodes)?;
        for _ in 0..DIRECTIONS_PER_PATH {
            let mu = random_law(&mut rng, d);
            let other = random_law(&mut rng, d);
            let v = random_tangent(&mut rng, d);
            let w = random_tangent(&mut rng, d).scale(rng.random_range(0.1..2.0));
            for (h, flow) in approx_flows.iter().enumerate() {
                let t = horizons[h].0;
                let derivative = derivative_from_flow(flow, &mu, &v)?;
                checks[8].record(derivative.l1_norm(), derivative_bound(&mu, &v, t, &approx.generator)? + allowance);

                let a = normalize(&flow.apply(mu.weights()))?;
                let b = normalize(&flow.apply(other.weights()))?;
                let gap = a.l1_distance(&b);
                checks[9].record(gap, lipschitz_bound(&mu, &other, t, &approx.generator)? + allowance);
                // distinct starts stay distinct
                checks[11].record(-gap, -f64::MIN_POSITIVE);

                let dv = second_derivative_from_flow(flow, &mu, &v)?;
                let dw = second_derivative_from_flow(flow, &mu, &w)?;
                checks[10].record(
                    l1_distance(dv.components(), dw.components()),
                    second_derivative_difference_bound(&mu, &v, &w, t, &approx.generator)? + allowance,
                );
            }
        }

        if let Some(node) = representation_node {
            let rep = error_representation_check(&spec.pair, node, obs)?;
            checks[12].record(rep.residual, ERROR_REPRESENTATION_TOL);
            let simple = simple_bound_check(&spec.pair, node, obs)?;
            checks[13].record(simple.lhs, simple.rhs + allowance);
        }
        Ok(checks)
    })?;

    let checks: Vec<Check> = merge_all(results).into_iter().filter(|c| c.draws > 0).collect();
    let violations = checks.iter().filter(|c| c.counts()).count();
    Ok(AuditReport {
        master_seed: spec.master_seed,
        n_trials: spec.n_trials,
        horizons: horizons.iter().map(|h| h.0).collect(),
        directions_per_path: DIRECTIONS_PER_PATH,
        refinement_error,
        allowance,
        checks,
        violations,
    })
}

/// Mean gauge error at one step size against a much finer reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementLevel {
    pub dt: f64,
    /// `|π_dt - π_ref|₁` at the horizon.
    pub gauge_error: Summary,
    /// `|π_EM - π_gauge|₁` at the horizon, both at this step.
    pub euler_maruyama_gap: Summary,
}

/// `error(2h) / error(h)` with a delta-method CLT band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementRatio {
    pub coarse_dt: f64,
    pub fine_dt: f64,
    pub ratio: f64,
    pub half_width: f64,
    pub observed_order: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub master_seed: u64,
    pub n_trials: usize,
    pub horizon: f64,
    pub reference_dt: f64,
    pub levels: Vec<RefinementLevel>,
    pub gauge_ratios: Vec<RefinementRatio>,
    pub euler_maruyama_ratios: Vec<RefinementRatio>,
    pub checks: Vec<Check>,
    pub violations: usize,
}

impl RefinementReport {
    pub(crate) fn write_rows<W: Write>(&self, writer: &mut csv::Writer<W>) -> Result<()> {
        writer.write_record(["dt", "gauge_error", "gauge_half_width", "em_gap", "em_half_width"])?;
        for l in &self.levels {
            writer.write_record([
                l.dt.to_string(),
                l.gauge_error.mean.to_string(),
                l.gauge_error.half_width.to_string(),
                l.euler_maruyama_gap.mean.to_string(),
                l.euler_maruyama_gap.half_width.to_string(),
            ])?;
        }
        Ok(())
    }
}

/// Step sizes `4dt, 2dt, dt, dt/2` as multiples of the reference step `dt/16`.
const LEVEL_FACTORS: [usize; 4] = [64, 32, 16, 8];
const REFERENCE_DIVISOR: usize = 16;
const REFINEMENT_HORIZON: f64 = 1.0;
const INVERSE_HORIZON: f64 = 2.0;

fn ratio_of_means(coarse: &[f64], fine: &[f64]) -> (f64, f64) {
    let n = coarse.len() as f64;
    let mc = coarse.iter().sum::<f64>() / n;
    let mf = fine.iter().sum::<f64>() / n;
    let ratio = mc / mf;
    let residual = Summary::of(coarse.iter().zip(fine).map(|(c, f)| c - ratio * f));
    (ratio, CLT_SIGMAS * residual.std_error / mf)
}

fn ratios(errors: &[Vec<f64>], dts: &[f64]) -> Vec<RefinementRatio> {
    (1..errors.len())
        .map(|q| {
            let (ratio, half_width) = ratio_of_means(&errors[q - 1], &errors[q]);
            RefinementRatio {
                coarse_dt: dts[q - 1],
                fine_dt: dts[q],
                ratio,
                half_width,
                observed_order: (dts[q - 1] / dts[q]).ln().recip() * ratio.ln(),
            }
        })
        .collect()
}

/// Step-halving study of the gauge integrator, its agreement with the flow
/// and Euler-Maruyama routes, and the flow algebra at the base step.
pub fn run_integrator_refinement(spec: &ExperimentSpec) -> Result<RefinementReport> {
    spec.validate()?;
    let model = &spec.pair.truth;
    let dt = spec.grid.dt();
    let horizon = spec.grid.t_end().min(REFINEMENT_HORIZON);
    let base = TimeGrid::new(horizon, dt)?;
    let reference_grid = base.refined(REFERENCE_DIVISOR);
    let dts: Vec<f64> = LEVEL_FACTORS.iter().map(|&f| reference_grid.dt() * f as f64).collect();
    if base.n_steps() % 4 != 0 {
        return Err(Error::InvalidExperiment(format!("horizon {horizon} must hold a multiple of 4 steps of {dt}")));
    }
    let inverse_end = spec.grid.index_of(spec.grid.t_end().min(INVERSE_HORIZON)).unwrap_or(spec.grid.n_steps());

    type Trial = (Vec<f64>, Vec<f64>, Vec<Check>);
    let results: Vec<Trial> = run_trials(spec, 0, spec.n_trials, |i, obs| {
        let mut checks = vec![
            Check::new("gauge-vs-zakai"),
            Check::new("flow-composition"),
            Check::new("semiflow-composition"),
            Check::new("inverse-flow"),
            Check::diagnostic("euler-maruyama-vs-gauge"),
        ];
        let seed = trial_seed(spec.master_seed, i as u64);
        let (_, fine) = simulate_trial(model, &reference_grid, seed ^ 0xA5A5_A5A5)?;
        let reference = filter_semiflow(&model.initial, 0, fine.len(), &fine, &model.generator, &model.levels)?;
        let mut gauge_errors = Vec::with_capacity(dts.len());
        let mut em_gaps = Vec::with_capacity(dts.len());
        for &factor in &LEVEL_FACTORS {
            let coarse = fine.coarsen(factor)?;
            let gauge = filter_semiflow(&model.initial, 0, coarse.len(), &coarse, &model.generator, &model.levels)?;
            gauge_errors.push(gauge.l1_distance(&reference));
            let em = match run_euler_maruyama(&model.initial, &coarse, &model.generator, &model.levels) {
                Ok(values) => values[values.len() - model.dim()..].to_vec(),
                Err(Error::StateCollapse { .. }) => vec![f64::NAN; model.dim()],
                Err(e) => return Err(e),
            };
            em_gaps.push(l1_distance(&em, gauge.weights()));
            if factor == REFERENCE_DIVISOR {
                checks[4].record(l1_distance(&em, gauge.weights()), CROSS_ROUTE_TOL);
            }
        }

        // flow algebra on the experiment's own path at the base step
        let n = base.n_steps();
        let flow = zakai_flow(0, n, obs, &model.generator, &model.levels)?;
        let via_flow = normalize(&flow.apply(model.initial.weights()))?;
        let gauge = crate::filter::run_filter(ModelTag::True, &model.initial, obs, &model.generator, &model.levels)?;
        checks[0].record(l1_distance(via_flow.weights(), gauge.at(n)), CROSS_ROUTE_TOL);

        let mut rng = stream_rng(seed, DRAW_STREAM);
        let r = rng.random_range(1..n);
        let first = zakai_flow(0, r, obs, &model.generator, &model.levels)?;
        let second = zakai_flow(r, n, obs, &model.generator, &model.levels)?;
        let composed = second.compose(&first)?;
        let shift = composed.log_scale - flow.log_scale;
        let gap = (&composed.entries * shift.exp() - &flow.entries).norm() / flow.entries.norm();
        checks[1].record(gap, FLOW_COMPOSITION_TOL);

        let mid = filter_semiflow(&model.initial, 0, r, obs, &model.generator, &model.levels)?;
        let end = filter_semiflow(&mid, r, n, obs, &model.generator, &model.levels)?;
        checks[2].record(end.l1_distance(&SimplexPoint::new(gauge.at(n).to_vec())?), SEMIFLOW_COMPOSITION_TOL);

        let forward = zakai_flow(0, inverse_end, obs, &model.generator, &model.levels)?;
        let inverse = inverse_zakai_flow(0, inverse_end, obs, &model.generator, &model.levels)?;
        let product = &inverse.entries * &forward.entries * (inverse.log_scale + forward.log_scale).exp();
        let d = model.dim();
        checks[3].record((product - DMatrix::<f64>::identity(d, d)).amax(), INVERSE_FLOW_TOL);
        Ok((gauge_errors, em_gaps, checks))
    })?;

    let column = |which: usize, q: usize| -> Vec<f64> {
        results.iter().map(|r| if which == 0 { r.0[q] } else { r.1[q] }).collect()
    };
    let gauge: Vec<Vec<f64>> = (0..dts.len()).map(|q| column(0, q)).collect();
    let em: Vec<Vec<f64>> = (0..dts.len()).map(|q| column(1, q)).collect();
    let levels = dts
        .iter()
        .enumerate()
        .map(|(q, &dt)| RefinementLevel {
            dt,
            gauge_error: Summary::of(gauge[q].iter().copied()),
            euler_maruyama_gap: Summary::of(em[q].iter().copied()),
        })
        .collect();
    let gauge_ratios = ratios(&gauge, &dts);
    let euler_maruyama_ratios = ratios(&em, &dts);

    let mut checks = merge_all(results.into_iter().map(|r| r.2).collect());
    let mut order = Check::new("gauge-refinement-ratio");
    for r in &gauge_ratios {
        // a failure needs the ratio to sit below the floor beyond noise
        order.record(REFINEMENT_RATIO_FLOOR, r.ratio + r.half_width);
    }
    checks.push(order);
    let mut em_order = Check::diagnostic("euler-maruyama-refinement-ratio");
    for r in &euler_maruyama_ratios {
        em_order.record(REFINEMENT_RATIO_FLOOR, r.ratio);
    }
    checks.push(em_order);
    let violations = checks.iter().filter(|c| c.counts()).count();
    Ok(RefinementReport {
        master_seed: spec.master_seed,
        n_trials: spec.n_trials,
        horizon,
        reference_dt: reference_grid.dt(),
        levels,
        gauge_ratios,
        euler_maruyama_ratios,
        checks,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GeneratorMatrix, ModelPair, ObservationMap};

    fn model(levels: Vec<f64>) -> Model {
        Model::new(
            SimplexPoint::new(vec![0.5, 0.5]).unwrap(),
            GeneratorMatrix::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap(),
            ObservationMap::new(levels).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn checks_count_nan_as_failure() {
        let mut a = Check::new("a");
        a.record(1.0, 2.0);
        assert!(a.passed);
        a.record(f64::NAN, 2.0);
        assert_eq!((a.draws, a.failures, a.passed), (2, 1, false));
        let mut b = Check::new("a");
        b.record(3.0, 2.0);
        a.merge(&b);
        assert_eq!((a.draws, a.failures, a.worst_excess), (3, 2, 1.0));
        assert!(!Check::diagnostic("d").counts());
    }

    #[test]
    fn uninformative_observations_expose_coarse_steps_in_strict_mode() {
        let mut spec = ExperimentSpec::new(ModelPair::exact(model(vec![1.0, 1.0])), TimeGrid::new(2.0, 0.1).unwrap(), 100, 1);
        spec.strict = true;
        let report = run_derivative_audit(&spec).unwrap();
        let spread = report.checks.iter().find(|c| c.name == "smoothing-spread").unwrap();
        assert!(!spread.passed && spread.worst_excess < 1e-6);
        assert_eq!(report.violations, 1);
    }

    #[test]
    fn audit_needs_a_long_enough_horizon() {
        let spec = ExperimentSpec::new(ModelPair::exact(model(vec![0.0, 1.0])), TimeGrid::new(0.2, 1e-3).unwrap(), 100, 1);
        assert!(matches!(run_derivative_audit(&spec), Err(Error::InvalidExperiment(_))));
    }

    #[test]
    fn gauge_integrator_is_first_order() {
        let spec = ExperimentSpec::new(ModelPair::exact(model(vec![0.0, 1.0])), TimeGrid::new(1.0, 1e-3).unwrap(), 100, 2);
        let report = run_integrator_refinement(&spec).unwrap();
        assert_eq!(report.levels.len(), 4);
        for r in &report.gauge_ratios {
            assert!((r.ratio - 2.0).abs() < r.half_width + 0.3, "{r:?}");
        }
        assert_eq!(report.violations, 0);
    }
}
