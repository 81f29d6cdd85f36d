use std::io::Write;

use serde::{Deserialize, Serialize};

use super::stats::{slope, Summary};
use super::{measure_refinement_error, run_trials, ExperimentSpec, PILOT_PATHS};
use crate::constants::mixing_rate;
use crate::error::Result;
use crate::filter::PathwiseFilter;
use crate::model::{l1_distance, Model, SimplexPoint};
use crate::sensitivity::lipschitz_bound;
use crate::signal::ObservationPath;
use crate::tolerance::{FORGETTING_FIT_FLOOR, FORGETTING_RATE_SLACK, SUP_GRID_SPACING};

const FIT_WINDOW: (f64, f64) = (2.0, 10.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStat {
    pub t: f64,
    pub gap: Summary,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub master_seed: u64,
    pub n_trials: usize,
    pub beta: f64,
    pub initial_gap: f64,
    pub refinement_error: f64,
    pub allowance: f64,
    pub gaps: Vec<GapStat>,
    /// Slope of `log E|π̃_t(μ₂) - π̃_t(μ₁)|₁` over `t ∈ [2, 10]`.
    pub fitted_rate: Option<f64>,
    pub rate_limit: f64,
    pub rate_ok: Option<bool>,
    /// Grid nodes where a path exceeded its bound plus allowance.
    pub pathwise_violations: usize,
    /// Largest `gap / bound` seen on any path at any node.
    pub max_bound_ratio: f64,
    pub violations: usize,
}

impl ForgettingReport {
    pub(crate) fn write_rows<W: Write>(&self, writer: &mut csv::Writer<W>) -> Result<()> {
        writer.write_record(["t", "mean_gap", "half_width", "bound"])?;
        for g in &self.gaps {
            writer.write_record([g.t.to_string(), g.gap.mean.to_string(), g.gap.half_width.to_string(), g.bound.to_string()])?;
        }
        Ok(())
    }
}

fn sup_nodes(observations: &ObservationPath, t_end: f64) -> Vec<usize> {
    let count = (t_end / SUP_GRID_SPACING).round() as usize;
    let mut nodes: Vec<usize> = (0..=count)
        .map(|j| ((j as f64 * SUP_GRID_SPACING / observations.dt).round() as usize).min(observations.len()))
        .collect();
    nodes.dedup();
    nodes
}

fn gap_series(
    model: &Model,
    first: &SimplexPoint,
    second: &SimplexPoint,
    observations: &ObservationPath,
    nodes: &[usize],
    mut check: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let mut a = PathwiseFilter::new(&model.generator, &model.levels, first.weights(), observations.dt)?;
    let mut b = PathwiseFilter::new(&model.generator, &model.levels, second.weights(), observations.dt)?;
    let mut out = Vec::with_capacity(nodes.len());
    let mut next = 0;
    for k in 0..=observations.len() {
        if k > 0 {
            let dy = observations.increments[k - 1];
            a.step_law(dy);
            b.step_law(dy);
        }
        let gap = l1_distance(a.probabilities(), b.probabilities());
        check(k, gap);
        if next < nodes.len() && nodes[next] == k {
            out.push(gap);
            next += 1;
        }
    }
    Ok(out)
}

/// Two filters of the approximate model, started at `ν` (the true initial
/// law) and `μ` (the approximate one), on shared observations.
pub fn run_forgetting_experiment(spec: &ExperimentSpec) -> Result<ForgettingReport> {
    spec.validate()?;
    let model = &spec.pair.approx;
    let first = &spec.pair.truth.initial;
    let second = &model.initial;
    first.require_interior()?;
    second.require_interior()?;
    let beta = mixing_rate(&model.generator)?;
    let t_end = spec.grid.t_end();
    let dt = spec.grid.dt();

    let refinement_error = measure_refinement_error(spec, PILOT_PATHS, |obs| {
        gap_series(model, first, second, obs, &sup_nodes(obs, t_end), |_, _| {})
    })?;
    let allowance = spec.allowance(refinement_error);
    let bound_at = |t: f64| lipschitz_bound(first, second, t, &model.generator);
    let scale = bound_at(0.0)?;

    let results = run_trials(spec, 0, spec.n_trials, |_, obs| {
        let nodes = sup_nodes(obs, t_end);
        let mut violations = 0usize;
        let mut max_ratio = 0.0f64;
        let series = gap_series(model, first, second, obs, &nodes, |k, gap| {
            let bound = scale * (-beta * k as f64 * dt).exp();
            if gap > bound + allowance {
                violations += 1;
            }
            if bound > 0.0 {
                max_ratio = max_ratio.max(gap / bound);
            }
        })?;
        Ok((series, violations, max_ratio))
    })?;

    let times: Vec<f64> = (0..results[0].0.len()).map(|j| j as f64 * SUP_GRID_SPACING).collect();
    let gaps: Vec<GapStat> = times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            Ok(GapStat { t, gap: Summary::of(results.iter().map(|r| r.0[j])), bound: bound_at(t)? })
        })
        .collect::<Result<_>>()?;

    let (xs, ys): (Vec<f64>, Vec<f64>) = gaps
        .iter()
        .filter(|g| g.t >= FIT_WINDOW.0 - 1e-9 && g.t <= FIT_WINDOW.1 + 1e-9 && g.gap.mean > FORGETTING_FIT_FLOOR)
        .map(|g| (g.t, g.gap.mean.ln()))
        .unzip();
    let fitted_rate = slope(&xs, &ys);
    let rate_limit = -beta + FORGETTING_RATE_SLACK;
    let rate_ok = fitted_rate.map(|r| r <= rate_limit);
    let pathwise_violations: usize = results.iter().map(|r| r.1).sum();
    let max_bound_ratio = results.iter().map(|r| r.2).fold(0.0, f64::max);
    let violations = pathwise_violations + usize::from(rate_ok == Some(false));
    Ok(ForgettingReport {
        master_seed: spec.master_seed,
        n_trials: spec.n_trials,
        beta,
        initial_gap: first.l1_distance(second),
        refinement_error,
        allowance,
        gaps,
        fitted_rate,
        rate_limit,
        rate_ok,
        pathwise_violations,
        max_bound_ratio,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GeneratorMatrix, ModelPair, ObservationMap};
    use crate::signal::TimeGrid;

    fn truth() -> Model {
        Model::new(
            SimplexPoint::new(vec![0.5, 0.5]).unwrap(),
            GeneratorMatrix::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap(),
            ObservationMap::new(vec![0.0, 1.0]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identical_initial_laws_never_separate() {
        let spec = ExperimentSpec::new(ModelPair::exact(truth()), TimeGrid::new(3.0, 1e-3).unwrap(), 100, 2);
        let report = run_forgetting_experiment(&spec).unwrap();
        assert!(report.gaps.iter().all(|g| g.gap.mean == 0.0));
        assert_eq!(report.fitted_rate, None);
        assert_eq!(report.violations, 0);
    }

    #[test]
    fn distinct_initial_laws_are_forgotten_within_the_bound() {
        let mut approx = truth();
        approx.initial = SimplexPoint::new(vec![0.9, 0.1]).unwrap();
        let pair = ModelPair::new(truth(), approx).unwrap();
        let spec = ExperimentSpec::new(pair, TimeGrid::new(10.0, 1e-3).unwrap(), 100, 3);
        let report = run_forgetting_experiment(&spec).unwrap();
        assert_eq!(report.pathwise_violations, 0);
        assert!(report.max_bound_ratio <= 1.0);
        assert_eq!(report.rate_ok, Some(true), "rate {:?}", report.fitted_rate);
        assert_eq!(report.gaps.len(), 101);
    }
}
