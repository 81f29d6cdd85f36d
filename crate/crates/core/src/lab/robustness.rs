use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::stats::{Accumulator, Summary};
use super::{record_nodes, ExperimentSpec, SweepTarget};
use crate::constants::{bound_constants, PerturbationGaps, BoundConstants};
use crate::error::Result;
use crate::filter::PathwiseFilter;
use crate::model::{Model, ModelPair};
use crate::signal::{simulate_trial, trial_seed, ObservationPath};
use crate::tolerance::INTEGRATOR_TOL;

const CHUNK: usize = 64;
const ESCALATION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointStat {
    pub t: f64,
    /// `E‖π̃_t - π_t‖²` with its CLT band.
    pub squared: Summary,
    /// `E|π̃_t - π_t|₁`
    pub l1_mean: f64,
    pub bound: f64,
    pub violation: bool,
}

/// Largest mean over the dense time grid, standing in for `sup_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupStat {
    pub t: f64,
    pub squared: Summary,
    pub l1_mean: f64,
    pub violation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub master_seed: u64,
    pub requested_trials: usize,
    pub n_trials: usize,
    pub escalated: bool,
    pub constants: BoundConstants,
    pub gaps: PerturbationGaps,
    pub bound: f64,
    pub asymptotic_bound: f64,
    pub checkpoints: Vec<CheckpointStat>,
    pub sup: SupStat,
    /// `bound / max(mean + half-width)`; `None` when every upper limit is zero.
    pub slack_ratio: Option<f64>,
    /// Largest checkpoint estimate of `E(1 / min_i π_t^i)` for the exact filter.
    pub inverse_moment: Summary,
    /// For an unperturbed pair: the floor stayed below `10 × 1e-6`.
    pub floor_ok: Option<bool>,
    pub violations: usize,
}

impl BoundReport {
    pub(crate) fn write_rows<W: Write>(&self, writer: &mut csv::Writer<W>) -> Result<()> {
        writer.write_record(["t", "mean_sq", "half_width", "l1_mean", "bound", "violation"])?;
        for c in &self.checkpoints {
            writer.write_record([
                c.t.to_string(),
                c.squared.mean.to_string(),
                c.squared.half_width.to_string(),
                c.l1_mean.to_string(),
                c.bound.to_string(),
                c.violation.to_string(),
            ])?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub target: SweepTarget,
    pub size: f64,
    pub gaps: PerturbationGaps,
    pub bound: f64,
    pub sup: SupStat,
    pub checkpoints: Vec<CheckpointStat>,
    pub violation: bool,
}

/// Paired comparison of two sweep sizes at the time where the smaller one peaks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCheck {
    pub target: SweepTarget,
    pub larger: f64,
    pub smaller: f64,
    pub t: f64,
    /// `E(‖e_smaller‖² - ‖e_larger‖²)`
    pub difference: Summary,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalCheck {
    pub target: SweepTarget,
    pub size: f64,
    pub value: f64,
    /// `2 × floor + C · gaps`
    pub limit: f64,
    pub passed: bool,
}

/// Ratio of sup-time `E|π̃ - π|₁` between consecutive sizes; reported only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalvingRatio {
    pub target: SweepTarget,
    pub larger: f64,
    pub smaller: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub master_seed: u64,
    pub requested_trials: usize,
    pub n_trials: usize,
    pub escalated: bool,
    pub floor: SupStat,
    pub floor_ok: bool,
    pub rows: Vec<SweepRow>,
    pub monotone: Vec<MonotoneCheck>,
    pub final_checks: Vec<FinalCheck>,
    pub halving_ratios: Vec<HalvingRatio>,
    pub violations: usize,
}

impl SweepReport {
    pub(crate) fn write_rows<W: Write>(&self, writer: &mut csv::Writer<W>) -> Result<()> {
        writer.write_record(["target", "size", "sup_t", "sup_mean_sq", "half_width", "sup_l1_mean", "bound", "violation"])?;
        for r in &self.rows {
            writer.write_record([
                r.target.as_str().to_string(),
                r.size.to_string(),
                r.sup.t.to_string(),
                r.sup.squared.mean.to_string(),
                r.sup.squared.half_width.to_string(),
                r.sup.l1_mean.to_string(),
                r.bound.to_string(),
                r.violation.to_string(),
            ])?;
        }
        Ok(())
    }
}

/// Streaming statistics of one campaign: the exact filter against a list of
/// approximate filters on shared observations.
struct Campaign<'a> {
    truth: &'a Model,
    approxes: Vec<Model>,
    nodes: Vec<usize>,
    /// `(a, b)`: accumulate `sq[b] - sq[a]` node by node.
    pairs: Vec<(usize, usize)>,
    squared: Vec<Vec<Accumulator>>,
    l1: Vec<Vec<Accumulator>>,
    differences: Vec<Vec<Accumulator>>,
    inverse_min: Vec<Accumulator>,
    trials: usize,
}

struct TrialRecord {
    squared: Vec<f64>,
    l1: Vec<f64>,
    inverse_min: Vec<f64>,
}

impl<'a> Campaign<'a> {
    fn new(truth: &'a Model, approxes: Vec<Model>, nodes: Vec<usize>, pairs: Vec<(usize, usize)>) -> Self {
        let n = nodes.len();
        Self {
            truth,
            squared: vec![vec![Accumulator::default(); n]; approxes.len()],
            l1: vec![vec![Accumulator::default(); n]; approxes.len()],
            differences: vec![vec![Accumulator::default(); n]; pairs.len()],
            inverse_min: vec![Accumulator::default(); n],
            approxes,
            nodes,
            pairs,
            trials: 0,
        }
    }

    fn trial(&self, observations: &ObservationPath) -> Result<TrialRecord> {
        let dt = observations.dt;
        let mut exact = PathwiseFilter::new(&self.truth.generator, &self.truth.levels, self.truth.initial.weights(), dt)?;
        let mut filters = self
            .approxes
            .iter()
            .map(|m| PathwiseFilter::new(&m.generator, &m.levels, m.initial.weights(), dt))
            .collect::<Result<Vec<_>>>()?;
        let n_nodes = self.nodes.len();
        let mut record = TrialRecord {
            squared: vec![0.0; filters.len() * n_nodes],
            l1: vec![0.0; filters.len() * n_nodes],
            inverse_min: vec![0.0; n_nodes],
        };
        let mut next = 0;
        for k in 0..=observations.len() {
            if k > 0 {
                let dy = observations.increments[k - 1];
                exact.step_law(dy);
                filters.iter_mut().for_each(|f| f.step_law(dy));
            }
            if next < n_nodes && self.nodes[next] == k {
                let p = exact.probabilities();
                record.inverse_min[next] = 1.0 / p.iter().copied().fold(f64::INFINITY, f64::min);
                for (a, filter) in filters.iter().enumerate() {
                    let (mut sq, mut l1) = (0.0, 0.0);
                    for (x, y) in filter.probabilities().iter().zip(p) {
                        let e = x - y;
                        sq += e * e;
                        l1 += e.abs();
                    }
                    assert!(sq <= l1, "squared ℓ₂ error {sq} exceeds ℓ₁ error {l1}");
                    record.squared[a * n_nodes + next] = sq;
                    record.l1[a * n_nodes + next] = l1;
                }
                next += 1;
            }
        }
        Ok(record)
    }

    fn run(&mut self, spec: &ExperimentSpec, from: usize, to: usize) -> Result<()> {
        let n_nodes = self.nodes.len();
        let mut start = from;
        while start < to {
            let end = (start + CHUNK).min(to);
            let this = &*self;
            let records: Vec<TrialRecord> = (start..end)
                .into_par_iter()
                .map(|i| {
                    let seed = trial_seed(spec.master_seed, i as u64);
                    let (_, observations) = simulate_trial(this.truth, &spec.grid, seed)?;
                    this.trial(&observations)
                })
                .collect::<Result<_>>()?;
            for record in records {
                for a in 0..self.approxes.len() {
                    for j in 0..n_nodes {
                        self.squared[a][j].push(record.squared[a * n_nodes + j]);
                        self.l1[a][j].push(record.l1[a * n_nodes + j]);
                    }
                }
                for (p, &(a, b)) in self.pairs.iter().enumerate() {
                    for j in 0..n_nodes {
                        self.differences[p][j].push(record.squared[b * n_nodes + j] - record.squared[a * n_nodes + j]);
                    }
                }
                for j in 0..n_nodes {
                    self.inverse_min[j].push(record.inverse_min[j]);
                }
                self.trials += 1;
            }
            start = end;
        }
        Ok(())
    }

    fn sup(&self, approx: usize, dt: f64, bound: f64) -> SupStat {
        let (j, squared) = self.squared[approx]
            .iter()
            .map(Accumulator::summary)
            .enumerate()
            .fold((0, None::<Summary>), |(bj, best), (j, s)| match best {
                Some(b) if b.mean >= s.mean => (bj, Some(b)),
                _ => (j, Some(s)),
            });
        let squared = squared.expect("at least one record node");
        SupStat {
            t: self.nodes[j] as f64 * dt,
            squared,
            l1_mean: self.l1[approx][j].summary().mean,
            violation: squared.upper() > bound,
        }
    }

    fn checkpoints(&self, approx: usize, indices: &[usize], dt: f64, bound: f64) -> Vec<CheckpointStat> {
        indices
            .iter()
            .map(|&k| {
                let j = self.nodes.binary_search(&k).expect("checkpoints are record nodes");
                let squared = self.squared[approx][j].summary();
                CheckpointStat {
                    t: k as f64 * dt,
                    squared,
                    l1_mean: self.l1[approx][j].summary().mean,
                    bound,
                    violation: squared.upper() > bound,
                }
            })
            .collect()
    }
}

fn inconclusive(stats: impl IntoIterator<Item = (Summary, f64)>) -> bool {
    stats.into_iter().any(|(s, bound)| bound > 0.0 && s.half_width > 0.0 && s.straddles(bound))
}

/// Exact filter `π_t(ν)` against the misspecified filter `π̃_t(μ)` on common
/// observations simulated under the true model.
pub fn run_robustness_experiment(spec: &ExperimentSpec) -> Result<BoundReport> {
    spec.validate()?;
    let pair = &spec.pair;
    let constants = bound_constants(pair)?;
    let gaps = PerturbationGaps::of(pair)?;
    let bound = constants.bound(&gaps);
    let indices = spec.checkpoint_indices()?;
    let nodes = record_nodes(spec.grid.n_steps(), spec.sup_stride(), &indices);
    let dt = spec.grid.dt();

    let mut campaign = Campaign::new(&pair.truth, vec![pair.approx.clone()], nodes, Vec::new());
    campaign.run(spec, 0, spec.n_trials)?;
    let mut escalated = false;
    let straddling = |c: &Campaign| {
        let mut items: Vec<(Summary, f64)> =
            c.checkpoints(0, &indices, dt, bound).iter().map(|s| (s.squared, bound)).collect();
        items.push((c.sup(0, dt, bound).squared, bound));
        inconclusive(items)
    };
    if straddling(&campaign) {
        campaign.run(spec, spec.n_trials, ESCALATION * spec.n_trials)?;
        escalated = true;
    }

    let checkpoints = campaign.checkpoints(0, &indices, dt, bound);
    let sup = campaign.sup(0, dt, bound);
    let floor_ok = gaps.is_zero().then(|| sup.squared.upper() <= 10.0 * INTEGRATOR_TOL);
    let upper = checkpoints.iter().map(|c| c.squared.upper()).fold(sup.squared.upper(), f64::max);
    let inverse_moment = indices
        .iter()
        .map(|&k| campaign.inverse_min[campaign.nodes.binary_search(&k).unwrap()].summary())
        .fold(None::<Summary>, |best, s| match best {
            Some(b) if b.mean >= s.mean => Some(b),
            _ => Some(s),
        })
        .unwrap_or_else(|| campaign.inverse_min[0].summary());
    let violations = checkpoints.iter().filter(|c| c.violation).count()
        + usize::from(sup.violation)
        + usize::from(floor_ok == Some(false));
    Ok(BoundReport {
        master_seed: spec.master_seed,
        requested_trials: spec.n_trials,
        n_trials: campaign.trials,
        escalated,
        constants,
        gaps,
        bound,
        asymptotic_bound: constants.asymptotic_bound(&gaps),
        checkpoints,
        sup,
        slack_ratio: (upper > 0.0).then(|| bound / upper),
        inverse_moment,
        floor_ok,
        violations,
    })
}

/// Sup-time error as each component of the approximate model (and all of
/// them jointly) is moved toward the truth through the sweep sizes.
pub fn run_convergence_sweep(spec: &ExperimentSpec) -> Result<SweepReport> {
    spec.validate()?;
    let mut sizes = spec.sweep.clone();
    sizes.sort_by(|a, b| b.partial_cmp(a).expect("finite sizes"));
    sizes.dedup();
    let indices = spec.checkpoint_indices()?;
    let nodes = record_nodes(spec.grid.n_steps(), spec.sup_stride(), &indices);
    let dt = spec.grid.dt();

    // slot 0 is the unperturbed filter
    let mut approxes = vec![spec.pair.truth.clone()];
    let mut rows_meta: Vec<(SweepTarget, f64, ModelPair, usize)> = Vec::new();
    let mut pairs = Vec::new();
    for &target in &spec.sweep_targets {
        let mut previous: Option<usize> = None;
        for &size in &sizes {
            let pair = spec.perturbed(target, size)?;
            pair.require_bound_hypotheses()?;
            let slot = approxes.len();
            approxes.push(pair.approx.clone());
            if let Some(prev) = previous {
                pairs.push((prev, slot));
            }
            rows_meta.push((target, size, pair, slot));
            previous = Some(slot);
        }
    }

    let mut campaign = Campaign::new(&spec.pair.truth, approxes, nodes, pairs.clone());
    campaign.run(spec, 0, spec.n_trials)?;

    let evaluate = |campaign: &Campaign| -> Result<SweepReport> {
        let floor = campaign.sup(0, dt, 0.0);
        let floor_ok = floor.squared.upper() <= 10.0 * INTEGRATOR_TOL;
        let mut rows = Vec::new();
        for (target, size, pair, slot) in &rows_meta {
            let constants = bound_constants(pair)?;
            let gaps = PerturbationGaps::of(pair)?;
            let bound = constants.bound(&gaps);
            let sup = campaign.sup(*slot, dt, bound);
            let checkpoints = campaign.checkpoints(*slot, &indices, dt, bound);
            let violation = sup.violation || checkpoints.iter().any(|c| c.violation);
            rows.push(SweepRow { target: *target, size: *size, gaps, bound, sup, checkpoints, violation });
        }
        let slot_row = |slot: usize| rows_meta.iter().position(|m| m.3 == slot).expect("row of slot");
        let mut monotone = Vec::new();
        let mut halving_ratios = Vec::new();
        for (p, &(a, b)) in pairs.iter().enumerate() {
            let (ra, rb) = (&rows[slot_row(a)], &rows[slot_row(b)]);
            let j = campaign.nodes.binary_search(&((rb.sup.t / dt).round() as usize)).expect("sup node");
            let difference = campaign.differences[p][j].summary();
            monotone.push(MonotoneCheck {
                target: rb.target,
                larger: ra.size,
                smaller: rb.size,
                t: rb.sup.t,
                difference,
                passed: difference.lower() <= 0.0,
            });
            if rb.sup.l1_mean > 0.0 {
                halving_ratios.push(HalvingRatio {
                    target: rb.target,
                    larger: ra.size,
                    smaller: rb.size,
                    ratio: ra.sup.l1_mean / rb.sup.l1_mean,
                });
            }
        }
        let mut final_checks = Vec::new();
        for &target in &spec.sweep_targets {
            if let Some(row) = rows.iter().rfind(|r| r.target == target) {
                let limit = 2.0 * floor.squared.mean + row.bound;
                final_checks.push(FinalCheck {
                    target,
                    size: row.size,
                    value: row.sup.squared.mean,
                    limit,
                    passed: row.sup.squared.mean <= limit,
                });
            }
        }
        let violations = rows.iter().filter(|r| r.violation).count()
            + monotone.iter().filter(|m| !m.passed).count()
            + final_checks.iter().filter(|f| !f.passed).count()
            + usize::from(!floor_ok);
        Ok(SweepReport {
            master_seed: spec.master_seed,
            requested_trials: spec.n_trials,
            n_trials: campaign.trials,
            escalated: false,
            floor,
            floor_ok,
            rows,
            monotone,
            final_checks,
            halving_ratios,
            violations,
        })
    };

    let first = evaluate(&campaign)?;
    let unsettled = first.rows.iter().any(|r| {
        inconclusive(r.checkpoints.iter().map(|c| (c.squared, r.bound)).chain([(r.sup.squared, r.bound)]))
    }) || first.monotone.iter().any(|m| m.difference.mean > 0.0 && m.passed);
    if !unsettled {
        return Ok(first);
    }
    campaign.run(spec, spec.n_trials, ESCALATION * spec.n_trials)?;
    let mut report = evaluate(&campaign)?;
    report.escalated = true;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GeneratorMatrix, ObservationMap, SimplexPoint};
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
    fn identical_filters_have_zero_error() {
        let spec = ExperimentSpec::new(ModelPair::exact(truth()), TimeGrid::new(2.0, 1e-3).unwrap(), 100, 5);
        let report = run_robustness_experiment(&spec).unwrap();
        assert_eq!(report.violations, 0);
        assert_eq!(report.floor_ok, Some(true));
        assert!(report.checkpoints.iter().all(|c| c.squared.mean == 0.0));
        assert!(!report.escalated);
        assert_eq!(report.slack_ratio, None);
        assert_eq!(report.checkpoints[0].t, 0.0);
        // E(1/min π_0) = 1/min ν exactly
        assert!(report.inverse_moment.mean >= 2.0);
    }

    #[test]
    fn initial_condition_error_is_forgotten() {
        let mut approx = truth();
        approx.initial = SimplexPoint::new(vec![0.8, 0.2]).unwrap();
        let pair = ModelPair::new(truth(), approx).unwrap();
        let spec = ExperimentSpec::new(pair, TimeGrid::new(10.0, 1e-3).unwrap(), 100, 6);
        let report = run_robustness_experiment(&spec).unwrap();
        assert_eq!(report.violations, 0);
        let at = |t: f64| report.checkpoints.iter().find(|c| c.t == t).unwrap().squared.mean;
        assert!(at(10.0) < report.constants.c1 * report.gaps.initial);
        assert!(at(10.0) < at(1.0) && at(1.0) < at(0.0));
        assert_eq!(report.asymptotic_bound, 0.0);
    }
}
