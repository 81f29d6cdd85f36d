//! Monte Carlo campaigns that hold the filters against their analytic bounds.
//!
//! Every trial draws its own seed from the master seed and the trial index,
//! simulates signal and observations under the true model, and runs every
//! filter of the trial on that one observation path. Trials run on the rayon
//! pool and are collected in index order, so reports do not depend on the
//! schedule.

mod audit;
mod forgetting;
mod moments;
mod robustness;
mod stats;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelPair, SimplexPoint};
use crate::signal::{simulate_trial, trial_seed, ObservationPath, TimeGrid};
use crate::tolerance::{INTEGRATOR_TOL, MIN_TRIALS, REFINEMENT_ALLOWANCE_FACTOR, SUP_GRID_SPACING};

pub use audit::{run_derivative_audit, run_integrator_refinement, AuditReport, Check, RefinementLevel, RefinementReport};
pub use forgetting::{run_forgetting_experiment, ForgettingReport};
pub use moments::{run_inverse_moment_experiment, MomentCheck, MomentReport};
pub use robustness::{
    run_convergence_sweep, run_robustness_experiment, BoundReport, CheckpointStat, MonotoneCheck, SupStat, SweepReport,
    SweepRow,
};
pub use stats::Summary;

/// Default checkpoints of the robustness campaigns.
pub const DEFAULT_CHECKPOINTS: [f64; 7] = [0.0, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0];

/// Default perturbation sizes of a convergence sweep.
pub const DEFAULT_SWEEP: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

/// Which part of the approximate model a sweep moves toward the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepTarget {
    Initial,
    Generator,
    Levels,
    Joint,
}

impl SweepTarget {
    pub const ALL: [SweepTarget; 4] = [SweepTarget::Initial, SweepTarget::Generator, SweepTarget::Levels, SweepTarget::Joint];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepTarget::Initial => "initial",
            SweepTarget::Generator => "generator",
            SweepTarget::Levels => "levels",
            SweepTarget::Joint => "joint",
        }
    }
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub pair: ModelPair,
    pub grid: TimeGrid,
    pub n_trials: usize,
    pub master_seed: u64,
    pub checkpoints: Vec<f64>,
    /// Perturbation sizes `λ`: the swept component becomes
    /// `truth + λ (approx - truth)`.
    pub sweep: Vec<f64>,
    pub sweep_targets: Vec<SweepTarget>,
    /// Disables the measured integrator allowance and the step-size cap.
    pub strict: bool,
}

impl ExperimentSpec {
    pub fn new(pair: ModelPair, grid: TimeGrid, n_trials: usize, master_seed: u64) -> Self {
        let checkpoints = DEFAULT_CHECKPOINTS.iter().copied().filter(|&t| t <= grid.t_end()).collect();
        Self {
            pair,
            grid,
            n_trials,
            master_seed,
            checkpoints,
            sweep: DEFAULT_SWEEP.to_vec(),
            sweep_targets: SweepTarget::ALL.to_vec(),
            strict: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trials < MIN_TRIALS {
            return Err(Error::InsufficientTrials { min: MIN_TRIALS, got: self.n_trials });
        }
        if !self.strict {
            self.grid.require_verification_resolution()?;
        }
        self.checkpoint_indices()?;
        if self.sweep.iter().any(|&s| !(0.0..=1.0).contains(&s)) {
            return Err(Error::InvalidExperiment("sweep sizes must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Grid indices of the checkpoints.
    pub fn checkpoint_indices(&self) -> Result<Vec<usize>> {
        self.checkpoints
            .iter()
            .map(|&t| {
                self.grid
                    .index_of(t)
                    .ok_or_else(|| Error::InvalidExperiment(format!("checkpoint {t} is not a grid node")))
            })
            .collect()
    }

    /// Approximate model with the `target` components moved to size `λ`.
    pub fn perturbed(&self, target: SweepTarget, size: f64) -> Result<ModelPair> {
        let truth = &self.pair.truth;
        let approx = &self.pair.approx;
        let moves = |t: SweepTarget| size != 0.0 && (target == t || target == SweepTarget::Joint);
        let initial = if moves(SweepTarget::Initial) {
            interpolate_law(&truth.initial, &approx.initial, size)?
        } else {
            truth.initial.clone()
        };
        let generator = if moves(SweepTarget::Generator) {
            truth.generator.interpolate(&approx.generator, size)?
        } else {
            truth.generator.clone()
        };
        let levels = if moves(SweepTarget::Levels) {
            truth.levels.interpolate(&approx.levels, size)?
        } else {
            truth.levels.clone()
        };
        ModelPair::new(truth.clone(), Model::new(initial, generator, levels)?)
    }

    /// Allowance on pathwise comparisons: `max(1e-6, 10 × refinement error)`,
    /// or zero in strict mode.
    pub(crate) fn allowance(&self, refinement_error: f64) -> f64 {
        if self.strict {
            0.0
        } else {
            INTEGRATOR_TOL.max(REFINEMENT_ALLOWANCE_FACTOR * refinement_error)
        }
    }

    /// Every `stride`-th node approximates the supremum over time.
    pub(crate) fn sup_stride(&self) -> usize {
        ((SUP_GRID_SPACING / self.grid.dt()).round() as usize).max(1)
    }
}

fn interpolate_law(truth: &SimplexPoint, approx: &SimplexPoint, size: f64) -> Result<SimplexPoint> {
    let weights = truth.weights().iter().zip(approx.weights()).map(|(a, b)| a + size * (b - a)).collect();
    SimplexPoint::new(weights)
}

/// Sorted, deduplicated node indices: every `stride`-th node plus `extra`.
pub(crate) fn record_nodes(n_steps: usize, stride: usize, extra: &[usize]) -> Vec<usize> {
    let mut nodes: Vec<usize> = (0..=n_steps).step_by(stride).chain(extra.iter().copied()).collect();
    nodes.push(n_steps);
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

/// Runs `trial` for indices `from..to` in parallel and returns results in index order.
pub(crate) fn run_trials<T, F>(spec: &ExperimentSpec, from: usize, to: usize, trial: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &ObservationPath) -> Result<T> + Sync,
{
    (from..to)
        .into_par_iter()
        .map(|i| {
            let seed = trial_seed(spec.master_seed, i as u64);
            let (_, observations) = simulate_trial(&spec.pair.truth, &spec.grid, seed)?;
            trial(i, &observations)
        })
        .collect()
}

/// Largest refinement error of `quantity` on a few pilot paths: each path is
/// simulated at `dt/2` and the quantity is compared with its value on the
/// same path coarsened to `dt`.
pub(crate) fn measure_refinement_error<F>(spec: &ExperimentSpec, pilots: usize, quantity: F) -> Result<f64>
where
    F: Fn(&ObservationPath) -> Result<Vec<f64>> + Sync,
{
    let fine_grid = spec.grid.refined(2);
    let errors: Vec<f64> = (0..pilots)
        .into_par_iter()
        .map(|i| {
            let seed = trial_seed(spec.master_seed ^ PILOT_SALT, i as u64);
            let (_, fine) = simulate_trial(&spec.pair.truth, &fine_grid, seed)?;
            let coarse = fine.coarsen(2)?;
            let a = quantity(&coarse)?;
            let b = quantity(&fine)?;
            Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        })
        .collect::<Result<_>>()?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}

const PILOT_SALT: u64 = 0x5EED_F00D_0000_0001;
pub(crate) const PILOT_PATHS: usize = 8;

/// Registered experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Robustness,
    Forgetting,
    InverseMoment,
    ConvergenceSweep,
    DerivativeAudit,
    IntegratorRefinement,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::Robustness,
        ExperimentKind::Forgetting,
        ExperimentKind::InverseMoment,
        ExperimentKind::ConvergenceSweep,
        ExperimentKind::DerivativeAudit,
        ExperimentKind::IntegratorRefinement,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Robustness => "robustness",
            ExperimentKind::Forgetting => "forgetting",
            ExperimentKind::InverseMoment => "inverse-moment",
            ExperimentKind::ConvergenceSweep => "convergence-sweep",
            ExperimentKind::DerivativeAudit => "derivative-audit",
            ExperimentKind::IntegratorRefinement => "integrator-refinement",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ExperimentKind::Robustness => "mean squared error of the misspecified filter against the uniform-in-time bound",
            ExperimentKind::Forgetting => "decay of the gap between filters started from different initial laws",
            ExperimentKind::InverseMoment => "E(1/min_i pi_t^i) and E(pi_t^i)^-k against their closed-form bounds",
            ExperimentKind::ConvergenceSweep => "error versus perturbation size for each parameter and jointly",
            ExperimentKind::DerivativeAudit => "derivative routes, smoothing spread and pathwise derivative bounds",
            ExperimentKind::IntegratorRefinement => "step-halving study and cross-route agreement of the integrators",
        }
    }

    pub fn run(self, spec: &ExperimentSpec) -> Result<Outcome> {
        Ok(match self {
            ExperimentKind::Robustness => Outcome::Robustness(run_robustness_experiment(spec)?),
            ExperimentKind::Forgetting => Outcome::Forgetting(run_forgetting_experiment(spec)?),
            ExperimentKind::InverseMoment => Outcome::InverseMoment(run_inverse_moment_experiment(spec)?),
            ExperimentKind::ConvergenceSweep => Outcome::ConvergenceSweep(run_convergence_sweep(spec)?),
            ExperimentKind::DerivativeAudit => Outcome::DerivativeAudit(run_derivative_audit(spec)?),
            ExperimentKind::IntegratorRefinement => Outcome::IntegratorRefinement(run_integrator_refinement(spec)?),
        })
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownExperiment(s.to_string()))
    }
}

/// Result of any registered experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum Outcome {
    Robustness(BoundReport),
    Forgetting(ForgettingReport),
    InverseMoment(MomentReport),
    ConvergenceSweep(SweepReport),
    DerivativeAudit(AuditReport),
    IntegratorRefinement(RefinementReport),
}

impl Outcome {
    /// Number of failed bound comparisons and checks.
    pub fn violations(&self) -> usize {
        match self {
            Outcome::Robustness(r) => r.violations,
            Outcome::Forgetting(r) => r.violations,
            Outcome::InverseMoment(r) => r.violations,
            Outcome::ConvergenceSweep(r) => r.violations,
            Outcome::DerivativeAudit(r) => r.violations,
            Outcome::IntegratorRefinement(r) => r.violations,
        }
    }

    /// Per-checkpoint (or per-row) summary table.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        match self {
            Outcome::Robustness(r) => r.write_rows(&mut writer)?,
            Outcome::Forgetting(r) => r.write_rows(&mut writer)?,
            Outcome::InverseMoment(r) => r.write_rows(&mut writer)?,
            Outcome::ConvergenceSweep(r) => r.write_rows(&mut writer)?,
            Outcome::DerivativeAudit(r) => audit::write_checks(&r.checks, &mut writer)?,
            Outcome::IntegratorRefinement(r) => r.write_rows(&mut writer)?,
        }
        writer.flush()?;
        Ok(())
    }
}
