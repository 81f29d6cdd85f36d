use std::io::Write;

use serde::{Deserialize, Serialize};

use super::stats::{Accumulator, Summary};
use super::ExperimentSpec;
use crate::constants::{inverse_moment_constant, inverse_power_moment_bound};
use crate::error::Result;
use crate::filter::PathwiseFilter;
use crate::signal::{simulate_trial, trial_seed};

const MOMENT_TIMES: [f64; 2] = [0.5, 1.0];
const MOMENT_POWERS: [u32; 2] = [1, 2];
const ESCALATION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverseMinStat {
    pub t: f64,
    /// `E(1 / min_i π_t^i)`
    pub estimate: Summary,
    pub violation: bool,
}

/// `E(π_t^i)^{-k}` against `(ν^i)^{-k} exp(-kλ_ii t + ½k(k+1) max_j (h^i - h^j)² t)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentCheck {
    pub state: usize,
    pub power: u32,
    pub t: f64,
    pub estimate: Summary,
    pub bound: f64,
    pub violation: bool,
}

/// Difference of the two latest checkpoint estimates; reported only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stationarity {
    pub earlier: f64,
    pub later: f64,
    pub difference: f64,
    /// `|difference| ≤ 2 × (sum of half-widths)`
    pub within_noise: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub master_seed: u64,
    pub requested_trials: usize,
    pub n_trials: usize,
    pub escalated: bool,
    pub constant: f64,
    pub checkpoints: Vec<InverseMinStat>,
    pub max_estimate: Summary,
    /// `constant / (max estimate + half-width)`
    pub slack_ratio: f64,
    pub moments: Vec<MomentCheck>,
    pub stationarity: Option<Stationarity>,
    pub violations: usize,
}

impl MomentReport {
    pub(crate) fn write_rows<W: Write>(&self, writer: &mut csv::Writer<W>) -> Result<()> {
        writer.write_record(["quantity", "t", "mean", "half_width", "bound", "violation"])?;
        for c in &self.checkpoints {
            writer.write_record([
                "inverse-min".to_string(),
                c.t.to_string(),
                c.estimate.mean.to_string(),
                c.estimate.half_width.to_string(),
                self.constant.to_string(),
                c.violation.to_string(),
            ])?;
        }
        for m in &self.moments {
            writer.write_record([
                format!("state{}-power{}", m.state + 1, m.power),
                m.t.to_string(),
                m.estimate.mean.to_string(),
                m.estimate.half_width.to_string(),
                m.bound.to_string(),
                m.violation.to_string(),
            ])?;
        }
        Ok(())
    }
}

/// Inverse moments of the exact filter at the checkpoints and at `t = 0.5, 1`.
pub fn run_inverse_moment_experiment(spec: &ExperimentSpec) -> Result<MomentReport> {
    spec.validate()?;
    let model = &spec.pair.truth;
    let constant = inverse_moment_constant(&model.initial, &model.generator, &model.levels)?;
    let d = model.dim();
    let checkpoint_nodes = spec.checkpoint_indices()?;
    let moment_nodes: Vec<(f64, usize)> =
        MOMENT_TIMES.iter().filter_map(|&t| spec.grid.index_of(t).map(|k| (t, k))).collect();
    let last = checkpoint_nodes.iter().chain(moment_nodes.iter().map(|m| &m.1)).copied().max().unwrap_or(0);

    let run = |from: usize, to: usize, inverse_min: &mut Vec<Accumulator>, powers: &mut Vec<Accumulator>| -> Result<()> {
        use rayon::prelude::*;
        let records: Vec<(Vec<f64>, Vec<f64>)> = (from..to)
            .into_par_iter()
            .map(|i| {
                let seed = trial_seed(spec.master_seed, i as u64);
                let (_, obs) = simulate_trial(model, &spec.grid, seed)?;
                let mut filter = PathwiseFilter::new(&model.generator, &model.levels, model.initial.weights(), obs.dt)?;
                let mut mins = vec![0.0; checkpoint_nodes.len()];
                let mut moments = vec![0.0; moment_nodes.len() * d * MOMENT_POWERS.len()];
                for k in 0..=last {
                    if k > 0 {
                        filter.step_law(obs.increments[k - 1]);
                    }
                    let p = filter.probabilities();
                    for (c, _) in checkpoint_nodes.iter().enumerate().filter(|(_, &n)| n == k) {
                        mins[c] = 1.0 / p.iter().copied().fold(f64::INFINITY, f64::min);
                    }
                    for (m, _) in moment_nodes.iter().enumerate().filter(|(_, &(_, n))| n == k) {
                        for i in 0..d {
                            for (q, &power) in MOMENT_POWERS.iter().enumerate() {
                                moments[(m * d + i) * MOMENT_POWERS.len() + q] = p[i].powi(-(power as i32));
                            }
                        }
                    }
                }
                Ok((mins, moments))
            })
            .collect::<Result<_>>()?;
        for (mins, moments) in records {
            mins.iter().zip(inverse_min.iter_mut()).for_each(|(x, acc)| acc.push(*x));
            moments.iter().zip(powers.iter_mut()).for_each(|(x, acc)| acc.push(*x));
        }
        Ok(())
    };

    let mut inverse_min = vec![Accumulator::default(); checkpoint_nodes.len()];
    let mut powers = vec![Accumulator::default(); moment_nodes.len() * d * MOMENT_POWERS.len()];
    run(0, spec.n_trials, &mut inverse_min, &mut powers)?;

    let bounds: Vec<f64> = moment_nodes
        .iter()
        .flat_map(|&(t, _)| {
            (0..d).flat_map(move |i| MOMENT_POWERS.iter().map(move |&k| (i, k, t)))
        })
        .map(|(i, k, t)| inverse_power_moment_bound(&model.initial, &model.generator, &model.levels, i, k, t))
        .collect::<Result<_>>()?;
    let unsettled = |mins: &[Accumulator], powers: &[Accumulator]| {
        mins.iter().any(|a| {
            let s = a.summary();
            s.half_width > 0.0 && s.straddles(constant)
        }) || powers.iter().zip(&bounds).any(|(a, &b)| {
            let s = a.summary();
            s.half_width > 0.0 && s.straddles(b)
        })
    };
    let mut escalated = false;
    if unsettled(&inverse_min, &powers) {
        run(spec.n_trials, ESCALATION * spec.n_trials, &mut inverse_min, &mut powers)?;
        escalated = true;
    }

    let checkpoints: Vec<InverseMinStat> = spec
        .checkpoints
        .iter()
        .zip(&inverse_min)
        .map(|(&t, acc)| {
            let estimate = acc.summary();
            InverseMinStat { t, estimate, violation: estimate.upper() > constant }
        })
        .collect();
    let max_estimate = checkpoints
        .iter()
        .map(|c| c.estimate)
        .fold(None::<Summary>, |best, s| match best {
            Some(b) if b.mean >= s.mean => Some(b),
            _ => Some(s),
        })
        .unwrap_or(Summary { n: 0, mean: 0.0, std_error: 0.0, half_width: 0.0 });
    let mut moments = Vec::new();
    let mut slot = 0;
    for &(t, _) in &moment_nodes {
        for state in 0..d {
            for &power in &MOMENT_POWERS {
                let estimate = powers[slot].summary();
                let bound = bounds[slot];
                moments.push(MomentCheck { state, power, t, estimate, bound, violation: estimate.upper() > bound });
                slot += 1;
            }
        }
    }
    let stationarity = (checkpoints.len() >= 2).then(|| {
        let (a, b) = (&checkpoints[checkpoints.len() - 2], &checkpoints[checkpoints.len() - 1]);
        let difference = b.estimate.mean - a.estimate.mean;
        Stationarity {
            earlier: a.t,
            later: b.t,
            difference,
            within_noise: difference.abs() <= 2.0 * (a.estimate.half_width + b.estimate.half_width),
        }
    });
    let violations =
        checkpoints.iter().filter(|c| c.violation).count() + moments.iter().filter(|m| m.violation).count();
    Ok(MomentReport {
        master_seed: spec.master_seed,
        requested_trials: spec.n_trials,
        n_trials: inverse_min.first().map_or(spec.n_trials, |a| a.summary().n),
        escalated,
        constant,
        slack_ratio: constant / max_estimate.upper(),
        max_estimate,
        checkpoints,
        moments,
        stationarity,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GeneratorMatrix, Model, ModelPair, ObservationMap, SimplexPoint};
    use crate::signal::TimeGrid;

    #[test]
    fn zero_checkpoint_is_deterministic() {
        let model = Model::new(
            SimplexPoint::new(vec![0.25, 0.75]).unwrap(),
            GeneratorMatrix::from_rows(&[vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap(),
            ObservationMap::new(vec![0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let spec = ExperimentSpec::new(ModelPair::exact(model), TimeGrid::new(1.0, 1e-3).unwrap(), 100, 4);
        let report = run_inverse_moment_experiment(&spec).unwrap();
        assert_eq!(report.checkpoints[0].t, 0.0);
        assert_eq!(report.checkpoints[0].estimate.mean, 4.0);
        assert_eq!(report.checkpoints[0].estimate.half_width, 0.0);
        assert_eq!(report.moments.len(), 2 * 2 * 2);
        assert_eq!(report.violations, 0);
    }
}
