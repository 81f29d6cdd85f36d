//! Exact simulation of the hidden chain and of the observation increments.
//!
//! The chain is simulated event by event (exponential holding times and
//! embedded jump chain); the drift `∫ h(X_s) ds` of each grid cell is then
//! integrated exactly across the jumps inside the cell. Signal and noise use
//! separate ChaCha streams of the same seed, so changing one never perturbs
//! the other.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_dim, GeneratorMatrix, Model, ObservationMap, SimplexPoint};
use crate::tolerance::MAX_VERIFICATION_DT;

const SIGNAL_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const GRID_TOL: f64 = 1e-12;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of trial `index` under `master`. Depends only on the pair, so trials
/// can run in any order.
pub fn trial_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finaliser over a combination of both words
    let mut z = master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform grid `0, dt, ..., n_steps·dt = t_end`; cells are `[t_k, t_{k+1})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_end: f64,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidGrid(format!("step {dt} must be positive")));
        }
        if !(t_end >= 0.0 && t_end.is_finite()) {
            return Err(Error::InvalidGrid(format!("horizon {t_end} must be nonnegative")));
        }
        let n_steps = (t_end / dt).round() as usize;
        if (n_steps as f64 * dt - t_end).abs() > GRID_TOL {
            return Err(Error::InvalidGrid(format!("horizon {t_end} is not a multiple of step {dt}")));
        }
        Ok(Self { t_end, dt, n_steps })
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Grid index of `t`, if `t` is a node.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || k as usize > self.n_steps {
            return None;
        }
        ((k * self.dt - t).abs() <= GRID_TOL * t.abs().max(1.0)).then_some(k as usize)
    }

    /// Same horizon with the step divided by `factor`.
    pub fn refined(&self, factor: usize) -> Self {
        Self { t_end: self.t_end, dt: self.dt / factor as f64, n_steps: self.n_steps * factor }
    }

    /// Bound-verification runs need `dt ≤ 0.01`.
    pub fn require_verification_resolution(&self) -> Result<()> {
        if self.dt > MAX_VERIFICATION_DT {
            return Err(Error::InvalidGrid(format!(
                "step {} exceeds {MAX_VERIFICATION_DT} required for bound verification",
                self.dt
            )));
        }
        Ok(())
    }
}

/// Piecewise-constant path of the hidden chain on `[0, t_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalPath {
    pub initial_state: usize,
    /// Strictly increasing jump times in `(0, t_end]`.
    pub jump_times: Vec<f64>,
    /// `states[k]` is entered at `jump_times[k]`.
    pub states: Vec<usize>,
    pub t_end: f64,
}

impl SignalPath {
    pub fn state_at(&self, t: f64) -> usize {
        match self.jump_times.partition_point(|&s| s <= t) {
            0 => self.initial_state,
            k => self.states[k - 1],
        }
    }

    /// Sojourn lengths of all completed visits (the last, censored one is dropped).
    pub fn holding_times(&self) -> Vec<f64> {
        let mut previous = 0.0;
        self.jump_times
            .iter()
            .map(|&t| {
                let held = t - previous;
                previous = t;
                held
            })
            .collect()
    }

    /// Fraction of `[0, t_end]` spent in each state.
    pub fn occupation(&self, d: usize) -> Vec<f64> {
        let mut time = vec![0.0; d];
        let mut previous = 0.0;
        let mut state = self.initial_state;
        for (&t, &next) in self.jump_times.iter().zip(&self.states) {
            time[state] += t - previous;
            previous = t;
            state = next;
        }
        time[state] += self.t_end - previous;
        time.iter().map(|x| x / self.t_end).collect()
    }
}

/// Observation increments `ΔY_k = Y_{t_{k+1}} - Y_{t_k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationPath {
    pub dt: f64,
    pub increments: Vec<f64>,
}

impl ObservationPath {
    pub fn new(dt: f64, increments: Vec<f64>) -> Result<Self> {
        if increments.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("observation increments"));
        }
        Ok(Self { dt, increments })
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// Increments of the same path on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.increments.len().is_multiple_of(factor) {
            return Err(Error::GridMismatch(format!(
                "{} cells cannot be merged in groups of {factor}",
                self.increments.len()
            )));
        }
        Ok(Self {
            dt: self.dt * factor as f64,
            increments: self.increments.chunks(factor).map(|c| c.iter().sum()).collect(),
        })
    }

    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.increments.len() != grid.n_steps() || (self.dt - grid.dt()).abs() > GRID_TOL {
            return Err(Error::GridMismatch(format!(
                "{} increments of step {} on a grid of {} steps of {}",
                self.increments.len(),
                self.dt,
                grid.n_steps(),
                grid.dt()
            )));
        }
        Ok(())
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // round-off fallback: last state with positive weight
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Event-driven path of the chain on `[0, t_end]`.
///
/// With `forbid_absorbing`, entering a state with zero exit rate is an error;
/// otherwise the chain stays there until `t_end`.
pub fn simulate_signal(
    initial: &SimplexPoint,
    generator: &GeneratorMatrix,
    grid: &TimeGrid,
    seed: u64,
    forbid_absorbing: bool,
) -> Result<SignalPath> {
    let d = generator.dim();
    check_dim(d, initial.dim())?;
    let mut rng = stream_rng(seed, SIGNAL_STREAM);
    let initial_state = sample_categorical(&mut rng, initial.weights());
    let mut path = SignalPath {
        initial_state,
        jump_times: Vec::new(),
        states: Vec::new(),
        t_end: grid.t_end(),
    };
    let mut state = initial_state;
    let mut t = 0.0;
    let mut jump_weights = vec![0.0; d];
    loop {
        let rate = generator.exit_rate(state);
        if rate <= 0.0 {
            if forbid_absorbing {
                return Err(Error::AbsorbingState(state));
            }
            break;
        }
        let holding = Exp::new(rate).expect("positive rate").sample(&mut rng);
        t += holding;
        if t > grid.t_end() {
            break;
        }
        for (j, w) in jump_weights.iter_mut().enumerate() {
            *w = if j == state { 0.0 } else { generator.get(state, j) };
        }
        state = sample_categorical(&mut rng, &jump_weights);
        path.jump_times.push(t);
        path.states.push(state);
    }
    Ok(path)
}

/// `ΔY_k = ∫_{cell k} h(X_s) ds + √dt ξ_k` with the drift integrated exactly.
pub fn simulate_observations(
    path: &SignalPath,
    levels: &ObservationMap,
    grid: &TimeGrid,
    seed: u64,
) -> Result<ObservationPath> {
    if (path.t_end - grid.t_end()).abs() > GRID_TOL * grid.t_end().max(1.0) {
        return Err(Error::GridMismatch(format!(
            "signal covers [0, {}] but the grid ends at {}",
            path.t_end,
            grid.t_end()
        )));
    }
    let h = levels.levels();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut rng = stream_rng(seed, NOISE_STREAM);
    let mut increments = Vec::with_capacity(grid.n_steps());
    let mut next_jump = 0;
    let mut state = path.initial_state;
    for k in 0..grid.n_steps() {
        let start = grid.time(k);
        let end = grid.time(k + 1);
        let mut drift = 0.0;
        let mut cursor = start;
        while next_jump < path.jump_times.len() && path.jump_times[next_jump] < end {
            let tau = path.jump_times[next_jump];
            drift += h[state] * (tau - cursor);
            cursor = tau;
            state = path.states[next_jump];
            next_jump += 1;
        }
        drift += h[state] * (end - cursor);
        let xi: f64 = StandardNormal.sample(&mut rng);
        increments.push(drift + sqrt_dt * xi);
    }
    ObservationPath::new(dt, increments)
}

/// Signal and observations of one trial under `model`.
pub fn simulate_trial(model: &Model, grid: &TimeGrid, seed: u64) -> Result<(SignalPath, ObservationPath)> {
    let signal = simulate_signal(&model.initial, &model.generator, grid, seed, model.generator.is_mixing())?;
    let observations = simulate_observations(&signal, &model.levels, grid, seed)?;
    Ok((signal, observations))
}

/// Writes `t, state, dY` per grid cell.
pub fn write_paths_csv<W: Write>(
    out: W,
    grid: &TimeGrid,
    signal: &SignalPath,
    observations: &ObservationPath,
) -> Result<()> {
    observations.check_grid(grid)?;
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["t", "state", "dY"])?;
    for (k, dy) in observations.increments.iter().enumerate() {
        let t = grid.time(k);
        writer.write_record([t.to_string(), signal.state_at(t).to_string(), dy.to_string()])?;
    }
    writer.flush()?;
    Ok(())
}
