//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use rayon::prelude::*;
use wonham::constants::{inverse_moment_constant, mixing_rate};
use wonham::filter::{filter_semiflow, normalize, run_euler_maruyama, zakai_flow, FlowMatrix};
use wonham::lab::{
    run_convergence_sweep, run_derivative_audit, run_inverse_moment_experiment, run_robustness_experiment,
    AuditReport, ExperimentKind, ExperimentSpec, MomentReport, DEFAULT_SWEEP,
};
use wonham::model::l1_distance;
use wonham::sensitivity::smoothing_matrix;
use wonham::signal::{simulate_trial, trial_seed, ObservationPath, TimeGrid};
use wonham::{Model, ModelPair, ObservationMap, SimplexPoint};

const DT: f64 = 1e-3;
const PATHS: usize = 1000;
const SEED: u64 = 20_240_601;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn paths(model: &Model, grid: &TimeGrid, count: usize, salt: u64) -> Vec<ObservationPath> {
    (0..count)
        .into_par_iter()
        .map(|i| simulate_trial(model, grid, trial_seed(SEED ^ salt, i as u64)).unwrap().1)
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Largest pairwise ℓ₁ gap between the gauge filter, the normalised Zakai
/// flow and Euler-Maruyama at the end of the path.
fn cross_route_gap(model: &Model, obs: &ObservationPath) -> (f64, f64) {
    let n = obs.len();
    let gauge = filter_semiflow(&model.initial, 0, n, obs, &model.generator, &model.levels).unwrap();
    let flow = zakai_flow(0, n, obs, &model.generator, &model.levels).unwrap();
    let via_flow = normalize(&flow.apply(model.initial.weights())).unwrap();
    let em = run_euler_maruyama(&model.initial, obs, &model.generator, &model.levels).unwrap();
    let em = &em[em.len() - model.dim()..];
    let exact_routes = gauge.l1_distance(&via_flow);
    let all = exact_routes.max(l1_distance(em, gauge.weights())).max(l1_distance(em, via_flow.weights()));
    (exact_routes, all)
}

fn criterion_1() -> Verdict {
    let model = reference();
    let fine = TimeGrid::new(1.0, DT / 2.0).unwrap();
    let gaps: Vec<((f64, f64), (f64, f64))> = paths(&model, &fine, 200, 1)
        .par_iter()
        .map(|obs| (cross_route_gap(&model, &obs.coarsen(2).unwrap()), cross_route_gap(&model, obs)))
        .collect();
    let worst = gaps.iter().map(|g| g.0 .1).fold(0.0, f64::max);
    let worst_exact = gaps.iter().map(|g| g.0 .0).fold(0.0, f64::max);
    let coarse = mean(&gaps.iter().map(|g| g.0 .1).collect::<Vec<_>>());
    let halved = mean(&gaps.iter().map(|g| g.1 .1).collect::<Vec<_>>());
    let ratio = coarse / halved;
    verdict(
        worst <= 1e-5 && ratio >= 2.0,
        format!(
            "max gap {worst:.2e} (gauge vs flow {worst_exact:.2e}) vs 1e-5; mean gap {coarse:.2e} -> {halved:.2e} \
             on halving, ratio {ratio:.2} vs 2"
        ),
    )
}

fn criterion_2() -> Verdict {
    let mut worst_flow: f64 = 0.0;
    let mut worst_semiflow: f64 = 0.0;
    let mut identity = true;
    for (k, model) in [reference(), three_state()].iter().enumerate() {
        let grid = TimeGrid::new(6.0, DT).unwrap();
        let results: Vec<(f64, f64, bool)> = paths(model, &grid, 100, 2 + k as u64)
            .par_iter()
            .enumerate()
            .map(|(i, obs)| {
                // s < r < t with t - s ≤ 5
                let s = (i * 37) % 1000;
                let t = s + 1000 + (i * 311) % 4000;
                let r = s + 1 + (i * 997) % (t - s - 1);
                let g = (&model.generator, &model.levels);
                let whole = zakai_flow(s, t, obs, g.0, g.1).unwrap();
                let composed = zakai_flow(r, t, obs, g.0, g.1).unwrap().compose(&zakai_flow(s, r, obs, g.0, g.1).unwrap()).unwrap();
                let rescaled = &composed.entries * (composed.log_scale - whole.log_scale).exp();
                let flow_gap = (rescaled - &whole.entries).norm() / whole.entries.norm();
                let start = filter_semiflow(&model.initial, 0, s, obs, g.0, g.1).unwrap();
                let direct = filter_semiflow(&start, s, t, obs, g.0, g.1).unwrap();
                let mid = filter_semiflow(&start, s, r, obs, g.0, g.1).unwrap();
                let chained = filter_semiflow(&mid, r, t, obs, g.0, g.1).unwrap();
                let same = zakai_flow(s, s, obs, g.0, g.1).unwrap() == FlowMatrix::identity(model.dim(), s);
                (flow_gap, direct.l1_distance(&chained), same)
            })
            .collect();
        for (a, b, same) in results {
            worst_flow = worst_flow.max(a);
            worst_semiflow = worst_semiflow.max(b);
            identity &= same;
        }
    }
    verdict(
        identity && worst_flow <= 1e-6 && worst_semiflow <= 1e-6,
        format!("U_ss = I: {identity}; flow composition {worst_flow:.2e} rel; semiflow composition {worst_semiflow:.2e}"),
    )
}

fn criterion_3() -> Verdict {
    let horizons = [0.5, 1.0, 2.0, 4.0];
    let mut violations = 0;
    let mut worst_excess = f64::NEG_INFINITY;
    for (k, model) in [reference(), three_state()].iter().enumerate() {
        let beta = mixing_rate(&model.generator).unwrap();
        let grid = TimeGrid::new(4.0, DT).unwrap();
        let excess: Vec<f64> = paths(model, &grid, PATHS, 10 + k as u64)
            .par_iter()
            .flat_map_iter(|obs| {
                horizons.iter().map(move |&t| {
                    let n = grid.index_of(t).unwrap();
                    let rho = smoothing_matrix(&model.initial, 0, n, obs, &model.generator, &model.levels).unwrap();
                    rho.column_spread() - (-beta * t).exp()
                })
            })
            .collect();
        violations += excess.iter().filter(|&&e| e > 1e-6).count();
        worst_excess = excess.iter().copied().fold(worst_excess, f64::max);
    }
    verdict(
        violations == 0,
        format!("{violations} violations beyond 1e-6 on 2x{PATHS} paths x 4 horizons; worst excess {worst_excess:.2e}"),
    )
}

fn audits() -> Vec<AuditReport> {
    let mut approx = reference();
    approx.initial = SimplexPoint::new(vec![0.6, 0.4]).unwrap();
    approx.generator = generator(&[&[-1.2, 1.2], &[0.9, -0.9]]);
    let mut approx3 = three_state();
    approx3.generator = generator(&[&[-1.1, 0.7, 0.4], &[0.4, -1.4, 1.0], &[0.3, 0.8, -1.1]]);
    [ModelPair::new(reference(), approx).unwrap(), ModelPair::new(three_state(), approx3).unwrap()]
        .into_iter()
        .map(|pair| {
            let spec = ExperimentSpec::new(pair, TimeGrid::new(4.0, DT).unwrap(), PATHS, SEED);
            run_derivative_audit(&spec).unwrap()
        })
        .collect()
}

fn audit_verdict(audits: &[AuditReport], names: &[&str]) -> Verdict {
    let mut passed = true;
    let mut parts = Vec::new();
    for name in names {
        let checks: Vec<_> = audits.iter().filter_map(|a| a.checks.iter().find(|c| c.name == *name)).collect();
        let draws: usize = checks.iter().map(|c| c.draws).sum();
        let failures: usize = checks.iter().map(|c| c.failures).sum();
        passed &= checks.len() == audits.len() && failures == 0;
        parts.push(format!("{name} {failures}/{draws}"));
    }
    verdict(passed, parts.join("; "))
}

fn criterion_4(audits: &[AuditReport]) -> Verdict {
    audit_verdict(
        audits,
        &[
            "flow-vs-smoothing",
            "flow-vs-finite-difference",
            "smoothing-vs-finite-difference",
            "second-derivative-vs-finite-difference",
            "tangency",
        ],
    )
}

fn criterion_5(audits: &[AuditReport]) -> Verdict {
    let mut v = audit_verdict(audits, &["derivative-bound", "lipschitz-bound", "second-derivative-difference-bound"]);
    let allowance = audits.iter().map(|a| a.allowance).fold(0.0, f64::max);
    v.detail.push_str(&format!("; allowance {allowance:.1e}"));
    v
}

fn moments() -> MomentReport {
    let spec = ExperimentSpec::new(ModelPair::exact(reference()), TimeGrid::new(20.0, DT).unwrap(), PATHS, SEED);
    run_inverse_moment_experiment(&spec).unwrap()
}

fn criterion_6(report: &MomentReport) -> Verdict {
    // K₁ = 1, K₂ = 1 + 1 + 1 for each state
    let constant = inverse_moment_constant(&reference().initial, &reference().generator, &reference().levels).unwrap();
    let worst = report.checkpoints.iter().map(|c| c.estimate.upper()).fold(0.0, f64::max);
    verdict(
        constant == 6.0 && report.checkpoints.iter().all(|c| c.estimate.upper() <= 6.0),
        format!(
            "max estimate + 3σ {worst:.3} vs {constant} over {} checkpoints, {} trials",
            report.checkpoints.len(),
            report.n_trials
        ),
    )
}

fn criterion_7(report: &MomentReport) -> Verdict {
    let worst = report
        .moments
        .iter()
        .map(|m| m.estimate.upper() / m.bound)
        .fold(0.0, f64::max);
    verdict(
        report.moments.len() == 8 && report.moments.iter().all(|m| !m.violation),
        format!("{} moment checks, largest (estimate + 3σ) / bound = {worst:.3}", report.moments.len()),
    )
}

fn criterion_8() -> Verdict {
    // unit perturbation; the sweep scales it by each size
    let mut approx = reference();
    approx.initial = SimplexPoint::new(vec![0.9, 0.1]).unwrap();
    approx.generator = generator(&[&[-2.0, 2.0], &[0.5, -0.5]]);
    approx.levels = ObservationMap::new(vec![0.5, 1.5]).unwrap();
    let mut spec = ExperimentSpec::new(
        ModelPair::new(reference(), approx).unwrap(),
        TimeGrid::new(20.0, DT).unwrap(),
        PATHS,
        SEED,
    );
    spec.sweep = DEFAULT_SWEEP.to_vec();
    let report = run_convergence_sweep(&spec).unwrap();
    let bound_failures = report.rows.iter().filter(|r| r.violation).count();
    let monotone_failures = report.monotone.iter().filter(|m| !m.passed).count();
    let slack = report
        .rows
        .iter()
        .filter(|r| r.sup.squared.upper() > 0.0)
        .map(|r| r.bound / r.sup.squared.upper())
        .fold(f64::INFINITY, f64::min);
    verdict(
        bound_failures == 0 && monotone_failures == 0 && report.floor_ok,
        format!(
            "{} rows, {bound_failures} bound violations, {monotone_failures}/{} monotonicity failures, \
             floor {:.1e} (ok: {}), tightest slack {slack:.1}x",
            report.rows.len(),
            report.monotone.len(),
            report.floor.squared.mean,
            report.floor_ok
        ),
    )
}

fn criterion_9() -> Verdict {
    let spec = ExperimentSpec::new(perturbed_reference(), TimeGrid::new(2.0, DT).unwrap(), 100, SEED);
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut identical = true;
    let mut compared = 0;
    for kind in ExperimentKind::ALL {
        let a = serde_json::to_vec(&kind.run(&spec).unwrap()).unwrap();
        let b = serde_json::to_vec(&kind.run(&spec).unwrap()).unwrap();
        let c = serde_json::to_vec(&serial.install(|| kind.run(&spec)).unwrap()).unwrap();
        identical &= a == b && a == c;
        compared += 1;
    }
    let robustness = |s: &ExperimentSpec| serde_json::to_vec(&run_robustness_experiment(s).unwrap()).unwrap();
    let mut other = spec.clone();
    other.master_seed += 1;
    let seed_matters = robustness(&spec) != robustness(&other);
    verdict(
        identical && seed_matters,
        format!("{compared} experiments bit-identical across repeats and thread counts: {identical}; seed changes report: {seed_matters}"),
    )
}

fn main() -> ExitCode {
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut record = |n: usize, name: &'static str, v: Verdict| {
        println!("criterion {n} [{}] {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, name, v));
    };
    record(1, "cross-route filter agreement", criterion_1());
    record(2, "flow algebra", criterion_2());
    record(3, "smoothing spread", criterion_3());
    let audits = audits();
    record(4, "derivative audit", criterion_4(&audits));
    record(5, "derivative and Lipschitz bounds", criterion_5(&audits));
    let moments = moments();
    record(6, "inverse-moment bound", criterion_6(&moments));
    record(7, "power moment bound", criterion_7(&moments));
    record(8, "robustness bound sweep", criterion_8());
    record(9, "determinism", criterion_9());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
