use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use proptest::prelude::*;
use wonham_cli::{list_experiments, ApproxSection, ExperimentSection, GridSection, ModelSection, RunConfig, RunReport};

const BASE: &str = r#"
[model]
d = 2
generator = [[-1.0, 1.0], [1.0, -1.0]]
levels = [0.0, 1.0]
initial = [0.5, 0.5]

[approx]
generator = [[-1.1, 1.1], [0.9, -0.9]]
initial = [0.6, 0.4]

[grid]
t_end = 2.0
dt = 1e-3

[experiment]
n_trials = 100
seed = 5
"#;

fn wonham(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wonham")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn list_prints_the_six_experiments() {
    let out = wonham(&["list"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let names: Vec<&str> = text.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(
        names,
        ["robustness", "forgetting", "inverse-moment", "convergence-sweep", "derivative-audit", "integrator-refinement"]
    );
    assert_eq!(text, String::from_utf8(wonham(&["list"]).stdout).unwrap());
    assert_eq!(list_experiments().len(), 6);
}

#[test]
fn forgetting_run_writes_both_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", BASE);
    let out_dir = dir.path().join("out");
    let out = wonham(&["run", &config, "forgetting", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let report: RunReport = serde_json::from_str(&fs::read_to_string(out_dir.join("forgetting-5.json")).unwrap()).unwrap();
    assert_eq!(report.experiment, "forgetting");
    assert_eq!(report.seed, 5);
    assert_eq!(report.config, RunConfig::parse(BASE).unwrap());

    let csv = fs::read_to_string(out_dir.join("forgetting-5.csv")).unwrap();
    assert!(csv.starts_with("# experiment = forgetting\n# seed = 5\n"));
    let header: String = csv.lines().filter_map(|l| l.strip_prefix("# ")).skip(4).collect::<Vec<_>>().join("\n");
    assert_eq!(RunConfig::parse(&header).unwrap(), report.config);
    assert!(csv.lines().any(|l| l.starts_with("t,mean_gap")));
}

#[test]
fn flags_override_the_config_and_name_the_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", BASE);
    let out_dir = dir.path().join("out");
    let out = wonham(&[
        "run", &config, "inverse-moment", "--out", out_dir.to_str().unwrap(), "--seed", "77", "--trials", "120",
        "--dt", "0.002",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: RunReport =
        serde_json::from_str(&fs::read_to_string(out_dir.join("inverse-moment-77.json")).unwrap()).unwrap();
    assert_eq!((report.config.experiment.seed, report.config.experiment.n_trials), (77, 120));
    assert_eq!(report.config.grid.dt, 0.002);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", BASE);
    let mut texts = Vec::new();
    for sub in ["a", "b"] {
        let out_dir = dir.path().join(sub);
        let out = wonham(&["run", &config, "robustness", "--out", out_dir.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
        texts.push((
            fs::read(out_dir.join("robustness-5.json")).unwrap(),
            fs::read(out_dir.join("robustness-5.csv")).unwrap(),
        ));
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn non_mixing_approximation_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = BASE.replace("generator = [[-1.1, 1.1], [0.9, -0.9]]", "generator = [[-1.0, 1.0], [0.0, 0.0]]");
    let config = write_config(dir.path(), "bad.toml", &text);
    let out = wonham(&["run", &config, "robustness", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("not mixing") || stderr.contains("absorbing"), "{stderr}");
}

#[test]
fn unknown_experiment_and_bad_files_exit_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "run.toml", BASE);
    let out = wonham(&["run", &config, "nonsense"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("unknown experiment 'nonsense'"));

    let broken = write_config(dir.path(), "broken.toml", "[model\nd = 2");
    assert_eq!(wonham(&["run", &broken, "forgetting"]).status.code(), Some(1));
    assert_eq!(wonham(&["run", "/nonexistent/config.toml", "forgetting"]).status.code(), Some(1));
}

#[test]
fn coarse_strict_audit_exits_with_violation() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"
[model]
d = 2
generator = [[-1.0, 1.0], [1.0, -1.0]]
levels = [1.0, 1.0]
initial = [0.5, 0.5]

[grid]
t_end = 4.0
dt = 0.1

[experiment]
n_trials = 100
seed = 1
"#;
    let config = write_config(dir.path(), "coarse.toml", text);
    let out_dir = dir.path().join("out");
    let out_str = out_dir.to_str().unwrap();

    let strict = wonham(&["run", &config, "derivative-audit", "--out", out_str, "--strict-tolerance"]);
    assert_eq!(strict.status.code(), Some(2), "{}", String::from_utf8_lossy(&strict.stderr));
    let report: RunReport =
        serde_json::from_str(&fs::read_to_string(out_dir.join("derivative-audit-1.json")).unwrap()).unwrap();
    assert!(report.strict_tolerance && report.violations > 0);

    // without the flag the coarse step is refused outright
    assert_eq!(wonham(&["run", &config, "derivative-audit", "--out", out_str]).status.code(), Some(1));
    // and at a fine step the same model passes
    let fine = wonham(&["run", &config, "derivative-audit", "--out", out_str, "--dt", "0.001"]);
    assert_eq!(fine.status.code(), Some(0));
}

fn arb_rows(d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(0.1f64..5.0, d * d).prop_map(move |raw| {
        (0..d)
            .map(|i| {
                let mut row: Vec<f64> = raw[i * d..(i + 1) * d].to_vec();
                row[i] = 0.0;
                row[i] = -row.iter().sum::<f64>();
                row
            })
            .collect()
    })
}

fn arb_law(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.1f64..1.0, d).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    })
}

fn arb_config() -> impl Strategy<Value = RunConfig> {
    (2usize..=3).prop_flat_map(|d| {
        (
            (arb_rows(d), prop::collection::vec(-2.0f64..2.0, d), arb_law(d)),
            (prop::option::of(arb_rows(d)), prop::option::of(prop::collection::vec(-2.0f64..2.0, d)), prop::option::of(arb_law(d))),
            (1usize..50, prop_oneof![Just(1e-3), Just(5e-4)]),
            (
                prop::option::of(prop::sample::select(vec!["robustness", "forgetting", "derivative-audit"])),
                100usize..1000,
                any::<u64>(),
                prop::option::of(prop::collection::vec(0.0f64..1.0, 1..4)),
            ),
        )
            .prop_map(move |(model, approx, grid, experiment)| RunConfig {
                model: ModelSection { d, generator: model.0, levels: model.1, initial: model.2 },
                approx: ApproxSection { generator: approx.0, levels: approx.1, initial: approx.2 },
                grid: GridSection { t_end: grid.0 as f64 * 0.5, dt: grid.1 },
                experiment: ExperimentSection {
                    name: experiment.0.map(str::to_string),
                    n_trials: experiment.1,
                    seed: experiment.2,
                    checkpoints: None,
                    sweep: experiment.3,
                    targets: None,
                },
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trips_through_toml(config in arb_config()) {
        let text = config.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        prop_assert_eq!(back, config);
    }
}
