//! Configuration loading and report writing for the `wonham` binary.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wonham::lab::{ExperimentKind, Outcome};

pub use config::{ApproxSection, ExperimentSection, GridSection, ModelSection, Overrides, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("cannot parse config: {0}")]
    ConfigParse(String),

    #[error(transparent)]
    Core(#[from] wonham::Error),

    #[error("i/o failure on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

/// Contents of `<experiment>-<seed>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub experiment: String,
    pub seed: u64,
    pub strict_tolerance: bool,
    pub violations: usize,
    pub config: RunConfig,
    pub outcome: Outcome,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub json_path: PathBuf,
    pub csv_path: PathBuf,
}

/// Runs `experiment` (or the config's default) and writes both report files into `out_dir`.
pub fn run(
    config: RunConfig,
    experiment: Option<&str>,
    out_dir: &Path,
    overrides: Overrides,
    strict: bool,
) -> Result<RunOutput, CliError> {
    let config = config.with_overrides(overrides);
    let name = experiment
        .map(str::to_string)
        .or_else(|| config.experiment.name.clone())
        .ok_or_else(|| CliError::ConfigParse("no experiment named on the command line or in the config".into()))?;
    let kind: ExperimentKind = name.parse()?;
    let spec = config.spec(strict)?;
    let outcome = kind.run(&spec)?;
    let report = RunReport {
        experiment: kind.name().to_string(),
        seed: config.experiment.seed,
        strict_tolerance: strict,
        violations: outcome.violations(),
        config,
        outcome,
    };

    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CliError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let stem = format!("{}-{}", report.experiment, report.seed);
    let json_path = out_dir.join(format!("{stem}.json"));
    let csv_path = out_dir.join(format!("{stem}.csv"));

    let mut json = BufWriter::new(File::create(&json_path).map_err(io(&json_path))?);
    serde_json::to_writer_pretty(&mut json, &report).map_err(wonham::Error::from)?;
    writeln!(json).and_then(|_| json.flush()).map_err(io(&json_path))?;

    let mut csv = BufWriter::new(File::create(&csv_path).map_err(io(&csv_path))?);
    write_metadata(&mut csv, &report).map_err(io(&csv_path))?;
    report.outcome.write_csv(&mut csv)?;
    csv.flush().map_err(io(&csv_path))?;

    Ok(RunOutput { report, json_path, csv_path })
}

/// `#`-prefixed header: experiment, seed and the resolved config as TOML.
fn write_metadata<W: Write>(out: &mut W, report: &RunReport) -> std::io::Result<()> {
    writeln!(out, "# experiment = {}", report.experiment)?;
    writeln!(out, "# seed = {}", report.seed)?;
    writeln!(out, "# strict_tolerance = {}", report.strict_tolerance)?;
    writeln!(out, "# violations = {}", report.violations)?;
    let toml = report.config.to_toml().map_err(std::io::Error::other)?;
    for line in toml.lines() {
        writeln!(out, "# {line}")?;
    }
    Ok(())
}

/// Registered experiment names with one-line descriptions.
pub fn list_experiments() -> Vec<(&'static str, &'static str)> {
    ExperimentKind::ALL.iter().map(|k| (k.name(), k.description())).collect()
}
