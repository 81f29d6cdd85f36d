use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use wonham::lab::{ExperimentKind, ExperimentSpec, SweepTarget};
use wonham::signal::TimeGrid;
use wonham::tolerance::DEFAULT_DT;
use wonham::{GeneratorMatrix, Model, ModelPair, ObservationMap, SimplexPoint};

use crate::CliError;

/// True model: dimension, generator rows, observation levels, initial law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub generator: Vec<Vec<f64>>,
    pub levels: Vec<f64>,
    pub initial: Vec<f64>,
}

/// Approximate model. Missing fields are copied from the true model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
}

impl ApproxSection {
    fn is_empty(&self) -> bool {
        self.generator.is_none() && self.levels.is_none() && self.initial.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Default experiment when none is named on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub n_trials: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<SweepTarget>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default, skip_serializing_if = "ApproxSection::is_empty")]
    pub approx: ApproxSection,
    pub grid: GridSection,
    pub experiment: ExperimentSection,
}

/// Command-line values that replace scalar config fields.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub dt: Option<f64>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::ConfigParse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::ConfigParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(name) = &self.experiment.name {
            name.parse::<ExperimentKind>()?;
        }
        self.model_pair()?;
        self.grid()?;
        Ok(())
    }

    pub fn with_overrides(mut self, overrides: Overrides) -> Self {
        if let Some(seed) = overrides.seed {
            self.experiment.seed = seed;
        }
        if let Some(trials) = overrides.trials {
            self.experiment.n_trials = trials;
        }
        if let Some(dt) = overrides.dt {
            self.grid.dt = dt;
        }
        self
    }

    pub fn model_pair(&self) -> Result<ModelPair, CliError> {
        let m = &self.model;
        if m.levels.len() != m.d {
            return Err(wonham::Error::DimensionMismatch { expected: m.d, got: m.levels.len() }.into());
        }
        let truth = Model::new(
            SimplexPoint::new(m.initial.clone())?,
            GeneratorMatrix::from_rows(&m.generator)?,
            ObservationMap::new(m.levels.clone())?,
        )?;
        let a = &self.approx;
        let approx = Model::new(
            SimplexPoint::new(a.initial.clone().unwrap_or_else(|| m.initial.clone()))?,
            GeneratorMatrix::from_rows(a.generator.as_ref().unwrap_or(&m.generator))?,
            ObservationMap::new(a.levels.clone().unwrap_or_else(|| m.levels.clone()))?,
        )?;
        Ok(ModelPair::new(truth, approx)?)
    }

    pub fn grid(&self) -> Result<TimeGrid, CliError> {
        Ok(TimeGrid::new(self.grid.t_end, self.grid.dt)?)
    }

    pub fn spec(&self, strict: bool) -> Result<ExperimentSpec, CliError> {
        let e = &self.experiment;
        let mut spec = ExperimentSpec::new(self.model_pair()?, self.grid()?, e.n_trials, e.seed);
        if let Some(checkpoints) = &e.checkpoints {
            spec.checkpoints = checkpoints.clone();
        }
        if let Some(sweep) = &e.sweep {
            spec.sweep = sweep.clone();
        }
        if let Some(targets) = &e.targets {
            spec.sweep_targets = targets.clone();
        }
        spec.strict = strict;
        Ok(spec)
    }
}
