//! JSON configuration files for the subcommands.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use umtn::dataset::Split;
use umtn::io::ModelSpec;
use umtn::kernels::RadialKernel;
use umtn::model::ModelConfig;
use umtn::training::TrainConfig;
use umtn::{Error, Result};

/// Parses `path` as `T`, or returns `T::default()` when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn default_candidates() -> Vec<RadialKernel> {
    [0.25, 0.5, 1.0, 2.0, 4.0]
        .iter()
        .map(|&e| RadialKernel::multiquadric(e).expect("positive shape parameter"))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub candidates: Vec<RadialKernel>,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            candidates: default_candidates(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// Overrides any kernel recorded with the dataset.
    #[serde(default)]
    pub kernel: Option<RadialKernel>,
}

fn default_model() -> ModelSpec {
    ModelSpec::Umtn(ModelConfig::with_levels(1))
}

impl Default for TrainJob {
    fn default() -> Self {
        Self {
            model: default_model(),
            train: TrainConfig::default(),
            kernel: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tau: usize,
    pub horizon: usize,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 5,
            horizon: 15,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// `Π_k sin(ω_k (x_k − lower_k))`.
    SineProduct { frequencies: Vec<f64> },
    /// `exp(−|x − center|² / width²)`.
    Gaussian { center: Vec<f64>, width: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub kernel: RadialKernel,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points_per_axis: usize,
    pub diffusion: f64,
    /// Constant velocity; omitted for pure diffusion.
    pub convection: Option<Vec<f64>>,
    pub dt: f64,
    pub t_end: f64,
    pub initial: InitialCondition,
    /// Hold nodes on the box boundary at zero.
    pub dirichlet: bool,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            kernel: RadialKernel::multiquadric(1.0).expect("positive shape parameter"),
            lower: vec![0.0],
            upper: vec![std::f64::consts::PI],
            points_per_axis: 25,
            diffusion: 1.0,
            convection: None,
            dt: 1e-3,
            t_end: 0.1,
            initial: InitialCondition::SineProduct { frequencies: vec![1.0] },
            dirichlet: true,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportConfig {
    pub title: Option<String>,
}
