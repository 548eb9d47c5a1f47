//! Scenario configuration: one JSON document per run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use geval_core::{Lattice, LatticeSpec, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyConfig {
    #[default]
    PathTree,
    Recombining,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub horizon: f64,
    pub steps: usize,
    #[serde(default = "one")]
    pub dimension: usize,
    #[serde(default)]
    pub topology: TopologyConfig,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverConfig {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub s0: f64,
    pub nu: f64,
    pub sigma: f64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        MarketConfig { s0: 100.0, nu: 0.0, sigma: 0.2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "kind")]
pub enum DividendConfig {
    Zero,
    ConstantIncrements { value: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_indices: Vec<usize>,
    pub y_values: Vec<f64>,
    pub z_values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MethodConfig {
    OneStep,
    #[default]
    TestProcess,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "kind")]
pub enum GeneratorConfig {
    /// f(y) = scale * |y|
    AbsY { scale: f64 },
    /// f(y) = a * y + b
    Linear { a: f64, b: f64 },
}

impl GeneratorConfig {
    pub fn lipschitz(&self) -> f64 {
        match self {
            GeneratorConfig::AbsY { scale } => scale.abs(),
            GeneratorConfig::Linear { a, .. } => a.abs(),
        }
    }

    pub fn eval(&self, y: f64) -> f64 {
        match self {
            GeneratorConfig::AbsY { scale } => scale * y.abs(),
            GeneratorConfig::Linear { a, b } => a * y + b,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TimesConfig {
    pub s: Option<usize>,
    pub t: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub lattice: LatticeConfig,
    pub driver: Option<DriverConfig>,
    pub claim: Option<String>,
    #[serde(default)]
    pub market: MarketConfig,
    pub dividend: Option<DividendConfig>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub grid: Option<GridConfig>,
    pub schedule: Option<Vec<u32>>,
    #[serde(default)]
    pub method: MethodConfig,
    pub generator: Option<GeneratorConfig>,
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub times: TimesConfig,
    pub z_bar: Option<Vec<f64>>,
    pub solver: Option<SolverConfig>,
}

impl ScenarioConfig {
    pub fn build_lattice(&self) -> Result<Lattice, String> {
        let spec = LatticeSpec::new(
            self.lattice.horizon,
            self.lattice.steps,
            self.lattice.dimension,
        )
        .map_err(|e| e.to_string())?;
        match self.lattice.topology {
            TopologyConfig::PathTree => Lattice::path_tree(spec),
            TopologyConfig::Recombining => Lattice::recombining(spec),
        }
        .map_err(|e| e.to_string())
    }

    pub fn solver(&self) -> SolverConfig {
        self.solver.unwrap_or_default()
    }
}
