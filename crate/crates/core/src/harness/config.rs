//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bismut::TestFunction;
use crate::coupled::{Components, CoupledSpec};
use crate::derivative_sim::{DirectionSpec, WeightFunction, WeightShape};
use crate::error::{Error, Result};
use crate::models::{make_double_well, make_kuramoto, make_mf_ou, ModelSpec};
use crate::noise::TimeGrid;
use crate::particle_sim::{InitialLaw, REFERENCE_FLOOR_FACTOR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `dX = (a X + b E[X]) dt + σ dW` in `d` dimensions.
    MfOu {
        a: f64,
        b: f64,
        sigma: f64,
        #[serde(default = "one")]
        d: usize,
    },
    /// `dθ = κ E[sin(θ' - θ)] dt + σ dW`.
    Kuramoto { coupling: f64, sigma: f64 },
    /// `dX = (X - θX³ - κ(X - E[X])) dt + σ dW`.
    DoubleWell { theta: f64, coupling: f64, sigma: f64 },
}

fn one() -> usize {
    1
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        match *self {
            ModelConfig::MfOu { a, b, sigma, d } => make_mf_ou(a, b, sigma, d),
            ModelConfig::Kuramoto { coupling, sigma } => make_kuramoto(coupling, sigma),
            ModelConfig::DoubleWell { theta, coupling, sigma } => make_double_well(theta, coupling, sigma),
        }
    }

    /// Whether the interaction vanishes, so particles and limit copies
    /// coincide under synchronous coupling.
    pub fn is_decoupled(&self) -> bool {
        match *self {
            ModelConfig::MfOu { b, .. } => b == 0.0,
            ModelConfig::Kuramoto { coupling, .. } | ModelConfig::DoubleWell { coupling, .. } => coupling == 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
    /// Dt-halvings of the grid above, with bridge-refined noise.
    #[serde(default)]
    pub refinements: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderConfig {
    /// Particle counts, strictly increasing.
    pub n: Vec<usize>,
    pub replications: usize,
    /// Size of the reference ensemble standing in for the limit law.
    pub reference_size: usize,
    /// Size of the ensemble supplying the expectation term of limit flows.
    pub aux_size: usize,
    pub seed: u64,
    /// Moment order of the tracked gaps.
    #[serde(default = "two")]
    pub k: f64,
    /// Declared moment order of the initial law; absent means bounded.
    #[serde(default)]
    pub q: Option<f64>,
    #[serde(default)]
    pub initial: InitialLaw,
    /// Orders of the fluctuation diagnostic.
    #[serde(default = "zeta_orders")]
    pub zeta_orders: Vec<f64>,
    /// Replications simulated together.
    #[serde(default = "batch")]
    pub batch: usize,
}

fn two() -> f64 {
    2.0
}

fn zeta_orders() -> Vec<f64> {
    vec![2.0, 4.0]
}

fn batch() -> usize {
    512
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionConfig {
    #[serde(default)]
    pub phi: DirectionSpec,
    #[serde(default)]
    pub weight: WeightShape,
    /// Start `r` of the Malliavin direction; the weight vanishes on `[0, r]`.
    #[serde(default)]
    pub start: f64,
    /// Particle whose Malliavin components are tracked.
    #[serde(default)]
    pub tag: usize,
}

impl Default for DirectionConfig {
    fn default() -> Self {
        Self {
            phi: DirectionSpec::default(),
            weight: WeightShape::default(),
            start: 0.0,
            tag: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BismutConfig {
    #[serde(default)]
    pub test_function: TestFunction,
    /// Step of the finite-difference oracle.
    #[serde(default = "epsilon")]
    pub epsilon: f64,
    /// Particle count of the estimator comparison.
    #[serde(default = "bismut_n")]
    pub n: usize,
    #[serde(default = "bismut_replications")]
    pub replications: usize,
}

fn epsilon() -> f64 {
    1e-3
}

fn bismut_n() -> usize {
    512
}

fn bismut_replications() -> usize {
    1000
}

impl Default for BismutConfig {
    fn default() -> Self {
        Self {
            test_function: TestFunction::default(),
            epsilon: epsilon(),
            n: bismut_n(),
            replications: bismut_replications(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "out_dir")]
    pub dir: PathBuf,
}

fn out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: out_dir() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub ladder: LadderConfig,
    #[serde(default)]
    pub direction: DirectionConfig,
    #[serde(default)]
    pub bismut: BismutConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let l = &self.ladder;
        if l.n.is_empty() {
            return Err(Error::Config("ladder.n is empty".into()));
        }
        if l.n.windows(2).any(|w| w[0] >= w[1]) || l.n[0] == 0 {
            return Err(Error::Config("ladder.n must be positive and strictly increasing".into()));
        }
        let max_n = *l.n.last().expect("non-empty ladder");
        if l.reference_size < REFERENCE_FLOOR_FACTOR * max_n {
            return Err(Error::Config(format!(
                "ladder.reference_size = {} is below {REFERENCE_FLOOR_FACTOR} x max N = {}",
                l.reference_size,
                REFERENCE_FLOOR_FACTOR * max_n
            )));
        }
        if l.aux_size == 0 {
            return Err(Error::Config("ladder.aux_size must be positive".into()));
        }
        if !(l.k >= 2.0) {
            return Err(Error::Config(format!("ladder.k must be >= 2, got {}", l.k)));
        }
        if let Some(q) = l.q {
            if !(q > l.k) {
                return Err(Error::Config(format!("ladder.q = {q} must exceed k = {}", l.k)));
            }
        }
        if l.replications < 2 {
            return Err(Error::Config("ladder.replications must be >= 2".into()));
        }
        if l.zeta_orders.iter().any(|k| !(*k > 0.0)) {
            return Err(Error::Config("ladder.zeta_orders must be positive".into()));
        }
        if self.direction.tag >= l.n[0] {
            return Err(Error::Config("direction.tag must index a particle of the smallest system".into()));
        }
        if !(self.bismut.epsilon > 0.0) {
            return Err(Error::Config("bismut.epsilon must be positive".into()));
        }
        if self.bismut.replications < 2 {
            return Err(Error::Config("bismut.replications must be >= 2".into()));
        }
        l.initial.validate()?;
        self.grid()?;
        self.weight()?;
        self.model.build()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.n_steps)
    }

    pub fn weight(&self) -> Result<WeightFunction> {
        WeightFunction::new(self.direction.start, self.grid.horizon, self.direction.weight)
    }

    /// Engine settings with every component enabled.
    pub fn coupled_spec(&self) -> Result<CoupledSpec> {
        let model = self.model.build()?;
        let wasserstein = model.dim() == 1 || *self.ladder.n.last().unwrap_or(&0) <= crate::measures::MAX_ASSIGNMENT_SIZE;
        Ok(CoupledSpec {
            model,
            base_grid: self.grid()?,
            refinements: self.grid.refinements,
            init: self.ladder.initial.clone(),
            direction: self.direction.phi.clone(),
            weight: self.weight()?,
            test_function: self.bismut.test_function,
            k: self.ladder.k,
            reference_size: self.ladder.reference_size,
            aux_size: self.ladder.aux_size,
            seed: self.ladder.seed,
            tag: self.direction.tag,
            initial_shift: 0.0,
            components: Components {
                wasserstein,
                ..Components::all()
            },
            zeta_orders: self.ladder.zeta_orders.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMOKE: &str = r#"
[model]
id = "mf_ou"
a = -1.0
b = 0.5
sigma = 0.3

[grid]
horizon = 1.0
n_steps = 20

[ladder]
n = [64, 128]
replications = 2
reference_size = 1024
aux_size = 256
seed = 7

[direction]
phi = { kind = "constant", value = 1.0 }

[bismut]
test_function = { kind = "tanh" }

[output]
dir = "out"
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(SMOKE).unwrap();
        assert_eq!(cfg.ladder.k, 2.0);
        assert_eq!(cfg.direction.phi, DirectionSpec::Constant { value: 1.0 });
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = SMOKE.replace("sigma = 0.3", "sigma = 0.3\nsigmaa = 1.0");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = SMOKE.replace("seed = 7", "seed = 7\nthreads = 2");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = SMOKE.replace("[output]", "[plots]\nx = 1\n[output]");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn invariants_are_enforced() {
        let bad = SMOKE.replace("n = [64, 128]", "n = [128, 64]");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = SMOKE.replace("reference_size = 1024", "reference_size = 1000");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = SMOKE.replace("seed = 7", "seed = 7\nk = 1.5");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }
}
