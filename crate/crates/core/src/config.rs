//! Run configuration loaded from TOML. Every field has a default, so an
//! empty file describes the benchmark plant, weights and hyperparameters.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ddpg::Hyperparams;
use crate::error::{Error, Result};
use crate::harness::{scenario_initial_condition, scenario_nominal, scenario_perturbed, Scenario};
use crate::lqi::CostWeights;
use crate::ltisys::{tf_to_ss, StateSpace, TransferFunction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantConfig {
    /// Coefficients in descending powers of `s`.
    pub numerator: Vec<f64>,
    pub denominator: Vec<f64>,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            numerator: vec![0.5, -1.0],
            denominator: vec![1.0, 3.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    /// Row-major state weight over `[x_p; e_I]`.
    pub q: Vec<Vec<f64>>,
    pub r: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        Self {
            q: vec![vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 0.0], vec![0.0, 0.0, 10.0]],
            r: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Any of `nominal`, `perturbed`, `initial`.
    pub run: Vec<String>,
    pub initial_conditions: Vec<[f64; 2]>,
    pub nominal_horizon: f64,
    pub perturbed_horizon: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            run: vec!["nominal".into(), "perturbed".into(), "initial".into()],
            initial_conditions: vec![[1.0, -2.0], [-1.0, 2.0]],
            nominal_horizon: 20.0,
            perturbed_horizon: 35.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantConfig,
    pub weights: WeightsConfig,
    pub hyperparams: Hyperparams,
    pub scenarios: ScenarioConfig,
    pub settling_band: f64,
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            plant: PlantConfig::default(),
            weights: WeightsConfig::default(),
            hyperparams: Hyperparams::default(),
            scenarios: ScenarioConfig::default(),
            settling_band: 0.02,
            output_dir: "out".into(),
        }
    }
}

impl RunConfig {
    /// Parses and validates; errors name the offending key.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(s).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner().message().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        self.plant_model()?;
        self.cost_weights()?;
        if !(self.settling_band > 0.0 && self.settling_band <= 0.2) {
            return Err(Error::Config(format!(
                "settling_band must lie in (0, 0.2], got {}",
                self.settling_band
            )));
        }
        for name in &self.scenarios.run {
            if !["nominal", "perturbed", "initial"].contains(&name.as_str()) {
                return Err(Error::Config(format!("scenarios.run: unknown scenario `{name}`")));
            }
        }
        for s in self.scenarios(0) {
            s.validate()
                .map_err(|e| Error::Config(format!("scenario {}: {e}", s.name)))?;
        }
        Ok(())
    }

    pub fn plant_model(&self) -> Result<StateSpace> {
        let tf = TransferFunction::new(self.plant.numerator.clone(), self.plant.denominator.clone())
            .map_err(|e| Error::Config(format!("plant: {e}")))?;
        tf_to_ss(&tf)
    }

    pub fn cost_weights(&self) -> Result<CostWeights> {
        let n = self.weights.q.len();
        if self.weights.q.iter().any(|row| row.len() != n) {
            return Err(Error::Config("weights.q must be a square matrix".into()));
        }
        let flat: Vec<f64> = self.weights.q.iter().flatten().copied().collect();
        CostWeights::new(DMatrix::from_row_slice(n, n, &flat), self.weights.r)
            .map_err(|e| Error::Config(format!("weights: {e}")))
    }

    /// The selected scenarios, with noise seeded from `seed`.
    pub fn scenarios(&self, seed: u64) -> Vec<Scenario> {
        let dt = self.hyperparams.dt;
        let mut out = Vec::new();
        for name in &self.scenarios.run {
            match name.as_str() {
                "nominal" => out.push(
                    Scenario {
                        dt,
                        seed,
                        ..scenario_nominal()
                    }
                    .with_horizon(self.scenarios.nominal_horizon),
                ),
                "perturbed" => out.push(
                    Scenario {
                        dt,
                        seed,
                        ..scenario_perturbed()
                    }
                    .with_horizon(self.scenarios.perturbed_horizon),
                ),
                "initial" => {
                    for &x0 in &self.scenarios.initial_conditions {
                        out.push(
                            Scenario {
                                dt,
                                seed,
                                ..scenario_initial_condition(x0)
                            }
                            .with_horizon(self.scenarios.nominal_horizon),
                        );
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Hash of everything that shapes a training run except the episode
    /// budget, so a run can be resumed with a larger budget.
    pub fn training_hash(&self) -> String {
        let mut hp = self.hyperparams.clone();
        hp.max_episodes = 0;
        let material = serde_json::json!({
            "plant": self.plant,
            "weights": self.weights,
            "hyperparams": hp,
        });
        let bytes = serde_json::to_vec(&material).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
