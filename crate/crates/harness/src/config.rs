//! Experiment configuration loaded from TOML.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use planrl_core::agent::{AgentConfig, AgentVariant};
use planrl_core::env::{Randomization, TaskId, World};
use planrl_core::expert::ExpertParams;
use planrl_core::heads::{SupervisedConfig, SupervisionConfig};
use planrl_core::imitation::BcConfig;
use serde::{Deserialize, Serialize};

use crate::error::{io_at, HarnessError, Result};

/// Environment variable naming the root for relative output and input paths.
pub const OUT_ENV: &str = "PLANRL_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskId,
    /// Variant used by `train`; `agent.variant` is overwritten with it.
    pub variant: AgentVariant,
    /// Variants compared by `sweep`.
    pub variants: Vec<AgentVariant>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Worker threads for `sweep`.
    pub threads: usize,
    /// Replaces the built-in geometry for `task` when present.
    pub world: Option<World>,
    pub demos: DemoConfig,
    pub bc: BcConfig,
    /// Number of labeled states drawn for the mode and waypoint heads.
    pub label_samples: usize,
    pub supervision: SupervisionConfig,
    pub supervised: SupervisedConfig,
    pub agent: AgentConfig,
    pub eval: EvalConfig,
    pub inputs: Inputs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    pub count: usize,
    pub expert: ExpertParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Episodes per protocol for the final evaluation.
    pub episodes: u64,
    pub protocols: Vec<Randomization>,
    /// Greedy episodes run at the end of every metrics interval; 0 disables
    /// the evaluation curve.
    pub interval_episodes: u64,
    pub curve_protocol: Randomization,
}

/// Pre-built artifacts. Anything left out is generated in-process from the
/// run seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub demos: Option<PathBuf>,
    pub bc: Option<PathBuf>,
    pub modenet: Option<PathBuf>,
    pub navnet: Option<PathBuf>,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            count: 10,
            expert: ExpertParams::default(),
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 100,
            protocols: vec![Randomization::ObjectPos, Randomization::ObjectAndGripper],
            interval_episodes: 0,
            curve_protocol: Randomization::ObjectAndGripper,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskId::ReachLift,
            variant: AgentVariant::Planrl,
            variants: AgentVariant::ALL.to_vec(),
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            threads: 1,
            world: None,
            demos: DemoConfig::default(),
            bc: BcConfig::default(),
            label_samples: 1500,
            supervision: SupervisionConfig::default(),
            supervised: SupervisedConfig::default(),
            agent: AgentConfig::default(),
            eval: EvalConfig::default(),
            inputs: Inputs::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| HarnessError::user(format!("config: {e}")))?;
        cfg.validated()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_at(path, e))?;
        Self::from_toml_str(&text).map_err(|e| HarnessError::user(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks cross-field constraints and pins `agent.variant` to `variant`.
    pub fn validated(mut self) -> Result<Self> {
        let bad = |m: &str| Err(HarnessError::user(format!("config: {m}")));
        self.agent.variant = self.variant;
        self.agent.validate()?;
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        if self.variants.is_empty() {
            return bad("variants must not be empty");
        }
        if self.threads == 0 {
            return bad("threads must be positive");
        }
        if self.demos.count == 0 || self.label_samples == 0 {
            return bad("demos.count and label_samples must be positive");
        }
        if self.bc.epochs == 0 || self.bc.batch_size == 0 || self.supervised.batch_size == 0 {
            return bad("epochs and batch sizes must be positive");
        }
        if !(0.0..1.0).contains(&self.supervised.holdout_fraction) {
            return bad("supervised.holdout_fraction must be in [0, 1)");
        }
        if self.eval.episodes == 0 || self.eval.protocols.is_empty() {
            return bad("eval needs at least one protocol and one episode");
        }
        if let Some(w) = &self.world {
            w.validate()?;
            if w.task != self.task {
                return bad("world.task disagrees with task");
            }
        }
        Ok(self)
    }

    pub fn world(&self) -> World {
        self.world.clone().unwrap_or_else(|| World::default_for(self.task))
    }
}

/// Resolves a relative path against `$PLANRL_OUT` when it is set.
pub fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(root) if path.is_relative() && !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("tsak = \"ReachLift\"").is_err());
        assert!(ExperimentConfig::from_toml_str("[agent]\nstepz = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("[agent.td3]\ngama = 0.9").is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str("variant = \"IBRL\"\nseeds = [3, 4]\n[agent]\nsteps = 500").unwrap();
        assert_eq!(cfg.agent.variant, AgentVariant::Ibrl);
        assert_eq!(cfg.agent.steps, 500);
        assert_eq!(cfg.seeds, vec![3, 4]);
        assert_eq!(cfg.demos.count, 10);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_toml_str("seeds = []").is_err());
        assert!(ExperimentConfig::from_toml_str("seeds = [1, 1]").is_err());
        assert!(ExperimentConfig::from_toml_str("[agent]\ninterval = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("[eval]\nprotocols = []").is_err());
    }
}
