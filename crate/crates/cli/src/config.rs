//! Experiment configuration files and their content hash.

use std::fs;
use std::path::Path;

use lorasp::harness::{make_tasks_with, AblationAxis, SuiteConfig, TaskSuite, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Everything a run depends on. Missing keys take the defaults below and
/// the resolved value is written back into every run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Directory name grouping runs of this experiment.
    pub name: String,
    pub suite_seed: u64,
    pub planted_ranks: Vec<usize>,
    pub suite: SuiteConfig,
    pub train: TrainConfig,
    /// LoRA rank grid for `sweep`.
    pub ranks: Vec<usize>,
    /// Intrinsic-dimension tolerance as a fraction of the unadapted loss.
    pub eps_fraction: f64,
    /// Axis for `ablate`.
    pub axis: AblationAxis,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "default".into(),
            suite_seed: 0,
            planted_ranks: vec![2, 8, 16, 24],
            suite: SuiteConfig::default(),
            train: TrainConfig::default(),
            ranks: vec![2, 4, 8, 16, 24, 32, 48],
            eps_fraction: 0.05,
            axis: AblationAxis::SpectralLoss,
        }
    }
}

impl ExperimentConfig {
    /// Reads and validates a config, or returns the defaults for `None`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg: Self = match path {
            None => Self::default(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return bad(format!("name: {:?} is not a valid directory name", self.name));
        }
        if self.planted_ranks.is_empty() {
            return bad("planted_ranks: must list at least one task".into());
        }
        if self.ranks.is_empty() || self.ranks.contains(&0) {
            return bad("ranks: must be a nonempty list of positive ranks".into());
        }
        if !(self.eps_fraction >= 0.0) {
            return bad("eps_fraction: must be nonnegative".into());
        }
        self.train
            .validate()
            .map_err(|e| CliError::Usage(format!("train: {e}")))
    }

    pub fn suite(&self) -> Result<TaskSuite, CliError> {
        make_tasks_with(self.suite_seed, &self.planted_ranks, &self.suite)
            .map_err(|e| CliError::Usage(format!("suite: {e}")))
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON, prefixed
    /// with the subcommand so that different experiments never collide.
    pub fn hash(&self, command: &str) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0]);
        h.update(&json);
        hex::encode(&h.finalize()[..8])
    }
}
