use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use placerec::{EvalSettings, TrainConfig, WorldConfig};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Everything one experiment needs. Missing keys take defaults, unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Distance threshold (m) of the standard task matrix.
    pub d: f64,
    pub ks: Vec<usize>,
    pub hints: usize,
    pub hint_seed: u64,
    /// Thresholds of the distance sweep.
    pub thresholds: Vec<f64>,
    /// Hint counts of the robustness sweep.
    pub hint_counts: Vec<usize>,
    /// Loss weights of the `ablate` sweep.
    pub alphas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = EvalSettings::default();
        EvalConfig {
            d: s.d,
            ks: s.ks,
            hints: s.hints,
            hint_seed: s.hint_seed,
            thresholds: vec![20.0, 10.0, 5.0, 2.0],
            hint_counts: vec![6, 5, 4],
            alphas: vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: PathBuf,
    /// Checkpoints, logs and reports.
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: PathBuf::from("data/scenes.jsonl"),
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schemaVersion {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    /// The file at `path`, or defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                RunConfig::from_json(&text).map_err(|e| match e {
                    CliError::Config(msg) => CliError::Config(format!("{}: {msg}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.world.validate()?;
        self.train.validate()?;
        let e = &self.eval;
        if e.ks.is_empty() || e.ks.contains(&0) {
            return Err(CliError::Config("eval.ks must be non-empty and positive".into()));
        }
        let positive = |d: f64| d > 0.0;
        if !positive(e.d) || !e.thresholds.iter().all(|&d| positive(d)) {
            return Err(CliError::Config("distance thresholds must be positive".into()));
        }
        if e.hints == 0 || e.hint_counts.contains(&0) {
            return Err(CliError::Config("hint counts must be positive".into()));
        }
        if e.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(CliError::Config("alphas must lie in [0,1]".into()));
        }
        if self.world.stub_dim != self.train.model.stub_dim {
            return Err(CliError::Config(format!(
                "world.stubDim {} differs from train.model.stubDim {}",
                self.world.stub_dim, self.train.model.stub_dim
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"schemaVersion": 1, "train": {"alpha": 0.5}}"#).unwrap();
        assert_eq!(cfg.train.alpha, 0.5);
        assert_eq!(cfg.train.tau, 0.1);
        assert_eq!(cfg.world, WorldConfig::default());
    }

    #[test]
    fn unknown_keys_name_the_key() {
        let err = RunConfig::from_json(r#"{"train": {"alpah": 0.5}}"#).unwrap_err();
        assert!(err.to_string().contains("alpah"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn schema_version_is_checked() {
        let err = RunConfig::from_json(r#"{"schemaVersion": 7}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn stub_dims_must_agree() {
        let mut cfg = RunConfig::default();
        cfg.world.stub_dim = 16;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }
}
