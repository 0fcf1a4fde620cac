//! Experiment configuration (JSON).

use std::path::{Path, PathBuf};

use gradnoise_core::bounds::{GTildeChoice, Reference, TerminalOptions};
use gradnoise_core::dynamics::TrainConfig;
use gradnoise_core::linalg::DEFAULT_EPS_REL;
use gradnoise_core::problems::DataSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::HarnessError;

/// Bound estimators selectable from a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    TrajIsotropic,
    TrajLangevin,
    TrajAnisotropic,
    TrajDataDependent,
    TerminalGeneral,
    TerminalAnisotropic,
    TerminalIsotropic,
    TerminalIsotropicInit,
    TerminalGradientAccum,
    TerminalLoo,
    FimTakeuchi,
}

impl BoundKind {
    pub const TRAJECTORY: [BoundKind; 4] =
        [BoundKind::TrajIsotropic, BoundKind::TrajLangevin, BoundKind::TrajAnisotropic, BoundKind::TrajDataDependent];
    pub const TERMINAL: [BoundKind; 6] = [
        BoundKind::TerminalGeneral,
        BoundKind::TerminalAnisotropic,
        BoundKind::TerminalIsotropic,
        BoundKind::TerminalIsotropicInit,
        BoundKind::TerminalGradientAccum,
        BoundKind::FimTakeuchi,
    ];

    pub fn is_trajectory(self) -> bool {
        Self::TRAJECTORY.contains(&self)
    }

    pub fn name(self) -> String {
        serde_json::to_value(self).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSize {
    pub datasets: usize,
    pub runs: usize,
}

impl Default for EnsembleSize {
    fn default() -> Self {
        EnsembleSize { datasets: 4, runs: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSettings {
    /// Paired SGD/SDE seeds.
    pub seeds: usize,
}

impl Default for CompareSettings {
    fn default() -> Self {
        CompareSettings { seeds: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LooSettings {
    /// Leave-one-out subsets per dataset for the stability bound.
    pub subsets: usize,
}

impl Default for LooSettings {
    fn default() -> Self {
        LooSettings { subsets: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminalSettings {
    pub eps_rel: f64,
    pub include_tail: bool,
}

impl Default for TerminalSettings {
    fn default() -> Self {
        TerminalSettings { eps_rel: DEFAULT_EPS_REL, include_tail: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: DataSpec,
    pub train: TrainConfig,
    /// Training-set size.
    pub n: usize,
    /// Global seed; dataset, run and oracle seeds derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub bounds: Vec<BoundKind>,
    #[serde(default)]
    pub ensemble: EnsembleSize,
    #[serde(default)]
    pub n_sweep: Vec<usize>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub g_tilde: GTildeChoice,
    #[serde(default)]
    pub reference: Reference,
    #[serde(default)]
    pub terminal: TerminalSettings,
    #[serde(default)]
    pub compare: CompareSettings,
    #[serde(default)]
    pub loo: LooSettings,
    /// Allow anisotropic bounds to fall back to diagonal GNC estimates above
    /// the matrix cap.
    #[serde(default)]
    pub diagonal_fallback: bool,
    /// Subtract the train/oracle loss gap of an S-independent reference
    /// minimizer when estimating the generalization error.
    #[serde(default = "default_true")]
    pub control_variate: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn terminal_options(&self) -> TerminalOptions {
        TerminalOptions {
            r: self.problem.r(),
            m: self.problem.m(),
            eps_rel: self.terminal.eps_rel,
            include_tail: self.terminal.include_tail,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.n == 0 {
            return Err(HarnessError::Config("n must be at least 1".into()));
        }
        self.train.validate(self.n)?;
        if self.ensemble.datasets == 0 || self.ensemble.runs == 0 {
            return Err(HarnessError::Config("ensemble needs at least one dataset and one run".into()));
        }
        for &n in &self.n_sweep {
            self.train.validate(n)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("config is not valid JSON: {e}")))?;
        parse_value(value)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Deserializes, collecting every unknown key (with its path) before
/// reporting.
fn parse_value(mut value: Value) -> Result<ExperimentConfig, HarnessError> {
    let mut unknown = Vec::new();
    loop {
        match serde_path_to_error::deserialize::<_, ExperimentConfig>(value.clone()) {
            Ok(cfg) if unknown.is_empty() => {
                cfg.validate()?;
                return Ok(cfg);
            }
            Ok(_) => break,
            Err(e) => {
                let msg = e.inner().to_string();
                let Some(field) = unknown_field_name(&msg) else {
                    if unknown.is_empty() {
                        return Err(HarnessError::Config(format!("{}: {msg}", display_path(&e.path().to_string()))));
                    }
                    break;
                };
                // The reported path ends with the unknown key itself.
                let path = e.path().to_string();
                let mut parent_segments: Vec<String> =
                    if path == "." { Vec::new() } else { path.split('.').map(str::to_string).collect() };
                if parent_segments.last() == Some(&field) {
                    parent_segments.pop();
                }
                let full = parent_segments.iter().cloned().chain([field.clone()]).collect::<Vec<_>>().join(".");
                if !remove_key(&mut value, &parent_segments, &field) || unknown.contains(&full) {
                    unknown.push(full);
                    break;
                }
                unknown.push(full);
            }
        }
    }
    Err(HarnessError::Config(format!("unknown config keys: {}", unknown.join(", "))))
}

fn display_path(p: &str) -> &str {
    if p == "." {
        "config"
    } else {
        p
    }
}

fn unknown_field_name(msg: &str) -> Option<String> {
    let rest = msg.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

fn remove_key(value: &mut Value, path: &[String], key: &str) -> bool {
    let mut cur = value;
    for seg in path {
        cur = match cur {
            Value::Object(m) => match m.get_mut(seg) {
                Some(v) => v,
                None => return false,
            },
            Value::Array(a) => match seg.parse::<usize>().ok().and_then(|i| a.get_mut(i)) {
                Some(v) => v,
                None => return false,
            },
            _ => return false,
        };
    }
    match cur {
        Value::Object(m) => m.remove(key).is_some(),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "problem": {"family": {"kind": "quadratic-gaussian", "a": [[1.0]], "z_mean": [0.0], "z_cov": [[1.0]]}},
        "train": {"b": 1, "lr": 0.1, "steps": 10, "mode": "sgd"},
        "n": 5
    }"#;

    #[test]
    fn parses_minimal_config() {
        let c = ExperimentConfig::from_json(BASE).unwrap();
        assert_eq!(c.n, 5);
        assert_eq!(c.ensemble, EnsembleSize::default());
        assert!(c.control_variate);
    }

    #[test]
    fn lists_every_unknown_key() {
        let mut v: Value = serde_json::from_str(BASE).unwrap();
        v["bogus"] = Value::from(1);
        v["train"]["lrate"] = Value::from(0.1);
        v["problem"]["family"]["extra"] = Value::from(true);
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        assert!(err.contains("train.lrate"), "{err}");
        assert!(err.contains("extra"), "{err}");
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut v: Value = serde_json::from_str(BASE).unwrap();
        v["train"]["b"] = Value::from(9);
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(e) if e.exit_code() == 2));
        assert_eq!(ExperimentConfig::from_json("{").unwrap_err().exit_code(), 2);
    }

    #[test]
    fn bound_names_round_trip() {
        assert_eq!(BoundKind::TerminalIsotropicInit.name(), "terminal-isotropic-init");
        let k: BoundKind = serde_json::from_str("\"traj-data-dependent\"").unwrap();
        assert_eq!(k, BoundKind::TrajDataDependent);
    }
}
