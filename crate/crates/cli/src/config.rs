//! Run configuration: TOML file, environment overrides and validation.

use std::path::{Path, PathBuf};

use mimpc_core::critic::GridConfig;
use mimpc_core::env::{EvaluationConfig, NoiseModel, Plant};
use mimpc_core::gradcheck::GradcheckOptions;
use mimpc_core::ip::IpOptions;
use mimpc_core::ocp::{build_example_ocp, ExampleOcp, TerminalWeighting, ThetaVector};
use mimpc_core::policy::ExplorationConfig;
use mimpc_core::sens::CovarianceForm;
use mimpc_core::trainer::{GradientMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Prefix of environment variables that override config keys. Sections are
/// separated by a double underscore: `MIMPC_TRAIN__STEP_SIZE=1e-3`.
pub const ENV_PREFIX: &str = "MIMPC_";

/// The defaults file shipped with the crate.
pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub horizon: usize,
    pub terminal: TerminalWeighting,
    /// Hard bounds on the predicted states `x_1 .. x_N`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_bounds: Option<[f64; 2]>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            terminal: TerminalWeighting::Undiscounted,
            state_bounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: usize,
    pub step_size: f64,
    pub batches: usize,
    pub batch_length: usize,
    pub initial_state: f64,
    pub gamma: f64,
    pub update: GradientMode,
    pub covariance: CovarianceForm,
    pub mask: [bool; ThetaVector::DIM],
    pub advantage_step: f64,
    pub curvature_step: f64,
    pub step_rollouts: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            step_size: t.step_size,
            batches: t.batches,
            batch_length: t.batch_length,
            initial_state: t.initial_state,
            gamma: t.gamma,
            update: t.update,
            covariance: t.covariance,
            mask: t.mask,
            advantage_step: t.advantage_step,
            curvature_step: t.curvature_step,
            step_rollouts: t.step_rollouts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub rollouts: usize,
    pub truncation: f64,
    pub deterministic: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let e = EvaluationConfig::default();
        Self {
            rollouts: e.rollouts,
            truncation: e.truncation,
            deterministic: e.deterministic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub model: ModelConfig,
    pub theta0: ThetaVector,
    /// Parameters of the plant's stage cost.
    pub baseline: ThetaVector,
    pub noise: NoiseModel,
    pub exploration: ExplorationConfig,
    pub train: TrainSection,
    pub critic: GridConfig,
    pub evaluation: EvaluationSection,
    pub ip: IpOptions,
    pub gradcheck: GradcheckOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output: None,
            model: ModelConfig::default(),
            theta0: ThetaVector::baseline(),
            baseline: ThetaVector::baseline(),
            noise: NoiseModel::default(),
            exploration: ExplorationConfig::default(),
            train: TrainSection::default(),
            critic: GridConfig::default(),
            evaluation: EvaluationSection::default(),
            ip: IpOptions::default(),
            gradcheck: GradcheckOptions::default(),
        }
    }
}

/// A validation failure tied to a config key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        Self::from_toml_with_env(text, std::iter::empty())
    }

    /// Parses `text`, applies `KEY=value` overrides carrying [`ENV_PREFIX`],
    /// and validates. Errors carry line numbers of `text`.
    pub fn from_toml_with_env<I>(text: &str, vars: I) -> Result<Self, CliError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Validation(e.to_string()))?;
        for (name, value) in vars {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                apply_override(&mut table, key, &value)?;
            }
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(locate_message(text, &e.to_string())))?;
        if let Err(issue) = cfg.validate() {
            let at = line_of_key(text, &issue.key)
                .map(|l| format!("line {l}: "))
                .unwrap_or_default();
            return Err(CliError::Validation(format!("{at}{}: {}", issue.key, issue.message)));
        }
        Ok(cfg)
    }

    /// Loads `path`, or the built-in defaults when `path` is `None`, with the
    /// process environment applied.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
            None => DEFAULT_CONFIG.to_string(),
        };
        Self::from_toml_with_env(&text, std::env::vars()).map_err(|e| match (e, path) {
            (CliError::Validation(m), Some(p)) => CliError::Validation(format!("{}: {m}", p.display())),
            (e, _) => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigIssue> {
        let issue = |key: &str, e: mimpc_core::Error| ConfigIssue {
            key: key.into(),
            message: e.to_string(),
        };
        let fail = |key: &str, message: String| Err(ConfigIssue { key: key.into(), message });
        if self.model.horizon == 0 {
            return fail("model.horizon", "horizon must be at least 1".into());
        }
        if let Some([lo, hi]) = self.model.state_bounds {
            if !(lo < hi) {
                return fail("model.state_bounds", format!("empty interval [{lo}, {hi}]"));
            }
        }
        self.theta0.validate().map_err(|e| issue("theta0", e))?;
        self.baseline.validate().map_err(|e| issue("baseline", e))?;
        self.noise.validate().map_err(|e| issue("noise", e))?;
        self.exploration.validate().map_err(|e| issue("exploration", e))?;
        self.critic.validate().map_err(|e| issue("critic", e))?;
        self.ip.validate().map_err(|e| issue("ip", e))?;
        self.gradcheck.validate().map_err(|e| issue("gradcheck", e))?;
        self.train_config().validate().map_err(|e| issue("train", e))?;
        self.evaluation_config(self.evaluation.rollouts)
            .validate()
            .map_err(|e| issue("evaluation", e))?;
        if self.theta0.c < 0.0 {
            return fail("theta0.c", "the penalty weight must be non-negative".into());
        }
        Ok(())
    }

    pub fn ocp(&self) -> Result<ExampleOcp, CliError> {
        let ocp = build_example_ocp(&self.theta0, self.model.horizon, self.train.gamma, self.model.terminal)?;
        Ok(match self.model.state_bounds {
            Some([lo, hi]) => ocp.with_hard_bounds(lo, hi)?,
            None => ocp,
        })
    }

    pub fn plant(&self) -> Plant {
        Plant {
            noise: self.noise,
            cost: self.baseline,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            step_size: t.step_size,
            batches: t.batches,
            batch_length: t.batch_length,
            initial_state: t.initial_state,
            gamma: t.gamma,
            exploration: self.exploration,
            grid: self.critic,
            covariance: t.covariance,
            update: t.update,
            mask: t.mask,
            advantage_step: t.advantage_step,
            curvature_step: t.curvature_step,
            step_rollouts: t.step_rollouts,
        }
    }

    pub fn evaluation_config(&self, rollouts: usize) -> EvaluationConfig {
        EvaluationConfig {
            rollouts,
            gamma: self.train.gamma,
            truncation: self.evaluation.truncation,
            initial_state: self.train.initial_state,
            deterministic: self.evaluation.deterministic,
        }
    }
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), CliError> {
    let path: Vec<String> = key.split("__").map(|p| p.to_ascii_lowercase()).collect();
    if path.iter().any(String::is_empty) {
        return Err(CliError::Validation(format!("malformed override {ENV_PREFIX}{key}")));
    }
    // a bare TOML value, or a plain string when it does not parse as one
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, sections) = path.split_last().expect("non-empty path");
    let mut node = table;
    for s in sections {
        node = node
            .entry(s.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("{ENV_PREFIX}{key}: `{s}` is not a section")))?;
    }
    node.insert(last.clone(), value);
    Ok(())
}

/// Serde errors on a table carry no position; find the offending key in the source.
fn locate_message(text: &str, message: &str) -> String {
    let key = message
        .split('`')
        .nth(1)
        .filter(|k| !k.is_empty() && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
    match key.and_then(|k| text.lines().position(|l| l.trim_start().starts_with(k)).map(|i| i + 1)) {
        Some(line) => format!("line {line}: {}", message.trim()),
        None => message.trim().to_string(),
    }
}

/// 1-based line of `section.key` (or of the section header) in `text`.
pub fn line_of_key(text: &str, key: &str) -> Option<usize> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = if parts.len() > 1 { parts.pop() } else { None };
    let section = parts.join(".");
    let mut current = String::new();
    let mut header = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section && leaf.is_some() {
                header = Some(i + 1);
            } else if current == section {
                return Some(i + 1);
            }
            continue;
        }
        let assigned = t.split('=').next().map(str::trim);
        match leaf {
            Some(l) if current == section && assigned == Some(l) => return Some(i + 1),
            None if current.is_empty() && assigned == Some(section.as_str()) => return Some(i + 1),
            _ => {}
        }
    }
    header
}
