//! Run directory layout: CSV logs and the hashed manifest.
//!
//! Floats are written in the shortest form that parses back to the same value.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use mimpc_core::ocp::ThetaVector;
use mimpc_core::trainer::{StepRecord, TrajectoryPoint};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CONFIG_FILE: &str = "config.toml";
pub const THETA_FILE: &str = "theta.csv";
pub const PERFORMANCE_FILE: &str = "performance.csv";
pub const GRADIENTS_FILE: &str = "gradients.csv";
pub const TRAJECTORIES_FIRST_FILE: &str = "trajectories_first.csv";
pub const TRAJECTORIES_LAST_FILE: &str = "trajectories_last.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn theta_header() -> Vec<String> {
    std::iter::once("step".to_string())
        .chain(ThetaVector::NAMES.iter().map(|n| n.to_string()))
        .collect()
}

pub fn performance_header() -> Vec<String> {
    [
        "step",
        "j_mean",
        "j_stderr",
        "j_ratio",
        "j_critic",
        "critic_sweeps",
        "critic_residual",
        "critic_clamped",
        "near_active_set",
        "cosine",
        "fit_residual",
        "fit_condition",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

pub fn gradients_header() -> Vec<String> {
    let mut h = vec!["step".to_string()];
    h.extend(ThetaVector::NAMES.iter().map(|n| format!("direct_{n}")));
    h.extend(ThetaVector::NAMES.iter().map(|n| format!("compat_{n}")));
    h.push("samples".into());
    h
}

pub fn trajectory_header() -> Vec<String> {
    ["rollout", "t", "s", "a_c", "a_i", "cost"].iter().map(|s| s.to_string()).collect()
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

/// Streaming writers for the per-step CSVs.
pub struct StepLog {
    theta: csv::Writer<File>,
    performance: csv::Writer<File>,
    gradients: csv::Writer<File>,
}

/// One row of `performance.csv`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PerformanceRow {
    pub step: usize,
    pub j_mean: Option<f64>,
    pub j_stderr: Option<f64>,
    pub j_ratio: Option<f64>,
    pub j_critic: f64,
    pub critic_sweeps: usize,
    pub critic_residual: f64,
    pub critic_clamped: usize,
    pub near_active_set: Option<usize>,
    pub cosine: Option<f64>,
    pub fit_residual: Option<f64>,
    pub fit_condition: Option<f64>,
}

impl PerformanceRow {
    pub fn from_step(r: &StepRecord) -> Self {
        Self {
            step: r.step,
            j_mean: r.j_monte_carlo.map(|e| e.mean),
            j_stderr: r.j_monte_carlo.map(|e| e.stderr),
            j_ratio: None,
            j_critic: r.j_critic,
            critic_sweeps: r.critic_sweeps,
            critic_residual: r.critic_residual,
            critic_clamped: r.critic_clamped,
            near_active_set: Some(r.near_active_set),
            cosine: Some(r.cosine),
            fit_residual: Some(r.fit.residual_norm),
            fit_condition: Some(r.fit.condition),
        }
    }

    fn record(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            opt(self.j_mean),
            opt(self.j_stderr),
            opt(self.j_ratio),
            num(self.j_critic),
            self.critic_sweeps.to_string(),
            num(self.critic_residual),
            self.critic_clamped.to_string(),
            self.near_active_set.map(|n| n.to_string()).unwrap_or_default(),
            opt(self.cosine),
            opt(self.fit_residual),
            opt(self.fit_condition),
        ]
    }
}

fn writer(dir: &Path, name: &str, header: &[String]) -> Result<csv::Writer<File>, CliError> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    w.write_record(header)?;
    Ok(w)
}

impl StepLog {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        Ok(Self {
            theta: writer(dir, THETA_FILE, &theta_header())?,
            performance: writer(dir, PERFORMANCE_FILE, &performance_header())?,
            gradients: writer(dir, GRADIENTS_FILE, &gradients_header())?,
        })
    }

    pub fn theta(&mut self, step: usize, theta: &ThetaVector) -> Result<(), CliError> {
        let row: Vec<String> = std::iter::once(step.to_string())
            .chain(theta.to_array().iter().map(|v| num(*v)))
            .collect();
        self.theta.write_record(&row)?;
        self.theta.flush()?;
        Ok(())
    }

    pub fn performance(&mut self, row: &PerformanceRow) -> Result<(), CliError> {
        self.performance.write_record(row.record())?;
        self.performance.flush()?;
        Ok(())
    }

    pub fn gradients(&mut self, r: &StepRecord) -> Result<(), CliError> {
        let g = &r.gradients;
        let row: Vec<String> = std::iter::once(r.step.to_string())
            .chain(g.direct.iter().chain(&g.compatible).map(|v| num(*v)))
            .chain(std::iter::once(g.samples.to_string()))
            .collect();
        self.gradients.write_record(&row)?;
        self.gradients.flush()?;
        Ok(())
    }
}

pub fn write_trajectories(dir: &Path, name: &str, points: &[TrajectoryPoint]) -> Result<(), CliError> {
    let mut w = writer(dir, name, &trajectory_header())?;
    for p in points {
        w.write_record([
            p.rollout.to_string(),
            p.t.to_string(),
            num(p.s),
            num(p.continuous),
            p.integer.to_string(),
            num(p.cost),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    /// SHA-256 over the sorted `name hash` lines of `files`.
    pub hash: String,
    pub files: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes `names` inside `dir` and writes the manifest next to them.
pub fn write_manifest(dir: &Path, seed: u64, names: &[&str]) -> Result<Manifest, CliError> {
    let mut files = BTreeMap::new();
    for n in names {
        let p = dir.join(n);
        if p.exists() {
            files.insert(n.to_string(), sha256_file(&p)?);
        }
    }
    let mut h = Sha256::new();
    for (n, d) in &files {
        h.update(format!("{n} {d}\n").as_bytes());
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        hash: hex::encode(h.finalize()),
        files,
    };
    let text = toml::to_string(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    let mut f = File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}
