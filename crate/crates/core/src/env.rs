//! The true plant and Monte-Carlo closed-loop performance.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocp::{baseline_stage_cost, ThetaVector};
use crate::policy::{ContinuousSolver, MixedAction, MpcPolicy};
use crate::rng::{substream, Purpose, StreamKey};

/// Additive process noise, uniform on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    pub lo: f64,
    pub hi: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self { lo: 0.0, hi: 0.05 }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo <= self.hi) {
            return Err(Error::InvalidArgument(format!(
                "noise support [{}, {}] is not an interval",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.lo + (self.hi - self.lo) * rng.gen::<f64>()
    }

    /// Midpoints of `k` equal cells, each carrying weight `1/k`.
    pub fn midpoints(&self, k: usize) -> Vec<f64> {
        let h = (self.hi - self.lo) / k as f64;
        (0..k).map(|j| self.lo + (j as f64 + 0.5) * h).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    pub s: f64,
    pub k: usize,
}

/// `s+ = s + a_c a_i + n` with the baseline stage cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plant {
    pub noise: NoiseModel,
    /// Parameters of the baseline cost; `b` is unused.
    pub cost: ThetaVector,
}

impl Default for Plant {
    fn default() -> Self {
        Self {
            noise: NoiseModel::default(),
            cost: ThetaVector::baseline(),
        }
    }
}

impl Plant {
    pub fn stage_cost(&self, s: f64, a: &MixedAction) -> f64 {
        baseline_stage_cost(s, a, &self.cost)
    }

    /// Successor state without noise.
    pub fn drift(s: f64, a: &MixedAction) -> f64 {
        s + a.continuous * f64::from(a.integer)
    }

    pub fn step<R: Rng + ?Sized>(&self, state: PlantState, a: &MixedAction, rng: &mut R) -> (PlantState, f64) {
        let cost = self.stage_cost(state.s, a);
        let next = PlantState {
            s: Self::drift(state.s, a) + self.noise.sample(rng),
            k: state.k + 1,
        };
        (next, cost)
    }
}

/// Smallest `H` with `gamma^H <= eps`.
pub fn truncation_horizon(gamma: f64, eps: f64) -> usize {
    assert!((0.0..1.0).contains(&gamma) && eps > 0.0 && eps < 1.0);
    if gamma == 0.0 {
        return 1;
    }
    let mut h = (eps.ln() / gamma.ln()).floor().max(0.0) as usize;
    while gamma.powi(h as i32) > eps {
        h += 1;
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    pub rollouts: usize,
    pub gamma: f64,
    /// Rollouts stop once `gamma^H` drops below this.
    pub truncation: f64,
    pub initial_state: f64,
    /// Exploration off: `d = 0` and the most likely integer input.
    pub deterministic: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            rollouts: 10_000,
            gamma: 0.95,
            truncation: 1e-3,
            initial_state: 0.0,
            deterministic: false,
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rollouts == 0 {
            return Err(Error::InvalidArgument("at least one rollout is needed".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("discount {} outside [0, 1)", self.gamma)));
        }
        if !(self.truncation > 0.0 && self.truncation < 1.0) {
            return Err(Error::InvalidArgument(format!("truncation {} outside (0, 1)", self.truncation)));
        }
        if !self.initial_state.is_finite() {
            return Err(Error::InvalidArgument("initial state must be finite".into()));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        truncation_horizon(self.gamma, self.truncation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub rollouts: usize,
}

impl PerformanceEstimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n).sqrt(),
            rollouts: samples.len(),
        }
    }
}

/// One closed-loop action of the MPC policy, drawn with exploration unless
/// `deterministic`.
pub fn act<R: Rng + ?Sized>(policy: &MpcPolicy, s: f64, deterministic: bool, rng: &mut R) -> Result<MixedAction> {
    if deterministic {
        let table = policy.table(s)?;
        let (i, plan) = table.best().ok_or(Error::EmptyFeasibleSet { state: s })?;
        Ok(MixedAction::new(plan.u[0], i))
    } else {
        Ok(policy.sample_action(s, rng, ContinuousSolver::Exact)?.0.action)
    }
}

/// Discounted cost of one rollout under `controller`.
pub fn rollout_return<R, F>(plant: &Plant, cfg: &EvaluationConfig, rng: &mut R, controller: &F) -> Result<f64>
where
    R: Rng,
    F: Fn(f64, &mut R) -> Result<MixedAction>,
{
    let mut state = PlantState { s: cfg.initial_state, k: 0 };
    let mut total = 0.0;
    let mut discount = 1.0;
    for _ in 0..cfg.horizon() {
        let a = controller(state.s, rng)?;
        let (next, cost) = plant.step(state, &a, rng);
        total += discount * cost;
        discount *= cfg.gamma;
        state = next;
    }
    Ok(total)
}

/// Monte-Carlo estimate of the discounted cost of `controller`; rollout `r`
/// uses its own substream of `seed`.
pub fn closed_loop_performance_with<F>(
    plant: &Plant,
    cfg: &EvaluationConfig,
    seed: u64,
    step: u64,
    controller: F,
) -> Result<PerformanceEstimate>
where
    F: Fn(f64, &mut ChaCha8Rng) -> Result<MixedAction> + Sync,
{
    cfg.validate()?;
    let returns = (0..cfg.rollouts)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, StreamKey::new(Purpose::Evaluation, step, r as u64));
            rollout_return(plant, cfg, &mut rng, &controller).map_err(|e| e.at_record(r))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(PerformanceEstimate::from_samples(&returns))
}

/// `J(pi_theta)` of the MPC policy, stochastic unless `cfg.deterministic`.
pub fn closed_loop_performance(
    plant: &Plant,
    policy: &MpcPolicy,
    cfg: &EvaluationConfig,
    seed: u64,
    step: u64,
) -> Result<PerformanceEstimate> {
    closed_loop_performance_with(plant, cfg, seed, step, |s, rng| act(policy, s, cfg.deterministic, rng))
}
