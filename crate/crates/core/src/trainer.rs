//! Batch actor-critic: rollouts, both policy-gradient estimators and the update.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critic::{self, AdvantageFit, GridConfig, PolicyTransitions, ValueTable};
use crate::env::{self, EvaluationConfig, PerformanceEstimate, Plant, PlantState};
use crate::error::{Error, Result};
use crate::ip::IpOptions;
use crate::ocp::{ExampleOcp, ThetaVector};
use crate::policy::{ContinuousSolver, ExplorationConfig, MixedAction, MpcPolicy, PolicySample};
use crate::rng::{substream, Purpose, StreamKey};
use crate::sens::{self, CovarianceForm, SensitivityBundle};

/// Which estimate drives the parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Compatible,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub step_size: f64,
    pub batches: usize,
    pub batch_length: usize,
    pub initial_state: f64,
    pub gamma: f64,
    pub exploration: ExplorationConfig,
    pub grid: GridConfig,
    pub covariance: CovarianceForm,
    pub update: GradientMode,
    /// Parameters adapted by the update, in `ThetaVector` order.
    pub mask: [bool; ThetaVector::DIM],
    /// Central-difference step of the critic's advantage in `a_c`.
    pub advantage_step: f64,
    /// Perturbation step for the second derivative of `u_0` in `d`.
    pub curvature_step: f64,
    /// Monte-Carlo rollouts of `J` logged every step; zero disables them.
    pub step_rollouts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 2e-3,
            batches: 30,
            batch_length: 50,
            initial_state: 0.0,
            gamma: 0.95,
            exploration: ExplorationConfig::default(),
            grid: GridConfig::default(),
            covariance: CovarianceForm::default(),
            update: GradientMode::default(),
            mask: [true, true, false, true, true],
            advantage_step: 1e-4,
            curvature_step: 1e-4,
            step_rollouts: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.steps == 0 {
            return bad("at least one training step is needed".into());
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size {} must be finite and non-negative", self.step_size));
        }
        if self.batches * self.batch_length <= ThetaVector::DIM {
            return bad(format!(
                "{} x {} samples cannot determine {} advantage weights",
                self.batches,
                self.batch_length,
                ThetaVector::DIM
            ));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("discount {} outside [0, 1)", self.gamma));
        }
        if !self.initial_state.is_finite() {
            return bad("initial state must be finite".into());
        }
        if !(self.advantage_step > 0.0 && self.curvature_step > 0.0) {
            return bad("difference steps must be positive".into());
        }
        self.exploration.validate()?;
        if self.exploration.sigma_c == 0.0 {
            return bad("the compatible features need sigma_c > 0".into());
        }
        self.grid.validate()
    }

    fn evaluation(&self, rollouts: usize) -> EvaluationConfig {
        EvaluationConfig {
            rollouts,
            gamma: self.gamma,
            initial_state: self.initial_state,
            ..EvaluationConfig::default()
        }
    }
}

/// One sampled transition with the derivative information of the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub rollout: usize,
    pub t: usize,
    pub s: f64,
    pub sample: PolicySample,
    pub cost: f64,
    pub next: f64,
    pub sensitivities: SensitivityBundle,
    pub score: Vec<f64>,
}

impl TransitionRecord {
    /// `psi = score + grad pi_c M (e - c) / sigma_c`.
    pub fn features(&self, sigma_c: f64) -> Vec<f64> {
        let k = self.sensitivities.m * (self.sample.e - self.sensitivities.c) / sigma_c;
        self.score
            .iter()
            .zip(&self.sensitivities.policy_gradient)
            .map(|(sc, g)| sc + k * g)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionBatch {
    pub theta: ThetaVector,
    pub batches: usize,
    pub batch_length: usize,
    pub records: Vec<TransitionRecord>,
}

/// Policy-gradient terms at one visited state: value gradients of the
/// feasible branches, score, and the continuous-policy sensitivities of the
/// chosen branch, all from interior-point solves at `d = 0`.
pub fn record_sensitivities(
    policy: &MpcPolicy,
    s: f64,
    sample: &PolicySample,
    covariance: CovarianceForm,
    curvature_step: f64,
) -> Result<(SensitivityBundle, Vec<f64>)> {
    let ip = policy.ip_options();
    let table = policy.table(s)?;
    let chosen = usize::from(sample.action.integer);
    let mut value_gradients = vec![None; table.branches.len()];
    let mut chosen_terms = None;
    for (i, branch) in table.branches.iter().enumerate() {
        let Some(plan) = branch else { continue };
        if i != chosen && sample.probabilities[i] == 0.0 {
            continue;
        }
        let nlp = policy.nlp(s, &plan.profile, 0.0)?;
        let z = policy.solve_profile(s, &plan.profile, 0.0, None)?;
        value_gradients[i] = Some(sens::grad_value_wrt_theta(&z, &nlp, ip.tolerance.min(ip.tau_target / 10.0))?);
        if i == chosen {
            let first = sens::first_input_sensitivity(&z, &nlp)?;
            let second = sens::second_derivative_u0_wrt_d(&nlp, &z, curvature_step, ip)?;
            let (m, c) = sens::estimate_m_c(&first.d, &second, policy.exploration().sigma_c, covariance)?;
            chosen_terms = Some(SensitivityBundle {
                value_gradients: Vec::new(),
                policy_gradient: first.theta.row(0).iter().cloned().collect(),
                du0_dd: first.d[(0, 0)],
                m: m[(0, 0)],
                c: c[0],
                proximity: sens::active_set_proximity(&z, &nlp),
            });
        }
    }
    let mut bundle = chosen_terms.ok_or(Error::MissingGradient { first: vec![chosen as u8] })?;
    let score = sens::score_function(chosen, &sample.probabilities, &value_gradients, policy.exploration().sigma_i)?;
    bundle.value_gradients = value_gradients;
    Ok((bundle, score))
}

/// `batches` rollouts of `batch_length` steps from the initial state; rollout
/// `r` of training step `step` draws from its own substream of `seed`.
pub fn collect_batch(policy: &MpcPolicy, plant: &Plant, cfg: &TrainConfig, seed: u64, step: u64) -> Result<TransitionBatch> {
    let per_rollout = (0..cfg.batches)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, StreamKey::new(Purpose::Training, step, r as u64));
            let mut state = PlantState { s: cfg.initial_state, k: 0 };
            let mut out = Vec::with_capacity(cfg.batch_length);
            for t in 0..cfg.batch_length {
                let index = r * cfg.batch_length + t;
                let s = state.s;
                let record = (|| {
                    let (sample, _) = policy.sample_action(s, &mut rng, ContinuousSolver::Exact)?;
                    let (sensitivities, score) =
                        record_sensitivities(policy, s, &sample, cfg.covariance, cfg.curvature_step)?;
                    Ok((sample, sensitivities, score))
                })()
                .map_err(|e: Error| e.at_record(index))?;
                let (sample, sensitivities, score) = record;
                let (next, cost) = plant.step(state, &sample.action, &mut rng);
                out.push(TransitionRecord {
                    rollout: r,
                    t,
                    s,
                    sample,
                    cost,
                    next: next.s,
                    sensitivities,
                    score,
                });
                state = next;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransitionBatch {
        theta: *policy.theta(),
        batches: cfg.batches,
        batch_length: cfg.batch_length,
        records: per_rollout.into_iter().flatten().collect(),
    })
}

/// Advantage targets and their slopes in `a_c` at `a_c = pi_c`, from the critic.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticTargets {
    pub advantages: Vec<f64>,
    pub slopes: Vec<f64>,
}

pub fn critic_targets(batch: &TransitionBatch, plant: &Plant, v: &ValueTable, cfg: &TrainConfig) -> CriticTargets {
    let nn = cfg.grid.noise_nodes;
    let (advantages, slopes) = batch
        .records
        .iter()
        .map(|r| {
            let a = critic::advantage(plant, v, cfg.gamma, nn, r.s, &r.sample.action);
            let nominal = MixedAction::new(r.sample.nominal, r.sample.action.integer);
            let g = critic::advantage_slope(plant, v, cfg.gamma, nn, r.s, &nominal, cfg.advantage_step);
            (a, g)
        })
        .unzip();
    CriticTargets { advantages, slopes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub direct: Vec<f64>,
    pub compatible: Vec<f64>,
    /// `E[score A]` and `E[grad pi_c grad_ac A]` of the direct estimate.
    pub direct_terms: [Vec<f64>; 2],
    /// The same split for the compatible estimate.
    pub compatible_terms: [Vec<f64>; 2],
    /// Standard errors from the spread of per-rollout means.
    pub direct_stderr: Vec<f64>,
    pub compatible_stderr: Vec<f64>,
    pub samples: usize,
}

impl GradientEstimate {
    pub fn get(&self, mode: GradientMode) -> &[f64] {
        match mode {
            GradientMode::Compatible => &self.compatible,
            GradientMode::Direct => &self.direct,
        }
    }
}

fn mean_of(rows: impl Iterator<Item = Vec<f64>>, dim: usize, n: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / n as f64).collect()
}

fn rollout_stderr(batch: &TransitionBatch, rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let b = batch.batches;
    let mut sums = vec![vec![0.0; dim]; b];
    let mut counts = vec![0usize; b];
    for (r, row) in batch.records.iter().zip(rows) {
        counts[r.rollout] += 1;
        for (a, v) in sums[r.rollout].iter_mut().zip(row) {
            *a += v;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .filter(|(_, c)| **c > 0)
        .map(|(s, c)| s.iter().map(|v| v / *c as f64).collect())
        .collect();
    let k = means.len() as f64;
    if means.len() < 2 {
        return vec![f64::NAN; dim];
    }
    (0..dim)
        .map(|j| {
            let m = means.iter().map(|r| r[j]).sum::<f64>() / k;
            let var = means.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        })
        .collect()
}

/// Both hybrid gradient estimates: with the critic's advantage and slopes,
/// and with the fitted `A_hat = w' psi` and its exact slope
/// `M / sigma_c grad pi_c' w`.
pub fn hybrid_gradient(batch: &TransitionBatch, targets: &CriticTargets, w: &[f64], sigma_c: f64) -> GradientEstimate {
    let n = batch.records.len();
    let dim = w.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let scale = |v: &[f64], k: f64| v.iter().map(|x| x * k).collect::<Vec<f64>>();
    let recs = &batch.records;
    let d_int = mean_of(recs.iter().zip(&targets.advantages).map(|(r, a)| scale(&r.score, *a)), dim, n);
    let d_cont = mean_of(
        recs.iter().zip(&targets.slopes).map(|(r, g)| scale(&r.sensitivities.policy_gradient, *g)),
        dim,
        n,
    );
    let c_int = mean_of(recs.iter().map(|r| scale(&r.score, dot(w, &r.features(sigma_c)))), dim, n);
    let c_cont = mean_of(
        recs.iter().map(|r| {
            let g = &r.sensitivities.policy_gradient;
            scale(g, r.sensitivities.m / sigma_c * dot(g, w))
        }),
        dim,
        n,
    );
    let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>();
    let direct_rows: Vec<Vec<f64>> = recs
        .iter()
        .zip(targets.advantages.iter().zip(&targets.slopes))
        .map(|(r, (a, g))| add(&scale(&r.score, *a), &scale(&r.sensitivities.policy_gradient, *g)))
        .collect();
    let compatible_rows: Vec<Vec<f64>> = recs
        .iter()
        .map(|r| {
            let g = &r.sensitivities.policy_gradient;
            add(&scale(&r.score, dot(w, &r.features(sigma_c))), &scale(g, r.sensitivities.m / sigma_c * dot(g, w)))
        })
        .collect();
    GradientEstimate {
        direct_stderr: rollout_stderr(batch, &direct_rows, dim),
        compatible_stderr: rollout_stderr(batch, &compatible_rows, dim),
        direct: add(&d_int, &d_cont),
        compatible: add(&c_int, &c_cont),
        direct_terms: [d_int, d_cont],
        compatible_terms: [c_int, c_cont],
        samples: n,
    }
}

/// Cosine of the angle between `a` and `b` restricted to `mask`.
pub fn masked_cosine(a: &[f64], b: &[f64], mask: &[bool]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for ((x, y), m) in a.iter().zip(b).zip(mask) {
        if *m {
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
    }
    ab / (aa * bb).sqrt()
}

/// Plant trajectory sample for plotting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub rollout: usize,
    pub t: usize,
    pub s: f64,
    pub continuous: f64,
    pub integer: u8,
    pub cost: f64,
}

pub fn trajectories(batch: &TransitionBatch) -> Vec<TrajectoryPoint> {
    batch
        .records
        .iter()
        .map(|r| TrajectoryPoint {
            rollout: r.rollout,
            t: r.t,
            s: r.s,
            continuous: r.sample.action.continuous,
            integer: r.sample.action.integer,
            cost: r.cost,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Parameters the batch was collected with.
    pub theta: ThetaVector,
    /// `V(s_0)` of the critic.
    pub j_critic: f64,
    pub j_monte_carlo: Option<PerformanceEstimate>,
    pub gradients: GradientEstimate,
    pub cosine: f64,
    pub fit: AdvantageFit,
    pub critic_sweeps: usize,
    pub critic_residual: f64,
    pub critic_clamped: usize,
    /// Records whose chosen branch sits within the near-active-set band.
    pub near_active_set: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    /// Parameters after the last update.
    pub final_theta: ThetaVector,
    pub first_trajectories: Vec<TrajectoryPoint>,
    pub last_trajectories: Vec<TrajectoryPoint>,
}

/// A failed run with everything logged before the failure.
#[derive(Debug)]
pub struct TrainFailure {
    pub log: TrainingLog,
    pub error: Error,
}

pub struct Trainer {
    ocp: ExampleOcp,
    plant: Plant,
    ip: IpOptions,
    cfg: TrainConfig,
}

impl Trainer {
    pub fn new(ocp: ExampleOcp, plant: Plant, ip: IpOptions, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        ip.validate()?;
        plant.noise.validate()?;
        Ok(Self { ocp, plant, ip, cfg })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn policy(&self, theta: &ThetaVector) -> Result<MpcPolicy> {
        MpcPolicy::new(&self.ocp, theta, self.cfg.exploration, self.ip)
    }

    pub fn critic(&self, policy: &MpcPolicy) -> Result<ValueTable> {
        let model = PolicyTransitions {
            policy,
            plant: &self.plant,
            hermite_nodes: self.cfg.grid.hermite_nodes,
            noise_nodes: self.cfg.grid.noise_nodes,
        };
        critic::policy_evaluation(&model, &self.cfg.grid, self.cfg.gamma)
    }

    pub fn evaluate(&self, theta: &ThetaVector, rollouts: usize, seed: u64, step: u64) -> Result<PerformanceEstimate> {
        let policy = self.policy(theta)?;
        env::closed_loop_performance(&self.plant, &policy, &self.cfg.evaluation(rollouts), seed, step)
    }

    /// One step: critic, batch, fit and both gradients at `theta`.
    pub fn step(&self, theta: &ThetaVector, seed: u64, step: usize) -> Result<(StepRecord, TransitionBatch)> {
        let policy = self.policy(theta)?;
        let v = self.critic(&policy)?;
        let batch = collect_batch(&policy, &self.plant, &self.cfg, seed, step as u64)?;
        let sigma_c = self.cfg.exploration.sigma_c;
        let targets = critic_targets(&batch, &self.plant, &v, &self.cfg);
        let features: Vec<Vec<f64>> = batch.records.iter().map(|r| r.features(sigma_c)).collect();
        let fit = critic::fit_weights(&features, &targets.advantages)?;
        let gradients = hybrid_gradient(&batch, &targets, &fit.w, sigma_c);
        let j_monte_carlo = if self.cfg.step_rollouts > 0 {
            Some(self.evaluate(theta, self.cfg.step_rollouts, seed, step as u64)?)
        } else {
            None
        };
        let band = sens::default_proximity_threshold(self.ip.tau_target);
        let record = StepRecord {
            step,
            theta: *theta,
            j_critic: v.eval(self.cfg.initial_state),
            j_monte_carlo,
            cosine: masked_cosine(&gradients.compatible, &gradients.direct, &self.cfg.mask),
            gradients,
            fit,
            critic_sweeps: v.sweeps,
            critic_residual: v.residual,
            critic_clamped: v.clamped,
            near_active_set: batch.records.iter().filter(|r| r.sensitivities.proximity < band).count(),
        };
        Ok((record, batch))
    }

    /// `theta - alpha g` on the masked components, with `c` kept non-negative.
    pub fn update(&self, theta: &ThetaVector, g: &[f64]) -> ThetaVector {
        let mut next = theta.to_array();
        for (j, v) in next.iter_mut().enumerate() {
            if self.cfg.mask[j] {
                *v -= self.cfg.step_size * g[j];
            }
        }
        next[ThetaVector::C] = next[ThetaVector::C].max(0.0);
        ThetaVector::from_slice(&next).expect("finite update")
    }

    /// Runs `steps` updates from `theta0`; `observe` sees every step record
    /// as soon as it is complete.
    pub fn train(
        &self,
        theta0: &ThetaVector,
        seed: u64,
        mut observe: impl FnMut(&StepRecord),
    ) -> std::result::Result<TrainingLog, TrainFailure> {
        let mut log = TrainingLog {
            steps: Vec::with_capacity(self.cfg.steps),
            final_theta: *theta0,
            first_trajectories: Vec::new(),
            last_trajectories: Vec::new(),
        };
        let mut theta = *theta0;
        for step in 0..self.cfg.steps {
            let (record, batch) = match self.step(&theta, seed, step) {
                Ok(v) => v,
                Err(error) => return Err(TrainFailure { log, error }),
            };
            let g = record.gradients.get(self.cfg.update);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainFailure {
                    log,
                    error: Error::NonFiniteGradient { step },
                });
            }
            theta = self.update(&theta, g);
            log::info!(
                "step {step}: J {:.6} cos {:.3} theta {:?}",
                record.j_critic,
                record.cosine,
                theta.to_array()
            );
            if step == 0 {
                log.first_trajectories = trajectories(&batch);
            }
            if step + 1 == self.cfg.steps {
                log.last_trajectories = trajectories(&batch);
            }
            observe(&record);
            log.steps.push(record);
            log.final_theta = theta;
        }
        Ok(log)
    }
}
