//! The stochastic mixed-integer MPC policy.
//!
//! The first integer input is drawn from a softmax over the branch values
//! `Phi^i(s, theta, a_i)`; the continuous input is the first input of the
//! fixed-profile problem with the branch's optimal completion and a random
//! linear cost term `d' u_0`, `d ~ N(0, sigma_c)`. Both pieces only ever use
//! feasible problems, so every sample is feasible for the MPC scheme.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp::Plan;
use crate::error::{Error, Result};
use crate::ip::{self, IpOptions, PrimalDualPoint, SolveStatus};
use crate::minlp::{ExampleMinlp, IntegerProfile, IntegerValueTable, MinlpStrategy};
use crate::nlp::FixedIntegerNlp;
use crate::ocp::{ExampleOcp, ThetaVector};
use crate::rng::standard_normal;

/// One applied action `a = (a_c, a_i)` of the scalar benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedAction {
    pub continuous: f64,
    pub integer: u8,
}

impl MixedAction {
    pub fn new(continuous: f64, integer: u8) -> Self {
        Self { continuous, integer }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplorationConfig {
    /// Softmax temperature.
    pub sigma_i: f64,
    /// Variance of the perturbation `d`.
    pub sigma_c: f64,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            sigma_i: 2e-2,
            sigma_c: 1e-2,
        }
    }
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_i > 0.0 && self.sigma_c >= 0.0 && self.sigma_i.is_finite() && self.sigma_c.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "need sigma_i > 0 and sigma_c >= 0, got sigma_i = {}, sigma_c = {}",
                self.sigma_i, self.sigma_c
            )))
        }
    }
}

/// Softmax `p_i ~ exp(-v_i / sigma_i)` over feasible entries; `None` entries
/// get probability zero.
pub fn softmax(values: &[Option<f64>], sigma_i: f64) -> Result<Vec<f64>> {
    let best = values
        .iter()
        .flatten()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(Error::EmptyFeasibleSet { state: f64::NAN });
    }
    let weights: Vec<f64> = values
        .iter()
        .map(|v| v.map_or(0.0, |v| (-(v - best) / sigma_i).exp()))
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / total).collect())
}

/// How the continuous input is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuousSolver {
    /// Exact fixed-profile solution by dynamic programming.
    #[default]
    Exact,
    /// Barrier problem at `tau_target` solved by the interior-point method.
    InteriorPoint,
}

/// Interior-point solutions behind one sample.
#[derive(Debug, Clone)]
pub struct SampleSolves {
    /// Chosen branch at `d = 0`.
    pub nominal: PrimalDualPoint,
    /// Chosen branch at the drawn `d`.
    pub perturbed: PrimalDualPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySample {
    pub action: MixedAction,
    pub d: f64,
    /// `e = a_c - pi_c(s, completion)`.
    pub e: f64,
    /// Continuous input at `d = 0`.
    pub nominal: f64,
    pub log_probability: f64,
    pub probabilities: Vec<f64>,
    pub completion: IntegerProfile,
}

/// The MPC-based policy at one parameter value.
#[derive(Debug)]
pub struct MpcPolicy {
    minlp: ExampleMinlp,
    exploration: ExplorationConfig,
    ip: IpOptions,
}

impl MpcPolicy {
    pub fn new(ocp: &ExampleOcp, theta: &ThetaVector, exploration: ExplorationConfig, ip: IpOptions) -> Result<Self> {
        exploration.validate()?;
        ip.validate()?;
        Ok(Self {
            minlp: ExampleMinlp::new(ocp, theta)?,
            exploration,
            ip,
        })
    }

    pub fn minlp(&self) -> &ExampleMinlp {
        &self.minlp
    }

    pub fn ocp(&self) -> &ExampleOcp {
        self.minlp.ocp()
    }

    pub fn theta(&self) -> &ThetaVector {
        self.minlp.theta()
    }

    pub fn exploration(&self) -> &ExplorationConfig {
        &self.exploration
    }

    pub fn ip_options(&self) -> &IpOptions {
        &self.ip
    }

    pub fn table(&self, s: f64) -> Result<IntegerValueTable> {
        let t = self.minlp.table(s, MinlpStrategy::DynamicProgramming)?;
        for (i, p) in t.feasible() {
            assert_eq!(p.profile.bits()[0], i, "completion must start with the assigned input");
        }
        Ok(t)
    }

    /// Branch values and softmax probabilities at `s`.
    pub fn integer_policy_distribution(&self, s: f64) -> Result<(IntegerValueTable, Vec<f64>)> {
        let table = self.table(s)?;
        let probs = softmax(&table.values(), self.exploration.sigma_i).map_err(|e| match e {
            Error::EmptyFeasibleSet { .. } => Error::EmptyFeasibleSet { state: s },
            other => other,
        })?;
        Ok((table, probs))
    }

    /// Fixed-profile NLP with the linear term `d u_0`.
    pub fn nlp<'a>(&'a self, s: f64, profile: &IntegerProfile, d: f64) -> Result<FixedIntegerNlp<'a>> {
        FixedIntegerNlp::scalar(self.minlp.ocp(), s, self.minlp.theta(), profile.clone(), d)
    }

    /// Interior-point solve of a fixed-profile problem; infeasible and
    /// non-converged results are errors.
    pub fn solve_profile(
        &self,
        s: f64,
        profile: &IntegerProfile,
        d: f64,
        warm: Option<&PrimalDualPoint>,
    ) -> Result<PrimalDualPoint> {
        let nlp = self.nlp(s, profile, d)?;
        Ok(ip::solve(&nlp, &self.ip, warm)?.into_solved()?.point)
    }

    /// `pi_c(s, i) = u_0` of the unperturbed fixed-profile problem.
    pub fn deterministic_continuous_policy(&self, s: f64, profile: &IntegerProfile, solver: ContinuousSolver) -> Result<f64> {
        self.continuous_input(s, profile, 0.0, solver)
    }

    pub fn continuous_input(&self, s: f64, profile: &IntegerProfile, d: f64, solver: ContinuousSolver) -> Result<f64> {
        match solver {
            ContinuousSolver::Exact => self
                .minlp
                .fixed_plan(s, profile, d)
                .map(|p| p.u[0])
                .ok_or(Error::Infeasible { violation: f64::INFINITY }),
            ContinuousSolver::InteriorPoint => {
                let z = self.solve_profile(s, profile, d, None)?;
                Ok(z.y[ExampleOcp::u_index(0)])
            }
        }
    }

    /// Exact plan of a fixed profile with perturbation `d`.
    pub fn exact_plan(&self, s: f64, profile: &IntegerProfile, d: f64) -> Result<Plan> {
        self.minlp
            .fixed_plan(s, profile, d)
            .ok_or(Error::Infeasible { violation: f64::INFINITY })
    }

    /// Draws `(a_i, d)` and computes `a_c`.
    ///
    /// With the interior-point solver a branch whose solve hits the iteration
    /// cap is redrawn once before the error is returned.
    pub fn sample_action<R: Rng + ?Sized>(
        &self,
        s: f64,
        rng: &mut R,
        solver: ContinuousSolver,
    ) -> Result<(PolicySample, Option<SampleSolves>)> {
        let (table, probs) = self.integer_policy_distribution(s)?;
        let mut retried = false;
        loop {
            let u: f64 = rng.gen();
            let d = self.exploration.sigma_c.sqrt() * standard_normal(rng);
            let a = pick(&probs, u);
            let plan = table.branches[a].as_ref().expect("sampled branches are feasible");
            let profile = plan.profile.clone();
            let outcome = match solver {
                ContinuousSolver::Exact => self
                    .exact_plan(s, &profile, d)
                    .map(|p| (plan.u[0], p.u[0], None)),
                ContinuousSolver::InteriorPoint => self.ip_pair(s, &profile, d).map(|(n, p)| {
                    let idx = ExampleOcp::u_index(0);
                    (n.y[idx], p.y[idx], Some(SampleSolves { nominal: n, perturbed: p }))
                }),
            };
            match outcome {
                Ok((nominal, ac, solves)) => {
                    let sample = PolicySample {
                        action: MixedAction::new(ac, a as u8),
                        d,
                        e: ac - nominal,
                        nominal,
                        log_probability: probs[a].ln(),
                        probabilities: probs.clone(),
                        completion: profile,
                    };
                    return Ok((sample, solves));
                }
                Err(Error::MaxIterations { .. }) if !retried => {
                    log::warn!("continuous solve hit the iteration cap at s = {s}; redrawing once");
                    retried = true;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn ip_pair(&self, s: f64, profile: &IntegerProfile, d: f64) -> Result<(PrimalDualPoint, PrimalDualPoint)> {
        let nominal = self.solve_profile(s, profile, 0.0, None)?;
        let nlp = self.nlp(s, profile, d)?;
        let rep = ip::solve(&nlp, &self.ip, Some(&nominal))?;
        let perturbed = match rep.status {
            SolveStatus::Solved => rep.point,
            // a cold start is the fallback when the warm start stalls
            _ => ip::solve(&nlp, &self.ip, None)?.into_solved()?.point,
        };
        Ok((nominal, perturbed))
    }
}

/// Inverse-CDF draw from a probability table.
pub fn pick(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        last = i;
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[None, Some(3.0)], 0.1).unwrap(), vec![0.0, 1.0]);
        assert_eq!(softmax(&[Some(1.0), Some(1.0)], 0.1).unwrap(), vec![0.5, 0.5]);
        let p = softmax(&[Some(0.2), Some(0.2 + 0.02 * 3f64.ln())], 0.02).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12 && (p[1] - 0.25).abs() < 1e-12);
        assert!(softmax(&[None, None], 0.1).is_err());
    }

    #[test]
    fn softmax_survives_huge_values() {
        let p = softmax(&[Some(1e6), Some(1e6 + 1e-3)], 1e-4).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pick_skips_zero_entries() {
        assert_eq!(pick(&[0.0, 1.0], 0.0), 1);
        assert_eq!(pick(&[0.3, 0.7], 0.29), 0);
        assert_eq!(pick(&[0.3, 0.7], 0.31), 1);
        assert_eq!(pick(&[1.0, 0.0], 0.999_999), 0);
    }
}
