//! Finite-difference checks of the sensitivities and of the two gradient
//! estimators, as run by the `gradcheck` command.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ip::{self, IpOptions, PrimalDualPoint};
use crate::minlp::IntegerProfile;
use crate::nlp::{FixedIntegerNlp, Nlp, NlpEval, ParamDerivatives, ParametricNlp};
use crate::ocp::{ExampleOcp, ThetaVector};
use crate::rng::{substream, Purpose, StreamKey};
use crate::sens;
use crate::trainer::Trainer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckOptions {
    /// Unflagged instances to check.
    pub instances: usize,
    /// Finite-difference step in each parameter.
    pub step: f64,
    /// Allowed relative error.
    pub relative: f64,
    /// Allowed absolute error for references below `1e-2 * relative`.
    pub absolute: f64,
    /// Instances whose active-set proximity is below this are skipped; the
    /// effective threshold is also capped at `10 sqrt(tau)`.
    pub proximity: f64,
    /// Required cosine between the compatible and direct gradients on one batch.
    pub min_cosine: f64,
    /// Test hook: perturb the parameter Jacobian fed to the IFT solve.
    #[serde(skip)]
    pub corrupt_jacobian: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            instances: 50,
            step: 1e-4,
            relative: 1e-4,
            absolute: 1e-8,
            proximity: 1e-2,
            min_cosine: 0.9,
            corrupt_jacobian: false,
        }
    }
}

impl GradcheckOptions {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::InvalidArgument("gradcheck needs at least one instance".into()));
        }
        for (name, v) in [
            ("step", self.step),
            ("relative", self.relative),
            ("absolute", self.absolute),
            ("proximity", self.proximity),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("gradcheck {name} must be positive, got {v}")));
            }
        }
        if !(-1.0..=1.0).contains(&self.min_cosine) {
            return Err(Error::InvalidArgument(format!("cosine bound {} outside [-1, 1]", self.min_cosine)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub checked: usize,
    pub flagged: usize,
    /// Largest error in units of the allowed error; at most 1 passes.
    pub worst: f64,
    pub worst_instance: usize,
}

impl SensitivityReport {
    pub fn passed(&self) -> bool {
        self.worst <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub cosine: f64,
    pub direct: Vec<f64>,
    pub compatible: Vec<f64>,
    pub min_cosine: f64,
}

impl ConsistencyReport {
    pub fn passed(&self) -> bool {
        self.cosine >= self.min_cosine
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub sensitivities: SensitivityReport,
    pub consistency: Option<ConsistencyReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.sensitivities.passed() && self.consistency.as_ref().map_or(true, ConsistencyReport::passed)
    }
}

/// Delegates to the wrapped problem but scales `d^2 L / dy dp`.
struct CorruptedJacobian<'a, 'b>(&'b FixedIntegerNlp<'a>);

impl Nlp for CorruptedJacobian<'_, '_> {
    fn primal_dim(&self) -> usize {
        self.0.primal_dim()
    }
    fn eq_dim(&self) -> usize {
        self.0.eq_dim()
    }
    fn ineq_dim(&self) -> usize {
        self.0.ineq_dim()
    }
    fn evaluate(&self, y: &[f64]) -> NlpEval {
        self.0.evaluate(y)
    }
    fn lagrangian_hessian(&self, y: &[f64], lambda: &[f64], mu: &[f64]) -> DMatrix<f64> {
        self.0.lagrangian_hessian(y, lambda, mu)
    }
    fn initial_primal(&self) -> Vec<f64> {
        self.0.initial_primal()
    }
    fn kkt_ordering(&self) -> Option<Vec<usize>> {
        self.0.kkt_ordering()
    }
}

impl ParametricNlp for CorruptedJacobian<'_, '_> {
    fn param_dim(&self) -> usize {
        self.0.param_dim()
    }
    fn param_derivatives(&self, y: &[f64], lambda: &[f64], mu: &[f64]) -> ParamDerivatives {
        let mut pd = self.0.param_derivatives(y, lambda, mu);
        pd.lagrangian_yp *= 1.01;
        pd
    }
}

fn scaled_error(reference: f64, value: f64, opts: &GradcheckOptions) -> f64 {
    if reference.abs() > 1e-2 * opts.relative {
        (reference - value).abs() / reference.abs() / opts.relative
    } else {
        (reference - value).abs() / opts.absolute
    }
}

/// Central differences at `h` and `2h` combined by Richardson extrapolation.
fn richardson(f: impl Fn(f64) -> Result<Vec<f64>>, h: f64) -> Result<Vec<f64>> {
    let (p1, m1, p2, m2) = (f(h)?, f(-h)?, f(2.0 * h)?, f(-2.0 * h)?);
    Ok((0..p1.len())
        .map(|i| {
            let d1 = (p1[i] - m1[i]) / (2.0 * h);
            let d2 = (p2[i] - m2[i]) / (4.0 * h);
            (4.0 * d1 - d2) / 3.0
        })
        .collect())
}

fn barrier_value(nlp: &FixedIntegerNlp, z: &PrimalDualPoint) -> f64 {
    let ev = nlp.evaluate(&z.y);
    ev.objective - z.tau * ev.ineq.iter().map(|h| (-h).ln()).sum::<f64>()
}

fn flatten(z: &PrimalDualPoint) -> Vec<f64> {
    z.y.iter().chain(&z.lambda).chain(&z.mu).cloned().collect()
}

/// Compares `dz/dtheta`, `dz/dd` (which contains `du_0/dd`) and `grad_theta
/// Phi` from the implicit function theorem with extrapolated central
/// differences of warm-started re-solves at the same `tau`. Instances are
/// random states in `[-1, 1]`, parameters around `theta0` and integer
/// profiles; those near an active-set change are skipped and counted.
pub fn check_sensitivities(
    ocp: &ExampleOcp,
    ip_opts: &IpOptions,
    opts: &GradcheckOptions,
    seed: u64,
) -> Result<SensitivityReport> {
    opts.validate()?;
    // the check needs the tau-system solved to rounding level
    let solve_opts = IpOptions { tolerance: 1e-13, ..*ip_opts };
    let threshold = opts.proximity.min(sens::default_proximity_threshold(ip_opts.tau_target));
    let mut rng = substream(seed, StreamKey::new(Purpose::Check, 0, 0));
    let mut out = SensitivityReport { checked: 0, flagged: 0, worst: 0.0, worst_instance: 0 };
    let mut drawn = 0usize;
    while out.checked < opts.instances {
        drawn += 1;
        if drawn > 20 * opts.instances {
            return Err(Error::Unsupported(format!(
                "only {} of {drawn} instances were away from active-set changes",
                out.checked
            )));
        }
        let s = rng.gen_range(-1.0..1.0);
        let theta = ThetaVector::new(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.1..0.5),
            rng.gen_range(0.0..2.0),
            rng.gen_range(-0.05..0.1),
        );
        let bits: Vec<u8> = (0..ocp.horizon()).map(|_| rng.gen_range(0..2u8)).collect();
        let profile = IntegerProfile::from_bits(&bits);
        let nlp = FixedIntegerNlp::scalar(ocp, s, &theta, profile.clone(), 0.0)?;
        let z = ip::solve(&nlp, &solve_opts, None)?.into_solved()?.point;
        let (z, _) = ip::polish(&nlp, &z, 5)?;
        if sens::active_set_proximity(&z, &nlp) < threshold {
            out.flagged += 1;
            continue;
        }
        let dz = if opts.corrupt_jacobian {
            sens::solution_sensitivity(&z, &CorruptedJacobian(&nlp))?
        } else {
            sens::solution_sensitivity(&z, &nlp)?
        };
        let grad = sens::grad_value_wrt_theta(&z, &nlp, solve_opts.tolerance)?;
        let np = nlp.param_dim();
        let mut worst: f64 = 0.0;
        for p in 0..np {
            let resolve = |delta: f64| -> Result<Vec<f64>> {
                let moved = if p < ThetaVector::DIM {
                    let th = theta.with(p, theta.get(p) + delta);
                    FixedIntegerNlp::scalar(ocp, s, &th, profile.clone(), 0.0)?
                } else {
                    FixedIntegerNlp::scalar(ocp, s, &theta, profile.clone(), delta)?
                };
                let zz = ip::solve(&moved, &solve_opts, Some(&z))?.into_solved()?.point;
                let (zz, _) = ip::polish(&moved, &zz, 5)?;
                let mut v = flatten(&zz);
                v.push(barrier_value(&moved, &zz));
                Ok(v)
            };
            let fd = richardson(resolve, opts.step)?;
            let n = fd.len() - 1;
            for r in 0..n {
                worst = worst.max(scaled_error(fd[r], dz[(r, p)], opts));
            }
            if p < ThetaVector::DIM {
                worst = worst.max(scaled_error(fd[n], grad[p], opts));
            }
        }
        if worst > out.worst || out.checked == 0 {
            out.worst = worst;
            out.worst_instance = drawn - 1;
        }
        out.checked += 1;
    }
    Ok(out)
}

/// Both gradient estimates on one batch at `theta`.
pub fn check_consistency(trainer: &Trainer, theta: &ThetaVector, seed: u64, opts: &GradcheckOptions) -> Result<ConsistencyReport> {
    let (record, _) = trainer.step(theta, seed, 0)?;
    Ok(ConsistencyReport {
        cosine: record.cosine,
        direct: record.gradients.direct,
        compatible: record.gradients.compatible,
        min_cosine: opts.min_cosine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ocp() -> ExampleOcp {
        ExampleOcp::new(10, 0.5 * (1.0 + 5f64.sqrt())).unwrap()
    }

    #[test]
    fn sensitivities_pass_at_default_tau() {
        let opts = GradcheckOptions { instances: 10, ..Default::default() };
        let r = check_sensitivities(&ocp(), &IpOptions::default(), &opts, 3).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 10);
    }

    #[test]
    fn sensitivities_pass_at_coarse_tau() {
        let opts = GradcheckOptions { instances: 10, ..Default::default() };
        let ip = IpOptions { tau_target: 1e-2, ..IpOptions::default() };
        let r = check_sensitivities(&ocp(), &ip, &opts, 3).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn corrupted_jacobian_is_caught() {
        let opts = GradcheckOptions { instances: 3, corrupt_jacobian: true, ..Default::default() };
        let r = check_sensitivities(&ocp(), &IpOptions::default(), &opts, 3).unwrap();
        assert!(!r.passed());
    }
}
