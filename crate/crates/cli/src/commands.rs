//! The four subcommands as library functions.

use std::cell::RefCell;
use std::fmt::Write as _;
use std::path::Path;

use mimpc_core::env::{closed_loop_performance, PerformanceEstimate};
use mimpc_core::gradcheck::{self, GradcheckOptions, GradcheckReport};
use mimpc_core::ocp::ThetaVector;
use mimpc_core::policy::MpcPolicy;
use mimpc_core::trainer::{StepRecord, Trainer, TrainingLog};

use crate::artifact::{self, PerformanceRow, StepLog};
use crate::config::RunConfig;
use crate::error::CliError;

/// Files covered by the manifest of a training run.
pub const RUN_FILES: [&str; 6] = [
    artifact::CONFIG_FILE,
    artifact::THETA_FILE,
    artifact::PERFORMANCE_FILE,
    artifact::GRADIENTS_FILE,
    artifact::TRAJECTORIES_FIRST_FILE,
    artifact::TRAJECTORIES_LAST_FILE,
];

fn trainer(cfg: &RunConfig) -> Result<Trainer, CliError> {
    Ok(Trainer::new(cfg.ocp()?, cfg.plant(), cfg.ip, cfg.train_config())?)
}

/// Monte-Carlo `J` of the policy at `theta`; rollouts of step `step` use
/// their own random streams.
pub fn estimate_performance(cfg: &RunConfig, theta: &ThetaVector, rollouts: usize, step: u64) -> Result<PerformanceEstimate, CliError> {
    let policy = MpcPolicy::new(&cfg.ocp()?, theta, cfg.exploration, cfg.ip)?;
    Ok(closed_loop_performance(&cfg.plant(), &policy, &cfg.evaluation_config(rollouts), cfg.seed, step)?)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: TrainingLog,
    pub j0: PerformanceEstimate,
    pub j_final: PerformanceEstimate,
    pub manifest: artifact::Manifest,
}

impl TrainOutcome {
    pub fn ratio(&self) -> f64 {
        self.j_final.mean / self.j0.mean
    }
}

/// Trains from `cfg.theta0` and writes the run directory `out`. Rows are
/// flushed as steps complete, so a failed run leaves its partial log behind.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let snapshot = RunConfig { output: None, ..cfg.clone() };
    std::fs::write(out.join(artifact::CONFIG_FILE), snapshot.to_toml())?;
    let tr = trainer(cfg)?;
    let rollouts = cfg.evaluation.rollouts;
    let j0 = estimate_performance(cfg, &cfg.theta0, rollouts, 0)?;
    log::info!("J(theta0) = {:.6} +- {:.1e}", j0.mean, j0.stderr);

    let log = RefCell::new(StepLog::create(out)?);
    let failure: RefCell<Option<CliError>> = RefCell::new(None);
    let observe = |r: &StepRecord| {
        let mut row = PerformanceRow::from_step(r);
        if r.step == 0 {
            row.j_mean = Some(j0.mean);
            row.j_stderr = Some(j0.stderr);
        }
        row.j_ratio = row.j_mean.map(|m| m / j0.mean);
        let mut w = log.borrow_mut();
        let res = w.theta(r.step, &r.theta).and_then(|_| w.performance(&row)).and_then(|_| w.gradients(r));
        if let Err(e) = res {
            failure.borrow_mut().get_or_insert(e);
        }
    };
    let result = tr.train(&cfg.theta0, cfg.seed, observe);
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let training = match result {
        Ok(l) => l,
        Err(f) => {
            artifact::write_trajectories(out, artifact::TRAJECTORIES_FIRST_FILE, &f.log.first_trajectories)?;
            artifact::write_manifest(out, cfg.seed, &RUN_FILES)?;
            return Err(CliError::from(f.error));
        }
    };

    let steps = cfg.train.steps;
    let theta_s = training.final_theta;
    let j_final = estimate_performance(cfg, &theta_s, rollouts, steps as u64)?;
    let v = tr.critic(&tr.policy(&theta_s)?)?;
    {
        let mut w = log.borrow_mut();
        w.theta(steps, &theta_s)?;
        w.performance(&PerformanceRow {
            step: steps,
            j_mean: Some(j_final.mean),
            j_stderr: Some(j_final.stderr),
            j_ratio: Some(j_final.mean / j0.mean),
            j_critic: v.eval(cfg.train.initial_state),
            critic_sweeps: v.sweeps,
            critic_residual: v.residual,
            critic_clamped: v.clamped,
            ..PerformanceRow::default()
        })?;
    }
    drop(log);
    artifact::write_trajectories(out, artifact::TRAJECTORIES_FIRST_FILE, &training.first_trajectories)?;
    artifact::write_trajectories(out, artifact::TRAJECTORIES_LAST_FILE, &training.last_trajectories)?;
    let manifest = artifact::write_manifest(out, cfg.seed, &RUN_FILES)?;
    log::info!(
        "J(theta_S) = {:.6} +- {:.1e}, ratio {:.4}, manifest {}",
        j_final.mean,
        j_final.stderr,
        j_final.mean / j0.mean,
        manifest.hash
    );
    Ok(TrainOutcome {
        log: training,
        j0,
        j_final,
        manifest,
    })
}

/// One branch of a policy query.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchReport {
    pub integer: u8,
    /// `None` when the branch is infeasible.
    pub value: Option<f64>,
    pub probability: f64,
    pub continuous: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub state: f64,
    pub branches: Vec<BranchReport>,
    /// The deterministic action `(a_c, a_i)`.
    pub action: (f64, u8),
}

impl SolveReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "state {}", self.state);
        let _ = writeln!(s, "{:>3} {:>22} {:>12} {:>22}", "i", "value", "probability", "a_c");
        for b in &self.branches {
            match (b.value, b.continuous) {
                (Some(v), Some(u)) => {
                    let _ = writeln!(s, "{:>3} {:>22} {:>12.6e} {:>22}", b.integer, v, b.probability, u);
                }
                _ => {
                    let _ = writeln!(s, "{:>3} {:>22} {:>12.6e} {:>22}", b.integer, "infeasible", b.probability, "-");
                }
            }
        }
        let _ = writeln!(s, "action a_c = {}, a_i = {}", self.action.0, self.action.1);
        s
    }
}

/// Branch values, softmax probabilities and continuous inputs at `state`.
pub fn solve(cfg: &RunConfig, theta: &ThetaVector, state: f64) -> Result<SolveReport, CliError> {
    let policy = MpcPolicy::new(&cfg.ocp()?, theta, cfg.exploration, cfg.ip)?;
    let (table, probs) = policy.integer_policy_distribution(state)?;
    let branches = table
        .branches
        .iter()
        .enumerate()
        .map(|(i, b)| BranchReport {
            integer: i as u8,
            value: b.as_ref().map(|p| p.value),
            probability: probs[i],
            continuous: b.as_ref().map(|p| p.u[0]),
        })
        .collect();
    let (i, plan) = table.best().expect("softmax succeeded, so a branch is feasible");
    Ok(SolveReport {
        state,
        branches,
        action: (plan.u[0], i),
    })
}

/// `solve` over `n` evenly spaced states of `[lo, hi]`, written as CSV with
/// columns `s, value_i.., probability_i.., a_c_i..` (empty when infeasible).
pub fn solve_sweep(cfg: &RunConfig, theta: &ThetaVector, lo: f64, hi: f64, n: usize, path: &Path) -> Result<(), CliError> {
    if n < 2 || !(lo < hi) {
        return Err(CliError::Validation(format!("sweep needs n >= 2 and lo < hi, got {n} on [{lo}, {hi}]")));
    }
    let file = std::fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    let mut header_done = false;
    for k in 0..n {
        let s = lo + (hi - lo) * k as f64 / (n - 1) as f64;
        let r = solve(cfg, theta, s)?;
        if !header_done {
            let mut h = vec!["s".to_string()];
            for b in &r.branches {
                h.push(format!("value_{}", b.integer));
            }
            for b in &r.branches {
                h.push(format!("probability_{}", b.integer));
            }
            for b in &r.branches {
                h.push(format!("a_c_{}", b.integer));
            }
            w.write_record(&h)?;
            header_done = true;
        }
        let mut row = vec![format!("{s}")];
        row.extend(r.branches.iter().map(|b| b.value.map(|v| format!("{v}")).unwrap_or_default()));
        row.extend(r.branches.iter().map(|b| format!("{}", b.probability)));
        row.extend(r.branches.iter().map(|b| b.continuous.map(|v| format!("{v}")).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Sensitivity checks against finite differences, then the agreement of the
/// two gradient estimates on one batch at `theta0`.
pub fn gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckReport, CliError> {
    let sensitivities = gradcheck::check_sensitivities(&cfg.ocp()?, &cfg.ip, opts, cfg.seed)?;
    let consistency = if opts.corrupt_jacobian {
        None
    } else {
        Some(gradcheck::check_consistency(&trainer(cfg)?, &cfg.theta0, cfg.seed, opts)?)
    };
    Ok(GradcheckReport {
        sensitivities,
        consistency,
    })
}

pub fn render_gradcheck(r: &GradcheckReport) -> String {
    let mut s = String::new();
    let sr = &r.sensitivities;
    let _ = writeln!(
        s,
        "sensitivities: {} instances checked, {} skipped near an active-set change, worst error {:.3} of the allowed",
        sr.checked, sr.flagged, sr.worst
    );
    if let Some(c) = &r.consistency {
        let _ = writeln!(s, "gradient agreement: cosine {:.6} (need >= {})", c.cosine, c.min_cosine);
        let _ = writeln!(s, "  direct     {:?}", c.direct);
        let _ = writeln!(s, "  compatible {:?}", c.compatible);
    }
    let _ = writeln!(s, "{}", if r.passed() { "PASS" } else { "FAIL" });
    s
}

/// Parses `name=value` pairs such as `c=2,b=0.01` onto `base`.
pub fn theta_overrides(base: &ThetaVector, overrides: &str) -> Result<ThetaVector, CliError> {
    let mut theta = *base;
    for part in overrides.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("expected name=value, got `{part}`")))?;
        let index = ThetaVector::NAMES
            .iter()
            .position(|n| *n == name.trim())
            .ok_or_else(|| CliError::Validation(format!("unknown parameter `{name}`; expected one of {:?}", ThetaVector::NAMES)))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("`{value}` is not a number")))?;
        theta = theta.with(index, v);
    }
    theta.validate()?;
    Ok(theta)
}
