//! Independent reference solvers shared by the integration tests.
#![allow(dead_code)]

use mimpc_core::critic::{advantage, advantage_slope, policy_evaluation, GridConfig, PolicyTransitions};
use mimpc_core::env::Plant;
use mimpc_core::ip::{self, IpOptions, PrimalDualPoint};
use mimpc_core::minlp::IntegerProfile;
use mimpc_core::nlp::{FixedIntegerNlp, Nlp};
use mimpc_core::ocp::{ExampleOcp, ThetaVector};
use mimpc_core::policy::{ExplorationConfig, MixedAction, MpcPolicy, PolicySample};
use mimpc_core::sens::CovarianceForm;
use mimpc_core::trainer::record_sensitivities;
use mimpc_core::sens;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn golden() -> f64 {
    0.5 * (1.0 + 5f64.sqrt())
}

/// Cost of the benchmark written out directly from its definition.
pub fn direct_cost(ocp: &ExampleOcp, s: f64, th: &ThetaVector, profile: &[u8], u: &[f64], d: f64) -> f64 {
    let mut x = s;
    let mut total = d * u[0];
    for k in 0..ocp.horizon() {
        let i = f64::from(profile[k]);
        total += 0.5 * (x - th.s_ref).powi(2)
            + 0.5 * (u[k] - th.a_ref).powi(2)
            + th.w * i
            + th.c * (x.abs() - 0.2).max(0.0);
        x += u[k] * i + th.b;
    }
    total + 0.5 * ocp.terminal_weight() * (x - th.s_ref).powi(2)
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub primal: f64,
    pub dual: f64,
    pub u: Vec<f64>,
    pub sweeps: usize,
    /// Multipliers of the penalty kinks of stages `1..N-1`.
    pub lambda: Vec<f64>,
}

/// Fixed-profile problem solved through its dual.
///
/// The penalty `c max(|z| - 0.2, 0) = max_{|l| <= c} l z - 0.2 |l|` turns the
/// problem into a concave maximization over a box in the multipliers of
/// stages `1..N-1`, solved by exact coordinate ascent. The returned primal and
/// dual values bracket the optimum.
pub fn dual_fixed_profile(
    ocp: &ExampleOcp,
    s: f64,
    th: &ThetaVector,
    profile: &[u8],
    d: f64,
    gap: f64,
) -> DualSolution {
    let n = ocp.horizon();
    let p = ocp.terminal_weight();
    // x_k = xbar_k + B_k u
    let mut xbar = vec![s; n + 1];
    let mut bmat = DMatrix::zeros(n + 1, n);
    for k in 1..=n {
        xbar[k] = xbar[k - 1] + th.b;
        for j in 0..n {
            bmat[(k, j)] = bmat[(k - 1, j)];
        }
        bmat[(k, k - 1)] = f64::from(profile[k - 1]);
    }
    let mut h = DMatrix::identity(n, n);
    let mut g = DVector::from_element(n, -th.a_ref);
    g[0] += d;
    let mut const_term = 0.5 * n as f64 * th.a_ref * th.a_ref;
    for k in 0..=n {
        let wgt = if k == n { p } else { 1.0 };
        let row = bmat.row(k).transpose();
        h += wgt * &row * row.transpose();
        g += wgt * (xbar[k] - th.s_ref) * &row;
        const_term += 0.5 * wgt * (xbar[k] - th.s_ref).powi(2);
    }
    const_term += th.w * profile.iter().map(|&i| f64::from(i)).sum::<f64>();
    const_term += th.c * (s.abs() - 0.2).max(0.0);
    let hinv = h.clone().cholesky().expect("positive definite").inverse();
    let m = n - 1;
    // columns H^-1 B_k'
    let cols: Vec<DVector<f64>> = (1..n).map(|k| &hinv * bmat.row(k).transpose()).collect();
    let q: Vec<f64> = (1..n).map(|k| (bmat.row(k) * &cols[k - 1])[0]).collect();
    let mut lambda = vec![0.0; m];
    let mut u = -(&hinv * &g);
    let dual_value = |lambda: &[f64], u: &DVector<f64>| {
        // L(u(lambda), lambda) with u the minimizer
        let mut v = 0.5 * (u.transpose() * &h * u)[0] + g.dot(u) + const_term;
        for k in 1..n {
            let z = xbar[k] + (bmat.row(k) * u)[0];
            v += lambda[k - 1] * z - 0.2 * lambda[k - 1].abs();
        }
        v
    };
    let mut sweeps = 0;
    loop {
        let uv: Vec<f64> = u.iter().cloned().collect();
        let primal = direct_cost(ocp, s, th, profile, &uv, d);
        let dual = dual_value(&lambda, &u);
        if primal - dual <= gap * (1.0 + primal.abs()) || sweeps >= 200_000 {
            return DualSolution {
                primal,
                dual,
                u: uv,
                sweeps,
                lambda,
            };
        }
        sweeps += 1;
        for k in 1..n {
            let z = xbar[k] + (bmat.row(k) * &u)[0];
            let old = lambda[k - 1];
            let new = if q[k - 1] <= 1e-300 {
                if z > 0.2 {
                    th.c
                } else if z < -0.2 {
                    -th.c
                } else {
                    0.0
                }
            } else {
                let mid = old + z / q[k - 1];
                let thr = 0.2 / q[k - 1];
                (mid.signum() * (mid.abs() - thr).max(0.0)).clamp(-th.c, th.c)
            };
            if new != old {
                u -= (new - old) * &cols[k - 1];
                lambda[k - 1] = new;
            }
        }
    }
}

pub struct Instance {
    pub s: f64,
    pub theta: ThetaVector,
    pub profile: Vec<u8>,
}

/// Random states, parameters and profiles around the baseline.
pub fn random_instance(rng: &mut ChaCha8Rng, horizon: usize) -> Instance {
    Instance {
        s: rng.gen_range(-1.5..1.5),
        theta: ThetaVector::new(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.1..0.5),
            rng.gen_range(0.0..2.0),
            rng.gen_range(-0.05..0.1),
        ),
        profile: (0..horizon).map(|_| rng.gen_range(0..2u8)).collect(),
    }
}

pub fn random_instances(seed: u64, count: usize, horizon: usize) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_instance(&mut rng, horizon)).collect()
}

/// Region of `x_k` relative to the penalty kinks at `+-0.2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Face {
    Below,
    AtLower,
    Inside,
    AtUpper,
    Above,
}

#[derive(Debug, Clone)]
pub struct ActiveSetSolution {
    pub value: f64,
    pub u: Vec<f64>,
    /// Active-set guesses tried before the optimality conditions held.
    pub attempts: usize,
}

/// Dense active-set oracle for the fixed-profile problem.
///
/// The dual ascent of [`dual_fixed_profile`] proposes which penalty kinks are
/// active; the equality-constrained QP of that active set is then solved
/// exactly with one dense KKT system and accepted only if primal region
/// feasibility and multiplier bounds hold. Otherwise the ascent is tightened
/// and the guess repeated.
pub fn active_set_fixed_profile(
    ocp: &ExampleOcp,
    s: f64,
    th: &ThetaVector,
    profile: &[u8],
    d: f64,
) -> ActiveSetSolution {
    let n = ocp.horizon();
    let p = ocp.terminal_weight();
    let mut xbar = vec![s; n + 1];
    let mut bmat = DMatrix::zeros(n + 1, n);
    for k in 1..=n {
        xbar[k] = xbar[k - 1] + th.b;
        for j in 0..n {
            bmat[(k, j)] = bmat[(k - 1, j)];
        }
        bmat[(k, k - 1)] = f64::from(profile[k - 1]);
    }
    let mut h = DMatrix::identity(n, n);
    let mut g = DVector::from_element(n, -th.a_ref);
    g[0] += d;
    for k in 0..=n {
        let wgt = if k == n { p } else { 1.0 };
        let row = bmat.row(k).transpose();
        h += wgt * &row * row.transpose();
        g += wgt * (xbar[k] - th.s_ref) * &row;
    }
    let mut attempts = 0;
    let mut gap = 1e-8;
    loop {
        attempts += 1;
        let dual = dual_fixed_profile(ocp, s, th, profile, d, gap);
        let tol = 1e-7;
        let faces: Vec<Face> = (1..n)
            .map(|k| {
                let z = xbar[k] + (0..n).map(|j| bmat[(k, j)] * dual.u[j]).sum::<f64>();
                let movable = bmat.row(k).amax() > 0.0;
                if movable && (z - 0.2).abs() <= tol {
                    Face::AtUpper
                } else if movable && (z + 0.2).abs() <= tol {
                    Face::AtLower
                } else if z > 0.2 {
                    Face::Above
                } else if z < -0.2 {
                    Face::Below
                } else {
                    Face::Inside
                }
            })
            .collect();
        let eq: Vec<usize> = (1..n)
            .filter(|&k| matches!(faces[k - 1], Face::AtLower | Face::AtUpper))
            .collect();
        let m = eq.len();
        let mut kkt = DMatrix::zeros(n + m, n + m);
        let mut rhs = DVector::zeros(n + m);
        kkt.view_mut((0, 0), (n, n)).copy_from(&h);
        for j in 0..n {
            rhs[j] = -g[j];
        }
        for k in 1..n {
            let sign = match faces[k - 1] {
                Face::Above => 1.0,
                Face::Below => -1.0,
                _ => 0.0,
            };
            for j in 0..n {
                rhs[j] -= sign * th.c * bmat[(k, j)];
            }
        }
        for (r, &k) in eq.iter().enumerate() {
            let target = if faces[k - 1] == Face::AtUpper { 0.2 } else { -0.2 };
            for j in 0..n {
                kkt[(n + r, j)] = bmat[(k, j)];
                kkt[(j, n + r)] = bmat[(k, j)];
            }
            rhs[n + r] = target - xbar[k];
        }
        let sol = kkt.clone().lu().solve(&rhs);
        if let Some(sol) = sol {
            let u: Vec<f64> = sol.rows(0, n).iter().cloned().collect();
            let mut ok = true;
            for k in 1..n {
                let z = xbar[k] + (0..n).map(|j| bmat[(k, j)] * u[j]).sum::<f64>();
                ok &= match faces[k - 1] {
                    Face::Above => z >= 0.2 - 1e-12,
                    Face::Below => z <= -0.2 + 1e-12,
                    Face::Inside => z.abs() <= 0.2 + 1e-12,
                    _ => true,
                };
            }
            for (r, &k) in eq.iter().enumerate() {
                let lam = sol[n + r];
                ok &= match faces[k - 1] {
                    Face::AtUpper => (-1e-10..=th.c + 1e-10).contains(&lam),
                    _ => (-th.c - 1e-10..=1e-10).contains(&lam),
                };
            }
            if ok {
                return ActiveSetSolution {
                    value: direct_cost(ocp, s, th, profile, &u, d),
                    u,
                    attempts,
                };
            }
        }
        assert!(gap > 1e-15, "active set not identified");
        gap *= 1e-2;
    }
}

/// Outcome of comparing IFT sensitivities with finite differences of re-solves.
#[derive(Debug, Clone, Copy)]
pub struct SensitivityCheck {
    pub checked: usize,
    pub flagged: usize,
    /// Largest error over checked instances, in units of the allowed error.
    pub worst: f64,
}

fn barrier_value(nlp: &FixedIntegerNlp, z: &PrimalDualPoint) -> f64 {
    let ev = nlp.evaluate(&z.y);
    ev.objective - z.tau * ev.ineq.iter().map(|h| (-h).ln()).sum::<f64>()
}

fn flatten(z: &PrimalDualPoint) -> Vec<f64> {
    z.y.iter().chain(&z.lambda).chain(&z.mu).cloned().collect()
}

/// Relative 1e-4 where the reference exceeds 1e-6 in magnitude, absolute 1e-8 below.
pub fn scaled_error(reference: f64, value: f64) -> f64 {
    if reference.abs() > 1e-6 {
        (reference - value).abs() / reference.abs() / 1e-4
    } else {
        (reference - value).abs() / 1e-8
    }
}

/// Central differences at `h` and `2h` combined by Richardson extrapolation.
fn richardson(f: impl Fn(f64) -> Vec<f64>, h: f64) -> Vec<f64> {
    let (p1, m1, p2, m2) = (f(h), f(-h), f(2.0 * h), f(-2.0 * h));
    (0..p1.len())
        .map(|i| {
            let d1 = (p1[i] - m1[i]) / (2.0 * h);
            let d2 = (p2[i] - m2[i]) / (4.0 * h);
            (4.0 * d1 - d2) / 3.0
        })
        .collect()
}

/// Checks `dz/dtheta`, `dz/dd` (which contains `du_0/dd`) and the value
/// gradient against extrapolated central differences of warm-started,
/// polished re-solves at fixed `tau`, on `count` unflagged instances.
pub fn sensitivity_check(seed: u64, count: usize, tau: f64) -> SensitivityCheck {
    let ocp = ExampleOcp::new(10, golden()).unwrap();
    let opts = IpOptions { tolerance: 1e-13, tau_target: tau, ..IpOptions::default() };
    let h = 1e-4;
    let mut out = SensitivityCheck { checked: 0, flagged: 0, worst: 0.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while out.checked < count {
        let inst = random_instance(&mut rng, 10);
        let s = inst.s.clamp(-1.0, 1.0);
        let theta = inst.theta;
        let profile = IntegerProfile::from_bits(&inst.profile);
        let nlp = FixedIntegerNlp::scalar(&ocp, s, &theta, profile.clone(), 0.0).unwrap();
        let z = ip::solve(&nlp, &opts, None).unwrap().into_solved().unwrap().point;
        let (z, _) = ip::polish(&nlp, &z, 5).unwrap();
        if sens::active_set_proximity(&z, &nlp) < sens::default_proximity_threshold(z.tau) {
            out.flagged += 1;
            continue;
        }
        let dz = sens::solution_sensitivity(&z, &nlp).unwrap();
        let grad = sens::grad_value_wrt_theta(&z, &nlp, opts.tolerance).unwrap();
        let mut worst: f64 = 0.0;
        for p in 0..6 {
            let resolve = |delta: f64| {
                let nlp2 = if p < 5 {
                    let th = theta.with(p, theta.get(p) + delta);
                    FixedIntegerNlp::scalar(&ocp, s, &th, profile.clone(), 0.0).unwrap()
                } else {
                    FixedIntegerNlp::scalar(&ocp, s, &theta, profile.clone(), delta).unwrap()
                };
                let zz = ip::solve(&nlp2, &opts, Some(&z)).unwrap().into_solved().unwrap().point;
                let (zz, _) = ip::polish(&nlp2, &zz, 5).unwrap();
                let mut v = flatten(&zz);
                v.push(barrier_value(&nlp2, &zz));
                v
            };
            let fd = richardson(resolve, h);
            let n = fd.len() - 1;
            for r in 0..n {
                worst = worst.max(scaled_error(fd[r], dz[(r, p)]));
            }
            if p < 5 {
                worst = worst.max(scaled_error(fd[n], grad[p]));
            }
        }
        out.checked += 1;
        out.worst = out.worst.max(worst);
    }
    out
}

/// Population form of the continuous part of both gradient estimates at
/// `theta0`: `sum_s sum_i p_i grad pi_c E_d[M (e - c) A] / sigma_c` against
/// `sum_s sum_i p_i grad pi_c dA/da_c`, with the expectation over `d` taken by
/// a fine trapezoid rule instead of sampling. Branches flagged near an
/// active-set change are skipped. Returns the relative gap.
pub fn continuous_compatibility_gap(sigma_c: f64, states: &[f64], grid: &GridConfig) -> f64 {
    let ocp = ExampleOcp::new(10, golden()).unwrap();
    let theta = ThetaVector::baseline().with(ThetaVector::B, 0.0);
    let plant = Plant::default();
    let policy =
        MpcPolicy::new(&ocp, &theta, ExplorationConfig { sigma_i: 0.02, sigma_c }, IpOptions::default()).unwrap();
    let model = PolicyTransitions { policy: &policy, plant: &plant, hermite_nodes: grid.hermite_nodes, noise_nodes: grid.noise_nodes };
    let v = policy_evaluation(&model, grid, 0.95).unwrap();
    let nn = grid.noise_nodes;
    // standard normal on [-8, 8]
    let nodes: Vec<(f64, f64)> = (0..=3200)
        .map(|k| {
            let x = -8.0 + 0.005 * k as f64;
            let edge = if k == 0 || k == 3200 { 0.5 } else { 1.0 };
            (x, edge * 0.005 * (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
        })
        .collect();
    let mut compat = vec![0.0; ThetaVector::DIM];
    let mut direct = vec![0.0; ThetaVector::DIM];
    for &s in states {
        let (table, probs) = policy.integer_policy_distribution(s).unwrap();
        for (i, p) in probs.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            let plan = table.branches[i].as_ref().unwrap();
            let nominal = plan.u[0];
            let sample = PolicySample {
                action: MixedAction::new(nominal, i as u8),
                d: 0.0,
                e: 0.0,
                nominal,
                log_probability: p.ln(),
                probabilities: probs.clone(),
                completion: plan.profile.clone(),
            };
            let (bundle, _) = record_sensitivities(&policy, s, &sample, CovarianceForm::InverseGram, 1e-4).unwrap();
            if bundle.proximity < sens::default_proximity_threshold(policy.ip_options().tau_target) {
                continue;
            }
            let mut expected = 0.0;
            for (x, w) in &nodes {
                let u0 = policy.exact_plan(s, &plan.profile, sigma_c.sqrt() * x).unwrap().u[0];
                let a = advantage(&plant, &v, 0.95, nn, s, &MixedAction::new(u0, i as u8));
                expected += w * bundle.m * (u0 - nominal - bundle.c) * a / sigma_c;
            }
            let slope = advantage_slope(&plant, &v, 0.95, nn, s, &MixedAction::new(nominal, i as u8), 1e-4);
            for (j, g) in bundle.policy_gradient.iter().enumerate() {
                compat[j] += p * g * expected;
                direct[j] += p * g * slope;
            }
        }
    }
    let diff: f64 = compat.iter().zip(&direct).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    diff / direct.iter().map(|b| b * b).sum::<f64>().sqrt()
}
