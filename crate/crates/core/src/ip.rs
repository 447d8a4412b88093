//! Primal-dual interior-point solver.
//!
//! The barrier KKT system at a fixed barrier parameter `tau` is
//!
//! ```text
//! r(z) = [ grad_y L ; f(y) ; diag(mu) h(y) + tau ] = 0,   L = Phi + lambda' f + mu' h
//! ```
//!
//! with `h(y) < 0` and `mu > 0`. The solver follows the central path, dividing
//! `tau` by ten each time the current system is solved to `10 tau`, until it
//! reaches `tau_target`, where it polishes to `min(tolerance, tau_target / 10)`. The point it
//! returns therefore solves the `tau_target` system, which is the one the
//! sensitivities differentiate.
//!
//! Newton systems are reduced by eliminating `d mu` and factorized with a
//! banded LU in the ordering the NLP provides.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::BandedLu;
use crate::nlp::{FixedIntegerNlp, Nlp, NlpEval, PhaseOne};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IpOptions {
    pub tau_target: f64,
    pub tau_decrease: f64,
    pub fraction_to_boundary: f64,
    pub initial_multiplier: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Phase-I violation above which the NLP is declared infeasible.
    pub infeasibility_threshold: f64,
}

impl Default for IpOptions {
    fn default() -> Self {
        Self {
            tau_target: 1e-6,
            tau_decrease: 0.1,
            fraction_to_boundary: 0.995,
            initial_multiplier: 1.0,
            tolerance: 1e-8,
            max_iterations: 100,
            infeasibility_threshold: 1e-6,
        }
    }
}

impl IpOptions {
    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau_target = tau;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.tau_target > 0.0
            && self.tau_decrease > 0.0
            && self.tau_decrease < 1.0
            && self.fraction_to_boundary > 0.0
            && self.fraction_to_boundary < 1.0
            && self.initial_multiplier > 0.0
            && self.tolerance > 0.0
            && self.max_iterations > 0
            && self.infeasibility_threshold >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid interior-point options {self:?}")))
        }
    }
}

/// `z = (y, lambda, mu)` together with the barrier parameter it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimalDualPoint {
    pub y: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Solved,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub objective: f64,
    pub point: PrimalDualPoint,
    pub iterations: usize,
    pub residual: f64,
    /// Phase-I violation when the status is infeasible.
    pub violation: f64,
}

impl SolveReport {
    pub fn is_solved(&self) -> bool {
        self.status == SolveStatus::Solved
    }

    /// Turns non-solved statuses into errors.
    pub fn into_solved(self) -> Result<SolveReport> {
        match self.status {
            SolveStatus::Solved => Ok(self),
            SolveStatus::Infeasible => Err(Error::Infeasible {
                violation: self.violation,
            }),
            SolveStatus::MaxIterations => Err(Error::MaxIterations {
                iterations: self.iterations,
                residual: self.residual,
            }),
        }
    }
}

/// Barrier KKT residual `[grad_y L; f; diag(mu) h + tau]` at `z`.
pub fn kkt_residual<N: Nlp + ?Sized>(z: &PrimalDualPoint, nlp: &N) -> Vec<f64> {
    let ev = nlp.evaluate(&z.y);
    residual_from(&ev, z).as_slice().to_vec()
}

fn residual_from(ev: &NlpEval, z: &PrimalDualPoint) -> DVector<f64> {
    let (ny, ne, ni) = (ev.grad.len(), ev.eq.len(), ev.ineq.len());
    let lam = DVector::from_column_slice(&z.lambda);
    let mu = DVector::from_column_slice(&z.mu);
    let stat = &ev.grad + ev.eq_jac.tr_mul(&lam) + ev.ineq_jac.tr_mul(&mu);
    let mut r = DVector::zeros(ny + ne + ni);
    r.rows_mut(0, ny).copy_from(&stat);
    r.rows_mut(ny, ne).copy_from(&ev.eq);
    for j in 0..ni {
        r[ny + ne + j] = z.mu[j] * ev.ineq[j] + z.tau;
    }
    r
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m: f64, x| m.max(x.abs()))
}

/// Factorized Newton matrix `dr/dz` of the barrier KKT system at a point.
///
/// Solves `dr/dz dz = rhs` for arbitrary right-hand sides, eliminating the
/// inequality multipliers.
pub struct KktFactor {
    lu: BandedLu,
    order: Vec<usize>,
    ineq: DVector<f64>,
    ineq_jac: DMatrix<f64>,
    mu: Vec<f64>,
    ny: usize,
    ne: usize,
}

impl KktFactor {
    pub fn new<N: Nlp + ?Sized>(nlp: &N, z: &PrimalDualPoint) -> Result<Self> {
        let ev = nlp.evaluate(&z.y);
        let hess = nlp.lagrangian_hessian(&z.y, &z.lambda, &z.mu);
        Self::assemble(nlp, &ev, hess, &z.mu, 0.0)
    }

    fn assemble<N: Nlp + ?Sized>(
        nlp: &N,
        ev: &NlpEval,
        hess: DMatrix<f64>,
        mu: &[f64],
        regularization: f64,
    ) -> Result<Self> {
        let (ny, ne, ni) = (nlp.primal_dim(), nlp.eq_dim(), nlp.ineq_dim());
        if ev.ineq.iter().any(|&h| !(h < 0.0)) {
            return Err(Error::InvalidArgument("point is not strictly interior".into()));
        }
        let order = nlp
            .kkt_ordering()
            .unwrap_or_else(|| (0..ny + ne).collect());
        let mut pos = vec![0; ny + ne];
        for (p, &u) in order.iter().enumerate() {
            pos[u] = p;
        }
        let mut k = DMatrix::zeros(ny + ne, ny + ne);
        for r in 0..ny {
            for c in 0..ny {
                k[(pos[r], pos[c])] = hess[(r, c)];
            }
            k[(pos[r], pos[r])] += regularization;
        }
        // H - Jh' diag(mu / h) Jh, touching only nonzero constraint rows.
        for j in 0..ni {
            let weight = -mu[j] / ev.ineq[j];
            let cols: Vec<usize> = (0..ny).filter(|&c| ev.ineq_jac[(j, c)] != 0.0).collect();
            for &a in &cols {
                for &b in &cols {
                    k[(pos[a], pos[b])] += weight * ev.ineq_jac[(j, a)] * ev.ineq_jac[(j, b)];
                }
            }
        }
        for r in 0..ne {
            for c in 0..ny {
                let v = ev.eq_jac[(r, c)];
                if v != 0.0 {
                    k[(pos[ny + r], pos[c])] = v;
                    k[(pos[c], pos[ny + r])] = v;
                }
            }
            k[(pos[ny + r], pos[ny + r])] -= regularization;
        }
        let lu = BandedLu::factor(&k)?;
        Ok(Self {
            lu,
            order,
            ineq: ev.ineq.clone(),
            ineq_jac: ev.ineq_jac.clone(),
            mu: mu.to_vec(),
            ny,
            ne,
        })
    }

    pub fn smallest_pivot(&self) -> f64 {
        self.lu.smallest_pivot()
    }

    /// Solves `dr/dz dz = rhs` where `rhs = (a, b, c)` is split like `r`.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let (ny, ne) = (self.ny, self.ne);
        let ni = self.mu.len();
        let a = &rhs[..ny];
        let b = &rhs[ny..ny + ne];
        let c = &rhs[ny + ne..];
        // (H - Jh' diag(mu/h) Jh) dy + Jf' dl = a - Jh' (c / h)
        let mut top = a.to_vec();
        for j in 0..ni {
            let s = c[j] / self.ineq[j];
            if s != 0.0 {
                for col in 0..ny {
                    top[col] -= self.ineq_jac[(j, col)] * s;
                }
            }
        }
        let mut x = vec![0.0; ny + ne];
        for (p, &u) in self.order.iter().enumerate() {
            x[p] = if u < ny { top[u] } else { b[u - ny] };
        }
        self.lu.solve_in_place(&mut x);
        let mut out = vec![0.0; ny + ne + ni];
        for (p, &u) in self.order.iter().enumerate() {
            out[u] = x[p];
        }
        // dmu = (c - mu * Jh dy) / h
        for j in 0..ni {
            let mut jdy = 0.0;
            for col in 0..ny {
                jdy += self.ineq_jac[(j, col)] * out[col];
            }
            out[ny + ne + j] = (c[j] - self.mu[j] * jdy) / self.ineq[j];
        }
        out
    }
}

fn factor_with_regularization<N: Nlp + ?Sized>(
    nlp: &N,
    ev: &NlpEval,
    z: &PrimalDualPoint,
) -> Result<KktFactor> {
    let hess = nlp.lagrangian_hessian(&z.y, &z.lambda, &z.mu);
    let mut delta = 0.0;
    loop {
        match KktFactor::assemble(nlp, ev, hess.clone(), &z.mu, delta) {
            Ok(f) => return Ok(f),
            Err(Error::SingularKkt { smallest_pivot }) => {
                delta = if delta == 0.0 { 1e-10 } else { delta * 100.0 };
                if delta > 1e-2 {
                    return Err(Error::SingularKkt { smallest_pivot });
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// Runs the path-following method from a strictly interior start.
fn path_follow<N: Nlp + ?Sized>(
    nlp: &N,
    opts: &IpOptions,
    mut z: PrimalDualPoint,
    iterations_used: usize,
) -> Result<SolveReport> {
    let ni = nlp.ineq_dim();
    let mut iterations = iterations_used;
    // a residual above tau would leave the barrier parameter meaningless
    let final_tol = opts.tolerance.min(0.1 * opts.tau_target);
    let mut ev = nlp.evaluate(&z.y);
    loop {
        let r = residual_from(&ev, &z);
        let res = inf_norm(&r);
        if !res.is_finite() {
            return Err(Error::InvalidArgument("non-finite KKT residual".into()));
        }
        if z.tau <= opts.tau_target {
            if res <= final_tol {
                return Ok(SolveReport {
                    status: SolveStatus::Solved,
                    objective: ev.objective,
                    point: z,
                    iterations,
                    residual: res,
                    violation: 0.0,
                });
            }
        } else if res <= (10.0 * z.tau).max(opts.tolerance) {
            z.tau = (z.tau * opts.tau_decrease).max(opts.tau_target);
            continue;
        }
        if iterations >= opts.max_iterations {
            return Ok(SolveReport {
                status: SolveStatus::MaxIterations,
                objective: ev.objective,
                point: z,
                iterations,
                residual: res,
                violation: 0.0,
            });
        }
        iterations += 1;
        let factor = factor_with_regularization(nlp, &ev, &z)?;
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let dz = factor.solve(&neg);
        let ny = z.y.len();
        let ne = z.lambda.len();
        let (dy, rest) = dz.split_at(ny);
        let (dl, dmu) = rest.split_at(ne);

        let ftb = opts.fraction_to_boundary;
        let mut alpha_p: f64 = 1.0;
        for j in 0..ni {
            let jdy: f64 = (0..ny).map(|c| ev.ineq_jac[(j, c)] * dy[c]).sum();
            if jdy > 0.0 {
                alpha_p = alpha_p.min(-ftb * ev.ineq[j] / jdy);
            }
        }
        let mut alpha_d: f64 = 1.0;
        for j in 0..ni {
            if dmu[j] < 0.0 {
                alpha_d = alpha_d.min(-ftb * z.mu[j] / dmu[j]);
            }
        }
        // the linearized bound is exact for affine h; backtrack otherwise
        let mut trial_y: Vec<f64>;
        let mut trial_ev;
        let mut tries = 0;
        loop {
            trial_y = z.y.iter().zip(dy).map(|(y, d)| y + alpha_p * d).collect();
            trial_ev = nlp.evaluate(&trial_y);
            if trial_ev.ineq.iter().all(|&h| h < 0.0) {
                break;
            }
            tries += 1;
            alpha_p *= 0.5;
            if tries > 60 {
                return Err(Error::InvalidArgument("step length collapsed".into()));
            }
        }
        z.y = trial_y;
        for (l, d) in z.lambda.iter_mut().zip(dl) {
            *l += alpha_p * d;
        }
        for (m, d) in z.mu.iter_mut().zip(dmu) {
            *m += alpha_d * d;
        }
        ev = trial_ev;
    }
}

fn initial_tau(ev: &NlpEval, mu: &[f64], opts: &IpOptions) -> f64 {
    let ni = mu.len();
    if ni == 0 {
        return opts.tau_target;
    }
    let avg = (0..ni).map(|j| -mu[j] * ev.ineq[j]).sum::<f64>() / ni as f64;
    avg.max(opts.tau_target)
}

/// Solves an NLP at barrier parameter `opts.tau_target`.
///
/// A warm start is used when it is strictly interior for `nlp`; the barrier
/// then starts from the warm point's average complementarity.
pub fn solve<N: Nlp + ?Sized>(
    nlp: &N,
    opts: &IpOptions,
    warm_start: Option<&PrimalDualPoint>,
) -> Result<SolveReport> {
    opts.validate()?;
    let (ny, ne, ni) = (nlp.primal_dim(), nlp.eq_dim(), nlp.ineq_dim());
    if let Some(w) = warm_start {
        if w.y.len() == ny && w.lambda.len() == ne && w.mu.len() == ni && w.mu.iter().all(|&m| m > 0.0) {
            let ev = nlp.evaluate(&w.y);
            if ev.ineq.iter().all(|&h| h < 0.0) {
                let mut z = w.clone();
                z.tau = initial_tau(&ev, &z.mu, opts);
                return path_follow(nlp, opts, z, 0);
            }
        }
    }
    let mut y = nlp.initial_primal();
    let mut used = 0;
    let ev = nlp.evaluate(&y);
    if ev.ineq.iter().any(|&h| !(h < 0.0)) {
        let phase = PhaseOne::new(nlp, y.clone());
        let p_opts = IpOptions {
            tau_target: 1e-8,
            tolerance: 1e-9,
            ..*opts
        };
        let start = phase.start();
        let pev = phase.evaluate(&start);
        let mu0 = vec![opts.initial_multiplier; ni + 1];
        let z0 = PrimalDualPoint {
            y: start,
            lambda: vec![0.0; ne],
            tau: initial_tau(&pev, &mu0, &p_opts),
            mu: mu0,
        };
        let rep = path_follow(&phase, &p_opts, z0, 0)?;
        used = rep.iterations;
        let t = rep.point.y[ny];
        let yi = &rep.point.y[..ny];
        let iev = nlp.evaluate(yi);
        let worst = iev.ineq.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if rep.status != SolveStatus::Solved || !(worst < 0.0) {
            return Ok(SolveReport {
                status: SolveStatus::Infeasible,
                objective: f64::NAN,
                point: PrimalDualPoint {
                    y: yi.to_vec(),
                    lambda: vec![0.0; ne],
                    mu: vec![0.0; ni],
                    tau: opts.tau_target,
                },
                iterations: used,
                residual: rep.residual,
                violation: t.max(worst).max(opts.infeasibility_threshold.max(f64::MIN_POSITIVE)),
            });
        }
        y = yi.to_vec();
    }
    let ev = nlp.evaluate(&y);
    let mu = vec![opts.initial_multiplier; ni];
    let z = PrimalDualPoint {
        tau: initial_tau(&ev, &mu, opts),
        y,
        lambda: vec![0.0; ne],
        mu,
    };
    path_follow(nlp, opts, z, used)
}

/// Extra full Newton steps on the barrier system at the point's own `tau`,
/// keeping the iterate with the smallest residual. Used to push a converged
/// point to rounding level before differencing solutions.
pub fn polish<N: Nlp + ?Sized>(nlp: &N, z: &PrimalDualPoint, steps: usize) -> Result<(PrimalDualPoint, f64)> {
    let mut best = z.clone();
    let mut ev = nlp.evaluate(&z.y);
    let mut best_res = inf_norm(&residual_from(&ev, z));
    let mut cur = z.clone();
    for _ in 0..steps {
        let r = residual_from(&ev, &cur);
        let factor = factor_with_regularization(nlp, &ev, &cur)?;
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        let dz = factor.solve(&neg);
        let (ny, ne) = (cur.y.len(), cur.lambda.len());
        let next = PrimalDualPoint {
            y: cur.y.iter().zip(&dz[..ny]).map(|(a, b)| a + b).collect(),
            lambda: cur.lambda.iter().zip(&dz[ny..ny + ne]).map(|(a, b)| a + b).collect(),
            mu: cur.mu.iter().zip(&dz[ny + ne..]).map(|(a, b)| a + b).collect(),
            tau: cur.tau,
        };
        let nev = nlp.evaluate(&next.y);
        if next.mu.iter().any(|&m| !(m > 0.0)) || nev.ineq.iter().any(|&h| !(h < 0.0)) {
            break;
        }
        let res = inf_norm(&residual_from(&nev, &next));
        cur = next;
        ev = nev;
        if res < best_res {
            best_res = res;
            best = cur.clone();
        } else {
            break;
        }
    }
    Ok((best, best_res))
}

/// Solves the fixed-integer NLP at `tau_target`.
pub fn solve_fixed_integer(
    nlp: &FixedIntegerNlp,
    opts: &IpOptions,
    warm_start: Option<&PrimalDualPoint>,
) -> Result<SolveReport> {
    solve(nlp, opts, warm_start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minlp::IntegerProfile;
    use crate::ocp::{ExampleOcp, ThetaVector};

    fn golden() -> f64 {
        0.5 * (1.0 + 5f64.sqrt())
    }

    #[test]
    fn zero_instance_has_zero_objective() {
        let ocp = ExampleOcp::new(10, golden()).unwrap();
        let nlp = FixedIntegerNlp::scalar(&ocp, 0.0, &ThetaVector::baseline(), IntegerProfile::zeros(10, 1), 0.0).unwrap();
        let rep = solve_fixed_integer(&nlp, &IpOptions::default().with_tau(1e-10), None).unwrap();
        assert!(rep.is_solved());
        assert!(rep.objective.abs() < 1e-8, "objective {}", rep.objective);
        for k in 0..10 {
            assert!(rep.point.y[ExampleOcp::u_index(k)].abs() < 1e-8);
        }
        let r = kkt_residual(&rep.point, &nlp);
        assert!(r.iter().all(|v| v.abs() <= 1e-8));
    }

    #[test]
    fn returned_point_solves_the_target_barrier_system() {
        let ocp = ExampleOcp::new(10, golden()).unwrap();
        let nlp = FixedIntegerNlp::scalar(&ocp, 0.5, &ThetaVector::baseline(), IntegerProfile::ones(10, 1), 0.0).unwrap();
        let opts = IpOptions::default();
        let rep = solve_fixed_integer(&nlp, &opts, None).unwrap();
        assert!(rep.is_solved());
        assert_eq!(rep.point.tau, opts.tau_target);
        assert!(rep.point.mu.iter().all(|&m| m > 0.0));
        let ev = nlp.evaluate(&rep.point.y);
        assert!(ev.ineq.iter().all(|&h| h < 0.0));
        assert!(rep.residual <= opts.tolerance);
    }

    #[test]
    fn complementarity_block_is_linear_in_mu() {
        let ocp = ExampleOcp::new(4, golden()).unwrap();
        let nlp = FixedIntegerNlp::scalar(&ocp, 0.5, &ThetaVector::baseline(), IntegerProfile::ones(4, 1), 0.0).unwrap();
        let rep = solve_fixed_integer(&nlp, &IpOptions::default(), None).unwrap();
        let mut z = rep.point.clone();
        z.mu.iter_mut().for_each(|m| *m *= 2.0);
        let r = kkt_residual(&z, &nlp);
        let h = nlp.evaluate(&z.y).ineq;
        let off = nlp.primal_dim() + nlp.eq_dim();
        for j in 0..nlp.ineq_dim() {
            let want = 2.0 * rep.point.mu[j] * h[j] + z.tau;
            assert!((r[off + j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn warm_start_after_small_theta_change_is_fast() {
        let ocp = ExampleOcp::new(10, golden()).unwrap();
        let th = ThetaVector::baseline();
        let profile = IntegerProfile::from_bits(&[1, 0, 1, 0, 0, 1, 0, 0, 0, 0]);
        let nlp = FixedIntegerNlp::scalar(&ocp, 0.7, &th, profile.clone(), 0.0).unwrap();
        let opts = IpOptions::default();
        let rep = solve_fixed_integer(&nlp, &opts, None).unwrap();
        let moved = FixedIntegerNlp::scalar(&ocp, 0.7, &th.with(ThetaVector::B, 1e-6), profile, 0.0).unwrap();
        let warm = solve_fixed_integer(&moved, &opts, Some(&rep.point)).unwrap();
        assert!(warm.is_solved());
        assert!(warm.iterations <= 5, "{} iterations", warm.iterations);
    }

    #[test]
    fn hard_bounds_out_of_reach_are_infeasible() {
        // with i = 0 the state cannot leave 0.9, but the box demands x <= 0.5
        let ocp = ExampleOcp::new(3, golden()).unwrap().with_hard_bounds(-0.5, 0.5).unwrap();
        let nlp = FixedIntegerNlp::scalar(&ocp, 0.9, &ThetaVector::baseline(), IntegerProfile::zeros(3, 1), 0.0).unwrap();
        let rep = solve_fixed_integer(&nlp, &IpOptions::default(), None).unwrap();
        assert_eq!(rep.status, SolveStatus::Infeasible);
        assert!(rep.violation > 1e-6);
        assert!(matches!(rep.into_solved(), Err(Error::Infeasible { .. })));
        // steering once is enough
        let nlp = FixedIntegerNlp::scalar(&ocp, 0.9, &ThetaVector::baseline(), IntegerProfile::from_bits(&[1, 0, 0]), 0.0).unwrap();
        let rep = solve_fixed_integer(&nlp, &IpOptions::default(), None).unwrap();
        assert!(rep.is_solved());
    }
}
