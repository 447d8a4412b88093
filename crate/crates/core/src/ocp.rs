//! Parametric optimal control problems.
//!
//! An [`OcpModel`] describes one stage-structured OCP through its stage cost,
//! dynamics, stage constraints and terminal terms. Each evaluator returns an
//! [`Eval`] carrying values, first derivatives and (when nonzero) second
//! derivatives with respect to the stage variables `w = (x, u, v)` and the
//! parameter vector `theta`. `v` holds auxiliary per-stage variables such as
//! penalty slacks.
//!
//! [`ExampleOcp`] is the scalar mixed-integer benchmark: dynamics
//! `x+ = x + u i + b`, quadratic tracking costs, an activation cost `w i`
//! and the nonsmooth penalty `c max(|x| - 0.2, 0)` written with one slack per
//! stage (`sigma >= x - 0.2`, `sigma >= -x - 0.2`, `sigma >= 0`, cost `c sigma`).
//! Because the slack has a linear cost, it is tight at every optimizer, so the
//! slack form has the same optimal value as the nonsmooth penalty.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::minlp::IntegerProfile;
use crate::policy::MixedAction;

/// Adaptable MPC parameters `(s_ref, a_ref, w, c, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaVector {
    pub s_ref: f64,
    pub a_ref: f64,
    pub w: f64,
    pub c: f64,
    pub b: f64,
}

impl ThetaVector {
    pub const DIM: usize = 5;
    pub const S_REF: usize = 0;
    pub const A_REF: usize = 1;
    pub const W: usize = 2;
    pub const C: usize = 3;
    pub const B: usize = 4;
    pub const NAMES: [&'static str; 5] = ["s_ref", "a_ref", "w", "c", "b"];

    pub fn new(s_ref: f64, a_ref: f64, w: f64, c: f64, b: f64) -> Self {
        Self {
            s_ref,
            a_ref,
            w,
            c,
            b,
        }
    }

    /// The baseline cost parameters, which are also the initial MPC parameters (with `b = 0`).
    pub fn baseline() -> Self {
        Self::new(0.0, 0.0, 0.2, 1.0, 0.0)
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.s_ref, self.a_ref, self.w, self.c, self.b]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != Self::DIM {
            return Err(Error::InvalidArgument(format!(
                "theta needs {} entries, got {}",
                Self::DIM,
                v.len()
            )));
        }
        Ok(Self::new(v[0], v[1], v[2], v[3], v[4]))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.to_array().iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite theta {self:?}")));
        }
        if self.c < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "penalty weight c must be nonnegative, got {}",
                self.c
            )));
        }
        Ok(())
    }

    pub fn get(&self, index: usize) -> f64 {
        self.to_array()[index]
    }

    pub fn with(&self, index: usize, value: f64) -> Self {
        let mut a = self.to_array();
        a[index] = value;
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }
}

impl Default for ThetaVector {
    fn default() -> Self {
        Self::baseline()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OcpDims {
    pub horizon: usize,
    pub state: usize,
    pub control: usize,
    pub integer: usize,
    pub aux: usize,
    pub theta: usize,
}

impl OcpDims {
    /// Width of the stage variable vector `w = (x, u, v)`.
    pub fn stage_width(&self) -> usize {
        self.state + self.control + self.aux
    }
}

/// Value and derivatives of a smooth vector function of `(w, theta)`.
///
/// `jac` has one row per output and `nw + ntheta` columns; `hess[o]` is the
/// symmetric `(nw + ntheta)` square Hessian of output `o`. An empty `hess`
/// means the function is affine in `(w, theta)`.
#[derive(Debug, Clone)]
pub struct Eval {
    pub value: Vec<f64>,
    pub jac: DMatrix<f64>,
    pub hess: Vec<DMatrix<f64>>,
}

impl Eval {
    pub fn zeros(outputs: usize, vars: usize) -> Self {
        Self {
            value: vec![0.0; outputs],
            jac: DMatrix::zeros(outputs, vars),
            hess: Vec::new(),
        }
    }

    pub fn outputs(&self) -> usize {
        self.value.len()
    }
}

fn set_sym(h: &mut DMatrix<f64>, i: usize, j: usize, v: f64) {
    h[(i, j)] = v;
    h[(j, i)] = v;
}

/// Stage-structured parametric OCP with integer inputs held fixed.
pub trait OcpModel: Send + Sync {
    fn dims(&self) -> OcpDims;

    fn stage_ineq_count(&self, k: usize) -> usize;

    fn terminal_ineq_count(&self) -> usize;

    /// Stage cost `l(x, u, v, i, theta)` (one output).
    fn stage_cost(&self, k: usize, w: &[f64], i: &[u8], theta: &[f64]) -> Eval;

    /// Model step `F(x, u, i, theta)` (`state` outputs).
    fn dynamics(&self, k: usize, w: &[f64], i: &[u8], theta: &[f64]) -> Eval;

    /// Stage constraints `h_k <= 0`.
    fn stage_constraints(&self, k: usize, w: &[f64], i: &[u8], theta: &[f64]) -> Eval;

    /// Terminal cost `T(x, theta)`; derivatives are over `(x, theta)`.
    fn terminal_cost(&self, x: &[f64], theta: &[f64]) -> Eval;

    /// Terminal constraints `h_N <= 0`.
    fn terminal_constraints(&self, x: &[f64], theta: &[f64]) -> Eval;

    /// A primal guess in the transcription layout, strictly interior when possible.
    fn initial_guess(&self, s: &[f64], theta: &[f64], profile: &IntegerProfile) -> Vec<f64>;
}

/// How the terminal weight is obtained from the `i = 1` control problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalWeighting {
    /// Plain DARE with `A = B = Q = R = 1`.
    Undiscounted,
    /// DARE of the discounted problem, `A = B = sqrt(gamma)`.
    Discounted,
}

/// Solves the scalar discrete algebraic Riccati equation by fixed-point iteration
/// of the Riccati recursion started at `P = Q`.
pub fn riccati_terminal_weight(a: f64, b: f64, q: f64, r: f64) -> Result<f64> {
    if !(r > 0.0) || q < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "riccati needs R > 0 and Q >= 0, got Q = {q}, R = {r}"
        )));
    }
    const MAX_ITER: usize = 100_000;
    let mut p = q;
    let mut change = f64::INFINITY;
    for _ in 0..MAX_ITER {
        let next = q + a * p * a - (a * p * b) * (a * p * b) / (r + b * p * b);
        change = (next - p).abs();
        p = next;
        if !p.is_finite() {
            break;
        }
        if change <= 1e-15 * p.abs().max(1.0) {
            return Ok(p);
        }
    }
    Err(Error::RiccatiNotConverged {
        iterations: MAX_ITER,
        last_change: change,
    })
}

/// Residual of the scalar DARE at `p`.
pub fn dare_residual(p: f64, a: f64, b: f64, q: f64, r: f64) -> f64 {
    p - q - a * p * a + (a * p * b) * (b * p * a) / (r + b * p * b)
}

/// Stage cost of the true plant at the fixed baseline parameters.
///
/// `base.b` is ignored. The penalty bound is fixed at `0.2`.
pub fn baseline_stage_cost(s: f64, a: &MixedAction, base: &ThetaVector) -> f64 {
    let i = f64::from(a.integer);
    0.5 * (s - base.s_ref).powi(2)
        + 0.5 * (a.continuous - base.a_ref).powi(2)
        + base.w * i
        + base.c * (s.abs() - ExampleOcp::PENALTY_BOUND).max(0.0)
}

/// The scalar mixed-integer benchmark OCP.
///
/// Primal layout per stage: `(x_k, u_k, sigma_k)`, then `x_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleOcp {
    horizon: usize,
    terminal_weight: f64,
    /// Optional hard bounds on `x_k` for `k >= 1`; used to build models with
    /// infeasible integer branches.
    hard_bounds: Option<(f64, f64)>,
}

impl ExampleOcp {
    pub const PENALTY_BOUND: f64 = 0.2;
    const STRIDE: usize = 3;

    pub fn new(horizon: usize, terminal_weight: f64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        if !(terminal_weight >= 0.0) || !terminal_weight.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "terminal weight must be finite and >= 0, got {terminal_weight}"
            )));
        }
        Ok(Self {
            horizon,
            terminal_weight,
            hard_bounds: None,
        })
    }

    pub fn with_hard_bounds(mut self, lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::InvalidArgument(format!("empty hard bounds [{lo}, {hi}]")));
        }
        self.hard_bounds = Some((lo, hi));
        Ok(self)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn terminal_weight(&self) -> f64 {
        self.terminal_weight
    }

    pub fn hard_bounds(&self) -> Option<(f64, f64)> {
        self.hard_bounds
    }

    pub fn x_index(k: usize) -> usize {
        k * Self::STRIDE
    }

    pub fn u_index(k: usize) -> usize {
        k * Self::STRIDE + 1
    }

    pub fn sigma_index(k: usize) -> usize {
        k * Self::STRIDE + 2
    }

    /// Primal dimension of the transcription.
    pub fn primal_dim(&self) -> usize {
        self.horizon * Self::STRIDE + 1
    }

    /// The stage cost with the slack eliminated, `sigma = max(|x| - 0.2, 0)`.
    pub fn nonsmooth_stage_cost(x: f64, u: f64, i: u8, theta: &ThetaVector) -> f64 {
        0.5 * (x - theta.s_ref).powi(2)
            + 0.5 * (u - theta.a_ref).powi(2)
            + theta.w * f64::from(i)
            + theta.c * (x.abs() - Self::PENALTY_BOUND).max(0.0)
    }

    pub fn nonsmooth_terminal_cost(&self, x: f64, theta: &ThetaVector) -> f64 {
        0.5 * self.terminal_weight * (x - theta.s_ref).powi(2)
    }

    /// Cost of a continuous input profile under the nonsmooth penalty, with the
    /// linear exploration term `d u_0`.
    pub fn rollout_cost(&self, s: f64, theta: &ThetaVector, profile: &[u8], u: &[f64], d: f64) -> f64 {
        let mut x = s;
        let mut total = d * u[0];
        for k in 0..self.horizon {
            total += Self::nonsmooth_stage_cost(x, u[k], profile[k], theta);
            x = x + u[k] * f64::from(profile[k]) + theta.b;
        }
        total + self.nonsmooth_terminal_cost(x, theta)
    }
}

/// Builds the benchmark OCP with the Riccati terminal weight of the `i = 1` problem.
pub fn build_example_ocp(
    theta: &ThetaVector,
    horizon: usize,
    gamma: f64,
    weighting: TerminalWeighting,
) -> Result<ExampleOcp> {
    theta.validate()?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("discount must lie in [0, 1], got {gamma}")));
    }
    let (a, b) = match weighting {
        TerminalWeighting::Undiscounted => (1.0, 1.0),
        TerminalWeighting::Discounted => (gamma.sqrt(), gamma.sqrt()),
    };
    let p = riccati_terminal_weight(a, b, 1.0, 1.0)?;
    ExampleOcp::new(horizon, p)
}

// Variable columns for stage evaluators: x, u, sigma, then theta.
const NW: usize = 3;
const NV: usize = NW + ThetaVector::DIM;
const TX: usize = 0;
const TU: usize = 1;
const TS: usize = 2;
const T_SREF: usize = NW + ThetaVector::S_REF;
const T_AREF: usize = NW + ThetaVector::A_REF;
const T_W: usize = NW + ThetaVector::W;
const T_C: usize = NW + ThetaVector::C;
const T_B: usize = NW + ThetaVector::B;

impl OcpModel for ExampleOcp {
    fn dims(&self) -> OcpDims {
        OcpDims {
            horizon: self.horizon,
            state: 1,
            control: 1,
            integer: 1,
            aux: 1,
            theta: ThetaVector::DIM,
        }
    }

    fn stage_ineq_count(&self, k: usize) -> usize {
        if k >= 1 && self.hard_bounds.is_some() {
            5
        } else {
            3
        }
    }

    fn terminal_ineq_count(&self) -> usize {
        if self.hard_bounds.is_some() {
            2
        } else {
            0
        }
    }

    fn stage_cost(&self, _k: usize, w: &[f64], i: &[u8], th: &[f64]) -> Eval {
        let (x, u, sigma) = (w[0], w[1], w[2]);
        let iv = f64::from(i[0]);
        let (sref, aref, wt, c) = (th[0], th[1], th[2], th[3]);
        let mut e = Eval::zeros(1, NV);
        e.value[0] = 0.5 * (x - sref).powi(2) + 0.5 * (u - aref).powi(2) + wt * iv + c * sigma;
        e.jac[(0, TX)] = x - sref;
        e.jac[(0, TU)] = u - aref;
        e.jac[(0, TS)] = c;
        e.jac[(0, T_SREF)] = -(x - sref);
        e.jac[(0, T_AREF)] = -(u - aref);
        e.jac[(0, T_W)] = iv;
        e.jac[(0, T_C)] = sigma;
        let mut h = DMatrix::zeros(NV, NV);
        h[(TX, TX)] = 1.0;
        h[(TU, TU)] = 1.0;
        h[(T_SREF, T_SREF)] = 1.0;
        h[(T_AREF, T_AREF)] = 1.0;
        set_sym(&mut h, TX, T_SREF, -1.0);
        set_sym(&mut h, TU, T_AREF, -1.0);
        set_sym(&mut h, TS, T_C, 1.0);
        e.hess.push(h);
        e
    }

    fn dynamics(&self, _k: usize, w: &[f64], i: &[u8], th: &[f64]) -> Eval {
        let iv = f64::from(i[0]);
        let mut e = Eval::zeros(1, NV);
        e.value[0] = w[0] + w[1] * iv + th[ThetaVector::B];
        e.jac[(0, TX)] = 1.0;
        e.jac[(0, TU)] = iv;
        e.jac[(0, T_B)] = 1.0;
        e
    }

    fn stage_constraints(&self, k: usize, w: &[f64], _i: &[u8], _th: &[f64]) -> Eval {
        let (x, sigma) = (w[0], w[2]);
        let bound = Self::PENALTY_BOUND;
        let m = self.stage_ineq_count(k);
        let mut e = Eval::zeros(m, NV);
        e.value[0] = x - bound - sigma;
        e.jac[(0, TX)] = 1.0;
        e.jac[(0, TS)] = -1.0;
        e.value[1] = -x - bound - sigma;
        e.jac[(1, TX)] = -1.0;
        e.jac[(1, TS)] = -1.0;
        e.value[2] = -sigma;
        e.jac[(2, TS)] = -1.0;
        if m == 5 {
            let (lo, hi) = self.hard_bounds.expect("hard bounds present");
            e.value[3] = x - hi;
            e.jac[(3, TX)] = 1.0;
            e.value[4] = lo - x;
            e.jac[(4, TX)] = -1.0;
        }
        e
    }

    fn terminal_cost(&self, x: &[f64], th: &[f64]) -> Eval {
        let p = self.terminal_weight;
        let sref = th[ThetaVector::S_REF];
        let nv = 1 + ThetaVector::DIM;
        let mut e = Eval::zeros(1, nv);
        e.value[0] = 0.5 * p * (x[0] - sref).powi(2);
        e.jac[(0, 0)] = p * (x[0] - sref);
        e.jac[(0, 1 + ThetaVector::S_REF)] = -p * (x[0] - sref);
        let mut h = DMatrix::zeros(nv, nv);
        h[(0, 0)] = p;
        h[(1, 1)] = p;
        set_sym(&mut h, 0, 1 + ThetaVector::S_REF, -p);
        e.hess.push(h);
        e
    }

    fn terminal_constraints(&self, x: &[f64], _th: &[f64]) -> Eval {
        let nv = 1 + ThetaVector::DIM;
        match self.hard_bounds {
            None => Eval::zeros(0, nv),
            Some((lo, hi)) => {
                let mut e = Eval::zeros(2, nv);
                e.value[0] = x[0] - hi;
                e.jac[(0, 0)] = 1.0;
                e.value[1] = lo - x[0];
                e.jac[(1, 0)] = -1.0;
                e
            }
        }
    }

    fn initial_guess(&self, s: &[f64], th: &[f64], profile: &IntegerProfile) -> Vec<f64> {
        let theta = ThetaVector::from_slice(th).expect("theta dimension");
        let mut y = vec![0.0; self.primal_dim()];
        let mut x = s[0];
        for k in 0..self.horizon {
            let i = f64::from(profile.stage(k)[0]);
            let u = match self.hard_bounds {
                // steer toward the middle of the hard box
                Some((lo, hi)) if i > 0.0 => 0.5 * (lo + hi) - x - theta.b,
                _ => theta.a_ref,
            };
            y[Self::x_index(k)] = x;
            y[Self::u_index(k)] = u;
            y[Self::sigma_index(k)] = (x.abs() - Self::PENALTY_BOUND).max(0.0) + 0.1;
            x = x + u * i + theta.b;
        }
        y[Self::x_index(self.horizon)] = x;
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn riccati_golden_ratio() {
        let p = riccati_terminal_weight(1.0, 1.0, 1.0, 1.0).unwrap();
        // closed form root of P^2 - Q P - Q R = 0
        let oracle = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((p - oracle).abs() < 1e-12, "{p}");
        assert!(dare_residual(p, 1.0, 1.0, 1.0, 1.0).abs() <= 1e-10);
    }

    #[test]
    fn riccati_degenerate_cases() {
        assert_eq!(riccati_terminal_weight(0.0, 1.0, 2.5, 1.0).unwrap(), 2.5);
        assert_eq!(riccati_terminal_weight(1.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert!(riccati_terminal_weight(1.0, 1.0, 1.0, 0.0).is_err());
        assert!(riccati_terminal_weight(1.0, 1.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn riccati_does_not_converge_for_uncontrollable_unstable() {
        // B = 0 with |A| > 1: the recursion diverges
        assert!(matches!(
            riccati_terminal_weight(1.5, 0.0, 1.0, 1.0),
            Err(Error::RiccatiNotConverged { .. })
        ));
    }

    #[test]
    fn baseline_cost_examples() {
        let base = ThetaVector::baseline();
        let c = |s, ac, ai| baseline_stage_cost(s, &MixedAction::new(ac, ai), &base);
        assert_eq!(c(0.0, 0.0, 0), 0.0);
        assert!((c(0.0, 0.0, 1) - 0.2).abs() < 1e-15);
        assert!((c(0.3, 0.1, 0) - 0.15).abs() < 1e-12);
    }

    #[test]
    fn example_zero_case() {
        let ocp = ExampleOcp::new(10, 1.0).unwrap();
        let th = ThetaVector::new(0.0, 0.0, 0.2, 1.0, 0.0).to_array();
        let f = ocp.dynamics(0, &[0.0, 0.0, 0.0], &[0], &th);
        assert_eq!(f.value[0], 0.0);
        let l = ocp.stage_cost(0, &[0.0, 0.0, 0.0], &[0], &th);
        assert_eq!(l.value[0], 0.0);
    }

    #[test]
    fn slack_tight_at_optimum_matches_penalty() {
        // with x fixed, the slack minimizing c*sigma subject to the three
        // constraints is max(|x| - 0.2, 0)
        let x: f64 = 0.3;
        let sigma = (x - 0.2).max(-x - 0.2).max(0.0);
        assert!((sigma - 0.1).abs() < 1e-15);
        assert!((1.0 * sigma - (x.abs() - 0.2f64).max(0.0)).abs() < 1e-15);
    }

    #[test]
    fn build_uses_riccati_weight() {
        let ocp = build_example_ocp(&ThetaVector::baseline(), 10, 0.95, TerminalWeighting::Undiscounted)
            .unwrap();
        assert_eq!(ocp.horizon(), 10);
        assert!((ocp.terminal_weight() - 1.618_033_988_749_895).abs() < 1e-10);
        let disc =
            build_example_ocp(&ThetaVector::baseline(), 10, 0.95, TerminalWeighting::Discounted).unwrap();
        assert!(disc.terminal_weight() < ocp.terminal_weight());
        assert!(build_example_ocp(&ThetaVector::new(0.0, 0.0, 0.2, -1.0, 0.0), 10, 0.95, TerminalWeighting::Undiscounted).is_err());
        assert!(ExampleOcp::new(0, 1.0).is_err());
    }

    /// Central differences of every evaluator against its analytic derivatives.
    #[test]
    fn evaluator_derivatives_match_finite_differences() {
        let ocp = ExampleOcp::new(3, 1.7).unwrap().with_hard_bounds(-2.0, 2.0).unwrap();
        let th = [0.1, -0.2, 0.3, 0.9, 0.02];
        let w = [0.4, -0.3, 0.25];
        let h = 1e-6;
        for i in [0u8, 1] {
            let fns: Vec<Box<dyn Fn(&[f64], &[f64]) -> Eval>> = vec![
                Box::new(|w, t| ocp.stage_cost(1, w, &[i], t)),
                Box::new(|w, t| ocp.dynamics(1, w, &[i], t)),
                Box::new(|w, t| ocp.stage_constraints(1, w, &[i], t)),
            ];
            for f in &fns {
                let base = f(&w, &th);
                for col in 0..NV {
                    let mut vars: Vec<f64> = w.iter().chain(th.iter()).copied().collect();
                    vars[col] += h;
                    let plus = f(&vars[..3], &vars[3..]);
                    vars[col] -= 2.0 * h;
                    let minus = f(&vars[..3], &vars[3..]);
                    for o in 0..base.outputs() {
                        let fd = (plus.value[o] - minus.value[o]) / (2.0 * h);
                        assert!((fd - base.jac[(o, col)]).abs() < 1e-7, "jac o={o} col={col}");
                        let hfd: Vec<f64> = (0..NV)
                            .map(|r| (plus.jac[(o, r)] - minus.jac[(o, r)]) / (2.0 * h))
                            .collect();
                        for r in 0..NV {
                            let an = base.hess.get(o).map_or(0.0, |m| m[(r, col)]);
                            assert!((hfd[r] - an).abs() < 1e-7, "hess o={o} {r},{col}");
                        }
                    }
                }
            }
        }
    }
}
