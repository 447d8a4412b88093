//! Smooth nonlinear programs `min Phi(y) s.t. f(y) = 0, h(y) <= 0`.
//!
//! [`FixedIntegerNlp`] transcribes an [`OcpModel`] with a fully assigned
//! integer profile and the linear exploration term `d' u_0`. Its parameters are
//! `p = (theta, d)`, which is what the sensitivity code differentiates against.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::minlp::IntegerProfile;
use crate::ocp::{OcpDims, OcpModel, ThetaVector};

/// Values and first derivatives of an NLP at a primal point.
#[derive(Debug, Clone)]
pub struct NlpEval {
    pub objective: f64,
    pub grad: DVector<f64>,
    pub eq: DVector<f64>,
    pub eq_jac: DMatrix<f64>,
    pub ineq: DVector<f64>,
    pub ineq_jac: DMatrix<f64>,
}

pub trait Nlp: Sync {
    fn primal_dim(&self) -> usize;
    fn eq_dim(&self) -> usize;
    fn ineq_dim(&self) -> usize;

    fn evaluate(&self, y: &[f64]) -> NlpEval;

    /// Hessian of `Phi + lambda' f + mu' h` with respect to `y`.
    fn lagrangian_hessian(&self, y: &[f64], lambda: &[f64], mu: &[f64]) -> DMatrix<f64>;

    fn initial_primal(&self) -> Vec<f64>;

    /// Permutation of the unknowns `(y, lambda)` of the reduced KKT system
    /// that makes it banded. `order[j]` is the unknown placed at position `j`.
    fn kkt_ordering(&self) -> Option<Vec<usize>> {
        None
    }
}

/// Derivatives of the KKT quantities with respect to the parameters `p`.
#[derive(Debug, Clone)]
pub struct ParamDerivatives {
    /// `d L / d p`.
    pub lagrangian: DVector<f64>,
    /// `d^2 L / dy dp`.
    pub lagrangian_yp: DMatrix<f64>,
    pub eq_p: DMatrix<f64>,
    pub ineq_p: DMatrix<f64>,
}

pub trait ParametricNlp: Nlp {
    fn param_dim(&self) -> usize;

    fn param_derivatives(&self, y: &[f64], lambda: &[f64], mu: &[f64]) -> ParamDerivatives;
}

/// The continuous NLP left once the whole integer profile is fixed, with the
/// objective `Phi + d' u_0`.
///
/// Primal layout: `(w_0, ..., w_{N-1}, x_N)` with `w_k = (x_k, u_k, v_k)`.
/// Equalities: `x_0 - s`, then `F_k(w_k) - x_{k+1}`. Inequalities: stage
/// blocks in order, then the terminal block. Parameters: `(theta, d)`.
#[derive(Clone)]
pub struct FixedIntegerNlp<'a> {
    model: &'a dyn OcpModel,
    dims: OcpDims,
    s: Vec<f64>,
    theta: Vec<f64>,
    profile: IntegerProfile,
    d: Vec<f64>,
    ineq_offsets: Vec<usize>,
}

impl std::fmt::Debug for FixedIntegerNlp<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FixedIntegerNlp")
            .field("s", &self.s)
            .field("theta", &self.theta)
            .field("profile", &self.profile)
            .field("d", &self.d)
            .finish()
    }
}

impl<'a> FixedIntegerNlp<'a> {
    pub fn new(
        model: &'a dyn OcpModel,
        s: &[f64],
        theta: &[f64],
        profile: IntegerProfile,
        d: &[f64],
    ) -> Result<Self> {
        let dims = model.dims();
        if s.len() != dims.state || theta.len() != dims.theta || d.len() != dims.control {
            return Err(Error::InvalidArgument(format!(
                "dimension mismatch: s {} (want {}), theta {} (want {}), d {} (want {})",
                s.len(),
                dims.state,
                theta.len(),
                dims.theta,
                d.len(),
                dims.control
            )));
        }
        if profile.horizon() != dims.horizon || profile.width() != dims.integer {
            return Err(Error::InvalidArgument(format!(
                "integer profile is {}x{}, model wants {}x{}",
                profile.horizon(),
                profile.width(),
                dims.horizon,
                dims.integer
            )));
        }
        if s.iter().chain(theta).chain(d).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite NLP data".into()));
        }
        let mut ineq_offsets = Vec::with_capacity(dims.horizon + 2);
        let mut off = 0;
        for k in 0..dims.horizon {
            ineq_offsets.push(off);
            off += model.stage_ineq_count(k);
        }
        ineq_offsets.push(off);
        ineq_offsets.push(off + model.terminal_ineq_count());
        Ok(Self {
            model,
            dims,
            s: s.to_vec(),
            theta: theta.to_vec(),
            profile,
            d: d.to_vec(),
            ineq_offsets,
        })
    }

    /// Convenience constructor for scalar-state models parameterized by [`ThetaVector`].
    pub fn scalar(
        model: &'a dyn OcpModel,
        s: f64,
        theta: &ThetaVector,
        profile: IntegerProfile,
        d: f64,
    ) -> Result<Self> {
        Self::new(model, &[s], &theta.to_array(), profile, &[d])
    }

    pub fn model(&self) -> &'a dyn OcpModel {
        self.model
    }

    pub fn dims(&self) -> OcpDims {
        self.dims
    }

    pub fn state(&self) -> &[f64] {
        &self.s
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn profile(&self) -> &IntegerProfile {
        &self.profile
    }

    pub fn perturbation(&self) -> &[f64] {
        &self.d
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        Self::new(self.model, &self.s, theta, self.profile.clone(), &self.d)
    }

    pub fn with_perturbation(&self, d: &[f64]) -> Result<Self> {
        Self::new(self.model, &self.s, &self.theta, self.profile.clone(), d)
    }

    pub fn with_state(&self, s: &[f64]) -> Result<Self> {
        Self::new(self.model, s, &self.theta, self.profile.clone(), &self.d)
    }

    fn nw(&self) -> usize {
        self.dims.stage_width()
    }

    pub fn stage_offset(&self, k: usize) -> usize {
        k * self.nw()
    }

    /// Index of the first entry of `u_0` in `y`.
    pub fn u0_offset(&self) -> usize {
        self.dims.state
    }

    fn stage_vars<'y>(&self, y: &'y [f64], k: usize) -> &'y [f64] {
        let o = self.stage_offset(k);
        &y[o..o + self.nw()]
    }

    fn terminal_vars<'y>(&self, y: &'y [f64]) -> &'y [f64] {
        let o = self.stage_offset(self.dims.horizon);
        &y[o..o + self.dims.state]
    }
}

impl Nlp for FixedIntegerNlp<'_> {
    fn primal_dim(&self) -> usize {
        self.dims.horizon * self.nw() + self.dims.state
    }

    fn eq_dim(&self) -> usize {
        (self.dims.horizon + 1) * self.dims.state
    }

    fn ineq_dim(&self) -> usize {
        self.ineq_offsets[self.dims.horizon + 1]
    }

    fn evaluate(&self, y: &[f64]) -> NlpEval {
        let (ny, ne, ni) = (self.primal_dim(), self.eq_dim(), self.ineq_dim());
        let n = self.dims.state;
        let nw = self.nw();
        let big_n = self.dims.horizon;
        let mut ev = NlpEval {
            objective: 0.0,
            grad: DVector::zeros(ny),
            eq: DVector::zeros(ne),
            eq_jac: DMatrix::zeros(ne, ny),
            ineq: DVector::zeros(ni),
            ineq_jac: DMatrix::zeros(ni, ny),
        };
        for r in 0..n {
            ev.eq[r] = y[r] - self.s[r];
            ev.eq_jac[(r, r)] = 1.0;
        }
        for k in 0..big_n {
            let off = self.stage_offset(k);
            let w = self.stage_vars(y, k);
            let i = self.profile.stage(k);
            let l = self.model.stage_cost(k, w, i, &self.theta);
            ev.objective += l.value[0];
            for c in 0..nw {
                ev.grad[off + c] += l.jac[(0, c)];
            }
            let f = self.model.dynamics(k, w, i, &self.theta);
            let next = self.stage_offset(k + 1);
            for r in 0..n {
                let row = (k + 1) * n + r;
                ev.eq[row] = f.value[r] - y[next + r];
                for c in 0..nw {
                    ev.eq_jac[(row, off + c)] = f.jac[(r, c)];
                }
                ev.eq_jac[(row, next + r)] -= 1.0;
            }
            let h = self.model.stage_constraints(k, w, i, &self.theta);
            let io = self.ineq_offsets[k];
            for r in 0..h.outputs() {
                ev.ineq[io + r] = h.value[r];
                for c in 0..nw {
                    ev.ineq_jac[(io + r, off + c)] = h.jac[(r, c)];
                }
            }
        }
        let off = self.stage_offset(big_n);
        let xn = self.terminal_vars(y);
        let t = self.model.terminal_cost(xn, &self.theta);
        ev.objective += t.value[0];
        for c in 0..n {
            ev.grad[off + c] += t.jac[(0, c)];
        }
        let h = self.model.terminal_constraints(xn, &self.theta);
        let io = self.ineq_offsets[big_n];
        for r in 0..h.outputs() {
            ev.ineq[io + r] = h.value[r];
            for c in 0..n {
                ev.ineq_jac[(io + r, off + c)] = h.jac[(r, c)];
            }
        }
        let u0 = self.u0_offset();
        for j in 0..self.dims.control {
            ev.objective += self.d[j] * y[u0 + j];
            ev.grad[u0 + j] += self.d[j];
        }
        ev
    }

    fn lagrangian_hessian(&self, y: &[f64], lambda: &[f64], mu: &[f64]) -> DMatrix<f64> {
        let ny = self.primal_dim();
        let n = self.dims.state;
        let nw = self.nw();
        let big_n = self.dims.horizon;
        let mut hess = DMatrix::zeros(ny, ny);
        let add_block = |hess: &mut DMatrix<f64>, off: usize, width: usize, m: &DMatrix<f64>, scale: f64| {
            if scale == 0.0 {
                return;
            }
            for r in 0..width {
                for c in 0..width {
                    hess[(off + r, off + c)] += scale * m[(r, c)];
                }
            }
        };
        for k in 0..big_n {
            let off = self.stage_offset(k);
            let w = self.stage_vars(y, k);
            let i = self.profile.stage(k);
            let l = self.model.stage_cost(k, w, i, &self.theta);
            if let Some(m) = l.hess.first() {
                add_block(&mut hess, off, nw, m, 1.0);
            }
            let f = self.model.dynamics(k, w, i, &self.theta);
            for (r, m) in f.hess.iter().enumerate() {
                add_block(&mut hess, off, nw, m, lambda[(k + 1) * n + r]);
            }
            let h = self.model.stage_constraints(k, w, i, &self.theta);
            let io = self.ineq_offsets[k];
            for (r, m) in h.hess.iter().enumerate() {
                add_block(&mut hess, off, nw, m, mu[io + r]);
            }
        }
        let off = self.stage_offset(big_n);
        let xn = self.terminal_vars(y);
        let t = self.model.terminal_cost(xn, &self.theta);
        if let Some(m) = t.hess.first() {
            add_block(&mut hess, off, n, m, 1.0);
        }
        let h = self.model.terminal_constraints(xn, &self.theta);
        let io = self.ineq_offsets[big_n];
        for (r, m) in h.hess.iter().enumerate() {
            add_block(&mut hess, off, n, m, mu[io + r]);
        }
        hess
    }

    fn initial_primal(&self) -> Vec<f64> {
        self.model.initial_guess(&self.s, &self.theta, &self.profile)
    }

    fn kkt_ordering(&self) -> Option<Vec<usize>> {
        // (lambda_0, w_0, lambda_1, w_1, ..., lambda_N, x_N)
        let ny = self.primal_dim();
        let n = self.dims.state;
        let nw = self.nw();
        let mut order = Vec::with_capacity(ny + self.eq_dim());
        for k in 0..=self.dims.horizon {
            for r in 0..n {
                order.push(ny + k * n + r);
            }
            let width = if k < self.dims.horizon { nw } else { n };
            let off = self.stage_offset(k);
            order.extend(off..off + width);
        }
        Some(order)
    }
}

impl ParametricNlp for FixedIntegerNlp<'_> {
    fn param_dim(&self) -> usize {
        self.dims.theta + self.dims.control
    }

    fn param_derivatives(&self, y: &[f64], lambda: &[f64], mu: &[f64]) -> ParamDerivatives {
        let (ny, ne, ni) = (self.primal_dim(), self.eq_dim(), self.ineq_dim());
        let nt = self.dims.theta;
        let np = self.param_dim();
        let n = self.dims.state;
        let nw = self.nw();
        let big_n = self.dims.horizon;
        let mut pd = ParamDerivatives {
            lagrangian: DVector::zeros(np),
            lagrangian_yp: DMatrix::zeros(ny, np),
            eq_p: DMatrix::zeros(ne, np),
            ineq_p: DMatrix::zeros(ni, np),
        };
        // Accumulates weight * (gradient over theta, cross Hessian rows) of one evaluator output.
        let accumulate = |pd: &mut ParamDerivatives, e: &crate::ocp::Eval, out: usize, width: usize, off: usize, weight: f64| {
            if weight == 0.0 {
                return;
            }
            for j in 0..nt {
                pd.lagrangian[j] += weight * e.jac[(out, width + j)];
            }
            if let Some(h) = e.hess.get(out) {
                for r in 0..width {
                    for j in 0..nt {
                        pd.lagrangian_yp[(off + r, j)] += weight * h[(r, width + j)];
                    }
                }
            }
        };
        for k in 0..big_n {
            let off = self.stage_offset(k);
            let w = self.stage_vars(y, k);
            let i = self.profile.stage(k);
            let l = self.model.stage_cost(k, w, i, &self.theta);
            accumulate(&mut pd, &l, 0, nw, off, 1.0);
            let f = self.model.dynamics(k, w, i, &self.theta);
            for r in 0..n {
                let row = (k + 1) * n + r;
                accumulate(&mut pd, &f, r, nw, off, lambda[row]);
                for j in 0..nt {
                    pd.eq_p[(row, j)] = f.jac[(r, nw + j)];
                }
            }
            let h = self.model.stage_constraints(k, w, i, &self.theta);
            let io = self.ineq_offsets[k];
            for r in 0..h.outputs() {
                accumulate(&mut pd, &h, r, nw, off, mu[io + r]);
                for j in 0..nt {
                    pd.ineq_p[(io + r, j)] = h.jac[(r, nw + j)];
                }
            }
        }
        let off = self.stage_offset(big_n);
        let xn = self.terminal_vars(y);
        let t = self.model.terminal_cost(xn, &self.theta);
        accumulate(&mut pd, &t, 0, n, off, 1.0);
        let h = self.model.terminal_constraints(xn, &self.theta);
        let io = self.ineq_offsets[big_n];
        for r in 0..h.outputs() {
            accumulate(&mut pd, &h, r, n, off, mu[io + r]);
            for j in 0..nt {
                pd.ineq_p[(io + r, j)] = h.jac[(r, n + j)];
            }
        }
        let u0 = self.u0_offset();
        for j in 0..self.dims.control {
            pd.lagrangian[nt + j] = y[u0 + j];
            pd.lagrangian_yp[(u0 + j, nt + j)] = 1.0;
        }
        pd
    }
}

/// Elastic feasibility problem used to find a strictly interior start:
/// `min t + eps/2 |y - y0|^2  s.t.  f(y) = 0, h(y) <= t, t >= -1`.
///
/// Primal layout `(y, t)`.
pub struct PhaseOne<'n, N: Nlp + ?Sized> {
    inner: &'n N,
    anchor: Vec<f64>,
    proximal: f64,
}

impl<'n, N: Nlp + ?Sized> PhaseOne<'n, N> {
    pub const FLOOR: f64 = -1.0;

    pub fn new(inner: &'n N, anchor: Vec<f64>) -> Self {
        Self {
            inner,
            anchor,
            proximal: 1e-4,
        }
    }

    /// A strictly feasible start for the elastic problem.
    pub fn start(&self) -> Vec<f64> {
        let ev = self.inner.evaluate(&self.anchor);
        let worst = ev.ineq.iter().cloned().fold(Self::FLOOR, f64::max);
        let mut y = self.anchor.clone();
        y.push(worst + 1.0);
        y
    }
}

impl<N: Nlp + ?Sized> Nlp for PhaseOne<'_, N> {
    fn primal_dim(&self) -> usize {
        self.inner.primal_dim() + 1
    }

    fn eq_dim(&self) -> usize {
        self.inner.eq_dim()
    }

    fn ineq_dim(&self) -> usize {
        self.inner.ineq_dim() + 1
    }

    fn evaluate(&self, y: &[f64]) -> NlpEval {
        let ny = self.inner.primal_dim();
        let (yi, t) = (&y[..ny], y[ny]);
        let ev = self.inner.evaluate(yi);
        let ni = self.inner.ineq_dim();
        let ne = self.inner.eq_dim();
        let mut out = NlpEval {
            objective: t,
            grad: DVector::zeros(ny + 1),
            eq: ev.eq.clone(),
            eq_jac: DMatrix::zeros(ne, ny + 1),
            ineq: DVector::zeros(ni + 1),
            ineq_jac: DMatrix::zeros(ni + 1, ny + 1),
        };
        for j in 0..ny {
            let dy = yi[j] - self.anchor[j];
            out.objective += 0.5 * self.proximal * dy * dy;
            out.grad[j] = self.proximal * dy;
        }
        out.grad[ny] = 1.0;
        out.eq_jac.view_mut((0, 0), (ne, ny)).copy_from(&ev.eq_jac);
        for r in 0..ni {
            out.ineq[r] = ev.ineq[r] - t;
            for c in 0..ny {
                out.ineq_jac[(r, c)] = ev.ineq_jac[(r, c)];
            }
            out.ineq_jac[(r, ny)] = -1.0;
        }
        out.ineq[ni] = Self::FLOOR - t;
        out.ineq_jac[(ni, ny)] = -1.0;
        out
    }

    fn lagrangian_hessian(&self, y: &[f64], lambda: &[f64], mu: &[f64]) -> DMatrix<f64> {
        let ny = self.inner.primal_dim();
        let ni = self.inner.ineq_dim();
        let inner = self.inner.lagrangian_hessian(&y[..ny], lambda, &mu[..ni]);
        let mut h = DMatrix::zeros(ny + 1, ny + 1);
        h.view_mut((0, 0), (ny, ny)).copy_from(&inner);
        for j in 0..ny {
            h[(j, j)] += self.proximal;
        }
        h
    }

    fn initial_primal(&self) -> Vec<f64> {
        self.start()
    }
}
