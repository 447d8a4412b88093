//! Derivatives of parametric NLP solutions at a fixed barrier parameter.
//!
//! Everything here differentiates the barrier KKT system `r(z, p) = 0` that the
//! interior-point solver returns at `tau_target`, not the limit `tau -> 0`.
//! Parameters are `p = (theta, d)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ip::{self, kkt_residual, IpOptions, KktFactor, PrimalDualPoint};
use crate::nlp::{FixedIntegerNlp, Nlp, NlpEval, ParametricNlp};

fn check_fresh<N: Nlp + ?Sized>(z: &PrimalDualPoint, nlp: &N, tolerance: f64) -> Result<()> {
    let res = kkt_residual(z, nlp).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let limit = 10.0 * tolerance;
    if !(res <= limit) {
        return Err(Error::StalePoint { residual: res, limit });
    }
    Ok(())
}

/// `dL/dp` at fixed `(y, lambda, mu)`, which is the gradient of the optimal
/// value of the barrier problem.
///
/// `tolerance` is the solver tolerance the point was computed with; points
/// whose KKT residual exceeds ten times it are rejected.
pub fn grad_value_wrt_params<N: ParametricNlp + ?Sized>(
    z: &PrimalDualPoint,
    nlp: &N,
    tolerance: f64,
) -> Result<DVector<f64>> {
    check_fresh(z, nlp, tolerance)?;
    Ok(nlp.param_derivatives(&z.y, &z.lambda, &z.mu).lagrangian)
}

/// `grad_theta Phi` of a fixed-integer problem.
pub fn grad_value_wrt_theta(z: &PrimalDualPoint, nlp: &FixedIntegerNlp, tolerance: f64) -> Result<Vec<f64>> {
    let g = grad_value_wrt_params(z, nlp, tolerance)?;
    Ok(g.as_slice()[..nlp.dims().theta].to_vec())
}

// (dr/dz) v with r = (grad L, f, mu o h + tau).
fn jacobian_times(ev: &NlpEval, hess: &DMatrix<f64>, mu: &[f64], v: &[f64]) -> Vec<f64> {
    let (ny, ne) = (ev.grad.len(), ev.eq.len());
    let vy = DVector::from_column_slice(&v[..ny]);
    let vl = DVector::from_column_slice(&v[ny..ny + ne]);
    let vm = DVector::from_column_slice(&v[ny + ne..]);
    let top = hess * &vy + ev.eq_jac.tr_mul(&vl) + ev.ineq_jac.tr_mul(&vm);
    let mid = &ev.eq_jac * &vy;
    let jv = &ev.ineq_jac * &vy;
    let bottom = (0..mu.len()).map(|j| mu[j] * jv[j] + ev.ineq[j] * vm[j]);
    top.iter().chain(mid.iter()).cloned().chain(bottom).collect()
}

/// `dz/dp = -(dr/dz)^-1 dr/dp`, one factorization for all columns.
///
/// Rows follow `z = (y, lambda, mu)`.
pub fn solution_sensitivity<N: ParametricNlp + ?Sized>(z: &PrimalDualPoint, nlp: &N) -> Result<DMatrix<f64>> {
    let factor = KktFactor::new(nlp, z)?;
    let ev = nlp.evaluate(&z.y);
    let hess = nlp.lagrangian_hessian(&z.y, &z.lambda, &z.mu);
    let pd = nlp.param_derivatives(&z.y, &z.lambda, &z.mu);
    let (ny, ne, ni) = (nlp.primal_dim(), nlp.eq_dim(), nlp.ineq_dim());
    let np = nlp.param_dim();
    let mut out = DMatrix::zeros(ny + ne + ni, np);
    let mut rhs = vec![0.0; ny + ne + ni];
    for j in 0..np {
        for r in 0..ny {
            rhs[r] = -pd.lagrangian_yp[(r, j)];
        }
        for r in 0..ne {
            rhs[ny + r] = -pd.eq_p[(r, j)];
        }
        for r in 0..ni {
            rhs[ny + ne + r] = -z.mu[r] * pd.ineq_p[(r, j)];
        }
        let mut col = factor.solve(&rhs);
        // The condensed factor recovers mu steps by division through h; two
        // refinement sweeps against the unreduced Jacobian remove the cancellation.
        for _ in 0..2 {
            let resid = jacobian_times(&ev, &hess, &z.mu, &col);
            let corr: Vec<f64> = resid.iter().zip(&rhs).map(|(a, b)| b - a).collect();
            for (c, d) in col.iter_mut().zip(factor.solve(&corr)) {
                *c += d;
            }
        }
        out.set_column(j, &DVector::from_vec(col));
    }
    Ok(out)
}

/// Sensitivities of the first continuous input `u_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstInputSensitivity {
    /// `d u_0 / d theta`, `m_c x dim theta`.
    pub theta: DMatrix<f64>,
    /// `d u_0 / d d`, `m_c x m_c`.
    pub d: DMatrix<f64>,
}

pub fn first_input_sensitivity(z: &PrimalDualPoint, nlp: &FixedIntegerNlp) -> Result<FirstInputSensitivity> {
    let dz = solution_sensitivity(z, nlp)?;
    let dims = nlp.dims();
    let u0 = nlp.u0_offset();
    let mc = dims.control;
    Ok(FirstInputSensitivity {
        theta: dz.view((u0, 0), (mc, dims.theta)).into_owned(),
        d: dz.view((u0, dims.theta), (mc, mc)).into_owned(),
    })
}

/// Re-solves `nlp` with the perturbation `d`, warm-started from `z` at the same `tau`.
pub fn resolve_with_perturbation<'a>(
    nlp: &FixedIntegerNlp<'a>,
    z: &PrimalDualPoint,
    d: &[f64],
    opts: &IpOptions,
) -> Result<(FixedIntegerNlp<'a>, PrimalDualPoint)> {
    let moved = nlp.with_perturbation(d)?;
    let opts = opts.with_tau(z.tau);
    let rep = ip::solve(&moved, &opts, Some(z))?.into_solved()?;
    Ok((moved, rep.point))
}

/// `sum_i d^2 u_0 / d d_i^2` by central differences of the IFT derivative
/// `d u_0 / d d` between the solutions at `d +- h e_i`.
pub fn second_derivative_u0_wrt_d(
    nlp: &FixedIntegerNlp,
    z: &PrimalDualPoint,
    h: f64,
    opts: &IpOptions,
) -> Result<DVector<f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("difference step must be positive, got {h}")));
    }
    let mc = nlp.dims().control;
    let base = nlp.perturbation().to_vec();
    let mut sum = DVector::zeros(mc);
    for i in 0..mc {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let (np, zp) = resolve_with_perturbation(nlp, z, &plus, opts)?;
        let (nm, zm) = resolve_with_perturbation(nlp, z, &minus, opts)?;
        let sp = first_input_sensitivity(&zp, &np)?.d;
        let sm = first_input_sensitivity(&zm, &nm)?.d;
        sum += (sp.column(i) - sm.column(i)) / (2.0 * h);
    }
    Ok(sum)
}

/// Which matrix weights the continuous features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceForm {
    /// `M = S S'` with `S = d u_0 / d d`.
    Gram,
    /// `M = (S S')^-1`. Since `e ~ S d` with `d ~ N(0, sigma_c I)`, this is the
    /// choice that makes `E[M (e - c) e'] / sigma_c -> I`, which is what
    /// compatibility of the approximator rests on.
    #[default]
    InverseGram,
}

/// `(M, c)` with `c = sigma_c / 2 * sum_i d^2 u_0 / d d_i^2`.
pub fn estimate_m_c(
    s: &DMatrix<f64>,
    second: &DVector<f64>,
    sigma_c: f64,
    form: CovarianceForm,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let gram = s * s.transpose();
    let m = match form {
        CovarianceForm::Gram => gram,
        CovarianceForm::InverseGram => {
            let cond = {
                let sv = gram.clone().svd(false, false).singular_values;
                sv.max() / sv.min()
            };
            gram.try_inverse()
                .filter(|_| cond.is_finite() && cond < 1e12)
                .ok_or(Error::RankDeficient { condition: cond })?
        }
    };
    Ok((m, 0.5 * sigma_c * second))
}

/// `grad_theta log pi_i[a | s]` of the softmax over branch values.
///
/// `probabilities` must be zero exactly on infeasible branches; every
/// feasible branch needs a gradient.
pub fn score_function(
    chosen: usize,
    probabilities: &[f64],
    gradients: &[Option<Vec<f64>>],
    sigma_i: f64,
) -> Result<Vec<f64>> {
    let first = |i: usize| vec![i as u8];
    let g_chosen = gradients
        .get(chosen)
        .and_then(|g| g.as_ref())
        .ok_or_else(|| Error::MissingGradient { first: first(chosen) })?;
    let dim = g_chosen.len();
    let mut mean = vec![0.0; dim];
    for (i, &p) in probabilities.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let g = gradients
            .get(i)
            .and_then(|g| g.as_ref())
            .ok_or_else(|| Error::MissingGradient { first: first(i) })?;
        for (m, v) in mean.iter_mut().zip(g) {
            *m += p * v;
        }
    }
    Ok((0..dim).map(|j| (mean[j] - g_chosen[j]) / sigma_i).collect())
}

/// `min_j max(|h_j|, mu_j)`: small when some constraint is neither clearly
/// inactive nor clearly active, i.e. near a change of the active set.
pub fn active_set_proximity<N: Nlp + ?Sized>(z: &PrimalDualPoint, nlp: &N) -> f64 {
    let h = nlp.evaluate(&z.y).ineq;
    h.iter()
        .zip(&z.mu)
        .map(|(h, m)| h.abs().max(*m))
        .fold(f64::INFINITY, f64::min)
}

/// Default flag threshold `10 sqrt(tau)`.
///
/// On the central path `|h_j| mu_j = tau`, so `max(|h_j|, mu_j) >= sqrt(tau)`
/// with equality exactly where constraint `j` switches between active and
/// inactive; the smoothed solution bends on that scale.
pub fn default_proximity_threshold(tau: f64) -> f64 {
    10.0 * tau.sqrt()
}

/// Derivative information attached to one sampled transition of the scalar benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBundle {
    /// `grad_theta Phi^i` per first input, `None` for infeasible branches.
    pub value_gradients: Vec<Option<Vec<f64>>>,
    /// `grad_theta pi_c` at `d = 0`.
    pub policy_gradient: Vec<f64>,
    /// `d u_0 / d d` at `d = 0`.
    pub du0_dd: f64,
    pub m: f64,
    pub c: f64,
    /// `min_j max(|h_j|, mu_j)` of the chosen branch at `d = 0`.
    pub proximity: f64,
}
