//! Policy evaluation on a state grid and the least-squares advantage fit.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::Plant;
use crate::error::{Error, Result};
use crate::policy::{MixedAction, MpcPolicy};

/// Uniform grid on `[lo, hi]` with `nodes` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
    /// Gauss-Hermite nodes over the continuous perturbation.
    pub hermite_nodes: usize,
    /// Midpoint cells over the process noise.
    pub noise_nodes: usize,
    /// Stop when the sup-norm change of a sweep is below this.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            lo: -1.5,
            hi: 1.5,
            nodes: 301,
            hermite_nodes: 5,
            noise_nodes: 8,
            tolerance: 1e-6,
            max_sweeps: 10_000,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite() && self.lo < self.hi) || self.nodes < 2 {
            return Err(Error::InvalidArgument("grid needs lo < hi and at least two nodes".into()));
        }
        if self.noise_nodes == 0 {
            return Err(Error::InvalidArgument("at least one noise node is needed".into()));
        }
        hermite_rule(self.hermite_nodes)?;
        if !(self.tolerance > 0.0) || self.max_sweeps == 0 {
            return Err(Error::InvalidArgument("policy evaluation needs a positive tolerance and sweep budget".into()));
        }
        Ok(())
    }

    pub fn points(&self) -> Vec<f64> {
        let h = (self.hi - self.lo) / (self.nodes - 1) as f64;
        (0..self.nodes).map(|j| self.lo + j as f64 * h).collect()
    }
}

/// Probabilists' Gauss-Hermite rule for `N(0, 1)`, weights summing to one.
pub fn hermite_rule(n: usize) -> Result<Vec<(f64, f64)>> {
    let rule: &[(f64, f64)] = match n {
        1 => &[(0.0, 1.0)],
        3 => &[(-1.7320508075688772, 1.0 / 6.0), (0.0, 2.0 / 3.0), (1.7320508075688772, 1.0 / 6.0)],
        5 => &[
            (-2.856970013872805, 0.011257411327720691),
            (-1.355626179974266, 0.22207592200561266),
            (0.0, 0.5333333333333333),
            (1.355626179974266, 0.22207592200561266),
            (2.856970013872805, 0.011257411327720691),
        ],
        _ => return Err(Error::Unsupported(format!("Gauss-Hermite rule with {n} nodes"))),
    };
    Ok(rule.to_vec())
}

/// Expected one-step cost and successor distribution from a state.
pub trait TransitionModel: Sync {
    /// `(weight, cost, next state)` triples with weights summing to one.
    fn outcomes(&self, s: f64) -> Result<Vec<(f64, f64, f64)>>;
}

/// The MPC policy acting on the plant, with quadrature over the policy's
/// randomness and the process noise.
pub struct PolicyTransitions<'a> {
    pub policy: &'a MpcPolicy,
    pub plant: &'a Plant,
    pub hermite_nodes: usize,
    pub noise_nodes: usize,
}

impl TransitionModel for PolicyTransitions<'_> {
    fn outcomes(&self, s: f64) -> Result<Vec<(f64, f64, f64)>> {
        let (table, probs) = self.policy.integer_policy_distribution(s)?;
        let rule = hermite_rule(self.hermite_nodes)?;
        let noise = self.plant.noise.midpoints(self.noise_nodes);
        let wn = 1.0 / noise.len() as f64;
        let scale = self.policy.exploration().sigma_c.sqrt();
        let mut out = Vec::new();
        for (i, p) in probs.iter().enumerate() {
            if *p == 0.0 {
                continue;
            }
            let profile = &table.branches[i].as_ref().expect("positive probability").profile;
            for &(x, wd) in &rule {
                let ac = self.policy.exact_plan(s, profile, scale * x)?.u[0];
                let a = MixedAction::new(ac, i as u8);
                let cost = self.plant.stage_cost(s, &a);
                let base = Plant::drift(s, &a);
                for n in &noise {
                    out.push((p * wd * wn, cost, base + n));
                }
            }
        }
        Ok(out)
    }
}

/// Piecewise-linear value function on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub lo: f64,
    pub hi: f64,
    pub values: Vec<f64>,
    pub sweeps: usize,
    /// Sup-norm change of the last sweep.
    pub residual: f64,
    /// Successor states that fell outside the grid and were clamped.
    pub clamped: usize,
}

impl ValueTable {
    fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.values.len() - 1) as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.values.len()).map(|j| self.lo + j as f64 * h).collect()
    }

    /// Linear interpolation, clamped to the end nodes outside the grid.
    pub fn eval(&self, s: f64) -> f64 {
        let (j, t) = locate(self.lo, self.step(), self.values.len(), s).0;
        if t == 0.0 {
            self.values[j]
        } else {
            (1.0 - t) * self.values[j] + t * self.values[j + 1]
        }
    }
}

// ((node, fraction towards node + 1), clamped)
fn locate(lo: f64, h: f64, n: usize, s: f64) -> ((usize, f64), bool) {
    let u = (s - lo) / h;
    if !(u > 0.0) {
        return ((0, 0.0), u < 0.0 || u.is_nan());
    }
    if u >= (n - 1) as f64 {
        return ((n - 1, 0.0), u > (n - 1) as f64);
    }
    let j = u.floor() as usize;
    ((j, u - j as f64), false)
}

/// Fixed-point iteration of the Bellman operator of `model` on the grid.
pub fn policy_evaluation<M: TransitionModel>(model: &M, grid: &GridConfig, gamma: f64) -> Result<ValueTable> {
    grid.validate()?;
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("discount {gamma} outside [0, 1)")));
    }
    let points = grid.points();
    let h = (grid.hi - grid.lo) / (grid.nodes - 1) as f64;
    let n = grid.nodes;
    // per node: expected cost and sparse interpolation weights of the successor
    let rows = points
        .par_iter()
        .map(|&s| {
            let mut cost = 0.0;
            let mut next = vec![0.0; n];
            let mut clamped = 0;
            for (w, l, x) in model.outcomes(s)? {
                cost += w * l;
                let ((j, t), out) = locate(grid.lo, h, n, x);
                clamped += usize::from(out);
                next[j] += w * (1.0 - t);
                if t > 0.0 {
                    next[j + 1] += w * t;
                }
            }
            let sparse: Vec<(usize, f64)> = next.into_iter().enumerate().filter(|(_, w)| *w != 0.0).collect();
            Ok((cost, sparse, clamped))
        })
        .collect::<Result<Vec<_>>>()?;
    let clamped: usize = rows.iter().map(|r| r.2).sum();
    if clamped > 0 {
        log::warn!("{clamped} successor states left the evaluation grid and were clamped");
    }
    let mut v = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for sweep in 1..=grid.max_sweeps {
        let next: Vec<f64> = rows
            .iter()
            .map(|(c, row, _)| c + gamma * row.iter().map(|(j, w)| w * v[*j]).sum::<f64>())
            .collect();
        residual = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if residual <= grid.tolerance {
            return Ok(ValueTable {
                lo: grid.lo,
                hi: grid.hi,
                values: v,
                sweeps: sweep,
                residual,
                clamped,
            });
        }
    }
    Err(Error::PolicyEvaluationNotConverged {
        sweeps: grid.max_sweeps,
        residual,
    })
}

/// `A(s, a) = L(s, a) + gamma E_n V(s + a_c a_i + n) - V(s)`.
pub fn advantage(plant: &Plant, v: &ValueTable, gamma: f64, noise_nodes: usize, s: f64, a: &MixedAction) -> f64 {
    let base = Plant::drift(s, a);
    let noise = plant.noise.midpoints(noise_nodes);
    let ev = noise.iter().map(|n| v.eval(base + n)).sum::<f64>() / noise.len() as f64;
    plant.stage_cost(s, a) + gamma * ev - v.eval(s)
}

/// Central difference of the advantage in `a_c`.
pub fn advantage_slope(
    plant: &Plant,
    v: &ValueTable,
    gamma: f64,
    noise_nodes: usize,
    s: f64,
    a: &MixedAction,
    step: f64,
) -> f64 {
    let at = |ac: f64| advantage(plant, v, gamma, noise_nodes, s, &MixedAction::new(ac, a.integer));
    (at(a.continuous + step) - at(a.continuous - step)) / (2.0 * step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageFit {
    pub w: Vec<f64>,
    /// `||A - Psi w|| / sqrt(n)`.
    pub residual_norm: f64,
    /// 2-norm condition number of the regularized normal matrix.
    pub condition: f64,
    pub regularization: f64,
}

/// Least squares `A ~ w' psi` through the regularized normal equations
/// `(sum psi psi' + lambda I) w = sum psi A`, `lambda = 1e-8 trace / dim`.
pub fn fit_weights(features: &[Vec<f64>], targets: &[f64]) -> Result<AdvantageFit> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature vectors for {} targets",
            features.len(),
            targets.len()
        )));
    }
    let dim = features[0].len();
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for (psi, a) in features.iter().zip(targets) {
        let p = DVector::from_column_slice(psi);
        gram.syger(1.0, &p, &p, 1.0);
        rhs.axpy(*a, &p, 1.0);
    }
    let lambda = 1e-8 * gram.trace() / dim as f64;
    for j in 0..dim {
        gram[(j, j)] += lambda;
    }
    let eig = gram.clone().symmetric_eigenvalues();
    let condition = eig.max() / eig.min();
    let chol = gram
        .cholesky()
        .filter(|_| condition.is_finite() && condition > 0.0 && condition < 1e14)
        .ok_or(Error::RankDeficient { condition })?;
    let w = chol.solve(&rhs);
    let sq: f64 = features
        .iter()
        .zip(targets)
        .map(|(psi, a)| (a - psi.iter().zip(w.iter()).map(|(x, y)| x * y).sum::<f64>()).powi(2))
        .sum();
    Ok(AdvantageFit {
        w: w.as_slice().to_vec(),
        residual_norm: (sq / targets.len() as f64).sqrt(),
        condition,
        regularization: lambda,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant;
    impl TransitionModel for Constant {
        fn outcomes(&self, s: f64) -> Result<Vec<(f64, f64, f64)>> {
            Ok(vec![(0.5, 1.0, s + 0.1), (0.5, 1.0, s - 0.1)])
        }
    }

    #[test]
    fn constant_cost_gives_geometric_series() {
        let v = policy_evaluation(&Constant, &GridConfig::default(), 0.95).unwrap();
        for x in &v.values {
            assert!((x - 20.0).abs() < 1e-4);
        }
        assert!(v.clamped > 0);
    }

    #[test]
    fn hermite_moments() {
        for n in [1usize, 3, 5] {
            let r = hermite_rule(n).unwrap();
            let m = |k: i32| r.iter().map(|(x, w)| w * x.powi(k)).sum::<f64>();
            assert!((m(0) - 1.0).abs() < 1e-15);
            assert!(m(1).abs() < 1e-15);
            if n >= 3 {
                assert!((m(2) - 1.0).abs() < 1e-14);
            }
            if n == 5 {
                assert!((m(4) - 3.0).abs() < 1e-13);
                assert!((m(8) - 105.0).abs() < 1e-11);
            }
        }
    }

    #[test]
    fn interpolation_is_exact_on_lines() {
        let grid = GridConfig { nodes: 7, ..GridConfig::default() };
        let values: Vec<f64> = grid.points().iter().map(|x| 2.0 * x - 1.0).collect();
        let v = ValueTable { lo: grid.lo, hi: grid.hi, values, sweeps: 0, residual: 0.0, clamped: 0 };
        for s in [-1.5, -0.33, 0.0, 0.71, 1.5] {
            assert!((v.eval(s) - (2.0 * s - 1.0)).abs() < 1e-14);
        }
        assert_eq!(v.eval(9.0), v.eval(1.5));
    }

    #[test]
    fn zero_targets_give_zero_weights() {
        let f = vec![vec![1.0, 0.5], vec![-0.3, 2.0], vec![0.1, 0.1]];
        let fit = fit_weights(&f, &[0.0; 3]).unwrap();
        assert!(fit.w.iter().all(|w| *w == 0.0));
    }

    #[test]
    fn all_zero_features_are_rank_deficient() {
        let f = vec![vec![0.0, 0.0]; 4];
        assert!(matches!(fit_weights(&f, &[1.0; 4]), Err(Error::RankDeficient { .. })));
    }
}
