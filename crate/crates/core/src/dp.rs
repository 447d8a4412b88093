//! Exact dynamic programming for the scalar benchmark.
//!
//! With the penalty slack eliminated, every tail value function of
//! [`ExampleOcp`] is piecewise quadratic in the state, so the integer program
//! can be solved exactly by a backward recursion over [`Pwq`] functions:
//!
//! ```text
//! V_N(x) = P/2 (x - s_ref)^2
//! V_k(x) = l(x) + min( V_{k+1}(x + b),  w + env V_{k+1}(x + b + a_ref) )
//! ```
//!
//! where `l` is the state part of the stage cost and `env f(t) = min_z 1/2 (z - t)^2 + f(z)`.
//! The `i = 0` branch always plays `u = a_ref`, which does not move the state.
//! Fixing the integer choice per stage gives the convex value function of one
//! integer profile.

use crate::minlp::IntegerProfile;
use crate::ocp::{ExampleOcp, ThetaVector};
use crate::pwq::{Decision, Pwq, Quad};

/// An optimal continuous plan for one integer branch or profile.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// Optimal value of the (perturbed) objective `Phi + d u_0`.
    pub value: f64,
    pub profile: IntegerProfile,
    pub u: Vec<f64>,
    /// States `x_0 .. x_N`.
    pub x: Vec<f64>,
}

impl Plan {
    /// Penalty slacks `sigma_k = max(|x_k| - 0.2, 0)`.
    pub fn sigma(&self) -> Vec<f64> {
        self.x[..self.u.len()]
            .iter()
            .map(|x| (x.abs() - ExampleOcp::PENALTY_BOUND).max(0.0))
            .collect()
    }
}

/// Tail value functions `V_1 .. V_N` and the envelope of `V_1`.
#[derive(Debug, Clone)]
pub struct ValueFunctions {
    ocp: ExampleOcp,
    theta: ThetaVector,
    // values[k - 1] = V_k
    values: Vec<Pwq>,
    first_envelope: Pwq,
    fixed_tail: Option<Vec<u8>>,
}

fn state_cost(theta: &ThetaVector) -> Pwq {
    Pwq::quadratic(Quad::centered(1.0, theta.s_ref), Decision::NONE)
        .add(&Pwq::dead_zone(theta.c, ExampleOcp::PENALTY_BOUND))
}

impl ValueFunctions {
    /// Value functions of the integer program over stages `1 .. N-1`.
    pub fn integer(ocp: &ExampleOcp, theta: &ThetaVector) -> Self {
        Self::build(ocp, theta, None)
    }

    /// Value functions with the integer inputs of stages `1 .. N-1` fixed to `tail`.
    pub fn fixed(ocp: &ExampleOcp, theta: &ThetaVector, tail: &[u8]) -> Self {
        assert_eq!(tail.len() + 1, ocp.horizon(), "tail covers stages 1..N-1");
        Self::build(ocp, theta, Some(tail.to_vec()))
    }

    fn build(ocp: &ExampleOcp, theta: &ThetaVector, tail: Option<Vec<u8>>) -> Self {
        let n = ocp.horizon();
        let bounded = |f: Pwq| match ocp.hard_bounds() {
            Some((lo, hi)) => f.restrict(lo, hi),
            None => f,
        };
        let mut values = vec![Pwq::infinite(); n];
        values[n - 1] = bounded(Pwq::quadratic(
            Quad::centered(ocp.terminal_weight(), theta.s_ref),
            Decision::NONE,
        ));
        let stage = state_cost(theta);
        for k in (1..n).rev() {
            let next = &values[k];
            let forced = tail.as_ref().map(|t| t[k - 1]);
            let off = if forced == Some(1) {
                None
            } else {
                let cont = next.shift(theta.b);
                Some(
                    stage
                        .map_decisions(|_| Decision::new(0, 0.0, theta.a_ref))
                        .add(&cont),
                )
            };
            let on = if forced == Some(0) {
                None
            } else {
                Some(
                    next.envelope(1)
                        .shift(theta.b + theta.a_ref)
                        .map_decisions(|d| Decision::new(1, d.slope - 1.0, d.offset - theta.b))
                        .add(&stage)
                        .add_quad(&Quad::new(0.0, 0.0, theta.w)),
                )
            };
            let v = match (off, on) {
                (Some(a), Some(b)) => a.min(&b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!(),
            };
            values[k - 1] = bounded(v);
        }
        let first_envelope = values[0].envelope(1);
        Self {
            ocp: ocp.clone(),
            theta: *theta,
            values,
            first_envelope,
            fixed_tail: tail,
        }
    }

    pub fn ocp(&self) -> &ExampleOcp {
        &self.ocp
    }

    pub fn theta(&self) -> &ThetaVector {
        &self.theta
    }

    /// `V_k`, `1 <= k <= N`.
    pub fn value_function(&self, k: usize) -> &Pwq {
        &self.values[k - 1]
    }

    /// Largest number of pieces over the stored functions.
    pub fn max_pieces(&self) -> usize {
        self.values.iter().map(Pwq::len).max().unwrap_or(0).max(self.first_envelope.len())
    }

    /// Optimal plan from state `s` with first integer input `a0` and the
    /// linear term `d u_0`; `None` if the branch is infeasible.
    pub fn plan(&self, s: f64, a0: u8, d: f64) -> Option<Plan> {
        let th = &self.theta;
        let n = self.ocp.horizon();
        let head = 0.5 * (s - th.s_ref).powi(2)
            + th.c * (s.abs() - ExampleOcp::PENALTY_BOUND).max(0.0)
            + d * th.a_ref
            - 0.5 * d * d;
        let (u0, x1, tail_value) = if a0 == 0 {
            let x1 = s + th.b;
            (th.a_ref - d, x1, self.values[0].eval(x1)?)
        } else {
            let t = s + th.b + th.a_ref - d;
            let piece = self.first_envelope.piece_at(t);
            let env = piece.quad?.eval(t);
            let z = piece.decision.at(t);
            (z - s - th.b, z, env + th.w)
        };
        let mut bits = vec![a0];
        let mut u = vec![u0];
        let mut x = vec![s, x1];
        for k in 1..n {
            let xk = x[k];
            let dec = self.values[k - 1].piece_at(xk).decision;
            let i = match &self.fixed_tail {
                Some(t) => t[k - 1],
                None => dec.integer,
            };
            debug_assert_eq!(i, dec.integer);
            let uk = dec.at(xk);
            bits.push(i);
            u.push(uk);
            x.push(xk + uk * f64::from(i) + th.b);
        }
        Some(Plan {
            value: head + tail_value,
            profile: IntegerProfile::from_bits(&bits),
            u,
            x,
        })
    }
}
