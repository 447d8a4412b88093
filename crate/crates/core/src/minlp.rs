use std::collections::{BinaryHeap, HashMap};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{Plan, ValueFunctions};
use crate::error::{Error, Result};
use crate::ip::{self, IpOptions, SolveReport, SolveStatus};
use crate::nlp::{FixedIntegerNlp, Nlp, NlpEval};
use crate::ocp::{ExampleOcp, OcpModel, ThetaVector};

/// Binary integer inputs `i_k`, `k = 0..N-1`, each of width `m_i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IntegerProfile {
    width: usize,
    bits: Vec<u8>,
}

impl IntegerProfile {
    pub fn new(width: usize, bits: Vec<u8>) -> Result<Self> {
        if width == 0 || bits.is_empty() || bits.len() % width != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} bits do not form stages of width {width}",
                bits.len()
            )));
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidArgument(format!("non-binary integer input {b}")));
        }
        Ok(Self { width, bits })
    }

    /// Scalar-input profile; panics on non-binary entries.
    pub fn from_bits(bits: &[u8]) -> Self {
        Self::new(1, bits.to_vec()).expect("binary profile")
    }

    pub fn zeros(horizon: usize, width: usize) -> Self {
        Self { width, bits: vec![0; horizon * width] }
    }

    pub fn ones(horizon: usize, width: usize) -> Self {
        Self { width, bits: vec![1; horizon * width] }
    }

    pub fn horizon(&self) -> usize {
        self.bits.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn stage(&self, k: usize) -> &[u8] {
        &self.bits[k * self.width..(k + 1) * self.width]
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }
}

/// How the integer program behind `Phi^i` is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinlpStrategy {
    /// Every completion of the remaining integer inputs, each solved exactly.
    Enumerate,
    /// Best-first branch-and-bound on McCormick relaxations solved by the
    /// interior-point method; leaves are solved exactly.
    BranchAndBound,
    /// Backward recursion on piecewise quadratic value functions.
    #[default]
    DynamicProgramming,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchAndBoundOptions {
    /// Assumed bound `|u_k| <= input_bound` for the relaxed stages; it is
    /// tightened further by the incumbent.
    pub input_bound: f64,
    /// Absolute optimality gap.
    pub gap: f64,
    /// Options for the relaxations.
    pub relaxation: IpOptions,
}

impl Default for BranchAndBoundOptions {
    fn default() -> Self {
        Self {
            input_bound: 10.0,
            gap: 1e-9,
            relaxation: IpOptions {
                tau_target: 1e-8,
                tolerance: 1e-9,
                ..IpOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BnbStats {
    pub relaxations: usize,
    pub leaves: usize,
    pub pruned: usize,
}

/// `Phi^i(s)` for every first integer input `i`; `None` marks an infeasible branch.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegerValueTable {
    pub state: f64,
    pub branches: Vec<Option<Plan>>,
}

impl IntegerValueTable {
    pub fn values(&self) -> Vec<Option<f64>> {
        self.branches.iter().map(|b| b.as_ref().map(|p| p.value)).collect()
    }

    pub fn feasible(&self) -> impl Iterator<Item = (u8, &Plan)> {
        self.branches
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.as_ref().map(|p| (i as u8, p)))
    }

    /// Minimizing first input; exact ties go to the smaller input.
    pub fn best(&self) -> Option<(u8, &Plan)> {
        let mut best: Option<(u8, &Plan)> = None;
        for (i, p) in self.feasible() {
            if best.map_or(true, |(_, b)| p.value < b.value) {
                best = Some((i, p));
            }
        }
        best
    }
}

/// The mixed-integer MPC scheme of the scalar benchmark at a fixed `theta`.
///
/// Fixed-profile value functions are cached, so repeated queries for the same
/// integer completion only pay for the forward pass.
pub struct ExampleMinlp {
    ocp: ExampleOcp,
    theta: ThetaVector,
    integer: ValueFunctions,
    fixed: Mutex<HashMap<Vec<u8>, Arc<ValueFunctions>>>,
    bnb: BranchAndBoundOptions,
}

impl std::fmt::Debug for ExampleMinlp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExampleMinlp")
            .field("ocp", &self.ocp)
            .field("theta", &self.theta)
            .finish_non_exhaustive()
    }
}

impl ExampleMinlp {
    pub fn new(ocp: &ExampleOcp, theta: &ThetaVector) -> Result<Self> {
        theta.validate()?;
        Ok(Self {
            ocp: ocp.clone(),
            theta: *theta,
            integer: ValueFunctions::integer(ocp, theta),
            fixed: Mutex::new(HashMap::new()),
            bnb: BranchAndBoundOptions::default(),
        })
    }

    pub fn with_bnb_options(mut self, opts: BranchAndBoundOptions) -> Result<Self> {
        opts.relaxation.validate()?;
        if !(opts.input_bound > 0.0) || !(opts.gap >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid branch-and-bound options {opts:?}")));
        }
        self.bnb = opts;
        Ok(self)
    }

    pub fn ocp(&self) -> &ExampleOcp {
        &self.ocp
    }

    pub fn theta(&self) -> &ThetaVector {
        &self.theta
    }

    pub fn value_functions(&self) -> &ValueFunctions {
        &self.integer
    }

    /// Value functions with stages `1..N-1` fixed to `tail`.
    pub fn fixed_tail(&self, tail: &[u8]) -> Arc<ValueFunctions> {
        let mut cache = self.fixed.lock().expect("fixed-profile cache poisoned");
        cache
            .entry(tail.to_vec())
            .or_insert_with(|| Arc::new(ValueFunctions::fixed(&self.ocp, &self.theta, tail)))
            .clone()
    }

    /// Exact solution of the continuous problem of a full profile with the
    /// linear term `d u_0`.
    pub fn fixed_plan(&self, s: f64, profile: &IntegerProfile, d: f64) -> Option<Plan> {
        let bits = profile.bits();
        self.fixed_tail(&bits[1..]).plan(s, bits[0], d)
    }

    /// `Phi^i(s)` with its optimal completion.
    pub fn branch(&self, s: f64, first: u8, strategy: MinlpStrategy) -> Result<Option<Plan>> {
        match strategy {
            MinlpStrategy::DynamicProgramming => Ok(self.integer.plan(s, first, 0.0)),
            MinlpStrategy::Enumerate => Ok(self.enumerate(s, first)),
            MinlpStrategy::BranchAndBound => self.branch_and_bound(s, first).map(|(p, _)| p),
        }
    }

    pub fn table(&self, s: f64, strategy: MinlpStrategy) -> Result<IntegerValueTable> {
        let branches = (0..2u8)
            .map(|i| self.branch(s, i, strategy))
            .collect::<Result<Vec<_>>>()?;
        Ok(IntegerValueTable { state: s, branches })
    }

    /// The MPC solution `argmin_i Phi^i(s)`.
    pub fn solve(&self, s: f64, strategy: MinlpStrategy) -> Result<(u8, Plan)> {
        let table = self.table(s, strategy)?;
        table
            .best()
            .map(|(i, p)| (i, p.clone()))
            .ok_or(Error::EmptyFeasibleSet { state: s })
    }

    /// Minimum over all `2^(N-1)` completions; ties go to the lexicographically
    /// smallest completion.
    pub fn enumerate(&self, s: f64, first: u8) -> Option<Plan> {
        let n = self.ocp.horizon();
        // ties go to the lowest code, as in a sequential scan
        (0..1usize << (n - 1))
            .into_par_iter()
            .filter_map(|code| {
                let mut bits = vec![first];
                bits.extend((1..n).map(|k| ((code >> (n - 1 - k)) & 1) as u8));
                self.fixed_plan(s, &IntegerProfile::from_bits(&bits), 0.0).map(|p| (code, p))
            })
            .reduce_with(|a, b| {
                if b.1.value < a.1.value || (b.1.value == a.1.value && b.0 < a.0) {
                    b
                } else {
                    a
                }
            })
            .map(|(_, p)| p)
    }

    /// Best-first branch-and-bound over stages `1..N-1`.
    pub fn branch_and_bound(&self, s: f64, first: u8) -> Result<(Option<Plan>, BnbStats)> {
        let n = self.ocp.horizon();
        let mut stats = BnbStats::default();
        let mut incumbent: Option<Plan> = None;
        let offer = |p: Option<Plan>, incumbent: &mut Option<Plan>| {
            if let Some(p) = p {
                let better = incumbent.as_ref().map_or(true, |b| {
                    p.value < b.value || (p.value == b.value && p.profile < b.profile)
                });
                if better {
                    *incumbent = Some(p);
                }
            }
        };
        for fill in 0..2u8 {
            let mut bits = vec![first];
            bits.extend(std::iter::repeat(fill).take(n - 1));
            stats.leaves += 1;
            offer(self.fixed_plan(s, &IntegerProfile::from_bits(&bits), 0.0), &mut incumbent);
        }
        let mut heap = BinaryHeap::new();
        heap.push(Node {
            bound: f64::NEG_INFINITY,
            prefix: vec![first],
        });
        while let Some(node) = heap.pop() {
            let limit = incumbent.as_ref().map_or(f64::INFINITY, |p| p.value);
            if node.bound >= limit - self.bnb.gap {
                stats.pruned += 1 + heap.len();
                break;
            }
            if node.prefix.len() == n {
                stats.leaves += 1;
                offer(
                    self.fixed_plan(s, &IntegerProfile::from_bits(&node.prefix), 0.0),
                    &mut incumbent,
                );
                continue;
            }
            for bit in 0..2u8 {
                let mut prefix = node.prefix.clone();
                prefix.push(bit);
                if prefix.len() == n {
                    heap.push(Node {
                        bound: node.bound,
                        prefix,
                    });
                    continue;
                }
                let limit = incumbent.as_ref().map_or(f64::INFINITY, |p| p.value);
                stats.relaxations += 1;
                match self.relaxation_bound(s, &prefix, limit)? {
                    Some(lb) if lb < limit - self.bnb.gap => heap.push(Node {
                        bound: lb.max(node.bound),
                        prefix,
                    }),
                    _ => stats.pruned += 1,
                }
            }
        }
        Ok((incumbent, stats))
    }

    /// Lower bound on all completions of `prefix`, or `None` when the
    /// relaxation is infeasible.
    fn relaxation_bound(&self, s: f64, prefix: &[u8], incumbent: f64) -> Result<Option<f64>> {
        let nlp = RelaxedExampleNlp::new(&self.ocp, &self.theta, s, prefix, self.input_box(incumbent))?;
        let rep = ip::solve(&nlp, &self.bnb.relaxation, None)?;
        Ok(match rep.status {
            SolveStatus::Solved => {
                Some(rep.objective - nlp.ineq_dim() as f64 * rep.point.tau - 10.0 * rep.residual)
            }
            SolveStatus::Infeasible => None,
            // no certificate either way
            SolveStatus::MaxIterations => Some(f64::NEG_INFINITY),
        })
    }

    /// `|u_k - a_ref| <= sqrt(2 (J* - N min(w, 0)))` holds for every input of a
    /// plan that beats the incumbent `J*`.
    fn input_box(&self, incumbent: f64) -> (f64, f64) {
        let b = self.bnb.input_bound;
        let th = &self.theta;
        if !incumbent.is_finite() {
            return (-b, b);
        }
        let r = (2.0 * (incumbent - self.ocp.horizon() as f64 * th.w.min(0.0))).max(0.0).sqrt() + 1e-6;
        ((th.a_ref - r).max(-b), (th.a_ref + r).min(b))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    bound: f64,
    prefix: Vec<u8>,
}

impl Eq for Node {}

impl Ord for Node {
    // BinaryHeap is a max-heap: smallest bound first, then smallest prefix
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then_with(|| other.prefix.cmp(&self.prefix))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Convex relaxation of the benchmark with the integer inputs of `prefix`
/// fixed and the others relaxed to `iota_k in [0, 1]`, the bilinear term
/// `u_k iota_k` replaced by its McCormick envelope `v_k` over the input box.
///
/// Primal layout per stage: `(x, u, sigma)` for fixed stages and
/// `(x, u, sigma, iota, v)` for relaxed ones, then `x_N`.
#[derive(Debug, Clone)]
pub struct RelaxedExampleNlp {
    ocp: ExampleOcp,
    theta: ThetaVector,
    s: f64,
    prefix: Vec<u8>,
    input_box: (f64, f64),
    offsets: Vec<usize>,
    ineq_offsets: Vec<usize>,
}

impl RelaxedExampleNlp {
    pub fn new(
        ocp: &ExampleOcp,
        theta: &ThetaVector,
        s: f64,
        prefix: &[u8],
        input_box: (f64, f64),
    ) -> Result<Self> {
        let n = ocp.horizon();
        if prefix.is_empty() || prefix.len() > n || prefix.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument(format!("bad integer prefix {prefix:?}")));
        }
        if !(input_box.0 < input_box.1) {
            return Err(Error::InvalidArgument(format!("empty input box {input_box:?}")));
        }
        let mut offsets = vec![0];
        let mut ineq_offsets = vec![0];
        for k in 0..n {
            let relaxed = k >= prefix.len();
            offsets.push(offsets[k] + if relaxed { 5 } else { 3 });
            let mut m = ocp.stage_ineq_count(k);
            if relaxed {
                m += 8;
            }
            ineq_offsets.push(ineq_offsets[k] + m);
        }
        let last = ineq_offsets[n] + if ocp.hard_bounds().is_some() { 2 } else { 0 };
        ineq_offsets.push(last);
        Ok(Self {
            ocp: ocp.clone(),
            theta: *theta,
            s,
            prefix: prefix.to_vec(),
            input_box,
            offsets,
            ineq_offsets,
        })
    }

    fn relaxed(&self, k: usize) -> bool {
        k >= self.prefix.len()
    }
}

impl Nlp for RelaxedExampleNlp {
    fn primal_dim(&self) -> usize {
        self.offsets[self.ocp.horizon()] + 1
    }

    fn eq_dim(&self) -> usize {
        self.ocp.horizon() + 1
    }

    fn ineq_dim(&self) -> usize {
        self.ineq_offsets[self.ocp.horizon() + 1]
    }

    fn evaluate(&self, y: &[f64]) -> NlpEval {
        let (ny, ne, ni) = (self.primal_dim(), self.eq_dim(), self.ineq_dim());
        let n = self.ocp.horizon();
        let th = &self.theta;
        let (lo_u, hi_u) = self.input_box;
        let mut ev = NlpEval {
            objective: 0.0,
            grad: DVector::zeros(ny),
            eq: DVector::zeros(ne),
            eq_jac: DMatrix::zeros(ne, ny),
            ineq: DVector::zeros(ni),
            ineq_jac: DMatrix::zeros(ni, ny),
        };
        ev.eq[0] = y[0] - self.s;
        ev.eq_jac[(0, 0)] = 1.0;
        let bound = ExampleOcp::PENALTY_BOUND;
        for k in 0..n {
            let o = self.offsets[k];
            let (x, u, sigma) = (y[o], y[o + 1], y[o + 2]);
            let next = self.offsets[k + 1];
            ev.objective += 0.5 * (x - th.s_ref).powi(2) + 0.5 * (u - th.a_ref).powi(2) + th.c * sigma;
            ev.grad[o] += x - th.s_ref;
            ev.grad[o + 1] += u - th.a_ref;
            ev.grad[o + 2] += th.c;
            // x_k + (u_k i_k | v_k) + b - x_{k+1}
            let r = k + 1;
            ev.eq_jac[(r, o)] = 1.0;
            ev.eq_jac[(r, next)] = -1.0;
            let mut jrow = self.ineq_offsets[k];
            let mut push = |ev: &mut NlpEval, value: f64, coeffs: &[(usize, f64)]| {
                ev.ineq[jrow] = value;
                for &(c, v) in coeffs {
                    ev.ineq_jac[(jrow, c)] = v;
                }
                jrow += 1;
            };
            push(&mut ev, x - bound - sigma, &[(o, 1.0), (o + 2, -1.0)]);
            push(&mut ev, -x - bound - sigma, &[(o, -1.0), (o + 2, -1.0)]);
            push(&mut ev, -sigma, &[(o + 2, -1.0)]);
            if k >= 1 {
                if let Some((lo, hi)) = self.ocp.hard_bounds() {
                    push(&mut ev, x - hi, &[(o, 1.0)]);
                    push(&mut ev, lo - x, &[(o, -1.0)]);
                }
            }
            if self.relaxed(k) {
                let (iota, v) = (y[o + 3], y[o + 4]);
                ev.objective += th.w * iota;
                ev.grad[o + 3] += th.w;
                ev.eq[r] = x + v + th.b - y[next];
                ev.eq_jac[(r, o + 4)] = 1.0;
                let (l, h) = (lo_u, hi_u);
                let (cu, ci, cv) = (o + 1, o + 3, o + 4);
                push(&mut ev, -iota, &[(ci, -1.0)]);
                push(&mut ev, iota - 1.0, &[(ci, 1.0)]);
                push(&mut ev, l * iota - v, &[(ci, l), (cv, -1.0)]);
                push(&mut ev, u + h * iota - h - v, &[(cu, 1.0), (ci, h), (cv, -1.0)]);
                push(&mut ev, v - h * iota, &[(cv, 1.0), (ci, -h)]);
                push(&mut ev, v - u - l * iota + l, &[(cv, 1.0), (cu, -1.0), (ci, -l)]);
                push(&mut ev, u - h, &[(cu, 1.0)]);
                push(&mut ev, l - u, &[(cu, -1.0)]);
            } else {
                let i = f64::from(self.prefix[k]);
                ev.objective += th.w * i;
                ev.eq[r] = x + u * i + th.b - y[next];
                ev.eq_jac[(r, o + 1)] = i;
            }
        }
        let o = self.offsets[n];
        let p = self.ocp.terminal_weight();
        ev.objective += 0.5 * p * (y[o] - th.s_ref).powi(2);
        ev.grad[o] += p * (y[o] - th.s_ref);
        if let Some((lo, hi)) = self.ocp.hard_bounds() {
            let j = self.ineq_offsets[n];
            ev.ineq[j] = y[o] - hi;
            ev.ineq_jac[(j, o)] = 1.0;
            ev.ineq[j + 1] = lo - y[o];
            ev.ineq_jac[(j + 1, o)] = -1.0;
        }
        ev
    }

    fn lagrangian_hessian(&self, _y: &[f64], _lambda: &[f64], _mu: &[f64]) -> DMatrix<f64> {
        let ny = self.primal_dim();
        let mut h = DMatrix::zeros(ny, ny);
        for k in 0..self.ocp.horizon() {
            let o = self.offsets[k];
            h[(o, o)] = 1.0;
            h[(o + 1, o + 1)] = 1.0;
        }
        let o = self.offsets[self.ocp.horizon()];
        h[(o, o)] = self.ocp.terminal_weight();
        h
    }

    fn initial_primal(&self) -> Vec<f64> {
        let n = self.ocp.horizon();
        let th = &self.theta;
        let (lo_u, hi_u) = self.input_box;
        let margin = 0.25 * (hi_u - lo_u);
        let u = th.a_ref.clamp(lo_u + margin, hi_u - margin);
        let mut y = vec![0.0; self.primal_dim()];
        let mut x = self.s;
        for k in 0..n {
            let o = self.offsets[k];
            y[o] = x;
            y[o + 1] = u;
            y[o + 2] = (x.abs() - ExampleOcp::PENALTY_BOUND).max(0.0) + 0.1;
            let moved = if self.relaxed(k) {
                // iota = 1/2, v = u / 2 is strictly inside the McCormick envelope
                y[o + 3] = 0.5;
                y[o + 4] = 0.5 * u;
                0.5 * u
            } else {
                u * f64::from(self.prefix[k])
            };
            x += moved + th.b;
        }
        y[self.offsets[n]] = x;
        y
    }

    fn kkt_ordering(&self) -> Option<Vec<usize>> {
        let n = self.ocp.horizon();
        let ny = self.primal_dim();
        let mut order = Vec::with_capacity(ny + n + 1);
        for k in 0..=n {
            order.push(ny + k);
            let end = if k < n { self.offsets[k + 1] } else { ny };
            order.extend(self.offsets[k]..end);
        }
        Some(order)
    }
}

/// Generic oracle: `Phi^i` by solving the fixed-integer NLP of every
/// completion with the interior-point method.
///
/// Returns the best objective, its profile and the solver report; `Ok(None)`
/// when every completion is infeasible, and [`Error::AllBranchesFailed`] when
/// none converged.
pub fn enumerate_with_ip(
    model: &dyn OcpModel,
    s: &[f64],
    theta: &[f64],
    first: &[u8],
    opts: &IpOptions,
) -> Result<Option<(IntegerProfile, SolveReport)>> {
    let dims = model.dims();
    let width = dims.integer;
    let free = (dims.horizon - 1) * width;
    if free >= usize::BITS as usize - 1 {
        return Err(Error::Unsupported(format!("enumerating 2^{free} completions")));
    }
    let mut best: Option<(IntegerProfile, SolveReport)> = None;
    let mut converged = 0usize;
    for code in 0..1usize << free {
        let mut bits = first.to_vec();
        bits.extend((0..free).map(|j| ((code >> (free - 1 - j)) & 1) as u8));
        let profile = IntegerProfile::new(width, bits)?;
        let d = vec![0.0; dims.control];
        let nlp = FixedIntegerNlp::new(model, s, theta, profile.clone(), &d)?;
        let rep = match ip::solve(&nlp, opts, None) {
            Ok(r) => r,
            Err(Error::SingularKkt { .. }) => continue,
            Err(e) => return Err(e),
        };
        match rep.status {
            SolveStatus::Solved => {
                converged += 1;
                if best.as_ref().map_or(true, |(_, b)| rep.objective < b.objective) {
                    best = Some((profile, rep));
                }
            }
            SolveStatus::Infeasible => converged += 1,
            SolveStatus::MaxIterations => {}
        }
    }
    if converged == 0 {
        return Err(Error::AllBranchesFailed { first: first.to_vec() });
    }
    Ok(best)
}
