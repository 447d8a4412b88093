//! Piecewise quadratic functions of one variable.
//!
//! These carry the exact value functions of the scalar benchmark: every
//! operation the dynamic program needs (sums, shifts, restriction to a box,
//! pointwise minima and the envelope `t -> min_z 1/2 (z - t)^2 + f(z)`) maps
//! piecewise quadratics to piecewise quadratics. Pieces may be `+inf`.
//!
//! Each piece carries a [`Decision`] that records how the minimizer behind the
//! value depends on the argument, so optimal inputs can be recovered by
//! evaluation.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quad {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Quad {
    pub const ZERO: Quad = Quad { a: 0.0, b: 0.0, c: 0.0 };

    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    /// `k/2 (x - center)^2`.
    pub fn centered(k: f64, center: f64) -> Self {
        Self::new(0.5 * k, -k * center, 0.5 * k * center * center)
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.a * x + self.b) * x + self.c
    }

    pub fn slope(&self, x: f64) -> f64 {
        2.0 * self.a * x + self.b
    }

    pub fn add(&self, o: &Quad) -> Quad {
        Quad::new(self.a + o.a, self.b + o.b, self.c + o.c)
    }

    pub fn sub(&self, o: &Quad) -> Quad {
        Quad::new(self.a - o.a, self.b - o.b, self.c - o.c)
    }

    /// `x -> q(x + t)`.
    pub fn shift(&self, t: f64) -> Quad {
        Quad::new(self.a, 2.0 * self.a * t + self.b, self.eval(t))
    }

    fn scale(&self) -> f64 {
        self.a.abs().max(self.b.abs()).max(self.c.abs()).max(1.0)
    }
}

/// Minimizer summary attached to a piece: the integer choice and the affine
/// rule `slope * arg + offset` giving the continuous minimizer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub integer: u8,
    pub slope: f64,
    pub offset: f64,
}

impl Decision {
    pub const NONE: Decision = Decision {
        integer: 0,
        slope: 0.0,
        offset: 0.0,
    };

    pub fn new(integer: u8, slope: f64, offset: f64) -> Self {
        Self {
            integer,
            slope,
            offset,
        }
    }

    pub fn at(&self, x: f64) -> f64 {
        self.slope * x + self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    /// `None` means `+inf`.
    pub quad: Option<Quad>,
    pub decision: Decision,
}

/// Piece `j` covers `[breaks[j-1], breaks[j])`, the first and last pieces
/// extending to infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct Pwq {
    breaks: Vec<f64>,
    pieces: Vec<Piece>,
}

const WIDTH_EPS: f64 = 1e-12;

fn tie_tolerance(x: f64, q: &Quad) -> f64 {
    1e-13 * (1.0 + q.eval(x).abs())
}

impl Pwq {
    pub fn quadratic(q: Quad, decision: Decision) -> Self {
        Self {
            breaks: Vec::new(),
            pieces: vec![Piece {
                quad: Some(q),
                decision,
            }],
        }
    }

    pub fn infinite() -> Self {
        Self {
            breaks: Vec::new(),
            pieces: vec![Piece {
                quad: None,
                decision: Decision::NONE,
            }],
        }
    }

    /// `c max(|x| - r, 0)`.
    pub fn dead_zone(c: f64, r: f64) -> Self {
        Self {
            breaks: vec![-r, r],
            pieces: vec![
                Piece {
                    quad: Some(Quad::new(0.0, -c, -c * r)),
                    decision: Decision::NONE,
                },
                Piece {
                    quad: Some(Quad::ZERO),
                    decision: Decision::NONE,
                },
                Piece {
                    quad: Some(Quad::new(0.0, c, -c * r)),
                    decision: Decision::NONE,
                },
            ],
        }
        .simplified()
    }

    fn from_parts(breaks: Vec<f64>, pieces: Vec<Piece>) -> Self {
        debug_assert_eq!(breaks.len() + 1, pieces.len());
        Self { breaks, pieces }.simplified()
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    /// Interval `[lo, hi)` of piece `j`.
    pub fn interval(&self, j: usize) -> (f64, f64) {
        let lo = if j == 0 { f64::NEG_INFINITY } else { self.breaks[j - 1] };
        let hi = if j == self.breaks.len() { f64::INFINITY } else { self.breaks[j] };
        (lo, hi)
    }

    pub fn piece_at(&self, x: f64) -> &Piece {
        let j = self.breaks.partition_point(|&b| b <= x);
        &self.pieces[j]
    }

    /// Value at `x`, `None` if infinite.
    pub fn eval(&self, x: f64) -> Option<f64> {
        self.piece_at(x).quad.map(|q| q.eval(x))
    }

    pub fn is_everywhere_infinite(&self) -> bool {
        self.pieces.iter().all(|p| p.quad.is_none())
    }

    /// Merges equal neighbours and drops slivers narrower than `1e-12`.
    fn simplified(mut self) -> Self {
        // slivers
        let mut j = 0;
        while j < self.breaks.len() {
            if j + 1 < self.breaks.len() && self.breaks[j + 1] - self.breaks[j] < WIDTH_EPS {
                // piece j+1 is a sliver between breaks j and j+1
                self.breaks.remove(j + 1);
                self.pieces.remove(j + 1);
                continue;
            }
            j += 1;
        }
        let mut breaks = Vec::with_capacity(self.breaks.len());
        let mut pieces: Vec<Piece> = Vec::with_capacity(self.pieces.len());
        pieces.push(self.pieces[0]);
        for (b, p) in self.breaks.iter().zip(self.pieces.iter().skip(1)) {
            if pieces.last() == Some(p) {
                continue;
            }
            breaks.push(*b);
            pieces.push(*p);
        }
        Self { breaks, pieces }
    }

    fn merged_breaks(&self, other: &Pwq) -> Vec<f64> {
        let mut all: Vec<f64> = self.breaks.iter().chain(other.breaks.iter()).cloned().collect();
        all.sort_by(|a, b| a.partial_cmp(b).expect("finite breakpoints"));
        all.dedup();
        all
    }

    /// Applies `op` on every interval of the common refinement.
    fn combine(&self, other: &Pwq, op: impl Fn(&Piece, &Piece) -> Piece) -> Pwq {
        let breaks = self.merged_breaks(other);
        let mut pieces = Vec::with_capacity(breaks.len() + 1);
        for j in 0..=breaks.len() {
            let probe = sample_point(
                if j == 0 { f64::NEG_INFINITY } else { breaks[j - 1] },
                if j == breaks.len() { f64::INFINITY } else { breaks[j] },
            );
            pieces.push(op(self.piece_at(probe), other.piece_at(probe)));
        }
        Pwq::from_parts(breaks, pieces)
    }

    /// Pointwise sum; decisions come from `self`.
    pub fn add(&self, other: &Pwq) -> Pwq {
        self.combine(other, |a, b| Piece {
            quad: match (a.quad, b.quad) {
                (Some(p), Some(q)) => Some(p.add(&q)),
                _ => None,
            },
            decision: a.decision,
        })
    }

    pub fn add_quad(&self, q: &Quad) -> Pwq {
        let pieces = self
            .pieces
            .iter()
            .map(|p| Piece {
                quad: p.quad.map(|r| r.add(q)),
                decision: p.decision,
            })
            .collect();
        Pwq::from_parts(self.breaks.clone(), pieces)
    }

    /// `x -> f(x + t)`; decisions are re-expressed in `x`.
    pub fn shift(&self, t: f64) -> Pwq {
        let breaks = self.breaks.iter().map(|b| b - t).collect();
        let pieces = self
            .pieces
            .iter()
            .map(|p| Piece {
                quad: p.quad.map(|q| q.shift(t)),
                decision: Decision::new(p.decision.integer, p.decision.slope, p.decision.at(t)),
            })
            .collect();
        Pwq::from_parts(breaks, pieces)
    }

    pub fn map_decisions(&self, f: impl Fn(&Decision) -> Decision) -> Pwq {
        let pieces = self
            .pieces
            .iter()
            .map(|p| Piece {
                quad: p.quad,
                decision: f(&p.decision),
            })
            .collect();
        Pwq::from_parts(self.breaks.clone(), pieces)
    }

    /// `+inf` outside `[lo, hi]`.
    pub fn restrict(&self, lo: f64, hi: f64) -> Pwq {
        let mut breaks = vec![lo];
        let mut pieces = vec![Piece {
            quad: None,
            decision: Decision::NONE,
        }];
        for (j, p) in self.pieces.iter().enumerate() {
            let (a, b) = self.interval(j);
            if b <= lo || a >= hi {
                continue;
            }
            if a > lo {
                breaks.push(a);
            }
            pieces.push(*p);
        }
        breaks.push(hi);
        pieces.push(Piece {
            quad: None,
            decision: Decision::NONE,
        });
        // keep the closed right end: the breakpoint itself evaluates to the right piece,
        // so nudge it by one ulp
        let last = breaks.len() - 1;
        breaks[last] = next_up(hi);
        Pwq::from_parts(breaks, pieces)
    }

    /// Pointwise minimum; on ties `self` wins.
    pub fn min(&self, other: &Pwq) -> Pwq {
        let grid = self.merged_breaks(other);
        let mut breaks = Vec::new();
        let mut pieces = Vec::new();
        for j in 0..=grid.len() {
            let lo = if j == 0 { f64::NEG_INFINITY } else { grid[j - 1] };
            let hi = if j == grid.len() { f64::INFINITY } else { grid[j] };
            let probe = sample_point(lo, hi);
            let (p, q) = (*self.piece_at(probe), *other.piece_at(probe));
            let mut cuts = Vec::new();
            if let (Some(fp), Some(fq)) = (p.quad, q.quad) {
                for r in roots(&fp.sub(&fq)) {
                    if r > lo + WIDTH_EPS && r < hi - WIDTH_EPS {
                        cuts.push(r);
                    }
                }
            }
            let mut edges = vec![lo];
            edges.extend(cuts.iter().cloned());
            edges.push(hi);
            for s in 0..edges.len() - 1 {
                let x = sample_point(edges[s], edges[s + 1]);
                let pick_self = match (p.quad, q.quad) {
                    (_, None) => true,
                    (None, Some(_)) => false,
                    (Some(fp), Some(fq)) => fp.eval(x) <= fq.eval(x) + tie_tolerance(x, &fq),
                };
                if !(j == 0 && s == 0) {
                    breaks.push(edges[s]);
                }
                pieces.push(if pick_self { p } else { q });
            }
        }
        Pwq::from_parts(breaks, pieces)
    }

    /// `t -> min_z 1/2 (z - t)^2 + f(z)`, with decisions `z*(t) = slope t + offset`
    /// and the given integer label.
    ///
    /// Requires every finite piece to have curvature `a > -1/2`.
    pub fn envelope(&self, integer: u8) -> Pwq {
        let mut acc: Option<Pwq> = None;
        for (j, p) in self.pieces.iter().enumerate() {
            let Some(q) = p.quad else { continue };
            assert!(1.0 + 2.0 * q.a > 0.0, "envelope needs curvature above -1/2");
            let (l, r) = self.interval(j);
            let k = 1.0 / (1.0 + 2.0 * q.a);
            let interior = Quad::new(
                0.5 * (k - 1.0).powi(2) + q.a * k * k,
                -(k - 1.0) * k * q.b - 2.0 * q.a * k * k * q.b + q.b * k,
                0.5 * k * k * q.b * q.b + q.a * k * k * q.b * q.b - k * q.b * q.b + q.c,
            );
            let mut breaks = Vec::new();
            let mut pieces = Vec::new();
            if l.is_finite() {
                pieces.push(Piece {
                    quad: Some(Quad::new(0.5, -l, 0.5 * l * l + q.eval(l))),
                    decision: Decision::new(integer, 0.0, l),
                });
                breaks.push(l / k + q.b);
            }
            pieces.push(Piece {
                quad: Some(interior),
                decision: Decision::new(integer, k, -k * q.b),
            });
            if r.is_finite() {
                breaks.push(r / k + q.b);
                pieces.push(Piece {
                    quad: Some(Quad::new(0.5, -r, 0.5 * r * r + q.eval(r))),
                    decision: Decision::new(integer, 0.0, r),
                });
            }
            let env = Pwq::from_parts(breaks, pieces);
            acc = Some(match acc {
                None => env,
                Some(a) => a.min(&env),
            });
        }
        acc.unwrap_or_else(Pwq::infinite)
    }
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}

fn sample_point(lo: f64, hi: f64) -> f64 {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => 0.5 * (lo + hi),
        (false, true) => hi - 1.0,
        (true, false) => lo + 1.0,
        (false, false) => 0.0,
    }
}

/// Real roots of `q`, ignoring numerically vanishing leading terms.
fn roots(q: &Quad) -> Vec<f64> {
    let s = q.scale();
    let (a, b, c) = (q.a, q.b, q.c);
    if a.abs() <= 1e-14 * s {
        if b.abs() <= 1e-14 * s {
            return Vec::new();
        }
        return vec![-c / b];
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    let sq = disc.sqrt();
    let t = -0.5 * (b + b.signum() * sq);
    let mut r = if t == 0.0 { vec![0.0] } else { vec![t / a, c / t] };
    r.sort_by(|x, y| x.partial_cmp(y).unwrap());
    r.dedup();
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_envelope(f: &Pwq, t: f64) -> f64 {
        // dense grid plus local refinement
        let mut best = f64::INFINITY;
        let mut arg = 0.0;
        let n = 40_000;
        for i in 0..=n {
            let z = -4.0 + 8.0 * i as f64 / n as f64;
            if let Some(v) = f.eval(z) {
                let val = 0.5 * (z - t).powi(2) + v;
                if val < best {
                    best = val;
                    arg = z;
                }
            }
        }
        let mut h = 2e-4;
        for _ in 0..60 {
            for z in [arg - h, arg + h] {
                if let Some(v) = f.eval(z) {
                    let val = 0.5 * (z - t).powi(2) + v;
                    if val < best {
                        best = val;
                        arg = z;
                    }
                }
            }
            h *= 0.7;
        }
        best
    }

    #[test]
    fn dead_zone_values() {
        let f = Pwq::dead_zone(2.0, 0.2);
        assert_eq!(f.eval(0.1), Some(0.0));
        assert!((f.eval(0.5).unwrap() - 0.6).abs() < 1e-15);
        assert!((f.eval(-0.5).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn envelope_of_quadratic_is_closed_form() {
        // min_z 1/2 (z - t)^2 + 1/2 p z^2 = p / (2 (1 + p)) t^2
        let p = 1.618;
        let f = Pwq::quadratic(Quad::centered(p, 0.0), Decision::NONE);
        let e = f.envelope(1);
        for t in [-1.0, 0.0, 0.3, 2.0] {
            let want = p / (2.0 * (1.0 + p)) * t * t;
            assert!((e.eval(t).unwrap() - want).abs() < 1e-14);
            let z = e.piece_at(t).decision.at(t);
            assert!((z - t / (1.0 + p)).abs() < 1e-14);
        }
    }

    #[test]
    fn restrict_is_closed_on_both_ends() {
        let f = Pwq::quadratic(Quad::new(1.0, 0.0, 0.0), Decision::NONE).restrict(-0.5, 0.5);
        assert_eq!(f.eval(0.5), Some(0.25));
        assert_eq!(f.eval(-0.5), Some(0.25));
        assert_eq!(f.eval(0.5000001), None);
        assert_eq!(f.eval(-0.5000001), None);
    }

    #[test]
    fn min_prefers_first_on_ties() {
        let f = Pwq::quadratic(Quad::new(1.0, 0.0, 0.0), Decision::new(0, 0.0, 0.0));
        let g = Pwq::quadratic(Quad::new(1.0, 0.0, 0.0), Decision::new(1, 0.0, 0.0));
        let m = f.min(&g);
        assert_eq!(m.len(), 1);
        assert_eq!(m.pieces()[0].decision.integer, 0);
    }

    proptest! {
        #[test]
        fn min_is_pointwise_minimum(
            a1 in 0.0f64..2.0, b1 in -2.0f64..2.0, c1 in -1.0f64..1.0,
            a2 in 0.0f64..2.0, b2 in -2.0f64..2.0, c2 in -1.0f64..1.0,
            r in 0.05f64..0.5, x in -3.0f64..3.0,
        ) {
            let f = Pwq::quadratic(Quad::new(a1, b1, c1), Decision::NONE).add(&Pwq::dead_zone(1.0, r));
            let g = Pwq::quadratic(Quad::new(a2, b2, c2), Decision::new(1, 0.0, 0.0));
            let m = f.min(&g);
            let want = f.eval(x).unwrap().min(g.eval(x).unwrap());
            prop_assert!((m.eval(x).unwrap() - want).abs() < 1e-10);
        }

        #[test]
        fn envelope_matches_brute_force(
            a1 in 0.0f64..1.5, b1 in -1.0f64..1.0,
            a2 in 0.0f64..1.5, b2 in -1.0f64..1.0, c2 in 0.0f64..0.4,
            t in -2.0f64..2.0,
        ) {
            // nonconvex: minimum of two convex pieces with a dead zone
            let f = Pwq::quadratic(Quad::new(a1, b1, 0.0), Decision::NONE)
                .add(&Pwq::dead_zone(1.0, 0.2))
                .min(&Pwq::quadratic(Quad::new(a2, b2, c2), Decision::NONE));
            let e = f.envelope(1);
            let got = e.eval(t).unwrap();
            let want = brute_envelope(&f, t);
            prop_assert!((got - want).abs() < 1e-7, "{} vs {}", got, want);
            // the recorded minimizer attains the value
            let z = e.piece_at(t).decision.at(t);
            let attained = 0.5 * (z - t).powi(2) + f.eval(z).unwrap();
            prop_assert!((attained - got).abs() < 1e-9);
        }
    }
}
