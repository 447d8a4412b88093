//! LU factorization with partial pivoting that only touches the band of the matrix.
//!
//! Stage-ordered KKT systems of optimal control problems are banded; with a
//! full bandwidth this is an ordinary dense LU.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    lower: usize,
    upper: usize,
    // row-major
    lu: Vec<f64>,
    // row interchanged with row k at step k; multipliers are not permuted afterwards
    pivots: Vec<usize>,
    smallest_pivot: f64,
}

/// Lower and upper bandwidth of the nonzero pattern of `a`.
pub fn bandwidth(a: &DMatrix<f64>) -> (usize, usize) {
    let mut lower = 0;
    let mut upper = 0;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if a[(i, j)] != 0.0 {
                if i > j {
                    lower = lower.max(i - j);
                } else {
                    upper = upper.max(j - i);
                }
            }
        }
    }
    (lower, upper)
}

impl BandedLu {
    /// Factorizes a square matrix. Pivots below `1e-13 * max|a|` are reported as singular.
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "square matrix expected");
        let (lower, upper0) = bandwidth(a);
        // row interchanges widen the upper band by at most `lower`
        let upper = (upper0 + lower).min(n.saturating_sub(1));
        let mut lu = vec![0.0; n * n];
        let mut scale: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                lu[i * n + j] = a[(i, j)];
                scale = scale.max(a[(i, j)].abs());
            }
        }
        let mut pivots: Vec<usize> = (0..n).collect();
        let mut smallest = f64::INFINITY;
        let tiny = 1e-13 * scale.max(f64::MIN_POSITIVE);
        for k in 0..n {
            let last_row = (k + lower).min(n - 1);
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for i in k + 1..=last_row {
                let v = lu[i * n + k].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            smallest = smallest.min(best);
            if best <= tiny {
                return Err(Error::SingularKkt {
                    smallest_pivot: best,
                });
            }
            let last_col = (k + upper).min(n - 1);
            if p != k {
                for j in k..=last_col.max((p + upper0).min(n - 1)) {
                    lu.swap(k * n + j, p * n + j);
                }
            }
            pivots[k] = p;
            let pivot = lu[k * n + k];
            for i in k + 1..=last_row {
                let f = lu[i * n + k] / pivot;
                if f == 0.0 {
                    continue;
                }
                lu[i * n + k] = f;
                for j in k + 1..=last_col {
                    lu[i * n + j] -= f * lu[k * n + j];
                }
            }
        }
        Ok(Self {
            n,
            lower,
            upper,
            lu,
            pivots,
            smallest_pivot: smallest,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn smallest_pivot(&self) -> f64 {
        self.smallest_pivot
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        let x = b;
        for k in 0..n {
            x.swap(k, self.pivots[k]);
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..=(k + self.lower).min(n - 1) {
                    x[i] -= self.lu[i * n + k] * xk;
                }
            }
        }
        for i in (0..n).rev() {
            let last = (i + self.upper).min(n - 1);
            let mut acc = x[i];
            for j in i + 1..=last {
                acc -= self.lu[i * n + j] * x[j];
            }
            x[i] = acc / self.lu[i * n + i];
        }
    }
}
