//! Dense square matrices of small order.
//!
//! Everything in the walk is driven by `d × d` blocks with `d` at most
//! [`MAX_ORDER`], so a flat row-major `Vec<f64>` with naive kernels is all
//! that is needed. The norm used throughout is the operator norm induced by
//! the sup-norm on vectors, i.e. the maximum absolute row sum.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Configuration cap on the strip width.
pub const MAX_ORDER: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatError {
    #[error("matrix order {0} outside 1..={MAX_ORDER}")]
    BadOrder(usize),
    #[error("expected {expected} entries, got {got}")]
    BadLength { expected: usize, got: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("order mismatch: {0} vs {1}")]
    OrderMismatch(usize, usize),
    #[error("resolvent near-singular: ||q*eta + r|| = {norm} is not below 1 - 1e-10")]
    NearSingular { norm: f64 },
    #[error("singular matrix (pivot {pivot:e} in column {col})")]
    Singular { col: usize, pivot: f64 },
    #[error("resolvent residual {residual:e} exceeds 1e-10")]
    Residual { residual: f64 },
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMat {
    order: usize,
    data: Vec<f64>,
}

impl SquareMat {
    pub fn zeros(order: usize) -> Self {
        SquareMat {
            order,
            data: vec![0.0; order * order],
        }
    }

    pub fn identity(order: usize) -> Self {
        let mut m = Self::zeros(order);
        for i in 0..order {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Matrix with every entry equal to `value`.
    pub fn filled(order: usize, value: f64) -> Self {
        SquareMat {
            order,
            data: vec![value; order * order],
        }
    }

    /// The uniform stochastic matrix `J/d`.
    pub fn uniform_stochastic(order: usize) -> Self {
        Self::filled(order, 1.0 / order as f64)
    }

    pub fn from_row_major(order: usize, data: Vec<f64>) -> Result<Self, MatError> {
        if order == 0 || order > MAX_ORDER {
            return Err(MatError::BadOrder(order));
        }
        if data.len() != order * order {
            return Err(MatError::BadLength {
                expected: order * order,
                got: data.len(),
            });
        }
        if let Some(k) = data.iter().position(|x| !x.is_finite()) {
            return Err(MatError::NonFinite {
                row: k / order,
                col: k % order,
            });
        }
        Ok(SquareMat { order, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, MatError> {
        let order = rows.len();
        let mut data = Vec::with_capacity(order * order);
        for row in rows {
            if row.len() != order {
                return Err(MatError::BadLength {
                    expected: order,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_row_major(order, data)
    }

    /// 1×1 matrix.
    pub fn scalar(value: f64) -> Self {
        SquareMat {
            order: 1,
            data: vec![value],
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.order..(i + 1) * self.order]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.order).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.order];
        for i in 0..self.order {
            for (s, x) in sums.iter_mut().zip(self.row(i)) {
                *s += x;
            }
        }
        sums
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_nonnegative(&self) -> bool {
        self.data.iter().all(|&x| x >= 0.0)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    /// Maximum absolute row sum.
    pub fn norm(&self) -> f64 {
        (0..self.order)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Largest spread `max_i A(i,j) - min_i A(i,j)` over columns `j`.
    pub fn max_column_spread(&self) -> f64 {
        (0..self.order)
            .map(|j| {
                let (lo, hi) = (0..self.order).fold((f64::INFINITY, f64::NEG_INFINITY), |acc, i| {
                    let x = self[(i, j)];
                    (acc.0.min(x), acc.1.max(x))
                });
                hi - lo
            })
            .fold(0.0, f64::max)
    }

    pub fn mul(&self, other: &SquareMat) -> SquareMat {
        assert_eq!(self.order, other.order, "order mismatch in product");
        let n = self.order;
        let mut out = SquareMat::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * n..(k + 1) * n];
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.order, v.len(), "order mismatch in matrix-vector product");
        (0..self.order)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Row vector times matrix.
    pub fn vec_mul(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.order, v.len(), "order mismatch in vector-matrix product");
        let mut out = vec![0.0; self.order];
        for (i, &vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        out
    }

    pub fn add(&self, other: &SquareMat) -> SquareMat {
        assert_eq!(self.order, other.order, "order mismatch in sum");
        SquareMat {
            order: self.order,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &SquareMat) -> SquareMat {
        assert_eq!(self.order, other.order, "order mismatch in difference");
        SquareMat {
            order: self.order,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> SquareMat {
        SquareMat {
            order: self.order,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// `I - self`.
    pub fn one_minus(&self) -> SquareMat {
        let mut m = self.scale(-1.0);
        for i in 0..self.order {
            m[(i, i)] += 1.0;
        }
        m
    }

    /// Solves `self * X = rhs` by LU with partial pivoting.
    pub fn solve(&self, rhs: &SquareMat) -> Result<SquareMat, MatError> {
        if self.order != rhs.order {
            return Err(MatError::OrderMismatch(self.order, rhs.order));
        }
        let n = self.order;
        let mut a = self.data.clone();
        let mut b = rhs.data.clone();
        let scale = self.norm().max(f64::MIN_POSITIVE);
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs()))
                .unwrap_or(col);
            let pivot = a[piv * n + col];
            if pivot.abs() <= 1e-14 * scale {
                return Err(MatError::Singular { col, pivot });
            }
            if piv != col {
                for k in 0..n {
                    a.swap(piv * n + k, col * n + k);
                    b.swap(piv * n + k, col * n + k);
                }
            }
            for row in col + 1..n {
                let f = a[row * n + col] / pivot;
                if f == 0.0 {
                    continue;
                }
                for k in col..n {
                    a[row * n + k] -= f * a[col * n + k];
                }
                for k in 0..n {
                    b[row * n + k] -= f * b[col * n + k];
                }
            }
        }
        for col in (0..n).rev() {
            let pivot = a[col * n + col];
            for k in 0..n {
                let mut acc = b[col * n + k];
                for j in col + 1..n {
                    acc -= a[col * n + j] * b[j * n + k];
                }
                b[col * n + k] = acc / pivot;
            }
        }
        Ok(SquareMat { order: n, data: b })
    }

    pub fn solve_vec(&self, rhs: &[f64]) -> Result<Vec<f64>, MatError> {
        let n = self.order;
        let mut m = SquareMat::zeros(n);
        for (i, &x) in rhs.iter().enumerate() {
            m[(i, 0)] = x;
        }
        let x = self.solve(&m)?;
        Ok((0..n).map(|i| x[(i, 0)]).collect())
    }

    pub fn inverse(&self) -> Result<SquareMat, MatError> {
        self.solve(&SquareMat::identity(self.order))
    }

    pub fn max_abs_diff(&self, other: &SquareMat) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for SquareMat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.order + j]
    }
}

impl IndexMut<(usize, usize)> for SquareMat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.order + j]
    }
}

impl fmt::Debug for SquareMat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[f64]> = (0..self.order).map(|i| self.row(i)).collect();
        f.debug_list().entries(rows).finish()
    }
}

/// Sup-norm of a vector.
pub fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(I - q*eta_prev - r)^{-1}`.
///
/// Requires `||q*eta_prev + r|| < 1 - 1e-10`; the result is then the sum of a
/// convergent Neumann series and is entrywise nonnegative for nonnegative
/// inputs.
pub fn resolvent(q: &SquareMat, eta_prev: &SquareMat, r: &SquareMat) -> Result<SquareMat, MatError> {
    let m = q.mul(eta_prev).add(r);
    let norm = m.norm();
    if norm >= 1.0 - 1e-10 {
        return Err(MatError::NearSingular { norm });
    }
    let system = m.one_minus();
    let inv = system.inverse()?;
    let residual = system.mul(&inv).sub(&SquareMat::identity(m.order())).norm();
    if residual > 1e-10 {
        return Err(MatError::Residual { residual });
    }
    Ok(inv)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// New factors multiply on the right: `acc * A`.
    LeftToRight,
    /// New factors multiply on the left: `A * acc`.
    RightToLeft,
}

/// A matrix product kept as `exp(log_scale) * core` with `||core|| = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledProduct {
    direction: Direction,
    log_scale: f64,
    core: SquareMat,
    zero: bool,
}

impl ScaledProduct {
    pub fn identity(order: usize, direction: Direction) -> Self {
        ScaledProduct {
            direction,
            log_scale: 0.0,
            core: SquareMat::identity(order),
            zero: false,
        }
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// `-inf` once the product is exactly zero.
    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn core(&self) -> &SquareMat {
        &self.core
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// `log ||product||`.
    pub fn log_norm(&self) -> f64 {
        if self.zero {
            f64::NEG_INFINITY
        } else {
            self.log_scale + self.core.norm().ln()
        }
    }

    pub fn multiply(&mut self, factor: &SquareMat) {
        if self.zero {
            return;
        }
        let next = match self.direction {
            Direction::LeftToRight => self.core.mul(factor),
            Direction::RightToLeft => factor.mul(&self.core),
        };
        let n = next.norm();
        if n == 0.0 {
            self.zero = true;
            self.log_scale = f64::NEG_INFINITY;
            self.core = next;
        } else {
            self.log_scale += n.ln();
            self.core = next.scale(1.0 / n);
        }
    }

    /// Recomposes the product; underflows to zero for very small scales.
    pub fn recompose(&self) -> SquareMat {
        if self.zero {
            SquareMat::zeros(self.core.order())
        } else {
            self.core.scale(self.log_scale.exp())
        }
    }
}

/// Functional form of [`ScaledProduct::multiply`].
pub fn scaled_multiply(mut acc: ScaledProduct, factor: &SquareMat) -> ScaledProduct {
    acc.multiply(factor);
    acc
}
