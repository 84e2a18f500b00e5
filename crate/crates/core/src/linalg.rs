//! Dense factorizations used by the regression solvers.
//!
//! Both factorizations work on row-major `Array2<f64>` and solve for a block
//! of right-hand sides at once. Trailing updates are split across rayon
//! workers once the system is large enough for it to pay off; every output
//! entry is still produced by the same sequence of floating-point operations,
//! so results do not depend on the worker count.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Result, ZslError};

/// Systems above this estimated condition number trigger a warning.
pub const CONDITION_WARNING: f64 = 1e12;

const PARALLEL_THRESHOLD: usize = 192;

fn check_square(a: &ArrayView2<f64>, what: &str) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return Err(ZslError::Dimension(format!("{what}: expected square matrix, got {r}x{c}")));
    }
    Ok(r)
}

/// Lower-triangular Cholesky factor `A = L Lᵀ` of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    factor: Array2<f64>,
}

impl Cholesky {
    /// Factorizes `a`, reading only its lower triangle.
    pub fn new(a: ArrayView2<f64>) -> Result<Self> {
        let n = check_square(&a, "cholesky")?;
        let mut l = a.as_standard_layout().into_owned();
        for j in 0..n {
            let pivot = {
                let (head, mut tail) = l.view_mut().split_at(Axis(0), j + 1);
                let row_j = head.row(j);
                let lj = row_j.slice(s![..j]).to_vec();
                let pivot_sq = row_j[j] - dot(&lj, &lj);
                if !(pivot_sq > 0.0) || !pivot_sq.is_finite() {
                    return Err(ZslError::Numerical {
                        message: format!("matrix is not positive definite (pivot {j} = {pivot_sq:.3e})"),
                        condition: f64::INFINITY,
                    });
                }
                let pivot = pivot_sq.sqrt();
                let update = |mut row: ndarray::ArrayViewMut1<f64>| {
                    let v = row[j] - dot(&row.as_slice().unwrap()[..j], &lj);
                    row[j] = v / pivot;
                };
                if n - j > PARALLEL_THRESHOLD {
                    tail.axis_iter_mut(Axis(0)).into_par_iter().for_each(update);
                } else {
                    tail.axis_iter_mut(Axis(0)).for_each(update);
                }
                pivot
            };
            let mut row = l.row_mut(j);
            row[j] = pivot;
            row.slice_mut(s![j + 1..]).fill(0.0);
        }
        Ok(Cholesky { factor: l })
    }

    pub fn factor(&self) -> &Array2<f64> {
        &self.factor
    }

    /// Squared ratio of the extreme diagonal entries of the factor.
    pub fn condition_estimate(&self) -> f64 {
        let (lo, hi) = diag_extremes(&self.factor);
        (hi / lo).powi(2)
    }

    /// Solves `A X = B` for a block of right-hand sides (`B` is n x m).
    pub fn solve(&self, b: ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = self.factor.nrows();
        if b.nrows() != n {
            return Err(ZslError::Dimension(format!("cholesky solve: rhs has {} rows, system has {n}", b.nrows())));
        }
        let mut x = b.to_owned();
        // L y = b
        for i in 0..n {
            let (done, mut rest) = x.view_mut().split_at(Axis(0), i);
            let mut xi = rest.row_mut(0);
            for k in 0..i {
                let lik = self.factor[[i, k]];
                if lik != 0.0 {
                    xi.scaled_add(-lik, &done.row(k));
                }
            }
            xi /= self.factor[[i, i]];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let (mut head, done) = x.view_mut().split_at(Axis(0), i + 1);
            let mut xi = head.row_mut(i);
            for k in (i + 1)..n {
                let lki = self.factor[[k, i]];
                if lki != 0.0 {
                    xi.scaled_add(-lki, &done.row(k - i - 1));
                }
            }
            xi /= self.factor[[i, i]];
        }
        Ok(x)
    }
}

/// LU factorization with partial (row) pivoting, `P A = L U`.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Array2<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn new(a: ArrayView2<f64>) -> Result<Self> {
        let n = check_square(&a, "lu")?;
        let mut lu = a.as_standard_layout().into_owned();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = lu.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let tiny = f64::EPSILON * scale * n as f64;
        for k in 0..n {
            let mut p = k;
            let mut best = lu[[k, k]].abs();
            for i in (k + 1)..n {
                let v = lu[[i, k]].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > tiny) || !best.is_finite() {
                let cond = if best > 0.0 { scale / best } else { f64::INFINITY };
                return Err(ZslError::Numerical {
                    message: format!("matrix is numerically singular at column {k}"),
                    condition: cond,
                });
            }
            if p != k {
                for j in 0..n {
                    lu.swap([k, j], [p, j]);
                }
                perm.swap(k, p);
            }
            let (head, mut tail) = lu.view_mut().split_at(Axis(0), k + 1);
            let pivot_row = head.row(k).slice(s![k..]).to_owned();
            let pivot = pivot_row[0];
            let update = |mut row: ndarray::ArrayViewMut1<f64>| {
                let factor = row[k] / pivot;
                row[k] = factor;
                if factor != 0.0 {
                    let mut rest = row.slice_mut(s![k + 1..]);
                    rest.scaled_add(-factor, &pivot_row.slice(s![1..]));
                }
            };
            if n - k > PARALLEL_THRESHOLD {
                tail.axis_iter_mut(Axis(0)).into_par_iter().for_each(update);
            } else {
                tail.axis_iter_mut(Axis(0)).for_each(update);
            }
        }
        Ok(Lu { lu, perm })
    }

    /// Ratio of the extreme pivots; a cheap lower bound on the true condition number.
    pub fn condition_estimate(&self) -> f64 {
        let (lo, hi) = diag_extremes(&self.lu);
        hi / lo
    }

    /// Solves `A X = B` for a block of right-hand sides.
    pub fn solve(&self, b: ArrayView2<f64>) -> Result<Array2<f64>> {
        let n = self.lu.nrows();
        if b.nrows() != n {
            return Err(ZslError::Dimension(format!("lu solve: rhs has {} rows, system has {n}", b.nrows())));
        }
        let mut x = b.select(Axis(0), &self.perm);
        for i in 0..n {
            let (done, mut rest) = x.view_mut().split_at(Axis(0), i);
            let mut xi = rest.row_mut(0);
            for k in 0..i {
                let lik = self.lu[[i, k]];
                if lik != 0.0 {
                    xi.scaled_add(-lik, &done.row(k));
                }
            }
        }
        for i in (0..n).rev() {
            let (mut head, done) = x.view_mut().split_at(Axis(0), i + 1);
            let mut xi = head.row_mut(i);
            for k in (i + 1)..n {
                let uik = self.lu[[i, k]];
                if uik != 0.0 {
                    xi.scaled_add(-uik, &done.row(k - i - 1));
                }
            }
            xi /= self.lu[[i, i]];
        }
        Ok(x)
    }
}

/// Solves `X M = R` for `X`.
///
/// When `symmetric` is set the solve goes through a Cholesky factorization
/// of `M` and falls back to pivoted LU if `M` turns out not to be positive
/// definite. Returns the solution with its condition estimate.
pub fn solve_right(system: ArrayView2<f64>, rhs: ArrayView2<f64>, symmetric: bool) -> Result<(Array2<f64>, f64)> {
    let n = check_square(&system, "solve_right")?;
    if rhs.ncols() != n {
        return Err(ZslError::Dimension(format!(
            "solve_right: rhs has {} columns, system is {n}x{n}",
            rhs.ncols()
        )));
    }
    let rhs_t = rhs.t();
    let (x_t, cond) = if symmetric {
        match Cholesky::new(system) {
            Ok(chol) => {
                let cond = chol.condition_estimate();
                (chol.solve(rhs_t)?, cond)
            }
            Err(_) => {
                log::debug!("cholesky failed on a {n}x{n} system, retrying with pivoted LU");
                let lu = Lu::new(system)?;
                (lu.solve(rhs_t)?, lu.condition_estimate())
            }
        }
    } else {
        let lu = Lu::new(system.t())?;
        (lu.solve(rhs_t)?, lu.condition_estimate())
    };
    if cond > CONDITION_WARNING {
        log::warn!("ill-conditioned {n}x{n} system, condition estimate {cond:.3e}");
    }
    if x_t.iter().any(|v| !v.is_finite()) {
        return Err(ZslError::Numerical {
            message: "solution contains non-finite entries".into(),
            condition: cond,
        });
    }
    Ok((x_t.reversed_axes().as_standard_layout().into_owned(), cond))
}

fn diag_extremes(m: &Array2<f64>) -> (f64, f64) {
    m.diag()
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// L2-normalizes each column in place. Columns with zero norm are left
/// untouched and their indices returned.
pub fn normalize_columns(m: &mut Array2<f64>) -> Vec<usize> {
    let mut degenerate = Vec::new();
    for (j, mut col) in m.axis_iter_mut(Axis(1)).enumerate() {
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            col /= norm;
        } else {
            degenerate.push(j);
        }
    }
    degenerate
}

/// L2-normalizes each row in place; zero rows are left untouched.
pub fn normalize_rows(m: &mut Array2<f64>) {
    Zip::from(m.rows_mut()).for_each(|mut row| {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_solves_spd_system() {
        let a = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let b = array![[1.0, 0.0], [2.0, 1.0], [3.0, -1.0]];
        let x = Cholesky::new(a.view()).unwrap().solve(b.view()).unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(Cholesky::new(a.view()), Err(ZslError::Numerical { .. })));
    }

    #[test]
    fn lu_needs_pivoting() {
        let a = array![[0.0, 1.0, 2.0], [1.0, 0.0, 3.0], [4.0, -3.0, 8.0]];
        let b = array![[1.0], [2.0], [3.0]];
        let x = Lu::new(a.view()).unwrap().solve(b.view()).unwrap();
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn lu_reports_singular() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(matches!(Lu::new(a.view()), Err(ZslError::Numerical { .. })));
    }

    #[test]
    fn solve_right_matches_left_multiplication() {
        let m = array![[3.0, 1.0, 0.0], [0.5, 2.0, 0.2], [0.0, 1.0, 4.0]];
        let r = array![[1.0, 2.0, 3.0], [0.0, -1.0, 1.0]];
        let (x, _) = solve_right(m.view(), r.view(), false).unwrap();
        let back = x.dot(&m);
        assert!((back - &r).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn large_systems_take_parallel_path() {
        let n = 300;
        let a = Array2::from_shape_fn((n, n), |(i, j)| if i == j { n as f64 } else { ((i * 7 + j * 13) % 11) as f64 / 11.0 });
        let spd = a.dot(&a.t());
        let b = Array2::from_shape_fn((n, 2), |(i, j)| (i + j) as f64);
        let x = Cholesky::new(spd.view()).unwrap().solve(b.view()).unwrap();
        assert!((spd.dot(&x) - &b).iter().all(|v| v.abs() < 1e-6));
        let y = Lu::new(a.view()).unwrap().solve(b.view()).unwrap();
        assert!((a.dot(&y) - &b).iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn zero_column_is_reported() {
        let mut m = array![[3.0, 0.0], [4.0, 0.0]];
        assert_eq!(normalize_columns(&mut m), vec![1]);
        assert!((m[[0, 0]] - 0.6).abs() < 1e-15);
    }
}
