//! Brute-force reference implementations for tests.
//!
//! Nothing here is used by the training or clearing code paths; the
//! gradient checker in [`crate::autodiff`] is the only library caller. Each
//! oracle takes the slow route on purpose: exhaustive active-set
//! enumeration with a dense KKT solve, central differences, closed-form
//! Gaussian moments.

use crate::autodiff::Tensor;
use crate::clearing::ClearingProblem;
use crate::scalar::{Field, Real};

/// Comparison of a candidate against a reference.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub case_id: String,
    pub reference: Vec<f64>,
    pub candidate: Vec<f64>,
    pub max_abs_dev: f64,
    pub max_rel_dev: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn compare(case_id: impl Into<String>, reference: &[f64], candidate: &[f64], tol: f64) -> Self {
        assert_eq!(reference.len(), candidate.len(), "oracle length mismatch");
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        for (r, c) in reference.iter().zip(candidate) {
            let d = (r - c).abs();
            max_abs = max_abs.max(d);
            max_rel = max_rel.max(d / r.abs().max(1.0));
        }
        let pass = max_abs.is_finite() && max_abs <= tol;
        Self {
            case_id: case_id.into(),
            reference: reference.to_vec(),
            candidate: candidate.to_vec(),
            max_abs_dev: max_abs,
            max_rel_dev: max_rel,
            pass,
        }
    }
}

/// Solves `A x = rhs` by Gaussian elimination with partial pivoting.
/// Returns `None` when the matrix is singular.
pub fn solve_dense<T: Field>(mut a: Vec<Vec<T>>, mut rhs: Vec<T>) -> Option<Vec<T>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n)
            .filter(|&r| a[r][col] != T::zero())
            .max_by(|&x, &y| {
                a[x][col]
                    .abs()
                    .partial_cmp(&a[y][col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })?;
        a.swap(col, pivot);
        rhs.swap(col, pivot);
        for r in col + 1..n {
            if a[r][col] == T::zero() {
                continue;
            }
            let f = a[r][col].clone() / a[col][col].clone();
            for c in col..n {
                let v = a[col][c].clone();
                a[r][c] = a[r][c].clone() - f.clone() * v;
            }
            let v = rhs[col].clone();
            rhs[r] = rhs[r].clone() - f * v;
        }
    }
    let mut x = vec![T::zero(); n];
    for r in (0..n).rev() {
        let mut acc = rhs[r].clone();
        for c in r + 1..n {
            acc = acc - a[r][c].clone() * x[c].clone();
        }
        x[r] = acc / a[r][r].clone();
    }
    Some(x)
}

/// Stationarity system of the equality-constrained problem with the
/// agents in `clamped` fixed at their bounds. Unknowns are `b_F` and `λ`:
///
/// ```text
/// μ_i b_i - μ_i λ = μ_i b̃_i     (i ∈ F)
/// Σ_F μ_i b_i     = B - Σ_A μ_i lb_i
/// ```
///
/// Returns the full `b` and `λ`, or `None` when `F` is empty.
pub fn kkt_solve<T: Field>(
    p: &ClearingProblem<T>,
    lb: Option<&[T]>,
    clamped: &[bool],
) -> Option<(Vec<T>, T)> {
    let n = p.mu.len();
    let free: Vec<usize> = (0..n).filter(|&i| !clamped[i]).collect();
    let m = free.len();
    if m == 0 {
        return None;
    }
    let dim = m + 1;
    let mut a = vec![vec![T::zero(); dim]; dim];
    let mut rhs = vec![T::zero(); dim];
    for (r, &i) in free.iter().enumerate() {
        a[r][r] = p.mu[i].clone();
        a[r][m] = -p.mu[i].clone();
        rhs[r] = p.mu[i].clone() * p.b_tilde[i].clone();
        a[m][r] = p.mu[i].clone();
    }
    let mut rest = p.supply.clone();
    for i in 0..n {
        if clamped[i] {
            let bound = lb.expect("clamped agent needs a bound")[i].clone();
            rest = rest - p.mu[i].clone() * bound;
        }
    }
    rhs[m] = rest;
    let x = solve_dense(a, rhs)?;
    let mut b = vec![T::zero(); n];
    for (r, &i) in free.iter().enumerate() {
        b[i] = x[r].clone();
    }
    for i in 0..n {
        if clamped[i] {
            b[i] = lb.unwrap()[i].clone();
        }
    }
    Some((b, x[m].clone()))
}

/// Exhaustive active-set solution of the bounded clearing projection.
///
/// Every subset of agents is tried as the clamped set. A candidate is kept
/// when the free agents respect their bounds and every clamped agent has a
/// nonnegative bound multiplier `μ_i (lb_i - b̃_i - λ)`. When all agents are
/// clamped (possible only at `B = Σ μ lb`) the bound vector itself is
/// returned. Panics beyond 12 agents.
pub fn qp_oracle<T: Field>(p: &ClearingProblem<T>) -> Vec<T> {
    let n = p.mu.len();
    assert!(n <= 12, "qp_oracle enumerates 2^n active sets; n = {n}");
    let Some(lb) = p.lower_bounds.as_deref() else {
        let clamped = vec![false; n];
        return kkt_solve(p, None, &clamped).expect("unbounded KKT system").0;
    };
    let mut found: Option<Vec<T>> = None;
    for mask in 0u32..(1 << n) {
        let clamped: Vec<bool> = (0..n).map(|i| mask & (1 << i) != 0).collect();
        if clamped.iter().all(|&c| c) {
            let mass = (0..n).fold(T::zero(), |a, i| a + p.mu[i].clone() * lb[i].clone());
            if mass == p.supply && found.is_none() {
                found = Some(lb.to_vec());
            }
            continue;
        }
        let Some((b, lambda)) = kkt_solve(p, Some(lb), &clamped) else {
            continue;
        };
        let primal_ok = (0..n).all(|i| clamped[i] || b[i] >= lb[i]);
        let dual_ok = (0..n).all(|i| {
            !clamped[i] || lb[i].clone() - p.b_tilde[i].clone() - lambda.clone() >= T::zero()
        });
        if primal_ok && dual_ok {
            // Degenerate active sets reproduce the same point; keep the first.
            found.get_or_insert(b);
        }
    }
    found.expect("feasible problem has a KKT point")
}

/// Central finite differences of a scalar function of several tensors.
pub fn fd_gradient<T: Real>(
    f: impl Fn(&[Tensor<T>]) -> T,
    point: &[Tensor<T>],
    step: T,
) -> Vec<Tensor<T>> {
    let mut work: Vec<Tensor<T>> = point.to_vec();
    let two = T::lit(2.0);
    let mut out = Vec::with_capacity(point.len());
    for k in 0..point.len() {
        let mut g = Tensor::zeros(point[k].dim());
        let shape = point[k].dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let x0 = point[k][[r, c]];
                work[k][[r, c]] = x0 + step;
                let up = f(&work);
                work[k][[r, c]] = x0 - step;
                let down = f(&work);
                work[k][[r, c]] = x0;
                g[[r, c]] = (up - down) / (two * step);
            }
        }
        out.push(g);
    }
    out
}

/// `E[ε^k]` for a standard normal: zero for odd `k`, `(k-1)!!` for even.
pub fn normal_moment(k: u32) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    (1..k).step_by(2).map(f64::from).product()
}

/// `E[|ε|^k]` for a standard normal; the natural scale for judging
/// quadrature error on odd moments, whose true value is zero.
pub fn normal_abs_moment(k: u32) -> f64 {
    if k % 2 == 0 {
        return normal_moment(k);
    }
    let m = (k - 1) / 2;
    let fact: f64 = (1..=m).map(f64::from).product();
    (2.0 / std::f64::consts::PI).sqrt() * 2f64.powi(m as i32) * fact
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn moments_closed_form() {
        assert_eq!(normal_moment(0), 1.0);
        assert_eq!(normal_moment(2), 1.0);
        assert_eq!(normal_moment(4), 3.0);
        assert_eq!(normal_moment(6), 15.0);
        assert_eq!(normal_moment(7), 0.0);
        assert!((normal_abs_moment(1) - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!((normal_abs_moment(3) - 2.0 * normal_abs_moment(1)).abs() < 1e-15);
        assert_eq!(normal_abs_moment(4), 3.0);
    }

    #[test]
    fn dense_solver_handles_pivoting() {
        let a = vec![vec![0.0, 1.0], vec![2.0, 0.0]];
        let x = solve_dense(a, vec![3.0, 4.0]).unwrap();
        assert_eq!(x, vec![2.0, 3.0]);
        assert!(solve_dense(vec![vec![0.0]], vec![1.0]).is_none());
    }

    #[test]
    fn oracle_no_bounds_is_equal_shift() {
        let p = ClearingProblem::new(vec![1.0f64, 1.0, 2.0], vec![1.0, 2.0, 3.0], 8.0);
        let b = qp_oracle(&p);
        for (x, y) in b.iter().zip([0.75, 1.75, 2.75]) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn oracle_boundary_supply() {
        let p = ClearingProblem::new(vec![0.5, 0.5], vec![1.0, -2.0], 0.5).with_bounds(vec![0.4, 0.6]);
        assert_eq!(qp_oracle(&p), vec![0.4, 0.6]);
    }

    #[test]
    fn fd_exact_on_quadratic() {
        let g = fd_gradient(|x| x[0][[0, 0]] * x[0][[0, 0]] + 3.0 * x[0][[0, 1]], &[array![[1.5f64, 2.0]]], 1e-3);
        assert!((g[0][[0, 0]] - 3.0).abs() < 1e-10);
        assert!((g[0][[0, 1]] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn fd_vanishes_for_even_function_at_origin() {
        let g = fd_gradient(|x| x[0][[0, 0]].cosh(), &[array![[0.0f64]]], 1e-4);
        assert_eq!(g[0][[0, 0]], 0.0);
    }

    #[test]
    fn report_flags_deviation() {
        let r = OracleReport::compare("c", &[1.0, 2.0], &[1.0, 2.1], 1e-9);
        assert!(!r.pass);
        assert!((r.max_abs_dev - 0.1).abs() < 1e-12);
    }
}
