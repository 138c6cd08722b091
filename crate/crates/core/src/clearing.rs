//! Market-clearing output layers.
//!
//! Both layers map pre-adjustment demands `b̃` of agents with population
//! weights `μ` onto the hyperplane `Σ μ_i b_i = B` by the weighted least
//! squares adjustment
//!
//! ```text
//! minimize  ½ Σ μ_i (b_i - b̃_i)²   s.t.  Σ μ_i b_i = B   [, b_i ≥ lb_i]
//! ```
//!
//! Without bounds the minimizer shifts every agent by the same amount
//! `λ = -(Σ μ_i b̃_i - B) / Σ μ_i`. With lower bounds the solution is
//! `b_i = max(b̃_i + λ, lb_i)` where `λ` is the root of the nondecreasing
//! piecewise-linear map `λ ↦ Σ μ_i max(b̃_i + λ, lb_i) - B`. The exact solver
//! sorts the breakpoints `lb_i - b̃_i` and walks them once; the alternative
//! solver bisects on `λ`.
//!
//! The solvers only need ordered field arithmetic, so the sorted solver
//! also runs on exact rationals.

use std::sync::Arc;

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, CustomOutput, CustomPrimitive, Tensor};
use crate::scalar::{Field, Real};

pub const BISECTION_TOL: f64 = 1e-12;
pub const BISECTION_MAX_ITER: usize = 200;
/// Width of the Gaussian bump in the liftoff term.
pub const LIFTOFF_SHARPNESS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClearingError {
    #[error("clearing problem has no agents")]
    Empty,
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("population weight mu[{index}] = {value} is not positive")]
    NonPositiveMass { index: usize, value: String },
    #[error("non-finite input in {what}")]
    NonFinite { what: &'static str },
    #[error("infeasible bounds: sum(mu * lb) = {bound_mass} exceeds supply {supply}")]
    Infeasible { bound_mass: String, supply: String },
}

/// Which bound-respecting solver to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    #[default]
    Sorted,
    Bisection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClearingProblem<T> {
    pub mu: Vec<T>,
    pub b_tilde: Vec<T>,
    pub supply: T,
    pub lower_bounds: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult<T> {
    pub b: Vec<T>,
    /// Common shift of the free agents (multiplier of the clearing row).
    pub lambda: T,
    /// Agents held at their lower bound, ascending.
    pub active_set: Vec<usize>,
}

impl<T: Field> ClearingProblem<T> {
    pub fn new(mu: Vec<T>, b_tilde: Vec<T>, supply: T) -> Self {
        Self {
            mu,
            b_tilde,
            supply,
            lower_bounds: None,
        }
    }

    pub fn with_bounds(mut self, lb: Vec<T>) -> Self {
        self.lower_bounds = Some(lb);
        self
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn total_mass(&self) -> T {
        sum(self.mu.iter().cloned())
    }

    /// `Σ μ_i b̃_i - B`.
    pub fn excess_demand(&self) -> T {
        weighted_sum(&self.mu, &self.b_tilde) - self.supply.clone()
    }

    pub fn validate(&self) -> Result<(), ClearingError> {
        let n = self.mu.len();
        if n == 0 {
            return Err(ClearingError::Empty);
        }
        if self.b_tilde.len() != n {
            return Err(ClearingError::LengthMismatch {
                what: "b_tilde",
                got: self.b_tilde.len(),
                expected: n,
            });
        }
        for (i, m) in self.mu.iter().enumerate() {
            if *m <= T::zero() {
                return Err(ClearingError::NonPositiveMass {
                    index: i,
                    value: format!("{m:?}"),
                });
            }
        }
        if let Some(lb) = &self.lower_bounds {
            if lb.len() != n {
                return Err(ClearingError::LengthMismatch {
                    what: "lower_bounds",
                    got: lb.len(),
                    expected: n,
                });
            }
            let bound_mass = weighted_sum(&self.mu, lb);
            if bound_mass > self.supply {
                return Err(ClearingError::Infeasible {
                    bound_mass: format!("{bound_mass:?}"),
                    supply: format!("{:?}", self.supply),
                });
            }
        }
        Ok(())
    }
}

fn sum<T: Field>(it: impl Iterator<Item = T>) -> T {
    it.fold(T::zero(), |a, x| a + x)
}

fn weighted_sum<T: Field>(w: &[T], x: &[T]) -> T {
    sum(w.iter().zip(x).map(|(a, b)| a.clone() * b.clone()))
}

fn check_finite<T: Real>(p: &ClearingProblem<T>) -> Result<(), ClearingError> {
    let bad = |xs: &[T]| xs.iter().any(|x| !x.is_finite());
    if bad(&p.mu) {
        return Err(ClearingError::NonFinite { what: "mu" });
    }
    if bad(&p.b_tilde) {
        return Err(ClearingError::NonFinite { what: "b_tilde" });
    }
    if !p.supply.is_finite() {
        return Err(ClearingError::NonFinite { what: "supply" });
    }
    if p.lower_bounds.as_deref().is_some_and(bad) {
        return Err(ClearingError::NonFinite {
            what: "lower_bounds",
        });
    }
    Ok(())
}

/// Equal-shift adjustment without bounds: `b_i = b̃_i - ΔB / Σ μ`.
pub fn simple_adjust<T: Field>(p: &ClearingProblem<T>) -> Result<Vec<T>, ClearingError> {
    Ok(simple_adjust_result(p)?.b)
}

/// [`simple_adjust`] returning the shift and an empty active set.
pub fn simple_adjust_result<T: Field>(
    p: &ClearingProblem<T>,
) -> Result<ProjectionResult<T>, ClearingError> {
    let unbounded = ClearingProblem {
        lower_bounds: None,
        ..p.clone()
    };
    unbounded.validate()?;
    let lambda = -p.excess_demand() / p.total_mass();
    let b: Vec<T> = p
        .b_tilde
        .iter()
        .map(|x| x.clone() + lambda.clone())
        .collect();
    let all: Vec<usize> = (0..p.len()).collect();
    let (b, lambda) = polish(&p.mu, &p.supply, b, lambda, &all);
    Ok(ProjectionResult {
        b,
        lambda,
        active_set: Vec::new(),
    })
}

/// One Newton correction of the shift on the free agents. The clearing map
/// is linear in `λ` on a fixed free set, so this removes rounding drift in
/// floating point and is a no-op in exact arithmetic.
fn polish<T: Field>(
    mu: &[T],
    supply: &T,
    mut b: Vec<T>,
    mut lambda: T,
    free: &[usize],
) -> (Vec<T>, T) {
    if free.is_empty() {
        return (b, lambda);
    }
    let resid = weighted_sum(mu, &b) - supply.clone();
    if resid == T::zero() {
        return (b, lambda);
    }
    let m = sum(free.iter().map(|&i| mu[i].clone()));
    let d = resid / m;
    for &i in free {
        b[i] = b[i].clone() - d.clone();
    }
    lambda = lambda - d;
    (b, lambda)
}

/// Exact bound-respecting projection by a sorted walk over breakpoints.
pub fn project_sorted<T: Field>(
    p: &ClearingProblem<T>,
) -> Result<ProjectionResult<T>, ClearingError> {
    p.validate()?;
    let Some(lb) = p.lower_bounds.as_ref() else {
        return simple_adjust_result(p);
    };
    let n = p.len();
    let t: Vec<T> = (0..n)
        .map(|i| lb[i].clone() - p.b_tilde[i].clone())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        t[a].partial_cmp(&t[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    // Agents enter the free set in breakpoint order. While free, agent i
    // contributes μ_i (b̃_i + λ); while clamped, μ_i lb_i.
    let mut clamped_mass = weighted_sum(&p.mu, lb);
    let mut free_tilde = T::zero();
    let mut free_mass = T::zero();
    let mut n_free = 0;
    for (k, &i) in order.iter().enumerate() {
        clamped_mass = clamped_mass - p.mu[i].clone() * lb[i].clone();
        free_tilde = free_tilde + p.mu[i].clone() * p.b_tilde[i].clone();
        free_mass = free_mass + p.mu[i].clone();
        let lambda = (p.supply.clone() - clamped_mass.clone() - free_tilde.clone()) / free_mass.clone();
        n_free = k + 1;
        if k + 1 == n || lambda <= t[order[k + 1]] {
            break;
        }
    }

    let free = &order[..n_free];
    // Recompute the shift from fresh sums on the final free set.
    let mut is_free = vec![false; n];
    for &i in free {
        is_free[i] = true;
    }
    let mut rest = p.supply.clone();
    let mut mass = T::zero();
    for i in 0..n {
        if is_free[i] {
            rest = rest - p.mu[i].clone() * p.b_tilde[i].clone();
            mass = mass + p.mu[i].clone();
        } else {
            rest = rest - p.mu[i].clone() * lb[i].clone();
        }
    }
    let lambda = rest / mass;
    finish(p, lb, &is_free, lambda)
}

fn finish<T: Field>(
    p: &ClearingProblem<T>,
    lb: &[T],
    is_free: &[bool],
    lambda: T,
) -> Result<ProjectionResult<T>, ClearingError> {
    let n = p.len();
    let b: Vec<T> = (0..n)
        .map(|i| {
            if is_free[i] {
                p.b_tilde[i].clone() + lambda.clone()
            } else {
                lb[i].clone()
            }
        })
        .collect();
    let free: Vec<usize> = (0..n).filter(|&i| is_free[i]).collect();
    let active_set: Vec<usize> = (0..n).filter(|&i| !is_free[i]).collect();
    let (b, lambda) = polish(&p.mu, &p.supply, b, lambda, &free);
    Ok(ProjectionResult {
        b,
        lambda,
        active_set,
    })
}

/// Bound-respecting projection by bisection on the shift `λ`, followed by
/// an exact solve on the identified free set.
pub fn project_bisection<T: Real>(
    p: &ClearingProblem<T>,
) -> Result<ProjectionResult<T>, ClearingError> {
    p.validate()?;
    check_finite(p)?;
    let Some(lb) = p.lower_bounds.as_ref() else {
        return simple_adjust_result(p);
    };
    let n = p.len();
    let mass = p.total_mass();
    let excess = p.excess_demand();
    let t: Vec<T> = (0..n).map(|i| lb[i] - p.b_tilde[i]).collect();
    let t_min = t.iter().copied().fold(T::infinity(), T::min);
    let t_max = t.iter().copied().fold(T::neg_infinity(), T::max);
    let pad = excess.abs() / mass;
    // Above every breakpoint the map is ΔB + λ Σμ, whose root is -ΔB/Σμ.
    let mut lo = t_min - pad;
    let mut hi = t_max.max(-excess / mass) + pad;
    let phi = |lam: T| -> T {
        let mut acc = T::zero();
        for i in 0..n {
            acc = acc + p.mu[i] * (p.b_tilde[i] + lam).max(lb[i]);
        }
        acc - p.supply
    };
    let tol = T::lit(BISECTION_TOL);
    for _ in 0..BISECTION_MAX_ITER {
        let mid = (lo + hi) / T::lit(2.0);
        if phi(mid) < T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= tol * T::one().max(mid.abs()) {
            break;
        }
    }
    let lambda = (lo + hi) / T::lit(2.0);
    let mut is_free: Vec<bool> = (0..n).map(|i| p.b_tilde[i] + lambda > lb[i]).collect();
    if !is_free.iter().any(|&f| f) {
        // Feasible boundary: every agent sits on its bound.
        let k = (0..n).min_by(|&a, &b| t[a].partial_cmp(&t[b]).unwrap()).unwrap();
        is_free[k] = true;
    }
    let mut rest = p.supply;
    let mut free_mass = T::zero();
    for i in 0..n {
        if is_free[i] {
            rest = rest - p.mu[i] * p.b_tilde[i];
            free_mass = free_mass + p.mu[i];
        } else {
            rest = rest - p.mu[i] * lb[i];
        }
    }
    finish(p, lb, &is_free, rest / free_mass)
}

/// Bound-respecting projection with the selected solver.
pub fn project_with_bounds<T: Real>(
    p: &ClearingProblem<T>,
    solver: Solver,
) -> Result<ProjectionResult<T>, ClearingError> {
    check_finite(p)?;
    match solver {
        Solver::Sorted => project_sorted(p),
        Solver::Bisection => project_bisection(p),
    }
}

/// Vector-Jacobian product of the projection with its active set held
/// fixed.
///
/// With free set `F` and `M = Σ_{k∈F} μ_k`, `∂b_i/∂b̃_j = [i=j] - μ_j / M`
/// for `i, j ∈ F` and zero otherwise, so the returned adjoint is
/// `u_j - μ_j (Σ_{i∈F} u_i) / M` on `F` and zero on the active set.
pub fn project_backward<T: Field>(
    result: &ProjectionResult<T>,
    mu: &[T],
    upstream: &[T],
) -> Vec<T> {
    let n = mu.len();
    let mut is_free = vec![true; n];
    for &i in &result.active_set {
        is_free[i] = false;
    }
    let mut free_mass = T::zero();
    let mut free_up = T::zero();
    for i in 0..n {
        if is_free[i] {
            free_mass = free_mass + mu[i].clone();
            free_up = free_up + upstream[i].clone();
        }
    }
    if free_mass == T::zero() {
        log::debug!("projection backward with every agent clamped; gradient set to zero");
        return vec![T::zero(); n];
    }
    let scale = free_up / free_mass;
    (0..n)
        .map(|j| {
            if is_free[j] {
                upstream[j].clone() - mu[j].clone() * scale.clone()
            } else {
                T::zero()
            }
        })
        .collect()
}

/// Loss term that restores a gradient for agents clamped to their bound
/// while their Euler condition says they want to save more:
/// `1/(1+b̃) · exp(-(b-lb)²/1e-5) · max(1 - ratio, 0)`.
pub fn liftoff_residual<T: Real>(b_tilde: T, b: T, lb: T, euler_ratio: T) -> T {
    let gap = b - lb;
    let bump = (-(gap * gap) / T::lit(LIFTOFF_SHARPNESS)).exp();
    let shortfall = (T::one() - euler_ratio).max(T::zero());
    bump * shortfall / (T::one() + b_tilde)
}

/// Which clearing layer a network output passes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClearingMode {
    /// Equal-shift adjustment; bounds left to the loss.
    #[default]
    Simple,
    /// Bound-respecting projection.
    Solver,
}

impl std::str::FromStr for ClearingMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simple" => Ok(Self::Simple),
            "solver" => Ok(Self::Solver),
            other => Err(format!("unknown mode `{other}` (expected simple|solver)")),
        }
    }
}

/// Row-wise clearing layer usable as a tape primitive.
///
/// Input is an `n × A` matrix of pre-adjustment demands (one row per
/// state); output has the same shape, each row cleared against `supply`.
#[derive(Debug, Clone)]
pub struct ClearingLayer<T> {
    name: String,
    mu: Vec<T>,
    supply: T,
    lower_bounds: Option<Vec<T>>,
    solver: Solver,
}

impl<T: Real> ClearingLayer<T> {
    pub fn simple(name: impl Into<String>, mu: Vec<T>, supply: T) -> Result<Self, ClearingError> {
        let layer = Self {
            name: name.into(),
            mu,
            supply,
            lower_bounds: None,
            solver: Solver::Sorted,
        };
        layer.check()?;
        Ok(layer)
    }

    pub fn bounded(
        name: impl Into<String>,
        mu: Vec<T>,
        supply: T,
        lower_bounds: Vec<T>,
        solver: Solver,
    ) -> Result<Self, ClearingError> {
        let layer = Self {
            name: name.into(),
            mu,
            supply,
            lower_bounds: Some(lower_bounds),
            solver,
        };
        layer.check()?;
        Ok(layer)
    }

    fn check(&self) -> Result<(), ClearingError> {
        let probe = ClearingProblem {
            mu: self.mu.clone(),
            b_tilde: vec![T::zero(); self.mu.len()],
            supply: self.supply,
            lower_bounds: self.lower_bounds.clone(),
        };
        probe.validate()?;
        check_finite(&probe)
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn supply(&self) -> T {
        self.supply
    }

    pub fn lower_bounds(&self) -> Option<&[T]> {
        self.lower_bounds.as_deref()
    }

    pub fn into_arc(self) -> Arc<dyn CustomPrimitive<T>> {
        Arc::new(self)
    }

    /// Clears every row of `x` without recording anything.
    pub fn apply_rows(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Vec<usize>>), ClearingError> {
        assert_eq!(x.ncols(), self.mu.len(), "clearing layer width");
        let mut out = x.clone();
        let mut active = Vec::new();
        match &self.lower_bounds {
            None => {
                let mass = sum(self.mu.iter().copied());
                for mut row in out.axis_iter_mut(Axis(0)) {
                    let demand = sum(row.iter().zip(&self.mu).map(|(&b, &m)| b * m));
                    let shift = (demand - self.supply) / mass;
                    row.mapv_inplace(|b| b - shift);
                    let resid = sum(row.iter().zip(&self.mu).map(|(&b, &m)| b * m)) - self.supply;
                    if resid != T::zero() {
                        let d = resid / mass;
                        row.mapv_inplace(|b| b - d);
                    }
                }
            }
            Some(lb) => {
                for mut row in out.axis_iter_mut(Axis(0)) {
                    let p = ClearingProblem {
                        mu: self.mu.clone(),
                        b_tilde: row.to_vec(),
                        supply: self.supply,
                        lower_bounds: Some(lb.clone()),
                    };
                    let r = project_with_bounds(&p, self.solver)?;
                    for (dst, v) in row.iter_mut().zip(&r.b) {
                        *dst = *v;
                    }
                    active.push(r.active_set);
                }
            }
        }
        Ok((out, active))
    }
}

impl<T: Real> CustomPrimitive<T> for ClearingLayer<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<CustomOutput<T>, AutodiffError> {
        let x = inputs[0];
        let (value, active) = self
            .apply_rows(x)
            .map_err(|e| AutodiffError::PrimitiveFailed {
                name: self.name.clone(),
                reason: e.to_string(),
            })?;
        let mu = self.mu.clone();
        let backward = Box::new(move |g: &Tensor<T>| {
            let mut out = g.clone();
            if active.is_empty() {
                let mass = sum(mu.iter().copied());
                for mut row in out.axis_iter_mut(Axis(0)) {
                    let s = row.sum() / mass;
                    for (v, &m) in row.iter_mut().zip(&mu) {
                        *v = *v - m * s;
                    }
                }
            } else {
                for (mut row, act) in out.axis_iter_mut(Axis(0)).zip(&active) {
                    let result = ProjectionResult {
                        b: Vec::new(),
                        lambda: T::zero(),
                        active_set: act.clone(),
                    };
                    let up = row.to_vec();
                    let vjp = project_backward(&result, &mu, &up);
                    for (dst, v) in row.iter_mut().zip(vjp) {
                        *dst = v;
                    }
                }
            }
            vec![out]
        });
        Ok(CustomOutput { value, backward })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn simple_adjust_zero_excess_is_identity() {
        let p = ClearingProblem::new(vec![0.5, 0.5], vec![0.4, 0.8], 0.6);
        assert!(close(&simple_adjust(&p).unwrap(), &[0.4, 0.8], 1e-15));
    }

    #[test]
    fn simple_adjust_shifts_equally() {
        let p = ClearingProblem::new(vec![0.5, 0.5], vec![0.4, 0.8], 0.5);
        let b = simple_adjust(&p).unwrap();
        assert!(close(&b, &[0.3, 0.7], 1e-15));
        assert!((0.5 * b[0] + 0.5 * b[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn simple_adjust_non_unit_mass() {
        let p = ClearingProblem::new(vec![1.0, 1.0, 2.0], vec![1.0, 2.0, 3.0], 8.0);
        let r = simple_adjust_result(&p).unwrap();
        assert_eq!(r.lambda, -0.25);
        assert!(close(&r.b, &[0.75, 1.75, 2.75], 1e-15));
    }

    #[test]
    fn bounded_slack_case_matches_simple() {
        let p = ClearingProblem::new(vec![0.5, 0.5], vec![0.6, 0.8], 0.8).with_bounds(vec![0.0, 0.0]);
        for solver in [Solver::Sorted, Solver::Bisection] {
            let r = project_with_bounds(&p, solver).unwrap();
            assert!(close(&r.b, &[0.7, 0.9], 1e-12), "{solver:?} {:?}", r.b);
            assert!(r.active_set.is_empty());
        }
    }

    #[test]
    fn bounded_clamps_low_agent() {
        let p = ClearingProblem::new(vec![0.5f64, 0.5], vec![0.1, 0.9], 0.3).with_bounds(vec![0.0, 0.0]);
        for solver in [Solver::Sorted, Solver::Bisection] {
            let r = project_with_bounds(&p, solver).unwrap();
            assert!((r.lambda + 0.3).abs() < 1e-12, "{solver:?}");
            assert!(close(&r.b, &[0.0, 0.6], 1e-12));
            assert_eq!(r.active_set, vec![0]);
        }
    }

    #[test]
    fn feasible_point_is_fixed() {
        let p = ClearingProblem::new(vec![1.0, 2.0], vec![0.5, 0.25], 1.0).with_bounds(vec![0.0, 0.0]);
        let r = project_sorted(&p).unwrap();
        assert_eq!(r.lambda, 0.0);
        assert_eq!(r.b, vec![0.5, 0.25]);
    }

    #[test]
    fn boundary_supply_puts_everyone_on_bound() {
        let p = ClearingProblem::new(vec![1.0, 1.0, 1.0], vec![3.0, -1.0, 0.5], 0.75)
            .with_bounds(vec![0.125, 0.25, 0.375]);
        for solver in [Solver::Sorted, Solver::Bisection] {
            let r = project_with_bounds(&p, solver).unwrap();
            assert!(close(&r.b, &[0.125, 0.25, 0.375], 1e-12), "{solver:?} {:?}", r.b);
        }
    }

    #[test]
    fn infeasible_bounds_are_reported() {
        let p = ClearingProblem::new(vec![1.0, 1.0], vec![0.0, 0.0], 0.5).with_bounds(vec![0.5, 0.5]);
        let err = project_sorted(&p).unwrap_err();
        assert!(matches!(err, ClearingError::Infeasible { .. }));
        assert!(err.to_string().contains("1.0"));
    }

    #[test]
    fn nonpositive_mass_rejected() {
        let p = ClearingProblem::new(vec![1.0, 0.0], vec![0.0, 0.0], 0.5);
        assert!(matches!(
            simple_adjust(&p),
            Err(ClearingError::NonPositiveMass { index: 1, .. })
        ));
    }

    #[test]
    fn bisection_brackets_large_positive_shift() {
        // Unconstrained shift lies beyond every breakpoint.
        let p = ClearingProblem::new(vec![1.0, 1.0], vec![10.0, 10.0], 30.0).with_bounds(vec![0.0, 0.0]);
        let r = project_bisection(&p).unwrap();
        assert!(close(&r.b, &[15.0, 15.0], 1e-12), "{:?}", r.b);
    }

    #[test]
    fn backward_rows_sum_to_zero_without_bounds() {
        let r = ProjectionResult {
            b: vec![0.0, 0.0],
            lambda: 0.0,
            active_set: vec![],
        };
        let mu = [0.5, 0.5];
        let col0 = project_backward(&r, &mu, &[1.0, 0.0]);
        let col1 = project_backward(&r, &mu, &[0.0, 1.0]);
        assert!(close(&col0, &[0.5, -0.5], 1e-15));
        assert!(close(&col1, &[-0.5, 0.5], 1e-15));
    }

    #[test]
    fn backward_all_clamped_is_zero() {
        let r = ProjectionResult {
            b: vec![0.0, 0.0],
            lambda: 0.0,
            active_set: vec![0, 1],
        };
        assert_eq!(project_backward(&r, &[1.0, 1.0], &[3.0, -2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn liftoff_cases() {
        assert!(liftoff_residual(0.3, 0.1, 0.0, 0.5) < 1e-300);
        assert_eq!(liftoff_residual(0.0, 0.0, 0.0, 1.2), 0.0);
        assert!((liftoff_residual(0.0f64, 0.0, 0.0, 0.8) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn layer_rejects_infeasible_configuration() {
        let err = ClearingLayer::bounded("x", vec![1.0], 0.0, vec![1.0], Solver::Sorted).unwrap_err();
        assert!(matches!(err, ClearingError::Infeasible { .. }));
    }
}
