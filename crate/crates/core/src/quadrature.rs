//! Gauss-Hermite rules for expectations over a standard normal innovation.
//!
//! Nodes are the eigenvalues of the Jacobi matrix of the Hermite
//! polynomials (Golub-Welsch), found with an implicit QL sweep on the
//! symmetric tridiagonal matrix and then polished by Newton steps on the
//! three-term recurrence. Weights come from the Christoffel function of the
//! orthonormal recurrence, which stays accurate for the tiny tail weights
//! where eigenvector components lose relative precision.

use thiserror::Error;

use crate::scalar::Real;

pub const MAX_ORDER: usize = 64;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("quadrature order {0} outside 1..={MAX_ORDER}")]
pub struct OrderOutOfRange(pub usize);

/// Nodes and probability weights for `E[f(ε)]`, `ε ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
    pub order: usize,
}

impl<T: Real> QuadratureRule<T> {
    /// `Σ_k w_k f(ε_k)`.
    pub fn expect(&self, f: impl Fn(T) -> T) -> T {
        self.nodes
            .iter()
            .zip(&self.weights)
            .fold(T::zero(), |acc, (&x, &w)| acc + w * f(x))
    }
}

/// Eigenvalues of the symmetric tridiagonal matrix with diagonal `d` and
/// sub-diagonal `e[1..]` (`e[0]` unused), by implicit QL with Wilkinson
/// shifts. Returned unsorted.
fn tridiagonal_eigenvalues<T: Real>(mut d: Vec<T>, mut e: Vec<T>) -> Vec<T> {
    let n = d.len();
    if n == 1 {
        return d;
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = T::zero();
    let two = T::lit(2.0);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= T::epsilon() * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter <= 60, "tridiagonal QL failed to converge");
            let mut g = (d[l + 1] - d[l]) / (two * e[l]);
            let mut r = g.hypot(T::one());
            g = d[m] - d[l] + e[l] / (g + if g >= T::zero() { r.abs() } else { -r.abs() });
            let (mut s, mut c, mut p) = (T::one(), T::one(), T::zero());
            let mut i = m;
            let mut underflow = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == T::zero() {
                    d[i + 1] = d[i + 1] - p;
                    e[m] = T::zero();
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + two * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if underflow {
                continue;
            }
            d[l] = d[l] - p;
            e[l] = g;
            e[m] = T::zero();
        }
    }
    d
}

/// Orthonormal probabilists' Hermite values `p_0..p_n` at `x`.
fn orthonormal_hermite<T: Real>(n: usize, x: T) -> Vec<T> {
    let mut p = Vec::with_capacity(n + 1);
    p.push(T::one());
    if n >= 1 {
        p.push(x);
    }
    for j in 1..n {
        let jf = T::lit(j as f64);
        let next = (x * p[j] - jf.sqrt() * p[j - 1]) / (jf + T::one()).sqrt();
        p.push(next);
    }
    p
}

/// Gauss-Hermite rule of the given order for a standard normal variate.
pub fn gauss_hermite<T: Real>(order: usize) -> Result<QuadratureRule<T>, OrderOutOfRange> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(OrderOutOfRange(order));
    }
    let n = order;
    // Physicists' Jacobi matrix: zero diagonal, off-diagonals sqrt(k/2).
    // Its eigenvalues t_k map to standard-normal nodes ε_k = √2 t_k.
    let d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    for (k, ek) in e.iter_mut().enumerate().skip(1) {
        *ek = (T::lit(k as f64) / T::lit(2.0)).sqrt();
    }
    let mut nodes: Vec<T> = tridiagonal_eigenvalues(d, e)
        .into_iter()
        .map(|t| t * T::lit(2.0).sqrt())
        .collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // Newton polish on p_n, using p_n' = sqrt(n) p_{n-1}.
    let nf = T::lit(n as f64);
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let p = orthonormal_hermite(n, *x);
            let dp = nf.sqrt() * p[n - 1];
            if dp == T::zero() {
                break;
            }
            *x = *x - p[n] / dp;
        }
    }
    // Exact symmetry about zero.
    for k in 0..n / 2 {
        let m = (nodes[n - 1 - k] - nodes[k]) / T::lit(2.0);
        nodes[k] = -m;
        nodes[n - 1 - k] = m;
    }
    if n % 2 == 1 {
        nodes[n / 2] = T::zero();
    }

    let mut weights: Vec<T> = nodes
        .iter()
        .map(|&x| {
            let p = orthonormal_hermite(n - 1, x);
            T::one() / p.iter().fold(T::zero(), |a, &v| a + v * v)
        })
        .collect();
    for k in 0..n / 2 {
        let w = (weights[k] + weights[n - 1 - k]) / T::lit(2.0);
        weights[k] = w;
        weights[n - 1 - k] = w;
    }
    let total = weights.iter().fold(T::zero(), |a, &w| a + w);
    for w in weights.iter_mut() {
        *w = *w / total;
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        order: n,
    })
}

/// Next-period productivity at each node: `z'_k = exp(ρ ln z + σ ε_k)`.
pub fn next_shocks<T: Real>(z: T, rule: &QuadratureRule<T>, rho: T, sigma: T) -> Vec<T> {
    let base = rho * z.ln();
    rule.nodes
        .iter()
        .map(|&eps| (base + sigma * eps).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{normal_abs_moment, normal_moment};

    #[test]
    fn order_one_is_midpoint() {
        let r = gauss_hermite::<f64>(1).unwrap();
        assert_eq!(r.nodes, vec![0.0]);
        assert_eq!(r.weights, vec![1.0]);
    }

    #[test]
    fn order_two_nodes_are_unit() {
        let r = gauss_hermite::<f64>(2).unwrap();
        assert!((r.nodes[0] + 1.0).abs() < 1e-15 && (r.nodes[1] - 1.0).abs() < 1e-15);
        assert!((r.weights[0] - 0.5).abs() < 1e-15);
        assert!((r.expect(|x| x * x) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn order_eight_fourth_moment() {
        let r = gauss_hermite::<f64>(8).unwrap();
        assert!((r.expect(|x| x.powi(4)) - 3.0).abs() < 1e-10);
    }

    #[test]
    fn out_of_range_orders_rejected() {
        assert_eq!(gauss_hermite::<f64>(0).unwrap_err(), OrderOutOfRange(0));
        assert!(gauss_hermite::<f64>(65).is_err());
        assert!(gauss_hermite::<f64>(64).is_ok());
    }

    #[test]
    fn polynomial_exactness_across_orders() {
        for n in [3usize, 5, 8, 12, 20, 32] {
            let r = gauss_hermite::<f64>(n).unwrap();
            let sum: f64 = r.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for k in 0..(2 * n as u32) {
                let got = r.expect(|x| x.powi(k as i32));
                let want = normal_moment(k);
                let err = (got - want).abs() / normal_abs_moment(k).max(1.0);
                assert!(err <= 1e-9, "order {n} moment {k}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn single_precision_rule_is_usable() {
        let r = gauss_hermite::<f32>(4).unwrap();
        assert!((r.expect(|x| x * x) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn shocks_from_unit_level() {
        let r = gauss_hermite::<f64>(4).unwrap();
        let z = next_shocks(1.0, &r, 0.458, 0.043);
        for (zk, e) in z.iter().zip(&r.nodes) {
            assert!((zk - (0.043 * e).exp()).abs() < 1e-15);
        }
        let det = next_shocks(2.0, &r, 0.5, 0.0);
        assert!(det.iter().all(|&x| (x - 2f64.powf(0.5)).abs() < 1e-15));
    }

    #[test]
    fn mean_log_shock() {
        let r = gauss_hermite::<f64>(8).unwrap();
        let z = next_shocks(1.1, &r, 0.458, 0.043);
        let mean_log: f64 = z.iter().zip(&r.weights).map(|(z, w)| w * z.ln()).sum();
        assert!((mean_log - 0.043652).abs() < 1e-6, "{mean_log}");
        assert!((mean_log - 0.458 * 1.1f64.ln()).abs() < 1e-14);
    }
}
