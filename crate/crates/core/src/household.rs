//! Household-side pieces shared by both economies: preferences, guarded
//! marginal utility, the Fischer-Burmeister residual and agent index maps.
//!
//! Agents are laid out type-major: column `t·H + a` is type `t` at age
//! `a + 1`. Savers (ages `1..H-1`) use `t·(H-1) + a`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};

/// Consumption below this is floored inside marginal utility.
pub const CONSUMPTION_FLOOR: f64 = 1e-8;
/// Smallest argument handed to the inverse marginal utility.
pub const INVERSE_ARG_FLOOR: f64 = 1e-12;
/// Scale of the quadratic penalty on consumption below the floor.
pub const FLOOR_PENALTY: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceType {
    pub mass: f64,
    pub gamma: f64,
}

/// `ψ(x, y) = x + y - √(x² + y²)`.
pub fn fischer_burmeister(x: f64, y: f64) -> f64 {
    x + y - x.hypot(y)
}

pub fn fb_tape(t: &mut Tape<f64>, x: Var, y: Var) -> Var {
    let x2 = t.square(x);
    let y2 = t.square(y);
    let r2 = t.add(x2, y2);
    let r = t.sqrt(r2);
    let s = t.add(x, y);
    t.sub(s, r)
}

/// `u'(c) = c^{-γ}` (log utility at γ = 1).
pub fn marginal_utility(c: f64, gamma: f64) -> f64 {
    c.max(CONSUMPTION_FLOOR).powf(-gamma)
}

/// `(u')^{-1}(x) = x^{-1/γ}`.
pub fn inverse_marginal_utility(x: f64, gamma: f64) -> f64 {
    x.max(INVERSE_ARG_FLOOR).powf(-1.0 / gamma)
}

/// Floors consumption and returns `(c_safe, penalty)`, where the penalty is
/// `10·max(0, floor - c)²` elementwise.
pub fn guard_tape(t: &mut Tape<f64>, c: Var) -> (Var, Var) {
    let safe = t.max_scalar(c, CONSUMPTION_FLOOR);
    let neg = t.neg(c);
    let short = t.add_scalar(neg, CONSUMPTION_FLOOR);
    let short = t.relu(short);
    let sq = t.square(short);
    let pen = t.scale(sq, FLOOR_PENALTY);
    (safe, pen)
}

/// `c^{-γ}` with a per-column `γ` row (`neg_gamma` holds `-γ`).
pub fn marginal_utility_tape(t: &mut Tape<f64>, c_safe: Var, neg_gamma: Var) -> Var {
    let l = t.log(c_safe);
    let e = t.mul(l, neg_gamma);
    t.exp(e)
}

/// `x^{-1/γ}` with `x` floored; `neg_inv_gamma` holds `-1/γ` per column.
pub fn inverse_marginal_utility_tape(t: &mut Tape<f64>, x: Var, neg_inv_gamma: Var) -> Var {
    let x = t.max_scalar(x, INVERSE_ARG_FLOOR);
    let l = t.log(x);
    let e = t.mul(l, neg_inv_gamma);
    t.exp(e)
}

/// Default hump-shaped income shares, `∝ sin(π h/(H+1))`, summing to one.
pub fn default_income(ages: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=ages)
        .map(|h| (std::f64::consts::PI * h as f64 / (ages as f64 + 1.0)).sin())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Default housing-utility weights, linear from 0.05 to 0.25.
pub fn default_housing_weight(ages: usize) -> Vec<f64> {
    if ages == 1 {
        return vec![0.05];
    }
    (0..ages)
        .map(|a| 0.05 + 0.2 * a as f64 / (ages as f64 - 1.0))
        .collect()
}

/// Index maps between full-width (`n_types·H`) and saver-width
/// (`n_types·(H-1)`) agent vectors.
#[derive(Debug, Clone)]
pub struct AgentIndex {
    pub ages: usize,
    pub types: usize,
    /// Full column of each saver.
    pub saver_in_full: Vec<usize>,
    /// Full column of each saver one period older.
    pub saver_next_age: Vec<usize>,
    /// For each full column, the saver column, or `n_savers` (a zero pad)
    /// for the oldest age.
    pub full_from_saver: Vec<usize>,
    /// For each full column, the saver column that held the asset one
    /// period earlier, or `n_savers` for newborns.
    pub shifted_from_saver: Vec<usize>,
}

impl AgentIndex {
    pub fn new(ages: usize, types: usize) -> Self {
        let sav = ages - 1;
        let n_sav = types * sav;
        let mut saver_in_full = Vec::with_capacity(n_sav);
        let mut saver_next_age = Vec::with_capacity(n_sav);
        for t in 0..types {
            for a in 0..sav {
                saver_in_full.push(t * ages + a);
                saver_next_age.push(t * ages + a + 1);
            }
        }
        let mut full_from_saver = Vec::with_capacity(types * ages);
        let mut shifted_from_saver = Vec::with_capacity(types * ages);
        for t in 0..types {
            for a in 0..ages {
                full_from_saver.push(if a < sav { t * sav + a } else { n_sav });
                shifted_from_saver.push(if a == 0 { n_sav } else { t * sav + a - 1 });
            }
        }
        Self {
            ages,
            types,
            saver_in_full,
            saver_next_age,
            full_from_saver,
            shifted_from_saver,
        }
    }

    pub fn n_full(&self) -> usize {
        self.ages * self.types
    }

    pub fn n_savers(&self) -> usize {
        self.types * (self.ages - 1)
    }

    /// Saver row padded to full width (oldest age gets zero).
    pub fn pad_tape(&self, t: &mut Tape<f64>, savers: Var) -> Var {
        let rows = t.shape(savers).0;
        let z = t.zeros(rows, 1);
        let ext = t.concat_cols(&[savers, z]);
        t.gather_cols(ext, &self.full_from_saver)
    }

    /// Next-period holdings: savers move up one age, newborns hold zero.
    pub fn shift_tape(&self, t: &mut Tape<f64>, savers: Var) -> Var {
        let rows = t.shape(savers).0;
        let z = t.zeros(rows, 1);
        let ext = t.concat_cols(&[savers, z]);
        t.gather_cols(ext, &self.shifted_from_saver)
    }

    pub fn shift(&self, savers: &Tensor<f64>) -> Tensor<f64> {
        Tensor::from_shape_fn((savers.nrows(), self.n_full()), |(r, c)| {
            let s = self.shifted_from_saver[c];
            if s == self.n_savers() {
                0.0
            } else {
                savers[[r, s]]
            }
        })
    }

    /// Per-full-column values from per-type values.
    pub fn full_row(&self, per_type: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_shape_fn((1, self.n_full()), |(_, c)| per_type(c / self.ages, c % self.ages))
    }

    pub fn saver_row(&self, per_type: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        let sav = self.ages - 1;
        Tensor::from_shape_fn((1, self.n_savers()), |(_, c)| per_type(c / sav, c % sav))
    }
}

/// Probability-weighted sum of `q` row blocks of `m` (`(q·n) × k → n × k`).
pub fn expect_blocks(t: &mut Tape<f64>, m: Var, weights: &[f64]) -> Var {
    let n = t.shape(m).0 / weights.len();
    let mut acc: Option<Var> = None;
    for (k, &w) in weights.iter().enumerate() {
        let blk = t.slice_rows(m, k * n, n);
        let term = t.scale(blk, w);
        acc = Some(match acc {
            None => term,
            Some(a) => t.add(a, term),
        });
    }
    acc.expect("at least one quadrature node")
}

/// Linear-interpolation percentile of sorted data, `q` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn fb_primitive() {
        assert_eq!(fischer_burmeister(3.0, 4.0), 2.0);
        assert_eq!(fischer_burmeister(0.7, 0.0), 0.0);
        assert_eq!(fischer_burmeister(0.0, 0.0), 0.0);
        let mut t = Tape::new();
        let x = t.constant(array![[3.0, 0.5]]);
        let y = t.constant(array![[4.0, 0.0]]);
        let r = fb_tape(&mut t, x, y);
        assert_eq!(t.value(r), &array![[2.0, 0.0]]);
    }

    #[test]
    fn log_utility_inverse() {
        let c = 1.7;
        let x = marginal_utility(c, 1.0);
        assert!((x - 1.0 / c).abs() < 1e-15);
        assert!((inverse_marginal_utility(x, 1.0) - c).abs() < 1e-14);
        assert!(inverse_marginal_utility(0.0, 3.0).is_finite());
    }

    #[test]
    fn default_profiles() {
        let y = default_income(20);
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(y[9] > y[0] && y[9] > y[19]);
        let psi = default_housing_weight(20);
        assert_eq!(psi[0], 0.05);
        assert!((psi[19] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn index_maps_round_trip() {
        let ix = AgentIndex::new(3, 2);
        assert_eq!(ix.saver_in_full, vec![0, 1, 3, 4]);
        assert_eq!(ix.saver_next_age, vec![1, 2, 4, 5]);
        let s = array![[1.0, 2.0, 3.0, 4.0]];
        assert_eq!(ix.shift(&s), array![[0.0, 1.0, 2.0, 0.0, 3.0, 4.0]]);
        let mut t = Tape::new();
        let v = t.constant(s.clone());
        let padded = ix.pad_tape(&mut t, v);
        assert_eq!(t.value(padded), &array![[1.0, 2.0, 0.0, 3.0, 4.0, 0.0]]);
        let shifted = ix.shift_tape(&mut t, v);
        assert_eq!(t.value(shifted), &ix.shift(&s));
    }

    #[test]
    fn guard_penalizes_only_below_floor() {
        let mut t = Tape::new();
        let c = t.constant(array![[0.5, -1.0]]);
        let (safe, pen) = guard_tape(&mut t, c);
        assert_eq!(t.value(safe), &array![[0.5, CONSUMPTION_FLOOR]]);
        assert_eq!(t.value(pen)[[0, 0]], 0.0);
        assert!((t.value(pen)[[0, 1]] - 10.0 * (1.0 + 1e-8f64).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn percentiles_interpolate() {
        let d = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile_sorted(&d, 0.0), 1.0);
        assert_eq!(percentile_sorted(&d, 50.0), 3.0);
        assert_eq!(percentile_sorted(&d, 90.0), 4.6);
        assert_eq!(percentile_sorted(&d, 100.0), 5.0);
    }
}
