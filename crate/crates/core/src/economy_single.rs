//! Single-asset overlapping-generations economy: one bond, rental housing.
//!
//! State row: `[z, b(type 1, ages 1..H), b(type 2, ...), ...]`. Network
//! output: bond demands of all savers, rent demands of all agents, then the
//! bond and rent prices. With one type of mass one this is the textbook
//! 21-in, 41-out layout at `H = 20`; extra preference types exist so the
//! multi-asset model can be checked against this one.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::clearing::{ClearingLayer, ClearingMode, Solver};
use crate::config::ValidationError;
use crate::household::{
    default_housing_weight, default_income, expect_blocks, fb_tape, guard_tape, inverse_marginal_utility,
    inverse_marginal_utility_tape, marginal_utility, marginal_utility_tape, AgentIndex, PreferenceType,
    CONSUMPTION_FLOOR, FLOOR_PENALTY,
};
use crate::model::{check_width, rel_gap, Economy, EconomyError, LossVars, ProfileBlock, ResidualBlock};
use crate::nn::{Activation, HeadSpec, MlpParams};
use crate::quadrature::{next_shocks, QuadratureRule};

/// Floor on `1 + b̃` in the liftoff term.
pub const LIFTOFF_DENOM_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleAssetConfig {
    pub ages: usize,
    pub beta: f64,
    /// Risk aversion of the single default type.
    pub gamma: f64,
    /// Overrides `gamma` with several preference types.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub types: Option<Vec<PreferenceType>>,
    /// Income shares `y^h`; hump-shaped default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub income: Option<Vec<f64>>,
    /// Housing-utility weights `ψ^h`; linear default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub housing_weight: Option<Vec<f64>>,
    pub housing_floor: f64,
    pub borrowing_limit: f64,
    pub bond_supply: f64,
    pub rental_supply: f64,
    pub bond_adjustment: f64,
    pub rho: f64,
    pub sigma: f64,
}

impl Default for SingleAssetConfig {
    fn default() -> Self {
        Self {
            ages: 20,
            beta: 0.867,
            gamma: 3.0,
            types: None,
            income: None,
            housing_weight: None,
            housing_floor: 5e-5,
            borrowing_limit: 0.0,
            bond_supply: 0.56,
            rental_supply: 1.0,
            bond_adjustment: 0.5,
            rho: 0.458,
            sigma: 0.043,
        }
    }
}

impl SingleAssetConfig {
    pub fn preference_types(&self) -> Vec<PreferenceType> {
        self.types.clone().unwrap_or_else(|| {
            vec![PreferenceType {
                mass: 1.0,
                gamma: self.gamma,
            }]
        })
    }

    pub fn income_profile(&self) -> Vec<f64> {
        self.income.clone().unwrap_or_else(|| default_income(self.ages))
    }

    pub fn housing_weights(&self) -> Vec<f64> {
        self.housing_weight
            .clone()
            .unwrap_or_else(|| default_housing_weight(self.ages))
    }

    pub fn input_dim(&self) -> usize {
        1 + self.preference_types().len() * self.ages
    }

    pub fn output_dim(&self) -> usize {
        let nt = self.preference_types().len();
        nt * (self.ages - 1) + nt * self.ages + 2
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let h = self.ages;
        if h < 2 {
            return Err(ValidationError::new("economy.ages", "need at least 2 age groups"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(ValidationError::new("economy.beta", "must lie in (0, 1)"));
        }
        let types = self.preference_types();
        if types.is_empty() {
            return Err(ValidationError::new("economy.types", "need at least one type"));
        }
        for (i, t) in types.iter().enumerate() {
            if !(t.gamma > 0.0) {
                return Err(ValidationError::new(format!("economy.types[{i}].gamma"), "must be positive"));
            }
            if !(t.mass > 0.0) {
                return Err(ValidationError::new(format!("economy.types[{i}].mass"), "must be positive"));
            }
        }
        for (name, v) in [("economy.income", &self.income), ("economy.housing_weight", &self.housing_weight)] {
            if let Some(v) = v {
                if v.len() != h {
                    return Err(ValidationError::new(
                        name,
                        format!("has {} entries, expected {h} (one per age)", v.len()),
                    ));
                }
                if v.iter().any(|x| !(*x >= 0.0)) {
                    return Err(ValidationError::new(name, "entries must be nonnegative"));
                }
            }
        }
        if !(self.bond_adjustment >= 0.0) {
            return Err(ValidationError::new("economy.bond_adjustment", "must be nonnegative"));
        }
        if !(self.sigma >= 0.0) {
            return Err(ValidationError::new("economy.sigma", "must be nonnegative"));
        }
        if !(self.housing_floor >= 0.0) {
            return Err(ValidationError::new("economy.housing_floor", "must be nonnegative"));
        }
        let saver_mass: f64 = types.iter().map(|t| t.mass).sum::<f64>() * (h - 1) as f64;
        if self.borrowing_limit * saver_mass > self.bond_supply {
            return Err(ValidationError::new(
                "economy.borrowing_limit",
                format!(
                    "bound mass {} exceeds bond supply {}",
                    self.borrowing_limit * saver_mass,
                    self.bond_supply
                ),
            ));
        }
        Ok(())
    }
}

/// Policies and prices the network (plus clearing layers) picks.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleDecoded {
    /// Pre-clearing bond demands, `n × savers`.
    pub bond_tilde: Tensor<f64>,
    /// Cleared bond holdings carried into next period, `n × savers`.
    pub bond: Tensor<f64>,
    /// Cleared rent demands, `n × agents`.
    pub rent: Tensor<f64>,
    pub bond_price: Vec<f64>,
    pub rent_price: Vec<f64>,
}

struct Period {
    bond_tilde: Var,
    bond: Var,
    bond_full: Var,
    rent: Var,
    pb: Var,
    pr: Var,
    holdings: Var,
    c_safe: Var,
    penalty: Var,
}

#[derive(Debug, Clone)]
pub struct SingleAssetEconomy {
    pub cfg: SingleAssetConfig,
    pub mode: ClearingMode,
    pub policy_activation: Activation,
    pub rule: QuadratureRule<f64>,
    ix: AgentIndex,
    types: Vec<PreferenceType>,
    bond_layer: ClearingLayer<f64>,
    rent_layer: ClearingLayer<f64>,
    income_row: Tensor<f64>,
    psi_row: Tensor<f64>,
    saver_mask: Tensor<f64>,
    neg_gamma_full: Tensor<f64>,
    neg_inv_gamma_full: Tensor<f64>,
    neg_gamma_sav: Tensor<f64>,
    neg_inv_gamma_sav: Tensor<f64>,
}

impl SingleAssetEconomy {
    pub fn new(
        cfg: SingleAssetConfig,
        mode: ClearingMode,
        solver: Solver,
        rule: QuadratureRule<f64>,
    ) -> Result<Self, ValidationError> {
        cfg.validate()?;
        let types = cfg.preference_types();
        let h = cfg.ages;
        let ix = AgentIndex::new(h, types.len());
        let mu_sav = ix.saver_row(|t, _| types[t].mass).into_raw_vec_and_offset().0;
        let mu_full = ix.full_row(|t, _| types[t].mass).into_raw_vec_and_offset().0;
        let clearing_err = |field: &str, e: crate::clearing::ClearingError| ValidationError::new(field, e.to_string());
        let bond_layer = match mode {
            ClearingMode::Simple => ClearingLayer::simple("bond_clearing", mu_sav.clone(), cfg.bond_supply),
            ClearingMode::Solver => ClearingLayer::bounded(
                "bond_clearing",
                mu_sav.clone(),
                cfg.bond_supply,
                vec![cfg.borrowing_limit; mu_sav.len()],
                solver,
            ),
        }
        .map_err(|e| clearing_err("economy.bond_supply", e))?;
        let rent_layer = ClearingLayer::simple("rent_clearing", mu_full, cfg.rental_supply)
            .map_err(|e| clearing_err("economy.rental_supply", e))?;
        let y = cfg.income_profile();
        let psi = cfg.housing_weights();
        Ok(Self {
            income_row: ix.full_row(|_, a| y[a]),
            psi_row: ix.full_row(|_, a| psi[a]),
            saver_mask: ix.full_row(|_, a| if a + 1 < h { 1.0 } else { 0.0 }),
            neg_gamma_full: ix.full_row(|t, _| -types[t].gamma),
            neg_inv_gamma_full: ix.full_row(|t, _| -1.0 / types[t].gamma),
            neg_gamma_sav: ix.saver_row(|t, _| -types[t].gamma),
            neg_inv_gamma_sav: ix.saver_row(|t, _| -1.0 / types[t].gamma),
            cfg,
            mode,
            policy_activation: Activation::Identity,
            rule,
            ix,
            types,
            bond_layer,
            rent_layer,
        })
    }

    pub fn with_policy_activation(mut self, act: Activation) -> Self {
        self.policy_activation = act;
        self
    }

    pub fn agent_index(&self) -> &AgentIndex {
        &self.ix
    }

    pub fn types(&self) -> &[PreferenceType] {
        &self.types
    }

    fn n_savers(&self) -> usize {
        self.ix.n_savers()
    }

    fn n_agents(&self) -> usize {
        self.ix.n_full()
    }

    fn period(&self, t: &mut Tape<f64>, net: &MlpParams<f64>, params: &[Var], x: Var) -> Result<Period, EconomyError> {
        let (s, f) = (self.n_savers(), self.n_agents());
        let raw = net.forward_tape(t, x, params)?;
        let bond_tilde = t.slice_cols(raw, 0, s);
        let rent_tilde = t.slice_cols(raw, s, f);
        let pb = t.slice_cols(raw, s + f, 1);
        let pr = t.slice_cols(raw, s + f + 1, 1);
        let bond = t.apply(&self.bond_layer, &[bond_tilde])?;
        let rent = t.apply(&self.rent_layer, &[rent_tilde])?;
        let bond_full = self.ix.pad_tape(t, bond);
        let z = t.slice_cols(x, 0, 1);
        let holdings = t.slice_cols(x, 1, f);

        let y = t.constant(self.income_row.clone());
        let labor = t.mul(z, y);
        let inflow = t.add(labor, holdings);
        let spend_b = t.mul(pb, bond_full);
        let d = t.sub(bond_full, holdings);
        let d2 = t.square(d);
        let mask = t.constant(self.saver_mask.clone());
        let d2 = t.mul(d2, mask);
        let cost = t.mul(pb, d2);
        let cost = t.scale(cost, 0.5 * self.cfg.bond_adjustment);
        let spend_r = t.mul(pr, rent);
        let c = t.sub(inflow, spend_b);
        let c = t.sub(c, cost);
        let c = t.sub(c, spend_r);
        let (c_safe, penalty) = guard_tape(t, c);
        Ok(Period {
            bond_tilde,
            bond,
            bond_full,
            rent,
            pb,
            pr,
            holdings,
            c_safe,
            penalty,
        })
    }

    fn next_state_input(&self, t: &mut Tape<f64>, states: &Tensor<f64>, bond: Var) -> Var {
        let n = states.nrows();
        let q = self.rule.order;
        let mut zn = Tensor::zeros((q * n, 1));
        for r in 0..n {
            let shocks = next_shocks(states[[r, 0]], &self.rule, self.cfg.rho, self.cfg.sigma);
            for (k, zk) in shocks.into_iter().enumerate() {
                zn[[k * n + r, 0]] = zk;
            }
        }
        let hold = self.ix.shift_tape(t, bond);
        let reps = vec![hold; q];
        let hold = t.concat_rows(&reps);
        let zn = t.constant(zn);
        t.concat_cols(&[zn, hold])
    }

    /// Per-state loss ingredients on the tape.
    pub fn loss_tape(
        &self,
        t: &mut Tape<f64>,
        net: &MlpParams<f64>,
        params: &[Var],
        states: &Tensor<f64>,
    ) -> Result<LossVars, EconomyError> {
        check_width(states, self.cfg.input_dim())?;
        let n = states.nrows();
        let (s, f) = (self.n_savers(), self.n_agents());
        let q = self.rule.order;
        let zeta = self.cfg.bond_adjustment;
        let x = t.constant(states.clone());
        let cur = self.period(t, net, params, x)?;
        let xn = self.next_state_input(t, states, cur.bond);
        let nxt = self.period(t, net, params, xn)?;

        // Bond Euler residual.
        let c_next = t.gather_cols(nxt.c_safe, &self.ix.saver_next_age);
        let neg_g = t.constant(self.neg_gamma_sav.clone());
        let mu_next = marginal_utility_tape(t, c_next, neg_g);
        let b2 = t.gather_cols(nxt.bond_full, &self.ix.saver_next_age);
        let b1 = t.concat_rows(&vec![cur.bond; q]);
        let db = t.sub(b2, b1);
        let pay = t.mul(nxt.pb, db);
        let pay = t.scale(pay, zeta);
        let pay = t.add_scalar(pay, 1.0);
        let m = t.mul(mu_next, pay);
        let expect = expect_blocks(t, m, &self.rule.weights);
        let hold_sav = t.gather_cols(cur.holdings, &self.ix.saver_in_full);
        let d = t.sub(cur.bond, hold_sav);
        let d = t.scale(d, zeta);
        let d = t.add_scalar(d, 1.0);
        let denom = t.mul(cur.pb, d);
        let arg = t.div(expect, denom);
        let arg = t.scale(arg, self.cfg.beta);
        let neg_ig = t.constant(self.neg_inv_gamma_sav.clone());
        let inv = inverse_marginal_utility_tape(t, arg, neg_ig);
        let c_sav = t.gather_cols(cur.c_safe, &self.ix.saver_in_full);
        let ratio = t.div(inv, c_sav);
        let gap = t.add_scalar(ratio, -1.0);
        let slack = t.add_scalar(cur.bond, -self.cfg.borrowing_limit);
        let slack = t.div(slack, c_sav);
        let bond_residual = fb_tape(t, gap, slack);

        // Rent first-order condition.
        let (rent_residual, hpen) = self.rent_residual(t, cur.rent, cur.pr, cur.c_safe);

        let sq = t.square(bond_residual);
        let lb = t.sum(sq);
        let lb = t.scale(lb, 1.0 / (n * s) as f64);
        let sq = t.square(rent_residual);
        let lr = t.sum(sq);
        let lr = t.scale(lr, 1.0 / (n * f) as f64);
        let mut loss = t.add(lb, lr);
        let pen = t.add(cur.penalty, hpen);
        let pen = t.sum(pen);
        let pen = t.scale(pen, 1.0 / n as f64);
        loss = t.add(loss, pen);
        if self.mode == ClearingMode::Solver {
            let lift = liftoff_tape(t, cur.bond_tilde, cur.bond, self.cfg.borrowing_limit, ratio);
            let sq = t.square(lift);
            let ll = t.sum(sq);
            let ll = t.scale(ll, 1.0 / (n * s) as f64);
            loss = t.add(loss, ll);
        }
        Ok(LossVars {
            loss,
            bond_residual,
            rent_residual,
        })
    }

    /// `(u')^{-1}(ψ v'(h)/p_r)/c - 1` and the floor penalty on `h̲ + h`.
    fn rent_residual(&self, t: &mut Tape<f64>, rent: Var, pr: Var, c_safe: Var) -> (Var, Var) {
        let h = t.add_scalar(rent, self.cfg.housing_floor);
        let (h_safe, hpen) = guard_tape(t, h);
        let neg_g = t.constant(self.neg_gamma_full.clone());
        let vprime = marginal_utility_tape(t, h_safe, neg_g);
        let psi = t.constant(self.psi_row.clone());
        let num = t.mul(psi, vprime);
        let arg = t.div(num, pr);
        let neg_ig = t.constant(self.neg_inv_gamma_full.clone());
        let inv = inverse_marginal_utility_tape(t, arg, neg_ig);
        let ratio = t.div(inv, c_safe);
        (t.add_scalar(ratio, -1.0), hpen)
    }

    /// Runs the network (no gradients) and decodes the outputs.
    pub fn decode(&self, net: &MlpParams<f64>, states: &Tensor<f64>) -> Result<SingleDecoded, EconomyError> {
        check_width(states, self.cfg.input_dim())?;
        let mut t = Tape::new();
        let params = net.bind_frozen(&mut t);
        let x = t.constant(states.clone());
        let p = self.period(&mut t, net, &params, x)?;
        Ok(SingleDecoded {
            bond_tilde: t.value(p.bond_tilde).clone(),
            bond: t.value(p.bond).clone(),
            rent: t.value(p.rent).clone(),
            bond_price: t.value(p.pb).column(0).to_vec(),
            rent_price: t.value(p.pr).column(0).to_vec(),
        })
    }

    /// Budget-constraint consumption of every agent in each state.
    pub fn consumption(&self, states: &Tensor<f64>, d: &SingleDecoded) -> Tensor<f64> {
        let f = self.n_agents();
        let zeta = self.cfg.bond_adjustment;
        let y = self.cfg.income_profile();
        Tensor::from_shape_fn((states.nrows(), f), |(r, col)| {
            let a = col % self.cfg.ages;
            let sv = self.ix.full_from_saver[col];
            let b_next = if sv < self.n_savers() { d.bond[[r, sv]] } else { 0.0 };
            consumption(
                states[[r, 0]],
                y[a],
                states[[r, 1 + col]],
                (sv < self.n_savers()).then_some(b_next),
                d.rent[[r, col]],
                d.bond_price[r],
                d.rent_price[r],
                zeta,
            )
        })
    }

    /// `Σ μ c` minus its closed form implied by both clearing identities.
    pub fn walras_gap(&self, states: &Tensor<f64>, d: &SingleDecoded) -> Vec<f64> {
        let c = self.consumption(states, d);
        let f = self.n_agents();
        let y = self.cfg.income_profile();
        let zeta = self.cfg.bond_adjustment;
        (0..states.nrows())
            .map(|r| {
                let z = states[[r, 0]];
                let (pb, pr) = (d.bond_price[r], d.rent_price[r]);
                let mut lhs = 0.0;
                let mut rhs = -pb * self.cfg.bond_supply - pr * self.cfg.rental_supply;
                for col in 0..f {
                    let mu = self.types[col / self.cfg.ages].mass;
                    let a = col % self.cfg.ages;
                    let b = states[[r, 1 + col]];
                    lhs += mu * c[[r, col]];
                    rhs += mu * (z * y[a] + b);
                    let sv = self.ix.full_from_saver[col];
                    if sv < self.n_savers() {
                        let db = d.bond[[r, sv]] - b;
                        rhs -= mu * pb * zeta * 0.5 * db * db;
                    }
                }
                lhs - rhs
            })
            .collect()
    }
}

/// Liftoff term `1/(1+b̃)·exp(-(b-lb)²/1e-5)·max(1-ratio, 0)` on the tape,
/// with `1 + b̃` floored at [`LIFTOFF_DENOM_FLOOR`].
pub(crate) fn liftoff_tape(t: &mut Tape<f64>, b_tilde: Var, b: Var, lb: f64, ratio: Var) -> Var {
    let den = t.add_scalar(b_tilde, 1.0);
    let den = t.max_scalar(den, LIFTOFF_DENOM_FLOOR);
    let gap = t.add_scalar(b, -lb);
    let g2 = t.square(gap);
    let g2 = t.scale(g2, -1.0 / crate::clearing::LIFTOFF_SHARPNESS);
    let bump = t.exp(g2);
    let neg = t.neg(ratio);
    let short = t.add_scalar(neg, 1.0);
    let short = t.relu(short);
    let num = t.mul(bump, short);
    t.div(num, den)
}

/// Budget identity of one agent. `b_next` is `None` for the oldest age,
/// which neither saves nor pays adjustment costs.
#[allow(clippy::too_many_arguments)]
pub fn consumption(
    z: f64,
    y: f64,
    b: f64,
    b_next: Option<f64>,
    h_rent: f64,
    pb: f64,
    pr: f64,
    zeta: f64,
) -> f64 {
    let mut c = z * y + b - pr * h_rent;
    if let Some(bn) = b_next {
        c -= pb * bn + pb * zeta * 0.5 * (bn - b) * (bn - b);
    }
    c
}

/// Bond FB residual for one agent from explicit next-period quantities at
/// each quadrature node.
#[allow(clippy::too_many_arguments)]
pub fn fb_residual_bond(
    c: f64,
    c_next: &[f64],
    b_prev: f64,
    b_now: f64,
    b_next: &[f64],
    pb: f64,
    pb_next: &[f64],
    weights: &[f64],
    beta: f64,
    gamma: f64,
    zeta: f64,
    lb: f64,
) -> f64 {
    let c = c.max(CONSUMPTION_FLOOR);
    let e: f64 = (0..weights.len())
        .map(|k| weights[k] * marginal_utility(c_next[k], gamma) * (1.0 + pb_next[k] * zeta * (b_next[k] - b_now)))
        .sum();
    let ratio = inverse_marginal_utility(beta * e / (pb * (1.0 + zeta * (b_now - b_prev))), gamma) / c;
    crate::household::fischer_burmeister(ratio - 1.0, (b_now - lb) / c)
}

/// Rent residual `(u')^{-1}(ψ v'(h)/p_r)/c - 1`, `v'(h) = (h̲ + h)^{-γ}`.
pub fn fb_residual_rent(c: f64, h_rent: f64, pr: f64, psi: f64, gamma: f64, h_floor: f64) -> f64 {
    let v = (h_floor + h_rent).max(CONSUMPTION_FLOOR).powf(-gamma);
    inverse_marginal_utility(psi * v / pr, gamma) / c.max(CONSUMPTION_FLOOR) - 1.0
}

/// Next-period state: newborns hold nothing, savers age by one.
pub fn transition(ix: &AgentIndex, bond: &Tensor<f64>, z_next: &[f64]) -> Tensor<f64> {
    let hold = ix.shift(bond);
    let mut out = Tensor::zeros((bond.nrows(), 1 + ix.n_full()));
    for r in 0..bond.nrows() {
        out[[r, 0]] = z_next[r];
        for c in 0..ix.n_full() {
            out[[r, 1 + c]] = hold[[r, c]];
        }
    }
    out
}

impl Economy for SingleAssetEconomy {
    fn input_dim(&self) -> usize {
        self.cfg.input_dim()
    }

    fn heads(&self) -> Vec<HeadSpec> {
        vec![
            HeadSpec::new("bond", self.n_savers(), self.policy_activation),
            HeadSpec::new("rent", self.n_agents(), self.policy_activation),
            HeadSpec::new("prices", 2, Activation::Softplus),
        ]
    }

    fn shock_process(&self) -> (f64, f64) {
        (self.cfg.rho, self.cfg.sigma)
    }

    fn initial_states(&self, n: usize) -> Tensor<f64> {
        let mass: f64 = self.types.iter().map(|t| t.mass).sum();
        let per = self.cfg.bond_supply / (mass * (self.cfg.ages - 1) as f64);
        Tensor::from_shape_fn((n, self.cfg.input_dim()), |(_, c)| {
            if c == 0 {
                1.0
            } else if (c - 1) % self.cfg.ages == 0 {
                0.0
            } else {
                per
            }
        })
    }

    fn loss(
        &self,
        tape: &mut Tape<f64>,
        net: &MlpParams<f64>,
        params: &[Var],
        states: &Tensor<f64>,
    ) -> Result<LossVars, EconomyError> {
        self.loss_tape(tape, net, params, states)
    }

    fn advance(&self, net: &MlpParams<f64>, states: &Tensor<f64>, z_next: &[f64]) -> Result<Tensor<f64>, EconomyError> {
        if z_next.len() != states.nrows() {
            return Err(EconomyError::Length {
                what: "z_next",
                got: z_next.len(),
                expected: states.nrows(),
            });
        }
        let d = self.decode(net, states)?;
        Ok(transition(&self.ix, &d.bond, z_next))
    }

    fn residuals(&self, net: &MlpParams<f64>, states: &Tensor<f64>) -> Result<Vec<ResidualBlock>, EconomyError> {
        let mut t = Tape::new();
        let params = net.bind_frozen(&mut t);
        let lv = self.loss_tape(&mut t, net, &params, states)?;
        let (bond, rent) = (t.value(lv.bond_residual), t.value(lv.rent_residual));
        let (h, sav) = (self.cfg.ages, self.cfg.ages - 1);
        let mut out = Vec::new();
        for ty in 0..self.types.len() {
            out.push(ResidualBlock {
                family: "bond",
                type_index: ty,
                ages: (1..h).collect(),
                values: bond.slice(ndarray::s![.., ty * sav..(ty + 1) * sav]).to_owned(),
            });
        }
        for ty in 0..self.types.len() {
            out.push(ResidualBlock {
                family: "rent",
                type_index: ty,
                ages: (1..=h).collect(),
                values: rent.slice(ndarray::s![.., ty * h..(ty + 1) * h]).to_owned(),
            });
        }
        Ok(out)
    }

    fn profiles(&self, net: &MlpParams<f64>, states: &Tensor<f64>) -> Result<Vec<ProfileBlock>, EconomyError> {
        let d = self.decode(net, states)?;
        let c = self.consumption(states, &d);
        let h = self.cfg.ages;
        let n = states.nrows();
        let mut out = Vec::new();
        for ty in 0..self.types.len() {
            let bond = Tensor::from_shape_fn((n, h), |(r, a)| {
                let sv = self.ix.full_from_saver[ty * h + a];
                if sv < self.n_savers() {
                    d.bond[[r, sv]]
                } else {
                    0.0
                }
            });
            out.push(ProfileBlock {
                variable: "bond",
                type_index: ty,
                values: bond,
            });
            out.push(ProfileBlock {
                variable: "rent",
                type_index: ty,
                values: d.rent.slice(ndarray::s![.., ty * h..(ty + 1) * h]).to_owned(),
            });
            out.push(ProfileBlock {
                variable: "consumption",
                type_index: ty,
                values: c.slice(ndarray::s![.., ty * h..(ty + 1) * h]).to_owned(),
            });
        }
        Ok(out)
    }

    fn clearing_gap(&self, net: &MlpParams<f64>, states: &Tensor<f64>) -> Result<f64, EconomyError> {
        let d = self.decode(net, states)?;
        let mut worst: f64 = 0.0;
        for r in 0..states.nrows() {
            let held: f64 = (0..self.n_agents())
                .map(|c| self.types[c / self.cfg.ages].mass * states[[r, 1 + c]])
                .sum();
            let bought: f64 = (0..self.n_savers())
                .map(|c| self.bond_layer.mu()[c] * d.bond[[r, c]])
                .sum();
            let rented: f64 = (0..self.n_agents())
                .map(|c| self.types[c / self.cfg.ages].mass * d.rent[[r, c]])
                .sum();
            worst = worst
                .max(rel_gap(held, self.cfg.bond_supply))
                .max(rel_gap(bought, self.cfg.bond_supply))
                .max(rel_gap(rented, self.cfg.rental_supply));
        }
        Ok(worst)
    }
}

/// Consumption-floor penalty of one agent, exposed for tests.
pub fn floor_penalty(c: f64) -> f64 {
    FLOOR_PENALTY * (CONSUMPTION_FLOOR - c).max(0.0).powi(2)
}
