//! Three-asset economy (bond, stock, owned housing) with several
//! risk-aversion types.
//!
//! State row: `[z, b, s, ho, aux]`, each block `n_types·H` wide and
//! type-major, where `aux = s·d·z` is dividend income. Network output:
//! `b̃, s̃, h̃o` (savers each), `h̃r` (all agents), then `p_b, p_s, p_o, p_r`.
//! Masks scale the raw asset demands before clearing.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::clearing::{ClearingLayer, ClearingMode, Solver};
use crate::config::ValidationError;
use crate::economy_single::liftoff_tape;
use crate::household::{
    default_housing_weight, default_income, expect_blocks, fb_tape, guard_tape, inverse_marginal_utility_tape,
    marginal_utility_tape, AgentIndex, PreferenceType,
};
use crate::model::{check_width, rel_gap, Economy, EconomyError, LossVars, ProfileBlock, ResidualBlock};
use crate::nn::{Activation, HeadSpec, MlpParams};
use crate::quadrature::{next_shocks, QuadratureRule};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub bond: f64,
    pub stock: f64,
    pub housing: f64,
    pub rent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Masks {
    pub bond: f64,
    pub stock: f64,
    pub housing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Supplies {
    pub bond: f64,
    pub stock: f64,
    pub housing_owned: f64,
    pub housing_external: f64,
}

impl Supplies {
    pub fn rental(&self) -> f64 {
        self.housing_owned + self.housing_external
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetTriple {
    pub bond: f64,
    pub stock: f64,
    pub housing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiAssetConfig {
    pub ages: usize,
    pub beta: f64,
    pub types: Vec<PreferenceType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub income: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub housing_weight: Option<Vec<f64>>,
    pub housing_floor: f64,
    pub dividend_share: f64,
    pub rho: f64,
    pub sigma: f64,
    /// Quadratic adjustment-cost parameters `ζ`.
    pub adjustment: AssetTriple,
    /// Short-sale limits.
    pub lower_bounds: AssetTriple,
    pub supplies: Supplies,
    pub masks: Masks,
    pub weights: LossWeights,
}

impl Default for MultiAssetConfig {
    fn default() -> Self {
        Self {
            ages: 20,
            beta: 0.867,
            types: vec![
                PreferenceType { mass: 0.5, gamma: 1.0 },
                PreferenceType { mass: 0.5, gamma: 2.0 },
            ],
            income: None,
            housing_weight: None,
            housing_floor: 5e-5,
            dividend_share: 0.3,
            rho: 0.458,
            sigma: 0.043,
            adjustment: AssetTriple {
                bond: 0.25,
                stock: 1.0,
                housing: 4.0,
            },
            lower_bounds: AssetTriple {
                bond: 0.0,
                stock: 0.0,
                housing: 0.0,
            },
            supplies: Supplies {
                bond: 0.56,
                stock: 1.0,
                housing_owned: 1.0,
                housing_external: 0.0,
            },
            masks: Masks {
                bond: 1.0,
                stock: 1.0,
                housing: 1.0,
            },
            weights: LossWeights {
                bond: 1.0,
                stock: 1.0,
                housing: 1.0,
                rent: 1.0,
            },
        }
    }
}

impl MultiAssetConfig {
    pub fn n_types(&self) -> usize {
        self.types.len()
    }

    pub fn input_dim(&self) -> usize {
        1 + 4 * self.n_types() * self.ages
    }

    pub fn output_dim(&self) -> usize {
        let nt = self.n_types();
        3 * nt * (self.ages - 1) + nt * self.ages + 4
    }

    pub fn income_profile(&self) -> Vec<f64> {
        self.income.clone().unwrap_or_else(|| default_income(self.ages))
    }

    pub fn housing_weights(&self) -> Vec<f64> {
        self.housing_weight
            .clone()
            .unwrap_or_else(|| default_housing_weight(self.ages))
    }

    fn saver_mass(&self) -> f64 {
        self.types.iter().map(|t| t.mass).sum::<f64>() * (self.ages - 1) as f64
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let h = self.ages;
        if h < 2 {
            return Err(ValidationError::new("economy.ages", "need at least 2 age groups"));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(ValidationError::new("economy.beta", "must lie in (0, 1)"));
        }
        if self.types.is_empty() {
            return Err(ValidationError::new("economy.types", "need at least one type"));
        }
        for (i, t) in self.types.iter().enumerate() {
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
        let nonneg = [
            ("economy.adjustment.bond", self.adjustment.bond),
            ("economy.adjustment.stock", self.adjustment.stock),
            ("economy.adjustment.housing", self.adjustment.housing),
            ("economy.supplies.stock", self.supplies.stock),
            ("economy.supplies.housing_owned", self.supplies.housing_owned),
            ("economy.supplies.housing_external", self.supplies.housing_external),
            ("economy.weights.bond", self.weights.bond),
            ("economy.weights.stock", self.weights.stock),
            ("economy.weights.housing", self.weights.housing),
            ("economy.weights.rent", self.weights.rent),
            ("economy.sigma", self.sigma),
            ("economy.dividend_share", self.dividend_share),
            ("economy.housing_floor", self.housing_floor),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(ValidationError::new(name, "must be nonnegative"));
            }
        }
        for (name, m) in [
            ("economy.masks.bond", self.masks.bond),
            ("economy.masks.stock", self.masks.stock),
            ("economy.masks.housing", self.masks.housing),
        ] {
            if !(0.0..=1.0).contains(&m) {
                return Err(ValidationError::new(name, "must lie in [0, 1]"));
            }
        }
        let mass = self.saver_mass();
        for (name, lb, supply) in [
            ("economy.lower_bounds.bond", self.lower_bounds.bond, self.supplies.bond),
            ("economy.lower_bounds.stock", self.lower_bounds.stock, self.supplies.stock),
            ("economy.lower_bounds.housing", self.lower_bounds.housing, self.supplies.housing_owned),
        ] {
            if lb * mass > supply {
                return Err(ValidationError::new(
                    name,
                    format!("bound mass {} exceeds supply {supply}", lb * mass),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDecoded {
    pub bond: Tensor<f64>,
    pub stock: Tensor<f64>,
    pub housing: Tensor<f64>,
    pub rent: Tensor<f64>,
    /// `[p_b, p_s, p_o, p_r]` per state.
    pub prices: Vec<[f64; 4]>,
}

#[derive(Clone, Copy)]
struct Asset {
    tilde: Var,
    cleared: Var,
    full: Var,
    held: Var,
}

struct Period {
    assets: [Asset; 3],
    rent: Var,
    /// `p_b, p_s, p_o, p_r`, each `n × 1`.
    prices: [Var; 4],
    c_safe: Var,
    penalty: Var,
}

#[derive(Debug, Clone)]
pub struct MultiAssetEconomy {
    pub cfg: MultiAssetConfig,
    pub mode: ClearingMode,
    pub policy_activation: Activation,
    pub rule: QuadratureRule<f64>,
    ix: AgentIndex,
    layers: [ClearingLayer<f64>; 3],
    rent_layer: ClearingLayer<f64>,
    income_row: Tensor<f64>,
    psi_row: Tensor<f64>,
    saver_mask: Tensor<f64>,
    neg_gamma_full: Tensor<f64>,
    neg_inv_gamma_full: Tensor<f64>,
    neg_gamma_sav: Tensor<f64>,
    neg_inv_gamma_sav: Tensor<f64>,
}

const ASSETS: [&str; 3] = ["bond", "stock", "housing"];

impl MultiAssetEconomy {
    pub fn new(
        cfg: MultiAssetConfig,
        mode: ClearingMode,
        solver: Solver,
        rule: QuadratureRule<f64>,
    ) -> Result<Self, ValidationError> {
        cfg.validate()?;
        let h = cfg.ages;
        let types = cfg.types.clone();
        let ix = AgentIndex::new(h, types.len());
        let mu_sav = ix.saver_row(|t, _| types[t].mass).into_raw_vec_and_offset().0;
        let mu_full = ix.full_row(|t, _| types[t].mass).into_raw_vec_and_offset().0;
        let supplies = [cfg.supplies.bond, cfg.supplies.stock, cfg.supplies.housing_owned];
        let bounds = [cfg.lower_bounds.bond, cfg.lower_bounds.stock, cfg.lower_bounds.housing];
        let mk = |k: usize| {
            let name = format!("{}_clearing", ASSETS[k]);
            match mode {
                ClearingMode::Simple => ClearingLayer::simple(name, mu_sav.clone(), supplies[k]),
                ClearingMode::Solver => {
                    ClearingLayer::bounded(name, mu_sav.clone(), supplies[k], vec![bounds[k]; mu_sav.len()], solver)
                }
            }
            .map_err(|e| ValidationError::new(format!("economy.supplies.{}", ASSETS[k]), e.to_string()))
        };
        let layers = [mk(0)?, mk(1)?, mk(2)?];
        let rent_layer = ClearingLayer::simple("rent_clearing", mu_full, cfg.supplies.rental())
            .map_err(|e| ValidationError::new("economy.supplies.housing_external", e.to_string()))?;
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
            layers,
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

    fn block(&self) -> usize {
        self.ix.n_full()
    }

    fn masks(&self) -> [f64; 3] {
        [self.cfg.masks.bond, self.cfg.masks.stock, self.cfg.masks.housing]
    }

    fn zetas(&self) -> [f64; 3] {
        let a = self.cfg.adjustment;
        [a.bond, a.stock, a.housing]
    }

    fn bounds(&self) -> [f64; 3] {
        let b = self.cfg.lower_bounds;
        [b.bond, b.stock, b.housing]
    }

    fn weights(&self) -> [f64; 3] {
        let w = self.cfg.weights;
        [w.bond, w.stock, w.housing]
    }

    fn period(&self, t: &mut Tape<f64>, net: &MlpParams<f64>, params: &[Var], x: Var) -> Result<Period, EconomyError> {
        let (s, f) = (self.ix.n_savers(), self.block());
        let raw = net.forward_tape(t, x, params)?;
        let masks = self.masks();
        let mut assets = Vec::with_capacity(3);
        for k in 0..3 {
            let raw_k = t.slice_cols(raw, k * s, s);
            let tilde = t.scale(raw_k, masks[k]);
            let cleared = t.apply(&self.layers[k], &[tilde])?;
            let full = self.ix.pad_tape(t, cleared);
            let held = t.slice_cols(x, 1 + k * f, f);
            assets.push(Asset {
                tilde,
                cleared,
                full,
                held,
            });
        }
        let assets: [Asset; 3] = [assets[0], assets[1], assets[2]];
        let rent_tilde = t.slice_cols(raw, 3 * s, f);
        let rent = t.apply(&self.rent_layer, &[rent_tilde])?;
        let off = 3 * s + f;
        let prices = [
            t.slice_cols(raw, off, 1),
            t.slice_cols(raw, off + 1, 1),
            t.slice_cols(raw, off + 2, 1),
            t.slice_cols(raw, off + 3, 1),
        ];
        let [pb, ps, po, pr] = prices;
        let z = t.slice_cols(x, 0, 1);

        // Resources: labor income, maturing bonds, stock value plus dividend,
        // housing value plus rent.
        let y = t.constant(self.income_row.clone());
        let mut c = t.mul(z, y);
        c = t.add(c, assets[0].held);
        let dz = t.scale(z, self.cfg.dividend_share);
        let stock_val = t.add(ps, dz);
        let v = t.mul(assets[1].held, stock_val);
        c = t.add(c, v);
        let house_val = t.add(po, pr);
        let v = t.mul(assets[2].held, house_val);
        c = t.add(c, v);
        let mask = t.constant(self.saver_mask.clone());
        let zetas = self.zetas();
        for (k, &p) in [pb, ps, po].iter().enumerate() {
            let buy = t.mul(p, assets[k].full);
            c = t.sub(c, buy);
            if zetas[k] != 0.0 {
                let d = t.sub(assets[k].full, assets[k].held);
                let d2 = t.square(d);
                let d2 = t.mul(d2, mask);
                let cost = t.mul(p, d2);
                let cost = t.scale(cost, 0.5 * zetas[k]);
                c = t.sub(c, cost);
            }
        }
        let spend_r = t.mul(pr, rent);
        c = t.sub(c, spend_r);
        let (c_safe, penalty) = guard_tape(t, c);
        Ok(Period {
            assets,
            rent,
            prices,
            c_safe,
            penalty,
        })
    }

    fn next_state_input(&self, t: &mut Tape<f64>, states: &Tensor<f64>, cur: &Period) -> (Var, Var) {
        let n = states.nrows();
        let q = self.rule.order;
        let mut zn = Tensor::zeros((q * n, 1));
        for r in 0..n {
            let shocks = next_shocks(states[[r, 0]], &self.rule, self.cfg.rho, self.cfg.sigma);
            for (k, zk) in shocks.into_iter().enumerate() {
                zn[[k * n + r, 0]] = zk;
            }
        }
        let zn = t.constant(zn);
        let mut blocks = vec![zn];
        let mut shifted = Vec::with_capacity(3);
        for a in &cur.assets {
            let h = self.ix.shift_tape(t, a.cleared);
            let h = t.concat_rows(&vec![h; q]);
            shifted.push(h);
        }
        blocks.extend(&shifted);
        let dz = t.scale(zn, self.cfg.dividend_share);
        let aux = t.mul(shifted[1], dz);
        blocks.push(aux);
        (t.concat_cols(&blocks), zn)
    }

    /// Loss and residuals. Zero-weight families are skipped unless
    /// `all_families` is set.
    pub fn loss_tape_with(
        &self,
        t: &mut Tape<f64>,
        net: &MlpParams<f64>,
        params: &[Var],
        states: &Tensor<f64>,
        all_families: bool,
    ) -> Result<(LossVars, [Option<Var>; 3]), EconomyError> {
        check_width(states, self.cfg.input_dim())?;
        let n = states.nrows();
        let q = self.rule.order;
        let x = t.constant(states.clone());
        let cur = self.period(t, net, params, x)?;
        let (xn, zn) = self.next_state_input(t, states, &cur);
        let nxt = self.period(t, net, params, xn)?;

        let c_next = t.gather_cols(nxt.c_safe, &self.ix.saver_next_age);
        let neg_g = t.constant(self.neg_gamma_sav.clone());
        let mu_next = marginal_utility_tape(t, c_next, neg_g);
        let c_sav = t.gather_cols(cur.c_safe, &self.ix.saver_in_full);
        let neg_ig = t.constant(self.neg_inv_gamma_sav.clone());
        let zetas = self.zetas();
        let bounds = self.bounds();
        let weights = self.weights();

        let mut loss = t.zeros(1, 1);
        let mut residuals: [Option<Var>; 3] = [None, None, None];
        for k in 0..3 {
            if weights[k] == 0.0 && !all_families {
                continue;
            }
            let nx = nxt.assets[k];
            let cx = cur.assets[k];
            // Next-period payoff per unit held.
            let p_next = nxt.prices[k];
            let x2 = t.gather_cols(nx.full, &self.ix.saver_next_age);
            let x1 = t.concat_rows(&vec![cx.cleared; q]);
            let dx = t.sub(x2, x1);
            let adj = t.mul(p_next, dx);
            let adj = t.scale(adj, zetas[k]);
            let base = match k {
                0 => t.add_scalar(adj, 1.0),
                1 => {
                    let dz = t.scale(zn, self.cfg.dividend_share);
                    let v = t.add(p_next, dz);
                    t.add(adj, v)
                }
                _ => {
                    let v = t.add(p_next, nxt.prices[3]);
                    t.add(adj, v)
                }
            };
            let m = t.mul(mu_next, base);
            let expect = expect_blocks(t, m, &self.rule.weights);
            let held = t.gather_cols(cx.held, &self.ix.saver_in_full);
            let d = t.sub(cx.cleared, held);
            let d = t.scale(d, zetas[k]);
            let d = t.add_scalar(d, 1.0);
            let denom = t.mul(cur.prices[k], d);
            let arg = t.div(expect, denom);
            let arg = t.scale(arg, self.cfg.beta);
            let inv = inverse_marginal_utility_tape(t, arg, neg_ig);
            let ratio = t.div(inv, c_sav);
            let gap = t.add_scalar(ratio, -1.0);
            let slack = t.add_scalar(cx.cleared, -bounds[k]);
            let slack = t.div(slack, c_sav);
            let err = fb_tape(t, gap, slack);
            residuals[k] = Some(err);
            if weights[k] != 0.0 {
                let sq = t.square(err);
                let l = t.sum(sq);
                let l = t.scale(l, 0.5 * weights[k] / (n * (self.cfg.ages - 1)) as f64);
                loss = t.add(loss, l);
                if self.mode == ClearingMode::Solver {
                    let lift = liftoff_tape(t, cx.tilde, cx.cleared, bounds[k], ratio);
                    let sq = t.square(lift);
                    let l = t.sum(sq);
                    let l = t.scale(l, 0.5 * weights[k] / (n * (self.cfg.ages - 1)) as f64);
                    loss = t.add(loss, l);
                }
            }
        }

        // Rent first-order condition.
        let h = t.add_scalar(cur.rent, self.cfg.housing_floor);
        let (h_safe, hpen) = guard_tape(t, h);
        let neg_gf = t.constant(self.neg_gamma_full.clone());
        let vprime = marginal_utility_tape(t, h_safe, neg_gf);
        let psi = t.constant(self.psi_row.clone());
        let num = t.mul(psi, vprime);
        let arg = t.div(num, cur.prices[3]);
        let neg_igf = t.constant(self.neg_inv_gamma_full.clone());
        let inv = inverse_marginal_utility_tape(t, arg, neg_igf);
        let ratio = t.div(inv, cur.c_safe);
        let rent_residual = t.add_scalar(ratio, -1.0);
        if self.cfg.weights.rent != 0.0 {
            let sq = t.square(rent_residual);
            let l = t.sum(sq);
            let l = t.scale(l, 0.5 * self.cfg.weights.rent / (n * self.cfg.ages) as f64);
            loss = t.add(loss, l);
        }
        let pen = t.add(cur.penalty, hpen);
        let pen = t.sum(pen);
        let pen = t.scale(pen, 1.0 / n as f64);
        loss = t.add(loss, pen);
        let bond_residual = match residuals[0] {
            Some(v) => v,
            None => t.zeros(n, self.ix.n_savers()),
        };
        Ok((
            LossVars {
                loss,
                bond_residual,
                rent_residual,
            },
            residuals,
        ))
    }

    pub fn decode(&self, net: &MlpParams<f64>, states: &Tensor<f64>) -> Result<MultiDecoded, EconomyError> {
        check_width(states, self.cfg.input_dim())?;
        let mut t = Tape::new();
        let params = net.bind_frozen(&mut t);
        let x = t.constant(states.clone());
        let p = self.period(&mut t, net, &params, x)?;
        let col = |v: Var| t.value(v).column(0).to_vec();
        let (pb, ps, po, pr) = (col(p.prices[0]), col(p.prices[1]), col(p.prices[2]), col(p.prices[3]));
        Ok(MultiDecoded {
            bond: t.value(p.assets[0].cleared).clone(),
            stock: t.value(p.assets[1].cleared).clone(),
            housing: t.value(p.assets[2].cleared).clone(),
            rent: t.value(p.rent).clone(),
            prices: (0..states.nrows()).map(|r| [pb[r], ps[r], po[r], pr[r]]).collect(),
        })
    }

    /// Budget-constraint consumption, `n × agents`.
    pub fn consumption(&self, states: &Tensor<f64>, d: &MultiDecoded) -> Tensor<f64> {
        let f = self.block();
        let y = self.cfg.income_profile();
        let zetas = self.zetas();
        Tensor::from_shape_fn((states.nrows(), f), |(r, col)| {
            let a = col % self.cfg.ages;
            let sv = self.ix.full_from_saver[col];
            let saves = sv < self.ix.n_savers();
            let held = [states[[r, 1 + col]], states[[r, 1 + f + col]], states[[r, 1 + 2 * f + col]]];
            let next = if saves {
                [d.bond[[r, sv]], d.stock[[r, sv]], d.housing[[r, sv]]]
            } else {
                [0.0; 3]
            };
            consumption_multi(
                states[[r, 0]],
                y[a],
                held,
                next,
                saves,
                d.rent[[r, col]],
                d.prices[r],
                self.cfg.dividend_share,
                zetas,
            )
        })
    }

    /// `Σ μ c` minus the aggregate resource identity implied by clearing.
    pub fn walras_gap(&self, states: &Tensor<f64>, d: &MultiDecoded) -> Vec<f64> {
        let c = self.consumption(states, d);
        let f = self.block();
        let y = self.cfg.income_profile();
        let zetas = self.zetas();
        let sup = self.cfg.supplies;
        (0..states.nrows())
            .map(|r| {
                let z = states[[r, 0]];
                let [pb, ps, po, pr] = d.prices[r];
                let mut lhs = 0.0;
                let mut rhs = -pb * sup.bond - ps * sup.stock - po * sup.housing_owned - pr * sup.rental();
                for col in 0..f {
                    let mu = self.cfg.types[col / self.cfg.ages].mass;
                    let held = [states[[r, 1 + col]], states[[r, 1 + f + col]], states[[r, 1 + 2 * f + col]]];
                    lhs += mu * c[[r, col]];
                    rhs += mu
                        * (z * y[col % self.cfg.ages]
                            + held[0]
                            + held[1] * (ps + self.cfg.dividend_share * z)
                            + held[2] * (po + pr));
                    let sv = self.ix.full_from_saver[col];
                    if sv < self.ix.n_savers() {
                        let next = [d.bond[[r, sv]], d.stock[[r, sv]], d.housing[[r, sv]]];
                        for k in 0..3 {
                            let dx = next[k] - held[k];
                            rhs -= mu * [pb, ps, po][k] * zetas[k] * 0.5 * dx * dx;
                        }
                    }
                }
                lhs - rhs
            })
            .collect()
    }

    /// Moves a state batch across a change in supplies: holdings of an
    /// asset whose supply moved are rescaled by new/old, or seeded per
    /// capita when the old supply was zero. Dividend income is recomputed.
    pub fn rescale_states(&self, states: &Tensor<f64>, old: &Supplies, new: &Supplies) -> Tensor<f64> {
        let f = self.block();
        let h = self.cfg.ages;
        let per_capita = |supply: f64| supply / self.cfg.saver_mass();
        let mut out = states.clone();
        for (k, o, n) in [
            (0, old.bond, new.bond),
            (1, old.stock, new.stock),
            (2, old.housing_owned, new.housing_owned),
        ] {
            if o == n {
                continue;
            }
            for r in 0..out.nrows() {
                for col in 0..f {
                    let v = &mut out[[r, 1 + k * f + col]];
                    *v = if col % h == 0 {
                        0.0
                    } else if o > 0.0 {
                        *v * (n / o)
                    } else {
                        per_capita(n)
                    };
                }
            }
        }
        self.refresh_aux(&mut out);
        out
    }

    fn refresh_aux(&self, states: &mut Tensor<f64>) {
        let f = self.block();
        for r in 0..states.nrows() {
            let dz = self.cfg.dividend_share * states[[r, 0]];
            for col in 0..f {
                states[[r, 1 + 3 * f + col]] = states[[r, 1 + f + col]] * dz;
            }
        }
    }
}

/// Budget identity of one agent in the three-asset model. `held` and `next`
/// are (bond, stock, housing); `saves` is false for the oldest age, which
/// pays no adjustment cost.
#[allow(clippy::too_many_arguments)]
pub fn consumption_multi(
    z: f64,
    y: f64,
    held: [f64; 3],
    next: [f64; 3],
    saves: bool,
    h_rent: f64,
    prices: [f64; 4],
    dividend_share: f64,
    zetas: [f64; 3],
) -> f64 {
    let [pb, ps, po, pr] = prices;
    let mut c = z * y + held[0] + held[1] * (ps + dividend_share * z) + held[2] * (po + pr) - pr * h_rent;
    let p = [pb, ps, po];
    for k in 0..3 {
        c -= p[k] * next[k];
        if saves {
            c -= p[k] * zetas[k] * 0.5 * (next[k] - held[k]).powi(2);
        }
    }
    c
}

/// Next-period state: assets age by one, newborns hold nothing,
/// `aux = s·d·z'`.
pub fn transition_multi(
    ix: &AgentIndex,
    d: &MultiDecoded,
    z_next: &[f64],
    dividend_share: f64,
) -> Tensor<f64> {
    let f = ix.n_full();
    let blocks = [ix.shift(&d.bond), ix.shift(&d.stock), ix.shift(&d.housing)];
    let mut out = Tensor::zeros((d.bond.nrows(), 1 + 4 * f));
    for r in 0..out.nrows() {
        out[[r, 0]] = z_next[r];
        for (k, b) in blocks.iter().enumerate() {
            for c in 0..f {
                out[[r, 1 + k * f + c]] = b[[r, c]];
            }
        }
        for c in 0..f {
            out[[r, 1 + 3 * f + c]] = blocks[1][[r, c]] * dividend_share * z_next[r];
        }
    }
    out
}

impl Economy for MultiAssetEconomy {
    fn input_dim(&self) -> usize {
        self.cfg.input_dim()
    }

    fn heads(&self) -> Vec<HeadSpec> {
        let s = self.ix.n_savers();
        vec![
            HeadSpec::new("bond", s, self.policy_activation),
            HeadSpec::new("stock", s, self.policy_activation),
            HeadSpec::new("housing", s, self.policy_activation),
            HeadSpec::new("rent", self.block(), self.policy_activation),
            HeadSpec::new("prices", 4, Activation::Softplus),
        ]
    }

    fn shock_process(&self) -> (f64, f64) {
        (self.cfg.rho, self.cfg.sigma)
    }

    fn initial_states(&self, n: usize) -> Tensor<f64> {
        let f = self.block();
        let h = self.cfg.ages;
        let mass = self.cfg.saver_mass();
        let sup = self.cfg.supplies;
        let per = [sup.bond / mass, sup.stock / mass, sup.housing_owned / mass];
        let mut out = Tensor::zeros((n, self.cfg.input_dim()));
        for r in 0..n {
            out[[r, 0]] = 1.0;
            for (k, &p) in per.iter().enumerate() {
                for col in 0..f {
                    if col % h != 0 {
                        out[[r, 1 + k * f + col]] = p;
                    }
                }
            }
        }
        self.refresh_aux(&mut out);
        out
    }

    fn loss(
        &self,
        tape: &mut Tape<f64>,
        net: &MlpParams<f64>,
        params: &[Var],
        states: &Tensor<f64>,
    ) -> Result<LossVars, EconomyError> {
        Ok(self.loss_tape_with(tape, net, params, states, false)?.0)
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
        Ok(transition_multi(&self.ix, &d, z_next, self.cfg.dividend_share))
    }

    fn residuals(&self, net: &MlpParams<f64>, states: &Tensor<f64>) -> Result<Vec<ResidualBlock>, EconomyError> {
        let mut t = Tape::new();
        let params = net.bind_frozen(&mut t);
        let (lv, assets) = self.loss_tape_with(&mut t, net, &params, states, true)?;
        let (h, sav) = (self.cfg.ages, self.cfg.ages - 1);
        let mut out = Vec::new();
        for (k, v) in assets.iter().enumerate() {
            let vals = t.value(v.expect("all families requested"));
            for ty in 0..self.cfg.n_types() {
                out.push(ResidualBlock {
                    family: ASSETS[k],
                    type_index: ty,
                    ages: (1..h).collect(),
                    values: vals.slice(ndarray::s![.., ty * sav..(ty + 1) * sav]).to_owned(),
                });
            }
        }
        let rent = t.value(lv.rent_residual);
        for ty in 0..self.cfg.n_types() {
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
        for ty in 0..self.cfg.n_types() {
            for (name, pol) in [("bond", &d.bond), ("stock", &d.stock), ("housing", &d.housing)] {
                let vals = Tensor::from_shape_fn((n, h), |(r, a)| {
                    let sv = self.ix.full_from_saver[ty * h + a];
                    if sv < self.ix.n_savers() {
                        pol[[r, sv]]
                    } else {
                        0.0
                    }
                });
                out.push(ProfileBlock {
                    variable: name,
                    type_index: ty,
                    values: vals,
                });
            }
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
        let f = self.block();
        let sup = self.cfg.supplies;
        let targets = [sup.bond, sup.stock, sup.housing_owned];
        let mu_full = |c: usize| self.cfg.types[c / self.cfg.ages].mass;
        let mu_sav = self.layers[0].mu();
        let mut worst: f64 = 0.0;
        for r in 0..states.nrows() {
            for (k, pol) in [&d.bond, &d.stock, &d.housing].into_iter().enumerate() {
                let held: f64 = (0..f).map(|c| mu_full(c) * states[[r, 1 + k * f + c]]).sum();
                let bought: f64 = (0..mu_sav.len()).map(|c| mu_sav[c] * pol[[r, c]]).sum();
                worst = worst.max(rel_gap(held, targets[k])).max(rel_gap(bought, targets[k]));
            }
            let rented: f64 = (0..f).map(|c| mu_full(c) * d.rent[[r, c]]).sum();
            worst = worst.max(rel_gap(rented, sup.rental()));
        }
        Ok(worst)
    }
}

/// Lifts a two-hidden-layer (or deeper) single-asset network over the same
/// preference types into the multi-asset layout: stock, housing and
/// dividend inputs get zero weights, the bond and rent outputs and the two
/// prices are copied, and the stock and housing heads output zero.
pub fn embed_single_network(single: &MlpParams<f64>, cfg: &MultiAssetConfig, heads: Vec<HeadSpec>) -> MlpParams<f64> {
    let nt = cfg.n_types();
    let (h, f) = (cfg.ages, nt * cfg.ages);
    let s = nt * (h - 1);
    let mut layers = single.layers.clone();
    let first = &single.layers[0];
    let mut w0 = Tensor::zeros((cfg.input_dim(), first.weight.ncols()));
    w0.slice_mut(ndarray::s![..1 + f, ..]).assign(&first.weight);
    layers[0].weight = w0;
    let last = single.layers.last().unwrap();
    let width = cfg.output_dim();
    let hidden = last.weight.nrows();
    let mut w = Tensor::zeros((hidden, width));
    let mut b = Tensor::zeros((1, width));
    // (source column in single output, destination column in multi output)
    let mut map: Vec<(usize, usize)> = (0..s).map(|c| (c, c)).collect();
    map.extend((0..f).map(|c| (s + c, 3 * s + c)));
    map.push((s + f, 3 * s + f));
    map.push((s + f + 1, 3 * s + f + 3));
    for (src, dst) in map {
        w.column_mut(dst).assign(&last.weight.column(src));
        b[[0, dst]] = last.bias[[0, src]];
    }
    let n = layers.len();
    layers[n - 1].weight = w;
    layers[n - 1].bias = b;
    MlpParams {
        layers,
        heads,
        seed: single.seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::economy_single::{SingleAssetConfig, SingleAssetEconomy};
    use crate::nn::init_mlp;
    use crate::quadrature::gauss_hermite;

    fn small(cfg: MultiAssetConfig) -> MultiAssetEconomy {
        MultiAssetEconomy::new(cfg, ClearingMode::Simple, Solver::Sorted, gauss_hermite(3).unwrap()).unwrap()
    }

    fn small_cfg() -> MultiAssetConfig {
        MultiAssetConfig {
            ages: 4,
            ..MultiAssetConfig::default()
        }
    }

    #[test]
    fn full_scale_layout_widths() {
        let cfg = MultiAssetConfig::default();
        assert_eq!(cfg.input_dim(), 161);
        assert_eq!(cfg.output_dim(), 158);
    }

    #[test]
    fn budget_examples() {
        let z3 = [0.0; 3];
        let c = consumption_multi(1.0, 0.3, z3, z3, true, 0.1, [1.0, 1.0, 1.0, 0.5], 0.3, [0.25, 1.0, 4.0]);
        assert!((c - 0.25).abs() < 1e-15);
        let c = consumption_multi(1.0, 0.0, [0.0, 1.0, 0.0], z3, false, 0.0, [1.0, 2.0, 1.0, 1.0], 0.3, [0.0; 3]);
        assert!((c - 2.3).abs() < 1e-15);
        let c = consumption_multi(1.0, 0.0, [0.2, 0.0, 0.0], [0.2, 0.0, 0.0], true, 0.0, [0.9, 1.0, 1.0, 1.0], 0.3, [9.0; 3]);
        assert!((c - (0.2 - 0.9 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn masked_assets_are_exactly_zero() {
        let cfg = MultiAssetConfig {
            supplies: Supplies {
                bond: 0.56,
                stock: 0.0,
                housing_owned: 0.0,
                housing_external: 1.0,
            },
            masks: Masks {
                bond: 1.0,
                stock: 0.0,
                housing: 0.0,
            },
            ..small_cfg()
        };
        for mode in [ClearingMode::Simple, ClearingMode::Solver] {
            let e = MultiAssetEconomy::new(cfg.clone(), mode, Solver::Sorted, gauss_hermite(2).unwrap()).unwrap();
            let net = init_mlp::<f64>(&[e.input_dim(), 5, e.output_dim()], e.heads(), 1).unwrap();
            let states = e.initial_states(3);
            let d = e.decode(&net, &states).unwrap();
            assert!(d.stock.iter().all(|&x| x == 0.0));
            assert!(d.housing.iter().all(|&x| x == 0.0));
            let next = e.advance(&net, &states, &[1.1, 0.9, 1.0]).unwrap();
            let f = e.agent_index().n_full();
            assert!(next.slice(ndarray::s![.., 1 + f..]).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn all_markets_clear_and_walras_holds() {
        let e = small(small_cfg());
        let net = init_mlp::<f64>(&[e.input_dim(), 7, e.output_dim()], e.heads(), 5).unwrap();
        let mut states = e.initial_states(4);
        states[[1, 0]] = 1.07;
        e.refresh_aux(&mut states);
        assert!(e.clearing_gap(&net, &states).unwrap() < 1e-12);
        let d = e.decode(&net, &states).unwrap();
        for g in e.walras_gap(&states, &d) {
            assert!(g.abs() < 1e-9, "{g}");
        }
        let next = e.advance(&net, &states, &[1.0, 1.2, 0.8, 1.0]).unwrap();
        let f = e.agent_index().n_full();
        for r in 0..4 {
            let s: f64 = (0..f).map(|c| 0.5 * next[[r, 1 + f + c]]).sum();
            assert!((s - 1.0).abs() < 1e-12);
            for c in 0..f {
                assert_eq!(next[[r, 1 + 3 * f + c]], next[[r, 1 + f + c]] * 0.3 * next[[r, 0]]);
            }
        }
    }

    #[test]
    fn rescaling_keeps_states_clearing() {
        let mut cfg = small_cfg();
        cfg.supplies.stock = 0.0;
        let e = small(cfg.clone());
        let states = e.initial_states(2);
        let mut new = cfg.supplies;
        new.stock = 0.25;
        let out = e.rescale_states(&states, &cfg.supplies, &new);
        let f = e.agent_index().n_full();
        let held: f64 = (0..f).map(|c| 0.5 * out[[0, 1 + f + c]]).sum();
        assert!((held - 0.25).abs() < 1e-15);
        let mut newer = new;
        newer.stock = 0.5;
        let out2 = e.rescale_states(&out, &new, &newer);
        let held: f64 = (0..f).map(|c| 0.5 * out2[[1, 1 + f + c]]).sum();
        assert!((held - 0.5).abs() < 1e-15);
        assert_eq!(out2[[0, 1 + 3 * f + 1]], out2[[0, 1 + f + 1]] * 0.3);
    }

    #[test]
    fn nests_two_type_single_asset_loss() {
        let types = MultiAssetConfig::default().types;
        let single_cfg = SingleAssetConfig {
            ages: 4,
            types: Some(types.clone()),
            bond_adjustment: 0.25,
            ..SingleAssetConfig::default()
        };
        let multi_cfg = MultiAssetConfig {
            supplies: Supplies {
                bond: 0.56,
                stock: 0.0,
                housing_owned: 0.0,
                housing_external: 1.0,
            },
            masks: Masks {
                bond: 1.0,
                stock: 0.0,
                housing: 0.0,
            },
            weights: LossWeights {
                bond: 1.0,
                stock: 0.0,
                housing: 0.0,
                rent: 1.0,
            },
            ..small_cfg()
        };
        let rule = gauss_hermite(3).unwrap();
        let se = SingleAssetEconomy::new(single_cfg, ClearingMode::Simple, Solver::Sorted, rule.clone()).unwrap();
        let me = MultiAssetEconomy::new(multi_cfg.clone(), ClearingMode::Simple, Solver::Sorted, rule).unwrap();
        let snet = init_mlp::<f64>(&[se.input_dim(), 6, 6, se.output_dim()], se.heads(), 8).unwrap();
        let mnet = embed_single_network(&snet, &multi_cfg, me.heads());
        let mut s_states = se.initial_states(3);
        s_states[[0, 0]] = 1.1;
        s_states[[2, 2]] += 0.05;
        s_states[[2, 3]] -= 0.05;
        let mut m_states = Tensor::zeros((3, me.input_dim()));
        m_states.slice_mut(ndarray::s![.., ..s_states.ncols()]).assign(&s_states);
        let eval = |e: &dyn Economy, net: &MlpParams<f64>, st: &Tensor<f64>| {
            let mut t = Tape::new();
            let p = net.bind_frozen(&mut t);
            let lv = e.loss(&mut t, net, &p, st).unwrap();
            t.scalar(lv.loss)
        };
        let ls = eval(&se, &snet, &s_states);
        let lm = eval(&me, &mnet, &m_states);
        assert!(ls > 0.0);
        assert!((ls - lm).abs() <= 1e-12, "{ls} vs {lm}");
    }

    #[test]
    fn validation_catches_bad_mask() {
        let mut cfg = small_cfg();
        cfg.masks.stock = 1.5;
        assert_eq!(cfg.validate().unwrap_err().field, "economy.masks.stock");
        let mut cfg = small_cfg();
        cfg.income = Some(vec![0.5; 2]);
        assert_eq!(cfg.validate().unwrap_err().field, "economy.income");
    }
}
