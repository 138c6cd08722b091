mod common;

use common::*;
use mcl_core::clearing::ClearingMode;
use mcl_core::economy_multi::{consumption_multi, MultiAssetEconomy};
use mcl_core::economy_single::SingleAssetEconomy;
use mcl_core::model::Economy;
use mcl_core::trainer::residual_stats;

#[test]
fn single_loss_gradient_matches_finite_differences() {
    for mode in [ClearingMode::Simple, ClearingMode::Solver] {
        let e = micro_single(mode);
        let net = tame_network(&e, &[4], 5);
        let states = sample_states(&e, &net, 4, 2, 1);
        let r = loss_gradcheck(&e, &net, &states, 1e-5).unwrap_or_else(|f| panic!("{mode:?}: {f}"));
        assert!(r.components > 50);
    }
}

#[test]
fn multi_loss_gradient_matches_finite_differences() {
    for mode in [ClearingMode::Simple, ClearingMode::Solver] {
        let e = micro_multi(mode);
        let net = tame_network(&e, &[4], 9);
        let states = sample_states(&e, &net, 4, 2, 2);
        loss_gradcheck(&e, &net, &states, 1e-5).unwrap_or_else(|f| panic!("{mode:?}: {f}"));
    }
}

#[test]
fn nesting_holds_on_random_states() {
    for seed in 0..5 {
        let (ls, lm) = nesting_pair(seed);
        assert!(ls > 0.0);
        assert!((ls - lm).abs() <= 1e-12, "seed {seed}: {ls} vs {lm}");
    }
}

#[test]
fn simulated_states_keep_clearing() {
    let e = micro_multi(ClearingMode::Solver);
    let net = tame_network(&e, &[6], 4);
    let states = sample_states(&e, &net, 32, 5, 3);
    assert!(e.clearing_gap(&net, &states).unwrap() <= 1e-12);
    let d = e.decode(&net, &states).unwrap();
    for g in e.walras_gap(&states, &d) {
        assert!(g.abs() < 1e-9);
    }
    assert!(d.bond.iter().chain(d.stock.iter()).chain(d.housing.iter()).all(|&x| x >= -1e-12));

    let s = micro_single(ClearingMode::Simple);
    let net = tame_network(&s, &[6], 4);
    let states = sample_states(&s, &net, 32, 5, 3);
    assert!(s.clearing_gap(&net, &states).unwrap() <= 1e-12);
}

#[test]
fn multi_evaluation_has_eight_families() {
    let e: MultiAssetEconomy = micro_multi(ClearingMode::Simple);
    let net = tame_network(&e, &[6], 1);
    let states = sample_states(&e, &net, 8, 1, 1);
    let stats = residual_stats(&e, &net, &states, &[10.0, 90.0, 99.0]).unwrap();
    let mut families: Vec<(String, usize)> = stats.iter().map(|s| (s.family.clone(), s.type_index)).collect();
    families.dedup();
    assert_eq!(families.len(), 8);
    assert_eq!(stats.len(), 3 * 2 * 2 + 2 * 3);
}

#[test]
fn profiles_cover_every_variable_type_and_age() {
    let e = micro_multi(ClearingMode::Simple);
    let net = tame_network(&e, &[6], 1);
    let states = sample_states(&e, &net, 8, 1, 1);
    let rows = mcl_core::trainer::profile_rows(&e, &net, &states).unwrap();
    assert_eq!(rows.len(), 5 * 2 * 3);
    let s: SingleAssetEconomy = micro_single(ClearingMode::Simple);
    let net = tame_network(&s, &[6], 1);
    let rows = mcl_core::trainer::profile_rows(&s, &net, &s.initial_states(4)).unwrap();
    assert_eq!(rows.len(), 3 * 3);
}

#[test]
fn multi_budget_hand_values() {
    let none = [0.0; 3];
    let c = consumption_multi(1.0, 0.3, none, none, true, 0.1, [1.0, 1.0, 1.0, 0.5], 0.3, [0.25, 1.0, 4.0]);
    assert!((c - 0.25).abs() < 1e-15);
    let c = consumption_multi(1.0, 0.0, [0.0, 1.0, 0.0], none, false, 0.0, [1.0, 2.0, 1.0, 1.0], 0.3, [1.0; 3]);
    assert!((c - 2.3).abs() < 1e-15);
}
