mod common;

use common::config_path;
use mcl_core::clearing::ClearingMode;
use mcl_core::config::{EconomyConfig, RunConfig};

fn load(name: &str) -> RunConfig {
    RunConfig::load(&config_path(name)).unwrap()
}

#[test]
fn single_asset_network_and_training_counts() {
    let cfg = load("single_asset.toml");
    assert_eq!(cfg.network_dims(), vec![21, 400, 400, 41]);
    assert_eq!(cfg.quadrature_order, 8);
    let run = cfg.train_run();
    assert_eq!(run.episodes, 3584);
    assert_eq!(run.trajectories, 8192);
    assert_eq!(run.minibatch, 128);
    assert_eq!(run.batches_per_epoch(), 64);
    assert_eq!(run.gradient_steps_per_episode(), 640);
    assert_eq!(run.learning_rate, 1e-5);
    let EconomyConfig::Single(e) = &cfg.economy else { panic!("single model expected") };
    assert_eq!(e.ages, 20);
    assert_eq!(e.bond_supply, 0.56);
}

#[test]
fn multi_asset_network_and_schedule() {
    let cfg = load("multi_asset_homotopy.toml");
    assert_eq!(cfg.network_dims(), vec![161, 400, 400, 158]);
    assert_eq!(cfg.quadrature_order, 8);
    assert_eq!(cfg.train_run().gradient_steps_per_episode(), 640);
    assert_eq!(cfg.train_run().learning_rate, 1e-6);

    let schedule = cfg.schedule();
    assert_eq!(schedule.len(), 3 + 10 + 2 + 20);
    assert_eq!(schedule[0].episodes, 512);
    assert!(schedule[1..].iter().all(|s| s.episodes == 256));

    let stock: Vec<f64> = schedule.iter().filter(|s| s.label.starts_with("stock_") && s.masks.stock == 1.0).map(|s| s.supplies.stock).collect();
    assert_eq!(stock.len(), 10);
    for (k, s) in stock.iter().enumerate() {
        assert!((s - (k + 1) as f64 / 10.0).abs() < 1e-15);
    }
    let housing: Vec<_> = schedule.iter().filter(|s| s.label.starts_with("housing_") && s.masks.housing == 1.0).collect();
    assert_eq!(housing.len(), 20);
    for (j, s) in housing.iter().enumerate() {
        assert!((s.supplies.housing_owned - (j + 1) as f64 / 20.0).abs() < 1e-15);
    }
    for s in &schedule {
        assert!((s.supplies.housing_owned + s.supplies.housing_external - 1.0).abs() < 1e-15, "{}", s.label);
        assert_eq!(s.supplies.bond, 0.56);
    }
    let first = &schedule[0];
    assert_eq!((first.masks.stock, first.masks.housing), (0.0, 0.0));
    assert_eq!((first.weights.stock, first.weights.housing), (0.0, 0.0));
}

#[test]
fn shipped_configs_round_trip_and_build() {
    for name in ["single_asset.toml", "single_asset_desk.toml", "multi_asset_homotopy.toml", "multi_asset_desk.toml"] {
        let cfg = load(name);
        let again = RunConfig::from_toml_str(&cfg.to_toml_string(), name).unwrap();
        assert_eq!(again, cfg, "{name}");
        assert_eq!(cfg.mode, ClearingMode::Simple);
        let stage = cfg.schedule().into_iter().next();
        let econ = cfg.economy(stage.as_ref()).unwrap();
        assert_eq!(econ.input_dim(), cfg.input_dim());
        assert_eq!(econ.output_dim(), cfg.output_dim());
    }
}

#[test]
fn desk_configs_match_the_reduced_setting() {
    let cfg = load("single_asset_desk.toml");
    assert_eq!(cfg.network_dims(), vec![6, 64, 64, 11]);
    assert_eq!((cfg.training.episodes, cfg.training.trajectories, cfg.quadrature_order), (400, 512, 4));
    let cfg = load("multi_asset_desk.toml");
    let h = cfg.homotopy.clone().unwrap();
    assert_eq!((h.stock_steps, h.housing_steps), (4, 6));
    assert_eq!(cfg.schedule().len(), 3 + 4 + 2 + 6);
    assert!(cfg.schedule().iter().all(|s| s.episodes == 32));
    assert_eq!(cfg.training.trajectories, 512);
}
