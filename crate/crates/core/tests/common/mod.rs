#![allow(dead_code)]

use std::path::PathBuf;

use mcl_core::autodiff::{gradcheck, GradcheckFailure, GradcheckReport, Tape, Tensor};
use mcl_core::clearing::{ClearingMode, Solver};
use mcl_core::economy_multi::{embed_single_network, LossWeights, Masks, MultiAssetConfig, MultiAssetEconomy, Supplies};
use mcl_core::economy_single::{SingleAssetConfig, SingleAssetEconomy};
use mcl_core::model::Economy;
use mcl_core::nn::{init_mlp, MlpParams};
use mcl_core::quadrature::gauss_hermite;
use mcl_core::trainer::simulate;

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

pub fn micro_single(mode: ClearingMode) -> SingleAssetEconomy {
    let cfg = SingleAssetConfig {
        ages: 3,
        ..SingleAssetConfig::default()
    };
    SingleAssetEconomy::new(cfg, mode, Solver::Sorted, gauss_hermite(2).unwrap()).unwrap()
}

pub fn micro_multi(mode: ClearingMode) -> MultiAssetEconomy {
    let cfg = MultiAssetConfig {
        ages: 3,
        supplies: Supplies {
            bond: 0.56,
            stock: 0.6,
            housing_owned: 0.4,
            housing_external: 0.6,
        },
        ..MultiAssetConfig::default()
    };
    MultiAssetEconomy::new(cfg, mode, Solver::Sorted, gauss_hermite(2).unwrap()).unwrap()
}

/// A small network whose output layer is shrunk so that consumption stays
/// positive on the initial state and its neighbours.
pub fn tame_network(econ: &dyn Economy, hidden: &[usize], seed: u64) -> MlpParams<f64> {
    let mut dims = vec![econ.input_dim()];
    dims.extend(hidden);
    dims.push(econ.output_dim());
    let mut net = init_mlp::<f64>(&dims, econ.heads(), seed).unwrap();
    let last = net.layers.last_mut().unwrap();
    last.weight.mapv_inplace(|w| 0.05 * w);
    // Start prices low enough that the young can afford their rent.
    let n = last.bias.ncols();
    let prices = econ.heads().last().unwrap().width;
    for c in n - prices..n {
        last.bias[[0, c]] = -2.0;
    }
    net
}

/// States reached from the initial state under `net`.
pub fn sample_states(econ: &dyn Economy, net: &MlpParams<f64>, n: usize, periods: usize, seed: u64) -> Tensor<f64> {
    simulate(econ, net, econ.initial_states(n), periods, seed).unwrap()
}

pub fn loss_value(econ: &dyn Economy, net: &MlpParams<f64>, states: &Tensor<f64>) -> f64 {
    let mut t = Tape::new();
    let p = net.bind_frozen(&mut t);
    let lv = econ.loss(&mut t, net, &p, states).unwrap();
    t.scalar(lv.loss)
}

/// Reverse-mode gradient of the loss with respect to every parameter,
/// checked against central differences.
pub fn loss_gradcheck(
    econ: &dyn Economy,
    net: &MlpParams<f64>,
    states: &Tensor<f64>,
    tolerance: f64,
) -> Result<GradcheckReport<f64>, GradcheckFailure<f64>> {
    let inputs: Vec<Tensor<f64>> = net.tensors().into_iter().cloned().collect();
    gradcheck(
        |t, vars| econ.loss(t, net, vars, states).unwrap().loss,
        &inputs,
        1e-6,
        tolerance,
    )
}

/// Loss of a two-type single-asset economy and of the multi-asset economy
/// restricted to the bond, on the same (perturbed) states.
pub fn nesting_pair(seed: u64) -> (f64, f64) {
    let types = MultiAssetConfig::default().types;
    let single_cfg = SingleAssetConfig {
        ages: 4,
        types: Some(types),
        bond_adjustment: 0.25,
        ..SingleAssetConfig::default()
    };
    let multi_cfg = MultiAssetConfig {
        ages: 4,
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
        ..MultiAssetConfig::default()
    };
    let rule = gauss_hermite(3).unwrap();
    let se = SingleAssetEconomy::new(single_cfg, ClearingMode::Simple, Solver::Sorted, rule.clone()).unwrap();
    let me = MultiAssetEconomy::new(multi_cfg.clone(), ClearingMode::Simple, Solver::Sorted, rule).unwrap();
    let snet = tame_network(&se, &[8, 8], seed);
    let mnet = embed_single_network(&snet, &multi_cfg, me.heads());
    let s_states = sample_states(&se, &snet, 6, 3, seed);
    let mut m_states = Tensor::zeros((s_states.nrows(), me.input_dim()));
    m_states.slice_mut(ndarray::s![.., ..s_states.ncols()]).assign(&s_states);
    (loss_value(&se, &snet, &s_states), loss_value(&me, &mnet, &m_states))
}

/// A shipped desk configuration shrunk to a few seconds of work and
/// written to `dir`.
pub fn micro_run_config(desk: &str, dir: &std::path::Path) -> PathBuf {
    use mcl_core::config::{EconomyConfig, RunConfig};
    let mut cfg = RunConfig::load(&config_path(desk)).unwrap();
    match &mut cfg.economy {
        EconomyConfig::Single(c) => c.ages = 3,
        EconomyConfig::Multi(c) => c.ages = 3,
    }
    cfg.out = None;
    cfg.quadrature_order = 2;
    cfg.network.hidden = vec![8];
    cfg.training.episodes = 3;
    cfg.training.trajectories = 32;
    cfg.training.epochs = 2;
    cfg.training.minibatch = 16;
    cfg.evaluation.states = 16;
    cfg.evaluation.periods = 2;
    if let Some(h) = &mut cfg.homotopy {
        h.stock_steps = 1;
        h.housing_steps = 2;
        h.initial_episodes = 2;
        h.stage_episodes = 1;
    }
    let path = dir.join(desk);
    std::fs::write(&path, cfg.to_toml_string()).unwrap();
    path
}

/// Runs the `mcl` binary and returns its exit code and stderr.
pub fn mcl(args: &[&str]) -> (i32, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_mcl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

/// Every file under `dir`, as (relative path, bytes), sorted by path.
pub fn tree(dir: &std::path::Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Runs every command on the micro configs with `--deterministic --seed 7`
/// into `out`.
pub fn run_all_commands(work: &std::path::Path, out: &std::path::Path) {
    let single = micro_run_config("single_asset_desk.toml", work);
    let multi = micro_run_config("multi_asset_desk.toml", work);
    for (cfg, first) in [(&single, "train-single"), (&multi, "homotopy")] {
        let dir = out.join(first);
        let dir = dir.to_str().unwrap();
        let cfg = cfg.to_str().unwrap();
        let common = ["--config", cfg, "--out", dir, "--deterministic", "--seed", "7"];
        for cmd in [first, "evaluate", "profiles"] {
            let mut args = vec![cmd];
            args.extend(common);
            let (code, err) = mcl(&args);
            assert_eq!(code, 0, "{cmd}: {err}");
        }
    }
}
