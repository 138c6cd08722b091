//! End-to-end acceptance checks, one line per criterion. Runs as a plain
//! binary so the lines always reach the test log.

mod common;

use std::time::Instant;

use common::*;
use mcl_core::clearing::{project_with_bounds, simple_adjust, ClearingMode, ClearingProblem, Solver};
use mcl_core::config::RunConfig;
use mcl_core::homotopy::Manifest;
use mcl_core::household::percentile_sorted;
use mcl_core::nn::{init_mlp, AdamConfig, AdamState};
use mcl_core::oracles::{normal_moment, qp_oracle};
use mcl_core::quadrature::gauss_hermite;
use mcl_core::trainer::{simulate, train, TrainOutputs, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn random_problem(rng: &mut ChaCha8Rng, max_len: usize) -> ClearingProblem<f64> {
    let n = rng.random_range(2..=max_len);
    let mu: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..3.0)).collect();
    let bt: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let lb: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let floor: f64 = mu.iter().zip(&lb).map(|(m, l)| m * l).sum();
    let slack = rng.random_range(0.0..5.0);
    ClearingProblem::new(mu, bt, floor + slack).with_bounds(lb)
}

fn clearing_exactness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t0 = Instant::now();
    let mut worst_gap = 0.0f64;
    let mut worst_bound = 0.0f64;
    for _ in 0..10_000 {
        let p = random_problem(&mut rng, 40);
        let tol = 1e-10 * p.supply.abs().max(1.0);
        let clear = |b: &[f64]| (p.mu.iter().zip(b).map(|(m, x)| m * x).sum::<f64>() - p.supply).abs() / tol;
        let b = simple_adjust(&p).map_err(|e| e.to_string())?;
        worst_gap = worst_gap.max(clear(&b));
        for solver in [Solver::Sorted, Solver::Bisection] {
            let r = project_with_bounds(&p, solver).map_err(|e| e.to_string())?;
            worst_gap = worst_gap.max(clear(&r.b));
            let lb = p.lower_bounds.as_ref().unwrap();
            for (x, l) in r.b.iter().zip(lb) {
                worst_bound = worst_bound.max(l - x);
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let msg = format!("worst gap {worst_gap:.2} x tol, worst bound violation {worst_bound:.1e}, {secs:.1}s");
    if worst_gap <= 1.0 && worst_bound <= 1e-12 && secs < 10.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn oracle_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for _ in 0..1_000 {
        let p = random_problem(&mut rng, 10);
        let want = qp_oracle(&p);
        for solver in [Solver::Sorted, Solver::Bisection] {
            let got = project_with_bounds(&p, solver).map_err(|e| e.to_string())?.b;
            for (x, y) in got.iter().zip(&want) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let msg = format!("max deviation {worst:.1e}, {secs:.1}s");
    if worst <= 1e-9 && secs < 60.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn gradient_fidelity() -> Check {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for mode in [ClearingMode::Simple, ClearingMode::Solver] {
        let cases: [(Box<dyn mcl_core::model::Economy>, u64); 2] =
            [(Box::new(micro_single(mode)), 5), (Box::new(micro_multi(mode)), 9)];
        for (econ, seed) in cases {
            let net = tame_network(econ.as_ref(), &[4], seed);
            let states = sample_states(econ.as_ref(), &net, 4, 2, seed);
            match loss_gradcheck(econ.as_ref(), &net, &states, 1e-5) {
                Ok(r) => worst = worst.max(r.max_rel_err),
                Err(f) => return Err(format!("{mode:?}: {f}")),
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let msg = format!("max relative error {worst:.1e}, {secs:.1}s");
    if secs < 60.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn quadrature_exactness() -> Check {
    let rule = gauss_hermite::<f64>(8).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for k in 0..=15u32 {
        let got = rule.expect(|e| e.powi(k as i32));
        worst = worst.max((got - normal_moment(k)).abs());
    }
    let msg = format!("max moment error {worst:.1e}");
    if worst <= 1e-9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn nesting_identity() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let (ls, lm) = nesting_pair(seed);
        worst = worst.max((ls - lm).abs());
    }
    let msg = format!("max loss difference {worst:.1e}");
    if worst <= 1e-12 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn training_progress() -> Check {
    let t0 = Instant::now();
    let base = RunConfig::load(&config_path("single_asset_desk.toml")).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut p99s = Vec::new();
    let mut ratios = Vec::new();
    for seed in 1..=3u64 {
        let cfg = RunConfig { seed, ..base.clone() };
        let econ = cfg.single_economy().unwrap().map_err(|e| e.to_string())?;
        let run = cfg.train_run();
        let params = init_mlp::<f64>(&cfg.network_dims(), mcl_core::model::Economy::heads(&econ), seed)
            .map_err(|e| e.to_string())?;
        let adam = AdamState::new(&params, AdamConfig::with_learning_rate(run.learning_rate));
        let states = mcl_core::model::Economy::initial_states(&econ, run.trajectories);
        let mut st = TrainState::new(params, adam, states, run.history);
        let out = dir.path().join(format!("seed_{seed}"));
        let outputs = TrainOutputs {
            dir: &out,
            deterministic: true,
            stage: None,
        };
        let metrics = train(&econ, &mut st, &run, &outputs).map_err(|e| e.to_string())?;
        ratios.push(metrics.last().unwrap().mean_loss / metrics[0].mean_loss);

        // Held out: a separate simulation from the initial state.
        let start = mcl_core::model::Economy::initial_states(&econ, cfg.evaluation.states);
        let held = simulate(&econ, &st.params, start, cfg.evaluation.periods, seed + 1000).map_err(|e| e.to_string())?;
        let blocks = mcl_core::model::Economy::residuals(&econ, &st.params, &held).map_err(|e| e.to_string())?;
        let mut bond: Vec<f64> = blocks
            .iter()
            .filter(|b| b.family == "bond")
            .flat_map(|b| b.values.iter().map(|v| v.abs()))
            .collect();
        bond.sort_by(f64::total_cmp);
        p99s.push(percentile_sorted(&bond, 99.0));
    }
    let per_seed = p99s.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>().join(", ");
    let (p99, ratio) = (median(p99s), median(ratios));
    let msg = format!(
        "median p99 bond residual {p99:.2e} (per seed {per_seed}), median final/first loss {ratio:.1e}, {:.0}s",
        t0.elapsed().as_secs_f64()
    );
    if p99 < 0.05 && ratio < 0.1 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn homotopy_stability() -> Check {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = config_path("multi_asset_desk.toml");
    let out = dir.path().join("run");
    let (code, err) = mcl(&["homotopy", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    if code != 0 {
        return Err(format!("exit {code}: {err}"));
    }
    let m = Manifest::load(&out.join("manifest.json")).map_err(|e| e.to_string())?;
    if m.completed.len() != m.schedule.len() {
        return Err(format!("{} of {} stages completed", m.completed.len(), m.schedule.len()));
    }
    let aborts = tree(&out).iter().filter(|(p, _)| p.ends_with("nan_states.csv")).count();
    let worst_gap = m.completed.iter().map(|r| r.clearing_gap).fold(0.0, f64::max);
    let position = |label: &str| m.completed.iter().position(|r| r.label == label).unwrap();
    let early_stock = m.completed[..position("stock_mask")].iter().map(|r| r.max_abs_holdings[1]).fold(0.0, f64::max);
    let early_housing =
        m.completed[..position("housing_mask")].iter().map(|r| r.max_abs_holdings[2]).fold(0.0, f64::max);
    let msg = format!(
        "{} stages, {aborts} aborts, worst clearing gap {worst_gap:.1e}, holdings before masks {early_stock:e}/{early_housing:e}, {:.0}s",
        m.completed.len(),
        t0.elapsed().as_secs_f64()
    );
    if aborts == 0 && worst_gap <= 1e-10 && early_stock == 0.0 && early_housing == 0.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn configuration_fidelity() -> Check {
    let single = RunConfig::load(&config_path("single_asset.toml")).map_err(|e| e.to_string())?;
    let multi = RunConfig::load(&config_path("multi_asset_homotopy.toml")).map_err(|e| e.to_string())?;
    let mut bad = Vec::new();
    if single.network_dims() != [21, 400, 400, 41] {
        bad.push(format!("single dims {:?}", single.network_dims()));
    }
    if multi.network_dims() != [161, 400, 400, 158] {
        bad.push(format!("multi dims {:?}", multi.network_dims()));
    }
    for (name, c) in [("single", &single), ("multi", &multi)] {
        let steps = c.train_run().gradient_steps_per_episode();
        if steps != 640 {
            bad.push(format!("{name} steps {steps}"));
        }
    }
    let schedule = multi.schedule();
    let stock: Vec<f64> = schedule.iter().filter(|s| s.masks.stock == 1.0 && s.masks.housing == 0.0 && s.label != "housing_price").map(|s| s.supplies.stock).collect();
    if stock.len() != 10 || stock.iter().enumerate().any(|(k, s)| (s - (k + 1) as f64 / 10.0).abs() > 1e-15) {
        bad.push(format!("stock grid {stock:?}"));
    }
    let owned: Vec<f64> = schedule.iter().filter(|s| s.masks.housing == 1.0).map(|s| s.supplies.housing_owned).collect();
    if owned.len() != 20 || owned.iter().enumerate().any(|(j, s)| (s - (j + 1) as f64 / 20.0).abs() > 1e-15) {
        bad.push(format!("housing grid {owned:?}"));
    }
    if schedule.iter().any(|s| (s.supplies.housing_owned + s.supplies.housing_external - 1.0).abs() > 1e-15) {
        bad.push("owned plus external housing differs from 1".into());
    }
    if bad.is_empty() {
        Ok(format!("widths, 640 steps per episode and {} stage supplies match", schedule.len()))
    } else {
        Err(bad.join("; "))
    }
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_all_commands(dir.path(), &a);
    run_all_commands(dir.path(), &b);
    let (ta, tb) = (tree(&a), tree(&b));
    let differing: Vec<String> = ta
        .iter()
        .zip(&tb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    if ta.len() == tb.len() && differing.is_empty() {
        Ok(format!("{} files identical across two runs", ta.len()))
    } else {
        Err(format!("differing: {differing:?}"))
    }
}

fn main() {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("clearing exactness", clearing_exactness),
        ("projection matches oracle", oracle_equivalence),
        ("loss gradients match finite differences", gradient_fidelity),
        ("order-8 quadrature moments", quadrature_exactness),
        ("multi-asset loss nests the single-asset loss", nesting_identity),
        ("desk single-asset training progress", training_progress),
        ("desk homotopy stability", homotopy_stability),
        ("shipped configuration counts", configuration_fidelity),
        ("deterministic runs", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match result {
            Ok(msg) => println!("PASS {id} {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {id} {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
