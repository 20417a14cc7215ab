use std::sync::Arc;

use pideeponet::deeponet::{DeepOnet, Domain};
use pideeponet::fdm::FdmConfig;
use pideeponet::gp::GpConfig;
use pideeponet::nnet::Activation;
use pideeponet::physics::DiffusionFunction;
use pideeponet::pipeline::{
    evaluate_on_grid, generate_dataset, sample_test_functions, train, Dataset, TrainConfig,
};

fn tiny() -> TrainConfig {
    TrainConfig {
        functions: 4,
        sensors: 20,
        boundary_points: 8,
        interior_points: 8,
        iterations: 300,
        activation: Activation::Tanh,
        embedding_dim: 16,
        branch_hidden: vec![16],
        trunk_hidden: vec![16],
        log_every: 50,
        ..TrainConfig::default()
    }
}

fn trained(cfg: &TrainConfig, alpha: DiffusionFunction) -> (DeepOnet, Dataset, Vec<f64>) {
    let data = generate_dataset(cfg, &GpConfig::default(), Domain::unit()).unwrap();
    let model = cfg.init_model(data.domain).unwrap();
    let (model, history) = train(model, &data, cfg, alpha).unwrap();
    let losses = history.records.iter().map(|r| r.total_loss).collect();
    (model, data, losses)
}

#[test]
fn tiny_run_halves_the_loss() {
    let (_, _, losses) = trained(&tiny(), DiffusionFunction::Quadratic);
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn default_network_makes_steady_progress() {
    let cfg = TrainConfig {
        functions: 50,
        iterations: 500,
        log_every: 1,
        ..TrainConfig::default()
    };
    let (_, _, losses) = trained(&cfg, DiffusionFunction::Quadratic);
    assert_eq!(losses.len(), 501);
    let mut best = f64::INFINITY;
    let mut best_so_far = Vec::with_capacity(losses.len());
    for &l in &losses {
        assert!(l.is_finite());
        best = best.min(l);
        best_so_far.push(best);
    }
    for k in (100..=500).step_by(100) {
        assert!(best_so_far[k] < best_so_far[k - 100], "no progress by iteration {k}");
    }
}

#[test]
fn error_is_stable_under_grid_refinement() {
    let alpha = DiffusionFunction::Power(2.0);
    let (model, data, _) = trained(&tiny(), alpha);
    let tests = sample_test_functions(&GpConfig::default(), Arc::clone(&data.grid), 0, 3).unwrap();
    let fdm = FdmConfig { nx: 99, nt: 100, ..FdmConfig::default() };
    let coarse = evaluate_on_grid(&model, &tests, &data.domain, &fdm, alpha, 50).unwrap();
    let fine = evaluate_on_grid(&model, &tests, &data.domain, &fdm, alpha, 100).unwrap();
    let (a, b) = (coarse.mean_relative_l2().unwrap(), fine.mean_relative_l2().unwrap());
    assert!((a - b).abs() <= 0.1 * a, "{a} vs {b}");
}
