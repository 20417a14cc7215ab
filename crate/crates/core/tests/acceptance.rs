//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 1 2 5`.

use std::f64::consts::PI;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pideeponet::deeponet::{DeepOnet, DeepOnetConfig, Domain};
use pideeponet::fdm::{solve_fdm, solve_fdm_forced, FdmConfig, FdmSolution};
use pideeponet::gp::{cholesky_jittered, kernel_matrix, GpConfig, GpSampler, SensorGrid, SourceFunction};
use pideeponet::nnet::{Activation, MlpParams};
use pideeponet::physics::{
    loss_gradient, operator_loss, physics_loss, residual, total_loss, CollocationSet, DiffusionFunction,
    StencilConfig, TrainingExample,
};
use pideeponet::pipeline::{
    evaluate, generate_dataset, sample_test_functions, train_with_callback, TrainConfig,
};

// Tolerances and thresholds.
const GRAD_FD_STEP: f64 = 1e-5;
const GRAD_MAX_REL: f64 = 1e-4;
/// Denominator floor for the per-entry figure that is reported alongside.
const GRAD_REL_FLOOR: f64 = 1e-6;
const FDM_DT_ORDER: f64 = 0.9;
const FDM_DX_ORDER: f64 = 1.9;
const LINEAR_MAX_ERR: f64 = 1e-3;
const GP_SAMPLES: usize = 2000;
const GP_COV_TOL: f64 = 0.1;
const GP_RECON_TOL: f64 = 1e-8;
const STENCIL_ERR: f64 = 1e-3;
const STENCIL_ORDER: f64 = 1.9;
const E2E_LOSS_DROP: f64 = 10.0;
const E2E_MEAN_L2: f64 = 0.10;
const E2E_TEST_FUNCTIONS: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, fn() -> Outcome); 8] = [
        (1, "gradient exactness", gradient_exactness),
        (2, "FDM manufactured-solution convergence", fdm_convergence),
        (3, "linear-case oracle agreement", linear_oracle),
        (4, "GP statistical fidelity", gp_fidelity),
        (5, "stencil residual consistency", stencil_consistency),
        (7, "determinism", determinism),
        (8, "zero fixed point", zero_fixed_point),
        (6, "end-to-end operator learning at reference scale", end_to_end),
    ];
    let mut failed = Vec::new();
    for (id, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "[{status}] criterion {id} ({name}): {} [{:.1}s]",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn observed_order(coarse_err: f64, fine_err: f64, refinement: f64) -> f64 {
    (coarse_err / fine_err).ln() / refinement.ln()
}

// 1 -------------------------------------------------------------------------

fn gradient_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut worst_model = 0;
    let mut worst_entry = 0.0f64;
    let mut checked = 0usize;
    for trial in 0..20 {
        let m = rng.gen_range(2..=10);
        let q = rng.gen_range(1..=8);
        let width = |rng: &mut ChaCha8Rng| rng.gen_range(1..=16);
        let branch_hidden: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| width(&mut rng)).collect();
        let trunk_hidden: Vec<usize> = (0..rng.gen_range(1..=2)).map(|_| width(&mut rng)).collect();
        let mut model = DeepOnet::new(
            &DeepOnetConfig {
                sensors: m,
                embedding_dim: q,
                branch_hidden,
                trunk_hidden,
                activation: Activation::Tanh,
                output_scale: 1.0,
                seed: rng.gen(),
            },
            Domain::unit(),
        )
        .unwrap();
        model.output_bias = rng.gen_range(-0.5..0.5);
        let cfg = TrainConfig {
            functions: rng.gen_range(1..=3),
            sensors: m,
            boundary_points: rng.gen_range(1..=6),
            interior_points: rng.gen_range(1..=6),
            seed: rng.gen(),
            ..TrainConfig::default()
        };
        let data = generate_dataset(&cfg, &GpConfig::default(), Domain::unit()).unwrap();
        let alpha = DiffusionFunction::Quadratic;
        let (_, grad) = loss_gradient(&model, &data.examples, alpha, &data.stencil).unwrap();
        let analytic = grad.to_flat();
        let base = model.to_flat();
        let mut probe = model.clone();
        let mut loss_at = |flat: &[f64]| {
            probe.set_flat(flat).unwrap();
            total_loss(&probe, &data.examples, alpha, &data.stencil).unwrap().total
        };
        let fd: Vec<f64> = (0..base.len())
            .map(|k| {
                let mut plus = base.clone();
                plus[k] += GRAD_FD_STEP;
                let mut minus = base.clone();
                minus[k] -= GRAD_FD_STEP;
                (loss_at(&plus) - loss_at(&minus)) / (2.0 * GRAD_FD_STEP)
            })
            .collect();
        let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let diff = fd.iter().zip(&analytic).fold(0.0f64, |a, (f, g)| a.max((f - g).abs()));
        let rel = diff / scale.max(f64::MIN_POSITIVE);
        if rel > worst {
            worst = rel;
            worst_model = trial;
        }
        for (f, g) in fd.iter().zip(&analytic) {
            worst_entry = worst_entry.max((f - g).abs() / f.abs().max(g.abs()).max(GRAD_REL_FLOOR));
        }
        checked += base.len();
    }
    outcome(
        worst < GRAD_MAX_REL,
        format!(
            "20 tanh models, {checked} parameters, FD step {GRAD_FD_STEP:e}: max relative error {worst:.3e} (model {worst_model}; max|analytic - fd| / max|fd|), limit {GRAD_MAX_REL:e}; worst single entry {worst_entry:.3e} relative to max(|analytic|, |fd|, {GRAD_REL_FLOOR:e})"
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn max_error(sol: &FdmSolution, exact: impl Fn(f64, f64) -> f64) -> f64 {
    let (taus, xs) = (sol.tau_nodes(), sol.x_nodes());
    let mut err = 0.0f64;
    for (n, &t) in taus.iter().enumerate() {
        for (j, &x) in xs.iter().enumerate() {
            err = err.max((sol.values[[n, j]] - exact(t, x)).abs());
        }
    }
    err
}

fn fdm_convergence() -> Outcome {
    let domain = Domain::unit();
    let alpha = DiffusionFunction::Quadratic;
    let c = |x: f64| (PI * x / 2.0).cos();
    let phi = |t: f64, x: f64| t * c(x);
    let forcing = |t: f64, x: f64| c(x) + PI * PI / 2.0 * t * t * (PI * x).cos();
    let run = |cells: usize, nt: usize| {
        let cfg = FdmConfig { nx: cells - 1, nt, ..FdmConfig::default() };
        solve_fdm_forced(forcing, &domain, &cfg, alpha).map(|s| max_error(&s, phi))
    };
    // The manufactured field is linear in τ, which backward Euler integrates
    // exactly, so the joint refinement dt ∝ dx² carries both orders.
    let (Ok(e_coarse), Ok(e_fine)) = (run(20, 10), run(200, 1000)) else {
        return outcome(false, "solver failed on the manufactured problem".into());
    };
    let dx_order = observed_order(e_coarse, e_fine, 10.0);
    let dt_order = observed_order(e_coarse, e_fine, 100.0);
    // Time refinement alone at fixed fine dx: the error is flat.
    let (Ok(t_coarse), Ok(t_fine)) = (run(200, 40), run(200, 400)) else {
        return outcome(false, "solver failed on the manufactured problem".into());
    };
    // A field that is not linear in τ isolates the temporal order.
    let psi = |t: f64, x: f64| t.sin() * c(x);
    let psi_forcing = |t: f64, x: f64| t.cos() * c(x) + PI * PI / 2.0 * t.sin().powi(2) * (PI * x).cos();
    let run_psi = |nt: usize| {
        let cfg = FdmConfig { nx: 199, nt, ..FdmConfig::default() };
        solve_fdm_forced(psi_forcing, &domain, &cfg, alpha).map(|s| max_error(&s, psi))
    };
    let (Ok(p_coarse), Ok(p_fine)) = (run_psi(40), run_psi(400)) else {
        return outcome(false, "solver failed on the time-dependent manufactured problem".into());
    };
    let psi_dt_order = observed_order(p_coarse, p_fine, 10.0);
    let pass = dx_order >= FDM_DX_ORDER && dt_order >= FDM_DT_ORDER && psi_dt_order >= FDM_DT_ORDER;
    outcome(
        pass,
        format!(
            "tau*cos(pi x/2): errors {e_coarse:.3e} -> {e_fine:.3e} for (dx, dt) / (10, 100), dx order {dx_order:.3} (>= {FDM_DX_ORDER}), dt order {dt_order:.3} (>= {FDM_DT_ORDER}); tau*cos(pi x/2) dt-only refinement {t_coarse:.3e} -> {t_fine:.3e}; sin(tau)*cos(pi x/2) at nx = 199, nt 40 -> 400: {p_coarse:.3e} -> {p_fine:.3e}, dt order {psi_dt_order:.3}"
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn linear_oracle() -> Outcome {
    let domain = Domain::unit();
    let grid = Arc::new(SensorGrid::uniform(100, 1.0).unwrap());
    let mode = |x: f64| (PI * (x + 1.0) / 2.0).sin();
    let g = SourceFunction::from_fn(grid, mode).unwrap();
    let sol = match solve_fdm(&g, &domain, &FdmConfig::default(), DiffusionFunction::Identity) {
        Ok(s) => s,
        Err(e) => return outcome(false, format!("solver failed: {e}")),
    };
    // φ_τ = φ_xx + sin(k(x+1)), φ(0) = 0  =>  φ = (1 - e^{-k²τ}) / k² · sin(k(x+1)).
    let lambda = PI * PI / 4.0;
    let err = max_error(&sol, |t, x| (1.0 - (-lambda * t).exp()) / lambda * mode(x));
    outcome(
        err < LINEAR_MAX_ERR,
        format!("max-norm error {err:.3e} at nx = 199, nt = 200 (limit {LINEAR_MAX_ERR:e})"),
    )
}

// 4 -------------------------------------------------------------------------

fn gp_fidelity() -> Outcome {
    let cfg = GpConfig::default();
    let grid = Arc::new(SensorGrid::uniform(20, 1.0).unwrap());
    let sampler = GpSampler::new(Arc::clone(&grid), &cfg).unwrap();
    let m = grid.len();
    let mut sum = vec![0.0; m];
    let mut cross = Array2::<f64>::zeros((m, m));
    for s in 0..GP_SAMPLES as u64 {
        let v = sampler.sample(77, s).unwrap();
        let v = v.sensor_values();
        for i in 0..m {
            sum[i] += v[i];
            for j in 0..m {
                cross[[i, j]] += v[i] * v[j];
            }
        }
    }
    let n = GP_SAMPLES as f64;
    let positions = grid.positions();
    let mut cov_err = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let emp = (cross[[i, j]] - sum[i] * sum[j] / n) / (n - 1.0);
            let d = positions[i] - positions[j];
            let k = cfg.variance * (-d * d / (2.0 * cfg.length_scale * cfg.length_scale)).exp();
            cov_err = cov_err.max((emp - k).abs());
        }
    }
    let kmat = kernel_matrix(&grid, &cfg);
    let f = cholesky_jittered(&kmat, &cfg).unwrap();
    let rebuilt = f.lower.dot(&f.lower.t());
    let mut recon = 0.0f64;
    for i in 0..m {
        for j in 0..m {
            let target = kmat[[i, j]] + if i == j { f.jitter } else { 0.0 };
            recon = recon.max((rebuilt[[i, j]] - target).abs());
        }
    }
    outcome(
        cov_err < GP_COV_TOL && recon < GP_RECON_TOL,
        format!(
            "{GP_SAMPLES} samples at m = 20: max covariance deviation {cov_err:.3e} (limit {GP_COV_TOL}), Cholesky reconstruction error {recon:.3e} with jitter {:e} (limit {GP_RECON_TOL:e})",
            f.jitter
        ),
    )
}

// 5 -------------------------------------------------------------------------

fn stencil_consistency() -> Outcome {
    let domain = Domain::unit();
    struct Case {
        name: &'static str,
        alpha: DiffusionFunction,
        field: fn(f64, f64) -> f64,
        symbolic: fn(f64, f64) -> f64,
    }
    let cases = [
        Case {
            name: "tau*cos(pi x/2), u^2",
            alpha: DiffusionFunction::Quadratic,
            field: |t, x| t * (PI * x / 2.0).cos(),
            symbolic: |t, x| (PI * x / 2.0).cos() + PI * PI / 2.0 * t * t * (PI * x).cos(),
        },
        Case {
            name: "sin(tau)*exp(x), u^2",
            alpha: DiffusionFunction::Quadratic,
            field: |t, x| t.sin() * x.exp(),
            symbolic: |t, x| t.cos() * x.exp() - 4.0 * t.sin().powi(2) * (2.0 * x).exp(),
        },
        Case {
            name: "exp(-tau)*sin(2x), identity",
            alpha: DiffusionFunction::Identity,
            field: |t, x| (-t).exp() * (2.0 * x).sin(),
            symbolic: |t, x| 3.0 * (-t).exp() * (2.0 * x).sin(),
        },
    ];
    let points = [(0.3, -0.4), (0.5, 0.1), (0.7, 0.6), (0.45, -0.05)];
    let err_at = |c: &Case, h: f64| {
        let st = StencilConfig::uniform(h);
        points
            .iter()
            .map(|&(t, x)| {
                let r = residual(&c.field, pideeponet::deeponet::QueryPoint::new(t, x), c.alpha, &st, &domain).unwrap();
                (r - (c.symbolic)(t, x)).abs()
            })
            .fold(0.0f64, f64::max)
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for c in &cases {
        let e_fine = err_at(c, 1e-3);
        let order = observed_order(err_at(c, 1e-1), err_at(c, 1e-2), 10.0);
        pass &= e_fine <= STENCIL_ERR && order >= STENCIL_ORDER;
        parts.push(format!("{}: error {e_fine:.2e} at h = 1e-3, order {order:.3}", c.name));
    }
    outcome(
        pass,
        format!("{} (limits {STENCIL_ERR:e}, order >= {STENCIL_ORDER})", parts.join("; ")),
    )
}

// 6 -------------------------------------------------------------------------

fn end_to_end() -> Outcome {
    let domain = Domain::unit();
    let cfg = TrainConfig::default();
    let gp = GpConfig::default();
    let alpha = DiffusionFunction::Quadratic;
    let data = generate_dataset(&cfg, &gp, domain).unwrap();
    let model = cfg.init_model(domain).unwrap();
    let quiet = std::env::var_os("PIDEEPONET_QUIET").is_some();
    let trained = train_with_callback(model, &data, &cfg, alpha, |r| {
        if !quiet && r.iteration % 1000 == 0 {
            eprintln!("  [6] iteration {:>5}  total loss {:.4e}  ({:.0}s)", r.iteration, r.total_loss, r.seconds);
        }
    });
    let (model, history) = match trained {
        Ok(t) => t,
        Err(f) => return outcome(false, format!("training failed: {}", f.error)),
    };
    let first = history.first().unwrap().total_loss;
    let last = history.last().unwrap().total_loss;
    let drop = first / last;
    let tests = sample_test_functions(&gp, Arc::clone(&data.grid), cfg.seed, E2E_TEST_FUNCTIONS).unwrap();
    let report = evaluate(&model, &tests, &domain, &FdmConfig::default(), alpha).unwrap();
    let scored = E2E_TEST_FUNCTIONS - report.failures();
    let mean = report.mean_relative_l2();
    let l2_text = match mean {
        Some(m) => format!(
            "mean relative L2 {m:.4} over {scored} scored functions (median {:.4}, limit {E2E_MEAN_L2})",
            report.median_relative_l2().unwrap()
        ),
        None => format!(
            "no relative L2 available: the reference solver failed on all {E2E_TEST_FUNCTIONS} held-out sources"
        ),
    };
    let pass = drop >= E2E_LOSS_DROP && scored == E2E_TEST_FUNCTIONS && mean.is_some_and(|m| m < E2E_MEAN_L2);
    outcome(
        pass,
        format!(
            "10000 iterations, total loss {first:.4e} -> {last:.4e} (drop {drop:.3e}x, need {E2E_LOSS_DROP}x); {l2_text}"
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = "functions = 20\niterations = 300\nlog_every = 10\n";
    std::fs::write(dir.path().join("run.cfg"), config).unwrap();
    let bin = env!("CARGO_BIN_EXE_pideeponet");
    let run = |args: &[&str]| {
        let o = Command::new(bin)
            .current_dir(dir.path())
            .args(["--config", "run.cfg", "--quiet"])
            .args(args)
            .output()
            .unwrap();
        o.status.success()
    };
    let ok = run(&["gen-data", "--out", "a.bin"])
        && run(&["gen-data", "--out", "b.bin"])
        && run(&["train", "--dataset", "a.bin", "--out", "a.ckpt", "--metrics", "a.csv"])
        && run(&["train", "--dataset", "b.bin", "--out", "b.ckpt", "--metrics", "b.csv"]);
    if !ok {
        return outcome(false, "a CLI invocation failed".into());
    }
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    let same_data = read("a.bin") == read("b.bin");
    let losses = |f: &str| -> Vec<String> {
        String::from_utf8(read(f))
            .unwrap()
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    let (la, lb) = (losses("a.csv"), losses("b.csv"));
    let same_losses = la == lb;
    let (ma, ha) = pideeponet::pipeline::io::load_checkpoint(&dir.path().join("a.ckpt")).unwrap();
    let (mb, hb) = pideeponet::pipeline::io::load_checkpoint(&dir.path().join("b.ckpt")).unwrap();
    let same_model = ma == mb && ha.same_losses(&hb);
    outcome(
        same_data && same_losses && same_model,
        format!(
            "N = 20, default network, 300 iterations: dataset files identical: {same_data} ({} bytes); {} logged loss rows identical: {same_losses}; final parameters identical: {same_model}",
            read("a.bin").len(),
            la.len() - 1
        ),
    )
}

// 8 -------------------------------------------------------------------------

fn zero_fixed_point() -> Outcome {
    let domain = Domain::unit();
    let grid = Arc::new(SensorGrid::uniform(100, 1.0).unwrap());
    let g = SourceFunction::new(Arc::clone(&grid), vec![0.0; 100]).unwrap();
    let alpha = DiffusionFunction::Quadratic;
    let fdm_zero = solve_fdm(&g, &domain, &FdmConfig::default(), alpha)
        .map(|s| s.values.iter().all(|&v| v == 0.0))
        .unwrap_or(false);
    let zeros = |sizes: &[usize]| MlpParams::zeros(sizes, Activation::Relu).unwrap();
    let model = DeepOnet::from_parts(zeros(&[100, 64, 64, 64]), zeros(&[2, 64, 64, 64]), 1.0, 0.0, domain).unwrap();
    let st = StencilConfig::for_domain(&domain);
    let examples: Vec<TrainingExample> = (0..5)
        .map(|i| TrainingExample {
            source: g.clone(),
            points: CollocationSet::sample(&domain, &st, 100, 100, 11, i),
        })
        .collect();
    let phys = physics_loss(&model, &examples, alpha, &st).unwrap();
    let op = operator_loss(&model, &examples).unwrap();
    outcome(
        fdm_zero && phys == 0.0 && op == 0.0,
        format!("FDM solution identically zero: {fdm_zero}; physics loss {phys:e}; operator loss {op:e}"),
    )
}
