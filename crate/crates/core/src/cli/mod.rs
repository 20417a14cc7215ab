//! Command-line front end. Exit codes: 0 success, 2 configuration or usage,
//! 3 I/O or malformed files, 4 training failure, 5 evaluation failure.

mod config;

pub use config::{RunConfig, KEYS};

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::deeponet::DeepOnet;
use crate::error::Error;
use crate::fdm::solve_fdm;
use crate::gp::{SensorGrid, SourceFunction};
use crate::grid_csv;
use crate::pipeline::io::{check_compatible, load_checkpoint, load_dataset, save_checkpoint, save_dataset};
use crate::pipeline::{
    evaluate_on_grid, generate_dataset, sample_test_functions, train_with_callback, write_metrics_csv,
    FdmOracle, SolutionOperator,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_TRAIN: i32 = 4;
pub const EXIT_EVAL: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "pideeponet", version, about = "Physics-informed DeepONet for nonlinear diffusion")]
pub struct Cli {
    /// Flat key = value configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the dataset seed from the configuration.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Suppress progress output on stdout.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample source functions and collocation points into a dataset file.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a dataset; writes a checkpoint and a metrics CSV.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Compare a checkpoint against the finite-difference solver on held-out sources.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the finite-difference solver against itself instead of a checkpoint.
        #[arg(long)]
        self_test: bool,
    },
    /// Write source, network and reference fields of one dataset function as CSV grids.
    ExportFields {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        prefix: Option<PathBuf>,
    },
    /// Solve one source with the finite-difference solver and write its node grid.
    SolveFdm {
        /// Take the source from this dataset; otherwise a held-out source is sampled.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    /// Configuration, shape and file errors keep their own codes; anything
    /// else gets `fallback`.
    fn from_error(e: Error, fallback: i32) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Shape { .. } | Error::Contract(_) => EXIT_CONFIG,
            Error::Io(_) | Error::Parse { .. } | Error::Version { .. } => EXIT_IO,
            _ => fallback,
        };
        Self::new(code, e.to_string())
    }

    fn io(path: &Path, e: Error) -> Self {
        let mut f = Self::from_error(e, EXIT_IO);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    run(cli)
}

pub fn run(cli: Cli) -> i32 {
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn load_config(cli: &Cli) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(_) => Failure::io(p, e),
            other => Failure::from_error(other, EXIT_CONFIG),
        })?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    let say = |s: String| {
        if !cli.quiet {
            println!("{s}");
        }
    };
    match &cli.command {
        Command::GenData { out } => gen_data(&cfg, out.as_deref().unwrap_or(&cfg.dataset_path), say),
        Command::Train { dataset, out, metrics } => train(
            &cfg,
            dataset.as_deref().unwrap_or(&cfg.dataset_path),
            out.as_deref().unwrap_or(&cfg.checkpoint_path),
            metrics.as_deref().unwrap_or(&cfg.metrics_path),
            say,
        ),
        Command::Eval {
            checkpoint,
            n_test,
            out,
            self_test,
        } => eval(
            &cfg,
            (!*self_test).then(|| checkpoint.as_deref().unwrap_or(&cfg.checkpoint_path)),
            n_test.unwrap_or(cfg.n_test),
            out.as_deref().unwrap_or(&cfg.report_path),
            say,
        ),
        Command::ExportFields {
            checkpoint,
            dataset,
            index,
            prefix,
        } => export_fields(
            &cfg,
            checkpoint.as_deref().unwrap_or(&cfg.checkpoint_path),
            dataset.as_deref().unwrap_or(&cfg.dataset_path),
            *index,
            prefix.as_deref().unwrap_or(&cfg.fields_prefix),
            say,
        ),
        Command::SolveFdm { dataset, index, out } => solve_fdm_cmd(
            &cfg,
            dataset.as_deref(),
            *index,
            out.as_deref().unwrap_or(&cfg.fdm_path),
            say,
        ),
    }
}

fn gen_data(cfg: &RunConfig, out: &Path, say: impl Fn(String)) -> Outcome {
    let data = generate_dataset(&cfg.train, &cfg.gp, cfg.domain).map_err(|e| Failure::from_error(e, EXIT_CONFIG))?;
    save_dataset(&data, out).map_err(|e| Failure::io(out, e))?;
    let t = &cfg.train;
    say(format!(
        "wrote {}: N={} m={} P={} Q={} seed={}",
        out.display(),
        data.len(),
        data.sensors(),
        t.boundary_points,
        t.interior_points,
        data.seed
    ));
    Ok(())
}

fn train(cfg: &RunConfig, dataset: &Path, out: &Path, metrics: &Path, say: impl Fn(String)) -> Outcome {
    let data = load_dataset(dataset).map_err(|e| Failure::io(dataset, e))?;
    let model = cfg
        .train
        .init_model(data.domain)
        .map_err(|e| Failure::from_error(e, EXIT_CONFIG))?;
    check_compatible(&model, &data).map_err(|e| Failure::from_error(e, EXIT_CONFIG))?;
    let result = train_with_callback(model, &data, &cfg.train, cfg.diffusion, |r| {
        say(format!(
            "iteration {:>6}  total_loss {:.6e}  physics {:.6e}  operator {:.6e}",
            r.iteration, r.total_loss, r.physics_loss, r.operator_loss
        ))
    });
    match result {
        Ok((model, history)) => {
            save_checkpoint(&model, &history, out).map_err(|e| Failure::io(out, e))?;
            write_metrics_csv(&history, metrics).map_err(|e| Failure::io(metrics, e))?;
            say(format!("wrote {} and {}", out.display(), metrics.display()));
            Ok(())
        }
        Err(fail) => {
            if !matches!(fail.error, Error::PoisonedGradient { .. }) {
                return Err(Failure::from_error(fail.error, EXIT_TRAIN));
            }
            save_checkpoint(&fail.last_good, &fail.history, out).map_err(|e| Failure::io(out, e))?;
            write_metrics_csv(&fail.history, metrics).map_err(|e| Failure::io(metrics, e))?;
            Err(Failure::new(
                EXIT_TRAIN,
                format!("{}; last good state written to {}", fail.error, out.display()),
            ))
        }
    }
}

fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, n_test: usize, out: &Path, say: impl Fn(String)) -> Outcome {
    let oracle = FdmOracle {
        domain: cfg.domain,
        config: cfg.fdm.clone(),
        alpha: cfg.diffusion,
    };
    let loaded: Option<DeepOnet> = match checkpoint {
        Some(p) => Some(load_checkpoint(p).map_err(|e| Failure::io(p, e))?.0),
        None => None,
    };
    let (model, domain, sensors): (&dyn SolutionOperator, _, _) = match &loaded {
        Some(m) => (m, m.domain, m.sensors()),
        None => (&oracle, cfg.domain, cfg.train.sensors),
    };
    let grid = Arc::new(
        SensorGrid::uniform(sensors, domain.half_width).map_err(|e| Failure::from_error(e, EXIT_CONFIG))?,
    );
    let tests = sample_test_functions(&cfg.gp, grid, cfg.train.seed, n_test)
        .map_err(|e| Failure::from_error(e, EXIT_EVAL))?;
    let report = evaluate_on_grid(model, &tests, &domain, &cfg.fdm, cfg.diffusion, cfg.eval_grid)
        .map_err(|e| Failure::from_error(e, EXIT_EVAL))?;
    report.write_csv(out).map_err(|e| Failure::io(out, e))?;
    if report.all_failed() {
        return Err(Failure::new(
            EXIT_EVAL,
            format!("all {} finite-difference solves failed; report written to {}", n_test, out.display()),
        ));
    }
    match (report.mean_relative_l2(), report.median_relative_l2()) {
        (Some(mean), Some(median)) => say(format!(
            "scored {} of {} functions: mean relative L2 {:.6e}, median {:.6e}",
            n_test - report.failures(),
            n_test,
            mean,
            median
        )),
        _ => say("no test functions scored".to_string()),
    }
    Ok(())
}

fn export_fields(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: &Path,
    index: usize,
    prefix: &Path,
    say: impl Fn(String),
) -> Outcome {
    let data = load_dataset(dataset).map_err(|e| Failure::io(dataset, e))?;
    let (model, _) = load_checkpoint(checkpoint).map_err(|e| Failure::io(checkpoint, e))?;
    check_compatible(&model, &data).map_err(|e| Failure::from_error(e, EXIT_CONFIG))?;
    let Some(example) = data.examples.get(index) else {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("function index {index} out of range (dataset has {})", data.len()),
        ));
    };
    let g = &example.source;
    let taus = data.domain.tau_grid(cfg.eval_grid);
    let xs = data.domain.x_grid(cfg.eval_grid);
    let g_row = xs.iter().map(|&x| g.eval(x)).collect::<crate::Result<Vec<_>>>();
    let g_row = g_row.map_err(|e| Failure::from_error(e, EXIT_EVAL))?;
    let g_grid = ndarray::Array2::from_shape_fn((taus.len(), xs.len()), |(_, j)| g_row[j]);
    let nn = model
        .operator_eval_grid(g, &taus, &xs)
        .map_err(|e| Failure::from_error(e, EXIT_EVAL))?;
    let fdm = solve_fdm(g, &data.domain, &cfg.fdm, cfg.diffusion)
        .and_then(|s| s.interpolate_grid(&taus, &xs))
        .map_err(|e| Failure::from_error(e, EXIT_EVAL))?;
    let files = [
        (suffixed(prefix, "_g.csv"), taus.clone(), xs.clone(), g_grid),
        (suffixed(prefix, "_nn.csv"), taus.clone(), xs.clone(), nn),
        (suffixed(prefix, "_fdm.csv"), taus, xs, fdm),
    ];
    for (path, t, x, v) in &files {
        grid_csv::write(path, t, x, v).map_err(|e| Failure::io(path, e))?;
    }
    say(format!(
        "wrote {}",
        files.iter().map(|f| f.0.display().to_string()).collect::<Vec<_>>().join(", ")
    ));
    Ok(())
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn solve_fdm_cmd(cfg: &RunConfig, dataset: Option<&Path>, index: usize, out: &Path, say: impl Fn(String)) -> Outcome {
    let (g, domain): (SourceFunction, _) = match dataset {
        Some(p) => {
            let data = load_dataset(p).map_err(|e| Failure::io(p, e))?;
            let Some(ex) = data.examples.get(index) else {
                return Err(Failure::new(
                    EXIT_CONFIG,
                    format!("function index {index} out of range (dataset has {})", data.len()),
                ));
            };
            (ex.source.clone(), data.domain)
        }
        None => {
            let grid = Arc::new(
                SensorGrid::uniform(cfg.train.sensors, cfg.domain.half_width)
                    .map_err(|e| Failure::from_error(e, EXIT_CONFIG))?,
            );
            let mut sampled = sample_test_functions(&cfg.gp, grid, cfg.train.seed, index + 1)
                .map_err(|e| Failure::from_error(e, EXIT_EVAL))?;
            (sampled.pop().expect("index + 1 samples"), cfg.domain)
        }
    };
    let sol = solve_fdm(&g, &domain, &cfg.fdm, cfg.diffusion).map_err(|e| Failure::from_error(e, EXIT_EVAL))?;
    sol.write_csv(out).map_err(|e| Failure::io(out, e))?;
    say(format!(
        "wrote {} ({} x {} nodes, {} retried steps)",
        out.display(),
        sol.values.nrows(),
        sol.values.ncols(),
        sol.retried_steps.len()
    ));
    Ok(())
}
