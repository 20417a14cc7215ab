//! Flat `key = value` run configuration. Lines starting with `#` and blank
//! lines are ignored, unknown keys are rejected, and absent keys keep their
//! defaults.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::deeponet::Domain;
use crate::error::{Error, Result};
use crate::fdm::FdmConfig;
use crate::gp::GpConfig;
use crate::physics::{DiffusionFunction, StencilConfig};
use crate::pipeline::{TrainConfig, EVAL_GRID};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub domain: Domain,
    pub gp: GpConfig,
    pub train: TrainConfig,
    pub fdm: FdmConfig,
    pub diffusion: DiffusionFunction,
    pub n_test: usize,
    pub eval_grid: usize,
    pub dataset_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub report_path: PathBuf,
    pub fields_prefix: PathBuf,
    pub fdm_path: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            domain: Domain::unit(),
            gp: GpConfig::default(),
            train: TrainConfig::default(),
            fdm: FdmConfig::default(),
            diffusion: DiffusionFunction::Quadratic,
            n_test: 10,
            eval_grid: EVAL_GRID,
            dataset_path: "dataset.bin".into(),
            checkpoint_path: "model.ckpt".into(),
            metrics_path: "metrics.csv".into(),
            report_path: "report.csv".into(),
            fields_prefix: "fields".into(),
            fdm_path: "fdm.csv".into(),
        }
    }
}

/// Every accepted key, in the order they are documented.
pub const KEYS: &[&str] = &[
    "horizon",
    "half_width",
    "variance",
    "length_scale",
    "jitter",
    "jitter_factor",
    "max_jitter",
    "functions",
    "sensors",
    "boundary_points",
    "interior_points",
    "iterations",
    "learning_rate",
    "seed",
    "init_seed",
    "activation",
    "embedding_dim",
    "branch_hidden",
    "trunk_hidden",
    "output_scale",
    "h_x",
    "h_tau",
    "functions_per_batch",
    "log_every",
    "nx",
    "nt",
    "newton_tol",
    "newton_max_iters",
    "diffusion",
    "n_test",
    "eval_grid",
    "dataset_path",
    "checkpoint_path",
    "metrics_path",
    "report_path",
    "fields_prefix",
    "fdm_path",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value '{value}' for {key}: {e}")))
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut h_x = None;
        let mut h_tau = None;
        let (mut horizon, mut half_width) = (cfg.domain.horizon, cfg.domain.half_width);
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got '{line}'",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("unknown key '{key}' on line {}", lineno + 1)));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate key '{key}' on line {}", lineno + 1)));
            }
            let t = &mut cfg.train;
            match key {
                "horizon" => horizon = parse(key, value)?,
                "half_width" => half_width = parse(key, value)?,
                "variance" => cfg.gp.variance = parse(key, value)?,
                "length_scale" => cfg.gp.length_scale = parse(key, value)?,
                "jitter" => cfg.gp.jitter = parse(key, value)?,
                "jitter_factor" => cfg.gp.jitter_factor = parse(key, value)?,
                "max_jitter" => cfg.gp.max_jitter = parse(key, value)?,
                "functions" => t.functions = parse(key, value)?,
                "sensors" => t.sensors = parse(key, value)?,
                "boundary_points" => t.boundary_points = parse(key, value)?,
                "interior_points" => t.interior_points = parse(key, value)?,
                "iterations" => t.iterations = parse(key, value)?,
                "learning_rate" => t.learning_rate = parse(key, value)?,
                "seed" => t.seed = parse(key, value)?,
                "init_seed" => t.init_seed = parse(key, value)?,
                "activation" => t.activation = parse(key, value)?,
                "embedding_dim" => t.embedding_dim = parse(key, value)?,
                "branch_hidden" => t.branch_hidden = parse_widths(key, value)?,
                "trunk_hidden" => t.trunk_hidden = parse_widths(key, value)?,
                "output_scale" => t.output_scale = parse(key, value)?,
                "h_x" => h_x = Some(parse(key, value)?),
                "h_tau" => h_tau = Some(parse(key, value)?),
                "functions_per_batch" => {
                    t.functions_per_batch = match value {
                        "all" => None,
                        v => Some(parse(key, v)?),
                    }
                }
                "log_every" => t.log_every = parse(key, value)?,
                "nx" => cfg.fdm.nx = parse(key, value)?,
                "nt" => cfg.fdm.nt = parse(key, value)?,
                "newton_tol" => cfg.fdm.newton_tol = parse(key, value)?,
                "newton_max_iters" => cfg.fdm.newton_max_iters = parse(key, value)?,
                "diffusion" => cfg.diffusion = parse(key, value)?,
                "n_test" => cfg.n_test = parse(key, value)?,
                "eval_grid" => cfg.eval_grid = parse(key, value)?,
                "dataset_path" => cfg.dataset_path = value.into(),
                "checkpoint_path" => cfg.checkpoint_path = value.into(),
                "metrics_path" => cfg.metrics_path = value.into(),
                "report_path" => cfg.report_path = value.into(),
                "fields_prefix" => cfg.fields_prefix = value.into(),
                "fdm_path" => cfg.fdm_path = value.into(),
                _ => unreachable!("key list and match arms agree"),
            }
        }
        cfg.domain = Domain::new(horizon, half_width)?;
        if h_x.is_some() || h_tau.is_some() {
            let d = StencilConfig::for_domain(&cfg.domain);
            cfg.train.stencil = Some(StencilConfig {
                h_x: h_x.unwrap_or(d.h_x),
                h_tau: h_tau.unwrap_or(d.h_tau),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.gp.validate()?;
        self.train.validate()?;
        self.train.stencil_for(&self.domain).validate(&self.domain)?;
        self.fdm.validate()?;
        self.diffusion.validate()?;
        if self.eval_grid < 2 {
            return Err(Error::Config("eval_grid must be at least 2".into()));
        }
        Ok(())
    }

    /// The configuration written back out with every key present.
    pub fn render(&self) -> String {
        let t = &self.train;
        let st = t.stencil_for(&self.domain);
        let join = |w: &[usize]| w.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        let lines = [
            ("horizon", self.domain.horizon.to_string()),
            ("half_width", self.domain.half_width.to_string()),
            ("variance", self.gp.variance.to_string()),
            ("length_scale", self.gp.length_scale.to_string()),
            ("jitter", self.gp.jitter.to_string()),
            ("jitter_factor", self.gp.jitter_factor.to_string()),
            ("max_jitter", self.gp.max_jitter.to_string()),
            ("functions", t.functions.to_string()),
            ("sensors", t.sensors.to_string()),
            ("boundary_points", t.boundary_points.to_string()),
            ("interior_points", t.interior_points.to_string()),
            ("iterations", t.iterations.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("seed", t.seed.to_string()),
            ("init_seed", t.init_seed.to_string()),
            ("activation", t.activation.name().to_string()),
            ("embedding_dim", t.embedding_dim.to_string()),
            ("branch_hidden", join(&t.branch_hidden)),
            ("trunk_hidden", join(&t.trunk_hidden)),
            ("output_scale", t.output_scale.to_string()),
            ("h_x", st.h_x.to_string()),
            ("h_tau", st.h_tau.to_string()),
            (
                "functions_per_batch",
                t.functions_per_batch.map_or("all".to_string(), |b| b.to_string()),
            ),
            ("log_every", t.log_every.to_string()),
            ("nx", self.fdm.nx.to_string()),
            ("nt", self.fdm.nt.to_string()),
            ("newton_tol", self.fdm.newton_tol.to_string()),
            ("newton_max_iters", self.fdm.newton_max_iters.to_string()),
            ("diffusion", self.diffusion.to_string()),
            ("n_test", self.n_test.to_string()),
            ("eval_grid", self.eval_grid.to_string()),
            ("dataset_path", self.dataset_path.display().to_string()),
            ("checkpoint_path", self.checkpoint_path.display().to_string()),
            ("metrics_path", self.metrics_path.display().to_string()),
            ("report_path", self.report_path.display().to_string()),
            ("fields_prefix", self.fields_prefix.display().to_string()),
            ("fdm_path", self.fdm_path.display().to_string()),
        ];
        lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
