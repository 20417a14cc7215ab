//! Dataset assembly, training, evaluation against the finite-difference
//! reference, and on-disk formats.

mod evaluate;
pub mod io;
mod train;

pub use evaluate::{
    evaluate, evaluate_on_grid, grid_errors, write_metrics_csv, ErrorReport, FdmOracle, FunctionError,
    SolutionOperator, ZeroOperator, EVAL_GRID,
};
pub use train::{train, train_with_callback, MetricHistory, MetricRecord, TrainFailure};

use std::sync::Arc;

use crate::deeponet::{DeepOnet, DeepOnetConfig, Domain};
use crate::error::{Error, Result};
use crate::gp::{GpConfig, GpSampler, SensorGrid, SourceFunction};
use crate::nnet::Activation;
use crate::physics::{CollocationSet, StencilConfig, TrainingExample};

/// Collocation points use a different key than the GP draws of the same seed.
const COLLOCATION_SALT: u64 = 0xC011_0CA7_1011_5A17;
/// Held-out functions are drawn from streams starting here; training uses
/// streams `0..N`.
pub const TEST_STREAM_OFFSET: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// N
    pub functions: usize,
    /// m
    pub sensors: usize,
    /// P
    pub boundary_points: usize,
    /// Q
    pub interior_points: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    /// Drives dataset sampling and collocation.
    pub seed: u64,
    /// Drives network initialization.
    pub init_seed: u64,
    pub activation: Activation,
    /// q
    pub embedding_dim: usize,
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    /// c
    pub output_scale: f64,
    /// Defaults to one hundredth of the domain extents when `None`.
    pub stencil: Option<StencilConfig>,
    /// Functions per optimizer step; `None` means the whole dataset.
    pub functions_per_batch: Option<usize>,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            functions: 500,
            sensors: 100,
            boundary_points: 100,
            interior_points: 100,
            iterations: 10_000,
            learning_rate: 1e-3,
            seed: 0,
            init_seed: 1,
            activation: Activation::Relu,
            embedding_dim: 64,
            branch_hidden: vec![64, 64],
            trunk_hidden: vec![64, 64],
            output_scale: 1.0,
            stencil: None,
            functions_per_batch: None,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("functions", self.functions),
            ("sensors", self.sensors),
            ("boundary_points", self.boundary_points),
            ("interior_points", self.interior_points),
            ("embedding_dim", self.embedding_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.sensors < 2 {
            return Err(Error::Config("at least two sensors are needed".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        if let Some(b) = self.functions_per_batch {
            if b == 0 {
                return Err(Error::Config("functions_per_batch must be positive".into()));
            }
        }
        if self.branch_hidden.contains(&0) || self.trunk_hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn stencil_for(&self, domain: &Domain) -> StencilConfig {
        self.stencil.unwrap_or_else(|| StencilConfig::for_domain(domain))
    }

    pub fn model_config(&self) -> DeepOnetConfig {
        DeepOnetConfig {
            sensors: self.sensors,
            embedding_dim: self.embedding_dim,
            branch_hidden: self.branch_hidden.clone(),
            trunk_hidden: self.trunk_hidden.clone(),
            activation: self.activation,
            output_scale: self.output_scale,
            seed: self.init_seed,
        }
    }

    pub fn init_model(&self, domain: Domain) -> Result<DeepOnet> {
        DeepOnet::new(&self.model_config(), domain)
    }
}

/// N source functions with their collocation sets on a shared sensor grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: Arc<SensorGrid>,
    pub examples: Vec<TrainingExample>,
    pub seed: u64,
    pub domain: Domain,
    pub stencil: StencilConfig,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn sensors(&self) -> usize {
        self.grid.len()
    }

    /// Checks the margin and boundary invariants of every collocation set.
    pub fn validate(&self) -> Result<()> {
        self.stencil.validate(&self.domain)?;
        if self.grid.half_width() != self.domain.half_width {
            return Err(Error::Contract("sensor grid does not span the domain".into()));
        }
        for ex in &self.examples {
            if ex.source.grid().as_ref() != self.grid.as_ref() {
                return Err(Error::Contract("source on a foreign sensor grid".into()));
            }
            ex.points.validate(&self.domain, &self.stencil)?;
        }
        Ok(())
    }
}

pub fn generate_dataset(cfg: &TrainConfig, gp: &GpConfig, domain: Domain) -> Result<Dataset> {
    cfg.validate()?;
    let stencil = cfg.stencil_for(&domain);
    stencil.validate(&domain)?;
    let grid = Arc::new(SensorGrid::uniform(cfg.sensors, domain.half_width)?);
    let sampler = GpSampler::new(Arc::clone(&grid), gp)?;
    let examples = (0..cfg.functions as u64)
        .map(|i| {
            Ok(TrainingExample {
                source: sampler.sample(cfg.seed, i)?,
                points: CollocationSet::sample(
                    &domain,
                    &stencil,
                    cfg.interior_points,
                    cfg.boundary_points,
                    cfg.seed ^ COLLOCATION_SALT,
                    i,
                ),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        grid,
        examples,
        seed: cfg.seed,
        domain,
        stencil,
    })
}

/// Held-out sources from the same GP on streams disjoint from training.
pub fn sample_test_functions(
    gp: &GpConfig,
    grid: Arc<SensorGrid>,
    seed: u64,
    count: usize,
) -> Result<Vec<SourceFunction>> {
    let sampler = GpSampler::new(grid, gp)?;
    (0..count as u64)
        .map(|k| sampler.sample(seed, TEST_STREAM_OFFSET + k))
        .collect()
}
