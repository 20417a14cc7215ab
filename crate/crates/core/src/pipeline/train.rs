use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::deeponet::DeepOnet;
use crate::error::{Error, Result};
use crate::nnet::AdamState;
use crate::physics::{evaluate_prepared, DiffusionFunction, LossBreakdown, PreparedBatch};

use super::{Dataset, TrainConfig};

const BATCH_SALT: u64 = 0xBA7C_4E5D_0000_0001;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRecord {
    pub iteration: u64,
    pub physics_loss: f64,
    pub operator_loss: f64,
    pub total_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricHistory {
    pub records: Vec<MetricRecord>,
}

impl MetricHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first(&self) -> Option<&MetricRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    fn push(&mut self, iteration: u64, loss: LossBreakdown, seconds: f64) -> MetricRecord {
        let rec = MetricRecord {
            iteration,
            physics_loss: loss.physics,
            operator_loss: loss.operator,
            total_loss: loss.total,
            seconds,
        };
        self.records.push(rec);
        rec
    }

    /// Loss columns only; wall-clock time is excluded.
    pub fn same_losses(&self, other: &MetricHistory) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.iteration == b.iteration
                    && a.physics_loss.to_bits() == b.physics_loss.to_bits()
                    && a.operator_loss.to_bits() == b.operator_loss.to_bits()
                    && a.total_loss.to_bits() == b.total_loss.to_bits()
            })
    }
}

/// A training run that stopped on a poisoned gradient.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    /// Parameters before the failing step.
    pub last_good: DeepOnet,
    pub history: MetricHistory,
}

impl std::fmt::Display for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted: {}", self.error)
    }
}

impl std::error::Error for TrainFailure {}

impl From<Error> for Box<TrainFailure> {
    fn from(error: Error) -> Self {
        // Failures before the first step have no useful model; callers get
        // the error through `TrainFailure::error`.
        Box::new(TrainFailure {
            error,
            last_good: placeholder_model(),
            history: MetricHistory::default(),
        })
    }
}

fn placeholder_model() -> DeepOnet {
    use crate::nnet::{Activation, MlpParams};
    let net = MlpParams::zeros(&[2, 1], Activation::Relu).expect("valid sizes");
    DeepOnet::from_parts(net.clone(), net, 1.0, 0.0, crate::deeponet::Domain::unit())
        .expect("valid parts")
}

pub fn train(
    model: DeepOnet,
    dataset: &Dataset,
    cfg: &TrainConfig,
    alpha: DiffusionFunction,
) -> std::result::Result<(DeepOnet, MetricHistory), Box<TrainFailure>> {
    train_with_callback(model, dataset, cfg, alpha, |_| {})
}

/// Full-batch (or fixed-size subsampled) ADAM on the total loss. The loss is
/// logged every `log_every` iterations and after the last step; `on_log`
/// sees each record as it is produced.
pub fn train_with_callback<F>(
    mut model: DeepOnet,
    dataset: &Dataset,
    cfg: &TrainConfig,
    alpha: DiffusionFunction,
    mut on_log: F,
) -> std::result::Result<(DeepOnet, MetricHistory), Box<TrainFailure>>
where
    F: FnMut(&MetricRecord),
{
    cfg.validate()?;
    alpha.validate()?;
    check_model_matches(&model, dataset)?;
    let full = PreparedBatch::new(&model, &dataset.examples, &dataset.stencil)?;
    let batch_size = cfg
        .functions_per_batch
        .map(|b| b.min(full.len()))
        .unwrap_or(full.len());
    let subsample = batch_size < full.len();

    let mut adam = AdamState::new(model.num_params(), cfg.learning_rate);
    let mut flat = model.to_flat();
    let mut history = MetricHistory::default();
    let start = Instant::now();

    let fail = |error: Error, last_good: &DeepOnet, history: &MetricHistory| {
        Box::new(TrainFailure {
            error,
            last_good: last_good.clone(),
            history: history.clone(),
        })
    };
    let poisoned = |e: Error, it: u64| match e {
        Error::PoisonedGradient { function, .. } => Error::PoisonedGradient {
            iteration: it,
            function,
        },
        other => other,
    };

    for it in 0..=cfg.iterations {
        let log_now = it % cfg.log_every == 0 || it == cfg.iterations;
        if it == cfg.iterations {
            if log_now {
                let (loss, _) = evaluate_prepared(&model, &full, alpha, false)
                    .map_err(|e| fail(poisoned(e, it), &model, &history))?;
                let rec = history.push(it, loss, start.elapsed().as_secs_f64());
                on_log(&rec);
            }
            break;
        }
        let (loss, grad) = if subsample {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_SALT);
            rng.set_stream(it);
            let mut picked = sample(&mut rng, full.len(), batch_size).into_vec();
            picked.sort_unstable();
            let batch = full.select(&picked);
            let (_, grad) = evaluate_prepared(&model, &batch, alpha, true).map_err(|e| {
                let e = match e {
                    Error::PoisonedGradient { function, .. } => Error::PoisonedGradient {
                        iteration: it,
                        function: function.map(|f| picked[f]),
                    },
                    other => other,
                };
                fail(e, &model, &history)
            })?;
            let loss = if log_now {
                evaluate_prepared(&model, &full, alpha, false)
                    .map_err(|e| fail(poisoned(e, it), &model, &history))?
                    .0
            } else {
                LossBreakdown::default()
            };
            (loss, grad)
        } else {
            evaluate_prepared(&model, &full, alpha, true)
                .map_err(|e| fail(poisoned(e, it), &model, &history))?
        };
        if log_now {
            let rec = history.push(it, loss, start.elapsed().as_secs_f64());
            on_log(&rec);
        }
        let grad = grad.expect("gradient requested").to_flat();
        adam.step(&mut flat, &grad)
            .map_err(|e| fail(poisoned(e, it), &model, &history))?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(fail(
                Error::PoisonedGradient {
                    iteration: it,
                    function: None,
                },
                &model,
                &history,
            ));
        }
        model
            .set_flat(&flat)
            .map_err(|e| fail(e, &model, &history))?;
    }
    Ok((model, history))
}

pub(crate) fn check_model_matches(model: &DeepOnet, dataset: &Dataset) -> Result<()> {
    if model.sensors() != dataset.sensors() {
        return Err(Error::Shape {
            context: "model sensors vs dataset sensors",
            expected: dataset.sensors(),
            got: model.sensors(),
        });
    }
    if model.domain != dataset.domain {
        return Err(Error::Contract(format!(
            "model domain {:?} differs from dataset domain {:?}",
            model.domain, dataset.domain
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deeponet::Domain;
    use crate::gp::GpConfig;
    use crate::nnet::Activation;
    use crate::pipeline::generate_dataset;

    fn small() -> TrainConfig {
        TrainConfig {
            functions: 4,
            sensors: 12,
            boundary_points: 10,
            interior_points: 10,
            iterations: 250,
            activation: Activation::Tanh,
            embedding_dim: 8,
            branch_hidden: vec![16],
            trunk_hidden: vec![16],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_returns_model_unchanged() {
        let cfg = TrainConfig { iterations: 0, ..small() };
        let data = generate_dataset(&cfg, &GpConfig::default(), Domain::unit()).unwrap();
        let model = cfg.init_model(Domain::unit()).unwrap();
        let (trained, history) = train(model.clone(), &data, &cfg, DiffusionFunction::Quadratic).unwrap();
        assert_eq!(trained, model);
        assert_eq!(history.len(), 1);
        assert_eq!(history.records[0].iteration, 0);
    }

    #[test]
    fn logging_cadence() {
        let cfg = small();
        let data = generate_dataset(&cfg, &GpConfig::default(), Domain::unit()).unwrap();
        let model = cfg.init_model(Domain::unit()).unwrap();
        let mut seen = Vec::new();
        let (_, history) = train_with_callback(model, &data, &cfg, DiffusionFunction::Quadratic, |r| {
            seen.push(r.iteration)
        })
        .unwrap();
        let its: Vec<u64> = history.records.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 100, 200, 250]);
        assert_eq!(seen, its);
        assert!(history.records.iter().all(|r| r.total_loss >= 0.0));
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = TrainConfig { iterations: 120, log_every: 10, ..small() };
        let data = generate_dataset(&cfg, &GpConfig::default(), Domain::unit()).unwrap();
        let run = || {
            train(cfg.init_model(Domain::unit()).unwrap(), &data, &cfg, DiffusionFunction::Quadratic).unwrap()
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(m1, m2);
        assert!(h1.same_losses(&h2));
    }

    #[test]
    fn subsampled_batches_are_reproducible() {
        let cfg = TrainConfig {
            iterations: 30,
            log_every: 10,
            functions_per_batch: Some(2),
            ..small()
        };
        let data = generate_dataset(&cfg, &GpConfig::default(), Domain::unit()).unwrap();
        let run = || {
            train(cfg.init_model(Domain::unit()).unwrap(), &data, &cfg, DiffusionFunction::Quadratic).unwrap()
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(m1, m2);
        assert!(h1.same_losses(&h2));
        assert_eq!(h1.len(), 4);
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let cfg = small();
        let data = generate_dataset(&cfg, &GpConfig::default(), Domain::unit()).unwrap();
        let other = TrainConfig { sensors: 13, ..small() };
        let model = other.init_model(Domain::unit()).unwrap();
        let err = train(model, &data, &cfg, DiffusionFunction::Quadratic).unwrap_err();
        assert!(matches!(err.error, Error::Shape { .. }));
    }

    #[test]
    fn poisoned_gradient_keeps_last_good_model() {
        let cfg = TrainConfig { iterations: 5, ..small() };
        let data = generate_dataset(&cfg, &GpConfig::default(), Domain::unit()).unwrap();
        let mut model = cfg.init_model(Domain::unit()).unwrap();
        model.output_bias = f64::NAN;
        let err = train(model, &data, &cfg, DiffusionFunction::Quadratic).unwrap_err();
        assert!(matches!(err.error, Error::PoisonedGradient { iteration: 0, .. }));
        assert!(err.last_good.output_bias.is_nan());
    }
}
