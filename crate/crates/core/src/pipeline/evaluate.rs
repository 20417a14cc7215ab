use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::deeponet::{DeepOnet, Domain};
use crate::error::{Error, Result};
use crate::fdm::{solve_fdm, FdmConfig};
use crate::gp::SourceFunction;
use crate::grid_csv::csv_error;
use crate::physics::DiffusionFunction;

use super::MetricHistory;

pub const EVAL_GRID: usize = 50;

/// Anything that maps a source to a field sampled on a tensor grid.
pub trait SolutionOperator: Sync {
    fn predict_grid(&self, g: &SourceFunction, taus: &[f64], xs: &[f64]) -> Result<Array2<f64>>;
}

impl SolutionOperator for DeepOnet {
    fn predict_grid(&self, g: &SourceFunction, taus: &[f64], xs: &[f64]) -> Result<Array2<f64>> {
        self.operator_eval_grid(g, taus, xs)
    }
}

/// Predicts the finite-difference solution itself; used to self-test the
/// evaluation path.
#[derive(Debug, Clone)]
pub struct FdmOracle {
    pub domain: Domain,
    pub config: FdmConfig,
    pub alpha: DiffusionFunction,
}

impl SolutionOperator for FdmOracle {
    fn predict_grid(&self, g: &SourceFunction, taus: &[f64], xs: &[f64]) -> Result<Array2<f64>> {
        solve_fdm(g, &self.domain, &self.config, self.alpha)?.interpolate_grid(taus, xs)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroOperator;

impl SolutionOperator for ZeroOperator {
    fn predict_grid(&self, _: &SourceFunction, taus: &[f64], xs: &[f64]) -> Result<Array2<f64>> {
        Ok(Array2::zeros((taus.len(), xs.len())))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FunctionError {
    Scored { relative_l2: f64, max_error: f64 },
    /// The reference solve failed; the function is left out of the aggregate.
    FdmFailed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub functions: Vec<FunctionError>,
    pub grid_size: usize,
}

impl ErrorReport {
    pub fn scored(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.functions.iter().filter_map(|f| match f {
            FunctionError::Scored { relative_l2, max_error } => Some((*relative_l2, *max_error)),
            FunctionError::FdmFailed(_) => None,
        })
    }

    pub fn failures(&self) -> usize {
        self.functions.len() - self.scored().count()
    }

    /// True when there were functions to score and none of them could be.
    pub fn all_failed(&self) -> bool {
        !self.functions.is_empty() && self.scored().next().is_none()
    }

    pub fn mean_relative_l2(&self) -> Option<f64> {
        mean(self.scored().map(|s| s.0))
    }

    pub fn median_relative_l2(&self) -> Option<f64> {
        median(self.scored().map(|s| s.0).collect())
    }

    pub fn mean_max_error(&self) -> Option<f64> {
        mean(self.scored().map(|s| s.1))
    }

    pub fn median_max_error(&self) -> Option<f64> {
        median(self.scored().map(|s| s.1).collect())
    }

    /// One row per function, then `mean` and `median` rows when anything was
    /// scored.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(["function", "status", "relative_l2", "max_error"])
            .map_err(csv_error)?;
        for (i, f) in self.functions.iter().enumerate() {
            let row = match f {
                FunctionError::Scored { relative_l2, max_error } => {
                    [i.to_string(), "ok".into(), relative_l2.to_string(), max_error.to_string()]
                }
                FunctionError::FdmFailed(_) => {
                    [i.to_string(), "fdm_failed".into(), String::new(), String::new()]
                }
            };
            w.write_record(&row).map_err(csv_error)?;
        }
        if let (Some(m), Some(mm)) = (self.mean_relative_l2(), self.mean_max_error()) {
            w.write_record(["mean", "aggregate", &m.to_string(), &mm.to_string()])
                .map_err(csv_error)?;
            let (md, mdm) = (
                self.median_relative_l2().expect("nonempty"),
                self.median_max_error().expect("nonempty"),
            );
            w.write_record(["median", "aggregate", &md.to_string(), &mdm.to_string()])
                .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Relative L2 and max-norm distance of `pred` from `reference`. A zero
/// reference scores 0 against a zero prediction and infinity otherwise.
pub fn grid_errors(pred: &Array2<f64>, reference: &Array2<f64>) -> Result<(f64, f64)> {
    if pred.dim() != reference.dim() {
        return Err(Error::Shape {
            context: "prediction grid",
            expected: reference.len(),
            got: pred.len(),
        });
    }
    let mut diff2 = 0.0;
    let mut ref2 = 0.0;
    let mut max_err = 0.0f64;
    for (p, r) in pred.iter().zip(reference) {
        let d = p - r;
        diff2 += d * d;
        ref2 += r * r;
        max_err = max_err.max(d.abs());
    }
    let rel = if ref2 > 0.0 {
        (diff2 / ref2).sqrt()
    } else if diff2 == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok((rel, max_err))
}

/// Scores `model` against the finite-difference solution on the 50 × 50
/// evaluation grid.
pub fn evaluate(
    model: &dyn SolutionOperator,
    test_functions: &[SourceFunction],
    domain: &Domain,
    fdm_cfg: &FdmConfig,
    alpha: DiffusionFunction,
) -> Result<ErrorReport> {
    evaluate_on_grid(model, test_functions, domain, fdm_cfg, alpha, EVAL_GRID)
}

pub fn evaluate_on_grid(
    model: &dyn SolutionOperator,
    test_functions: &[SourceFunction],
    domain: &Domain,
    fdm_cfg: &FdmConfig,
    alpha: DiffusionFunction,
    grid_size: usize,
) -> Result<ErrorReport> {
    if grid_size < 2 {
        return Err(Error::Config("evaluation grid needs at least 2 points per axis".into()));
    }
    fdm_cfg.validate()?;
    alpha.validate()?;
    let taus = domain.tau_grid(grid_size);
    let xs = domain.x_grid(grid_size);
    let functions = test_functions
        .par_iter()
        .map(|g| {
            let reference = match solve_fdm(g, domain, fdm_cfg, alpha) {
                Ok(sol) => sol.interpolate_grid(&taus, &xs)?,
                Err(e @ (Error::Nonconvergence { .. } | Error::Divergence { .. } | Error::Singular { .. })) => {
                    return Ok(FunctionError::FdmFailed(e.to_string()))
                }
                Err(e) => return Err(e),
            };
            let pred = model.predict_grid(g, &taus, &xs)?;
            let (relative_l2, max_error) = grid_errors(&pred, &reference)?;
            Ok(FunctionError::Scored { relative_l2, max_error })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorReport { functions, grid_size })
}

pub fn write_metrics_csv(history: &MetricHistory, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["iteration", "physics_loss", "operator_loss", "total_loss", "seconds"])
        .map_err(csv_error)?;
    for r in &history.records {
        w.write_record(&[
            r.iteration.to_string(),
            r.physics_loss.to_string(),
            r.operator_loss.to_string(),
            r.total_loss.to_string(),
            r.seconds.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}
