//! Reference solver: backward Euler in time, centered second differences of
//! `α(φ)` in space, Newton iteration on the tridiagonal system at each step.

use std::path::Path;

use ndarray::Array2;

use crate::deeponet::Domain;
use crate::error::{Error, Result};
use crate::gp::SourceFunction;
use crate::grid_csv;
use crate::physics::DiffusionFunction;

#[derive(Debug, Clone, PartialEq)]
pub struct FdmConfig {
    /// Interior spatial nodes; `dx = 2L / (nx + 1)`.
    pub nx: usize,
    /// Time steps; `dt = T / nt`.
    pub nt: usize,
    /// Max-norm Newton update below which a step is converged.
    pub newton_tol: f64,
    pub newton_max_iters: usize,
}

impl Default for FdmConfig {
    fn default() -> Self {
        Self {
            nx: 199,
            nt: 200,
            newton_tol: 1e-10,
            newton_max_iters: 50,
        }
    }
}

impl FdmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nx < 3 || self.nt < 1 {
            return Err(Error::Config(format!(
                "FDM grid needs nx >= 3 and nt >= 1, got nx = {}, nt = {}",
                self.nx, self.nt
            )));
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iters == 0 {
            return Err(Error::Config("Newton tolerance and iteration cap must be positive".into()));
        }
        Ok(())
    }
}

/// Solves a tridiagonal system by Thomas elimination.
///
/// `sub` and `sup` have length `n - 1`; `sub[i]` sits at row `i + 1`.
pub fn tridiag_solve(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if rhs.len() != n {
        return Err(Error::Shape {
            context: "tridiagonal right-hand side",
            expected: n,
            got: rhs.len(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    if sub.len() != n - 1 || sup.len() != n - 1 {
        return Err(Error::Shape {
            context: "tridiagonal off-diagonals",
            expected: n - 1,
            got: sub.len().min(sup.len()),
        });
    }
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut pivot = diag[0];
    if pivot == 0.0 || !pivot.is_finite() {
        return Err(Error::Singular { row: 0 });
    }
    if n > 1 {
        c[0] = sup[0] / pivot;
    }
    d[0] = rhs[0] / pivot;
    for i in 1..n {
        pivot = diag[i] - sub[i - 1] * c[i - 1];
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(Error::Singular { row: i });
        }
        if i < n - 1 {
            c[i] = sup[i] / pivot;
        }
        d[i] = (rhs[i] - sub[i - 1] * d[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Discrete solution on the `(nt + 1) × (nx + 2)` node grid, boundary
/// columns included.
#[derive(Debug, Clone, PartialEq)]
pub struct FdmSolution {
    pub values: Array2<f64>,
    pub dx: f64,
    pub dt: f64,
    pub domain: Domain,
    /// Max-norm Newton updates, one list per time step (substeps concatenated).
    pub newton_updates: Vec<Vec<f64>>,
    /// Time steps that needed the halved-step retry.
    pub retried_steps: Vec<usize>,
}

impl FdmSolution {
    pub fn nt(&self) -> usize {
        self.values.nrows() - 1
    }

    pub fn nx(&self) -> usize {
        self.values.ncols() - 2
    }

    pub fn tau_nodes(&self) -> Vec<f64> {
        (0..=self.nt()).map(|n| n as f64 * self.dt).collect()
    }

    pub fn x_nodes(&self) -> Vec<f64> {
        let l = self.domain.half_width;
        let mut xs: Vec<f64> = (0..self.nx() + 2).map(|j| -l + j as f64 * self.dx).collect();
        *xs.last_mut().expect("nonempty") = l;
        xs
    }

    /// Bilinear interpolation; exact at nodes.
    pub fn interpolate(&self, tau: f64, x: f64) -> Result<f64> {
        self.domain.check(tau, x)?;
        let (n, wt) = locate(tau / self.dt, self.nt());
        let (j, wx) = locate((x + self.domain.half_width) / self.dx, self.nx() + 1);
        let v = &self.values;
        let lerp = |a: f64, b: f64, w: f64| if w == 0.0 { a } else if w == 1.0 { b } else { a + w * (b - a) };
        let lo = lerp(v[[n, j]], v[[n, j + 1]], wx);
        let hi = lerp(v[[n + 1, j]], v[[n + 1, j + 1]], wx);
        Ok(lerp(lo, hi, wt))
    }

    pub fn interpolate_grid(&self, taus: &[f64], xs: &[f64]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((taus.len(), xs.len()));
        for (i, &t) in taus.iter().enumerate() {
            for (j, &x) in xs.iter().enumerate() {
                out[[i, j]] = self.interpolate(t, x)?;
            }
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        grid_csv::write(path, &self.tau_nodes(), &self.x_nodes(), &self.values)
    }
}

/// Cell index and fractional offset for a position measured in cell units.
fn locate(s: f64, cells: usize) -> (usize, f64) {
    let nearest = s.round();
    let s = if (s - nearest).abs() < 1e-9 { nearest } else { s };
    let k = (s.floor().max(0.0) as usize).min(cells - 1);
    let w = (s - k as f64).clamp(0.0, 1.0);
    (k, w)
}

/// Solves with a time-independent source `g(x)`.
pub fn solve_fdm(
    g: &SourceFunction,
    domain: &Domain,
    cfg: &FdmConfig,
    alpha: DiffusionFunction,
) -> Result<FdmSolution> {
    if g.grid().half_width() != domain.half_width {
        return Err(Error::Contract(
            "source sensors do not span the solver's spatial domain".into(),
        ));
    }
    cfg.validate()?;
    let dx = 2.0 * domain.half_width / (cfg.nx + 1) as f64;
    let forcing: Vec<f64> = (1..=cfg.nx)
        .map(|i| g.eval(node_x(domain, dx, i, cfg.nx)))
        .collect::<Result<_>>()?;
    solve(domain, cfg, alpha, |_, out: &mut [f64]| out.copy_from_slice(&forcing))
}

/// Solves with a forcing `g(τ, x)` evaluated at the new time level of each step.
pub fn solve_fdm_forced<F>(
    forcing: F,
    domain: &Domain,
    cfg: &FdmConfig,
    alpha: DiffusionFunction,
) -> Result<FdmSolution>
where
    F: Fn(f64, f64) -> f64,
{
    cfg.validate()?;
    let dx = 2.0 * domain.half_width / (cfg.nx + 1) as f64;
    let xs: Vec<f64> = (1..=cfg.nx).map(|i| node_x(domain, dx, i, cfg.nx)).collect();
    solve(domain, cfg, alpha, |tau, out: &mut [f64]| {
        for (o, &x) in out.iter_mut().zip(&xs) {
            *o = forcing(tau, x);
        }
    })
}

fn node_x(domain: &Domain, dx: f64, j: usize, nx: usize) -> f64 {
    if j == nx + 1 {
        domain.half_width
    } else {
        -domain.half_width + j as f64 * dx
    }
}

fn solve<F>(domain: &Domain, cfg: &FdmConfig, alpha: DiffusionFunction, forcing: F) -> Result<FdmSolution>
where
    F: Fn(f64, &mut [f64]),
{
    cfg.validate()?;
    let nx = cfg.nx;
    let dx = 2.0 * domain.half_width / (nx + 1) as f64;
    let dt = domain.horizon / cfg.nt as f64;
    let mut values = Array2::zeros((cfg.nt + 1, nx + 2));
    let mut newton_updates = Vec::with_capacity(cfg.nt);
    let mut retried_steps = Vec::new();
    let mut stepper = NewtonStepper::new(nx, dx, alpha, cfg);
    let mut current = vec![0.0; nx];
    let mut source = vec![0.0; nx];

    for step in 0..cfg.nt {
        let tau_new = (step + 1) as f64 * dt;
        forcing(tau_new, &mut source);
        let mut log = Vec::new();
        let next = match stepper.advance(&current, &source, dt, &mut log) {
            Ok(next) => next,
            Err(StepFailure::Nonconvergence) => {
                // One retry as two half steps.
                retried_steps.push(step);
                log.clear();
                let tau_half = step as f64 * dt + 0.5 * dt;
                forcing(tau_half, &mut source);
                let half = stepper
                    .advance(&current, &source, 0.5 * dt, &mut log)
                    .map_err(|e| e.into_error(step))?;
                forcing(tau_new, &mut source);
                stepper
                    .advance(&half, &source, 0.5 * dt, &mut log)
                    .map_err(|e| e.into_error(step))?
            }
            Err(e) => return Err(e.into_error(step)),
        };
        current = next;
        values
            .row_mut(step + 1)
            .as_slice_mut()
            .expect("standard layout")[1..=nx]
            .copy_from_slice(&current);
        newton_updates.push(log);
    }

    Ok(FdmSolution {
        values,
        dx,
        dt,
        domain: *domain,
        newton_updates,
        retried_steps,
    })
}

enum StepFailure {
    Nonconvergence,
    Divergence,
    Singular,
}

impl StepFailure {
    fn into_error(self, step: usize) -> Error {
        match self {
            StepFailure::Divergence | StepFailure::Singular => Error::Divergence { step },
            StepFailure::Nonconvergence => Error::Nonconvergence { step },
        }
    }
}

struct NewtonStepper {
    dx: f64,
    alpha: DiffusionFunction,
    tol: f64,
    max_iters: usize,
    a: Vec<f64>,
    da: Vec<f64>,
    residual: Vec<f64>,
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
}

impl NewtonStepper {
    fn new(nx: usize, dx: f64, alpha: DiffusionFunction, cfg: &FdmConfig) -> Self {
        Self {
            dx,
            alpha,
            tol: cfg.newton_tol,
            max_iters: cfg.newton_max_iters,
            a: vec![0.0; nx],
            da: vec![0.0; nx],
            residual: vec![0.0; nx],
            sub: vec![0.0; nx - 1],
            diag: vec![0.0; nx],
            sup: vec![0.0; nx - 1],
        }
    }

    /// Solves `φ − φ_old − r·δ²α(φ) − dt·s = 0` for the new level, starting
    /// from `φ_old`.
    fn advance(
        &mut self,
        old: &[f64],
        source: &[f64],
        dt: f64,
        log: &mut Vec<f64>,
    ) -> std::result::Result<Vec<f64>, StepFailure> {
        let n = old.len();
        let r = dt / (self.dx * self.dx);
        let mut phi = old.to_vec();
        for _ in 0..self.max_iters {
            for i in 0..n {
                self.a[i] = self.alpha.value(phi[i]);
                self.da[i] = self.alpha.derivative(phi[i]);
            }
            for i in 0..n {
                let left = if i > 0 { self.a[i - 1] } else { 0.0 };
                let right = if i + 1 < n { self.a[i + 1] } else { 0.0 };
                let lap = right - 2.0 * self.a[i] + left;
                // Newton right-hand side is -F.
                self.residual[i] = -(phi[i] - old[i] - r * lap - dt * source[i]);
                self.diag[i] = 1.0 + 2.0 * r * self.da[i];
            }
            for i in 0..n - 1 {
                self.sup[i] = -r * self.da[i + 1];
                self.sub[i] = -r * self.da[i];
            }
            let delta = tridiag_solve(&self.sub, &self.diag, &self.sup, &self.residual)
                .map_err(|_| StepFailure::Singular)?;
            let mut norm = 0.0f64;
            for (p, d) in phi.iter_mut().zip(&delta) {
                *p += d;
                norm = norm.max(d.abs());
            }
            if !norm.is_finite() || phi.iter().any(|v| !v.is_finite()) {
                return Err(StepFailure::Divergence);
            }
            log.push(norm);
            if norm < self.tol {
                return Ok(phi);
            }
        }
        Err(StepFailure::Nonconvergence)
    }
}
