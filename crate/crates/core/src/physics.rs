//! PDE residual, physics loss, boundary/initial loss and their gradients.
//!
//! Input-space derivatives of the operator are central differences, so the
//! residual at a collocation point is an ordinary function of five operator
//! evaluations and backpropagation only ever runs with respect to parameters.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::deeponet::{readout_view, BoundOperator, DeepOnet, DeepOnetGrad, Domain, QueryPoint, TrunkScaling};
use crate::error::{Error, Result};
use crate::gp::SourceFunction;

/// The nonlinearity `α` inside `∂²ₓα(φ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiffusionFunction {
    /// `α(u) = u²`
    Quadratic,
    /// `α(u) = u`
    Identity,
    /// `α(u) = |u|^(p-1) u`, `p ≥ 1`
    Power(f64),
}

impl DiffusionFunction {
    #[inline]
    pub fn value(self, u: f64) -> f64 {
        match self {
            DiffusionFunction::Quadratic => u * u,
            DiffusionFunction::Identity => u,
            DiffusionFunction::Power(p) => u.abs().powf(p - 1.0) * u,
        }
    }

    #[inline]
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            DiffusionFunction::Quadratic => 2.0 * u,
            DiffusionFunction::Identity => 1.0,
            DiffusionFunction::Power(p) => {
                if p == 1.0 {
                    1.0
                } else {
                    p * u.abs().powf(p - 1.0)
                }
            }
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            DiffusionFunction::Power(p) if !(p >= 1.0 && p.is_finite()) => Err(Error::Config(
                format!("power diffusion needs p >= 1, got {p}"),
            )),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for DiffusionFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DiffusionFunction::Quadratic => write!(f, "quadratic"),
            DiffusionFunction::Identity => write!(f, "identity"),
            DiffusionFunction::Power(p) => write!(f, "power:{p}"),
        }
    }
}

impl std::str::FromStr for DiffusionFunction {
    type Err = Error;

    /// `quadratic`, `identity`, or `power:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let parsed = match s.as_str() {
            "quadratic" => DiffusionFunction::Quadratic,
            "identity" => DiffusionFunction::Identity,
            _ => match s.strip_prefix("power:") {
                Some(p) => DiffusionFunction::Power(
                    p.parse()
                        .map_err(|_| Error::Config(format!("bad power exponent '{p}'")))?,
                ),
                None => return Err(Error::Config(format!("unknown diffusion function '{s}'"))),
            },
        };
        parsed.validate()?;
        Ok(parsed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilConfig {
    pub h_x: f64,
    pub h_tau: f64,
}

impl StencilConfig {
    /// One hundredth of `L` and of `T`.
    pub fn for_domain(domain: &Domain) -> Self {
        Self {
            h_x: 1e-2 * domain.half_width,
            h_tau: 1e-2 * domain.horizon,
        }
    }

    pub fn uniform(h: f64) -> Self {
        Self { h_x: h, h_tau: h }
    }

    /// Distance kept between collocation points and the boundary.
    pub fn margin(&self) -> f64 {
        self.h_x.max(self.h_tau)
    }

    pub fn validate(&self, domain: &Domain) -> Result<()> {
        let ok = self.h_x > 0.0
            && self.h_tau > 0.0
            && 2.0 * self.margin() < domain.horizon
            && self.margin() < domain.half_width;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "stencil steps {:?} do not fit the domain",
                self
            )))
        }
    }

    /// Errors unless all four stencil neighbours of `y` stay in the closed domain.
    pub fn check_margin(&self, domain: &Domain, y: QueryPoint) -> Result<()> {
        let inside = y.tau - self.h_tau >= 0.0
            && y.tau + self.h_tau <= domain.horizon
            && y.x - self.h_x >= -domain.half_width
            && y.x + self.h_x <= domain.half_width;
        if inside {
            Ok(())
        } else {
            Err(Error::Margin { tau: y.tau, x: y.x })
        }
    }
}

/// Interior residual points and initial/boundary points for one source function.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    pub interior: Vec<QueryPoint>,
    pub boundary: Vec<QueryPoint>,
}

impl CollocationSet {
    /// Interior points uniform over the domain shrunk by the stencil margin;
    /// `⌈P/2⌉` boundary points on `τ = 0`, the rest split between `x = -L`
    /// and `x = L`.
    pub fn sample(
        domain: &Domain,
        stencil: &StencilConfig,
        interior: usize,
        boundary: usize,
        seed: u64,
        stream: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let m = stencil.margin();
        let (t, l) = (domain.horizon, domain.half_width);
        let interior_pts = (0..interior)
            .map(|_| QueryPoint::new(rng.gen_range(m..=t - m), rng.gen_range(-l + m..=l - m)))
            .collect();
        let on_initial = boundary.div_ceil(2);
        let rest = boundary - on_initial;
        let on_left = rest.div_ceil(2);
        let mut boundary_pts = Vec::with_capacity(boundary);
        for _ in 0..on_initial {
            boundary_pts.push(QueryPoint::new(0.0, rng.gen_range(-l..=l)));
        }
        for k in 0..rest {
            let x = if k < on_left { -l } else { l };
            boundary_pts.push(QueryPoint::new(rng.gen_range(0.0..=t), x));
        }
        Self {
            interior: interior_pts,
            boundary: boundary_pts,
        }
    }

    pub fn validate(&self, domain: &Domain, stencil: &StencilConfig) -> Result<()> {
        for y in &self.interior {
            stencil.check_margin(domain, *y)?;
        }
        for y in &self.boundary {
            domain.check(y.tau, y.x)?;
            let on_set = y.tau == 0.0 || y.x == -domain.half_width || y.x == domain.half_width;
            if !on_set {
                return Err(Error::Contract(format!(
                    "point ({}, {}) is not on the initial/boundary set",
                    y.tau, y.x
                )));
            }
        }
        Ok(())
    }
}

/// One source function with its collocation points.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub source: SourceFunction,
    pub points: CollocationSet,
}

/// Anything that can be evaluated on the space–time domain.
pub trait SpaceTimeField {
    fn value(&self, tau: f64, x: f64) -> Result<f64>;
}

impl<F: Fn(f64, f64) -> f64> SpaceTimeField for F {
    fn value(&self, tau: f64, x: f64) -> Result<f64> {
        Ok(self(tau, x))
    }
}

impl SpaceTimeField for BoundOperator<'_> {
    fn value(&self, tau: f64, x: f64) -> Result<f64> {
        self.eval(tau, x)
    }
}

/// Evaluates the model without caching the branch embedding.
pub struct UncachedOperator<'a> {
    pub model: &'a DeepOnet,
    pub source: &'a SourceFunction,
}

impl SpaceTimeField for UncachedOperator<'_> {
    fn value(&self, tau: f64, x: f64) -> Result<f64> {
        self.model.operator_eval(self.source, QueryPoint::new(tau, x))
    }
}

#[inline]
fn stencil_residual(
    center: f64,
    tau_plus: f64,
    tau_minus: f64,
    x_plus: f64,
    x_minus: f64,
    alpha: DiffusionFunction,
    st: &StencilConfig,
) -> f64 {
    let d_tau = (tau_plus - tau_minus) / (2.0 * st.h_tau);
    let d_xx = (alpha.value(x_plus) - 2.0 * alpha.value(center) + alpha.value(x_minus))
        / (st.h_x * st.h_x);
    d_tau - d_xx
}

/// `∂τG − ∂²ₓα(G)` at `y` by central differences.
pub fn residual<F: SpaceTimeField + ?Sized>(
    field: &F,
    y: QueryPoint,
    alpha: DiffusionFunction,
    st: &StencilConfig,
    domain: &Domain,
) -> Result<f64> {
    st.check_margin(domain, y)?;
    let c = field.value(y.tau, y.x)?;
    let tp = field.value(y.tau + st.h_tau, y.x)?;
    let tm = field.value(y.tau - st.h_tau, y.x)?;
    let xp = field.value(y.tau, y.x + st.h_x)?;
    let xm = field.value(y.tau, y.x - st.h_x)?;
    Ok(stencil_residual(c, tp, tm, xp, xm, alpha, st))
}

/// Residual of the model's prediction for source `g`.
pub fn model_residual(
    model: &DeepOnet,
    g: &SourceFunction,
    y: QueryPoint,
    alpha: DiffusionFunction,
    st: &StencilConfig,
) -> Result<f64> {
    residual(&model.bind(g)?, y, alpha, st, &model.domain)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub physics: f64,
    pub operator: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn new(physics: f64, operator: f64) -> Self {
        Self {
            physics,
            operator,
            total: physics + operator,
        }
    }
}

const STENCIL_ROWS: usize = 5;

/// Trunk inputs and residual targets laid out once for repeated loss
/// evaluation.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    sensors: Array2<f64>,
    functions: Vec<PreparedFunction>,
    scaling: TrunkScaling,
    stencil: StencilConfig,
    interior_total: usize,
    boundary_total: usize,
}

#[derive(Debug, Clone)]
struct PreparedFunction {
    /// Rows: 5 stencil points per interior point (center, τ+, τ−, x+, x−),
    /// then the boundary points.
    trunk_inputs: Array2<f64>,
    targets: Vec<f64>,
}

impl PreparedBatch {
    pub fn new(
        model: &DeepOnet,
        examples: &[TrainingExample],
        st: &StencilConfig,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Contract("loss over an empty dataset".into()));
        }
        let m = model.sensors();
        let mut sensors = Array2::zeros((examples.len(), m));
        let mut functions = Vec::with_capacity(examples.len());
        let (mut interior_total, mut boundary_total) = (0, 0);
        for (i, ex) in examples.iter().enumerate() {
            let values = ex.source.sensor_values();
            if values.len() != m {
                return Err(Error::Shape {
                    context: "branch sensor count",
                    expected: m,
                    got: values.len(),
                });
            }
            sensors.row_mut(i).assign(&ArrayView1::from(values));
            ex.points.validate(&model.domain, st)?;
            let q = ex.points.interior.len();
            let p = ex.points.boundary.len();
            let mut inputs = Array2::zeros((STENCIL_ROWS * q + p, 2));
            let mut targets = Vec::with_capacity(q);
            let mut put = |row: usize, tau: f64, x: f64| {
                let [a, b] = model.trunk_input(tau, x);
                inputs[[row, 0]] = a;
                inputs[[row, 1]] = b;
            };
            for (j, y) in ex.points.interior.iter().enumerate() {
                let r = STENCIL_ROWS * j;
                put(r, y.tau, y.x);
                put(r + 1, y.tau + st.h_tau, y.x);
                put(r + 2, y.tau - st.h_tau, y.x);
                put(r + 3, y.tau, y.x + st.h_x);
                put(r + 4, y.tau, y.x - st.h_x);
                targets.push(ex.source.eval(y.x)?);
            }
            for (k, y) in ex.points.boundary.iter().enumerate() {
                put(STENCIL_ROWS * q + k, y.tau, y.x);
            }
            interior_total += q;
            boundary_total += p;
            functions.push(PreparedFunction {
                trunk_inputs: inputs,
                targets,
            });
        }
        Ok(Self {
            sensors,
            functions,
            scaling: model.trunk_scaling,
            stencil: *st,
            interior_total,
            boundary_total,
        })
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Restriction to the listed function indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let functions: Vec<PreparedFunction> =
            indices.iter().map(|&i| self.functions[i].clone()).collect();
        Self {
            sensors: self.sensors.select(Axis(0), indices),
            interior_total: functions.iter().map(|f| f.targets.len()).sum(),
            boundary_total: functions
                .iter()
                .map(|f| f.trunk_inputs.nrows() - STENCIL_ROWS * f.targets.len())
                .sum(),
            functions,
            scaling: self.scaling,
            stencil: self.stencil,
        }
    }
}

/// Functions per work unit; fixed so the reduction order never depends on the
/// thread count.
const CHUNK: usize = 8;

struct ChunkResult {
    physics_sum: f64,
    operator_sum: f64,
    trunk_grad: Option<crate::nnet::MlpParams>,
    bias_grad: f64,
    /// `∂loss/∂(branch embedding)` rows for the chunk's functions.
    embedding_grad: Vec<Array1<f64>>,
}

/// Loss (and optionally its gradient) over a prepared batch.
pub fn evaluate_prepared(
    model: &DeepOnet,
    batch: &PreparedBatch,
    alpha: DiffusionFunction,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<DeepOnetGrad>)> {
    if batch.scaling != model.trunk_scaling {
        return Err(Error::Contract(
            "batch was prepared for a model with a different trunk scaling".into(),
        ));
    }
    let st = batch.stencil;
    let branch_trace = model.branch.forward_trace(batch.sensors.view())?;
    let c = model.output_scale;
    let embeddings = branch_trace.output().mapv(|v| v * c);
    let phys_weight = if batch.interior_total > 0 {
        1.0 / batch.interior_total as f64
    } else {
        0.0
    };
    let op_weight = if batch.boundary_total > 0 {
        1.0 / batch.boundary_total as f64
    } else {
        0.0
    };

    let chunks: Vec<Result<ChunkResult>> = batch
        .functions
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, funcs)| {
            let mut out = ChunkResult {
                physics_sum: 0.0,
                operator_sum: 0.0,
                trunk_grad: want_grad.then(|| model.trunk.zeros_like()),
                bias_grad: 0.0,
                embedding_grad: Vec::with_capacity(funcs.len()),
            };
            for (k, f) in funcs.iter().enumerate() {
                let index = ci * CHUNK + k;
                let emb = embeddings.row(index);
                let trace = model.trunk.forward_trace(f.trunk_inputs.view())?;
                let features = trace.output();
                let g: Vec<f64> = features
                    .rows()
                    .into_iter()
                    .map(|row| readout_view(emb, row, model.output_bias))
                    .collect();
                let q = f.targets.len();
                let mut dg = if want_grad { vec![0.0; g.len()] } else { Vec::new() };
                let inv_2ht = 1.0 / (2.0 * st.h_tau);
                let inv_hx2 = 1.0 / (st.h_x * st.h_x);
                for (j, &target) in f.targets.iter().enumerate() {
                    let r = STENCIL_ROWS * j;
                    let res = stencil_residual(g[r], g[r + 1], g[r + 2], g[r + 3], g[r + 4], alpha, &st)
                        - target;
                    out.physics_sum += res * res;
                    if want_grad {
                        let d = 2.0 * res * phys_weight;
                        dg[r + 1] += d * inv_2ht;
                        dg[r + 2] -= d * inv_2ht;
                        dg[r] += 2.0 * d * alpha.derivative(g[r]) * inv_hx2;
                        dg[r + 3] -= d * alpha.derivative(g[r + 3]) * inv_hx2;
                        dg[r + 4] -= d * alpha.derivative(g[r + 4]) * inv_hx2;
                    }
                }
                for (row, &v) in g.iter().enumerate().skip(STENCIL_ROWS * q) {
                    out.operator_sum += v * v;
                    if want_grad {
                        dg[row] += 2.0 * v * op_weight;
                    }
                }
                if !(out.physics_sum.is_finite() && out.operator_sum.is_finite()) {
                    return Err(Error::PoisonedGradient {
                        iteration: 0,
                        function: Some(index),
                    });
                }
                if let Some(tg) = out.trunk_grad.as_mut() {
                    let dg = Array1::from(dg);
                    let d_features = {
                        let mut m = Array2::zeros(features.dim());
                        for (mut row, &d) in m.rows_mut().into_iter().zip(dg.iter()) {
                            row.assign(&emb);
                            row *= d;
                        }
                        m
                    };
                    out.embedding_grad.push(features.t().dot(&dg));
                    out.bias_grad += dg.sum();
                    model.trunk.backward_into(&trace, d_features.view(), tg)?;
                }
            }
            Ok(out)
        })
        .collect();

    let mut physics_sum = 0.0;
    let mut operator_sum = 0.0;
    let mut grad = want_grad.then(|| DeepOnetGrad::zeros_like(model));
    let mut d_embeddings = want_grad.then(|| Array2::<f64>::zeros(embeddings.dim()));
    for (ci, chunk) in chunks.into_iter().enumerate() {
        let chunk = chunk?;
        physics_sum += chunk.physics_sum;
        operator_sum += chunk.operator_sum;
        if let (Some(g), Some(de)) = (grad.as_mut(), d_embeddings.as_mut()) {
            g.trunk.add_assign(chunk.trunk_grad.as_ref().expect("gradient requested"));
            g.output_bias += chunk.bias_grad;
            for (k, row) in chunk.embedding_grad.iter().enumerate() {
                de.row_mut(ci * CHUNK + k).assign(row);
            }
        }
    }
    let loss = LossBreakdown::new(physics_sum * phys_weight, operator_sum * op_weight);
    if let (Some(g), Some(mut de)) = (grad.as_mut(), d_embeddings) {
        de.mapv_inplace(|v| v * c);
        model
            .branch
            .backward_into(&branch_trace, de.view(), &mut g.branch)?;
        let poisoned = !g.output_bias.is_finite()
            || !g.branch.is_finite()
            || !g.trunk.is_finite();
        if poisoned {
            return Err(Error::PoisonedGradient {
                iteration: 0,
                function: None,
            });
        }
    }
    Ok((loss, grad))
}

/// Mean squared mismatch `R − g(x)` over every interior point.
pub fn physics_loss(
    model: &DeepOnet,
    examples: &[TrainingExample],
    alpha: DiffusionFunction,
    st: &StencilConfig,
) -> Result<f64> {
    Ok(total_loss(model, examples, alpha, st)?.physics)
}

/// Mean squared prediction over every initial/boundary point (the true
/// values there are zero).
pub fn operator_loss(model: &DeepOnet, examples: &[TrainingExample]) -> Result<f64> {
    let st = StencilConfig::for_domain(&model.domain);
    let boundary_only: Vec<TrainingExample> = examples
        .iter()
        .map(|e| TrainingExample {
            source: e.source.clone(),
            points: CollocationSet {
                interior: Vec::new(),
                boundary: e.points.boundary.clone(),
            },
        })
        .collect();
    Ok(total_loss(model, &boundary_only, DiffusionFunction::Identity, &st)?.operator)
}

pub fn total_loss(
    model: &DeepOnet,
    examples: &[TrainingExample],
    alpha: DiffusionFunction,
    st: &StencilConfig,
) -> Result<LossBreakdown> {
    let batch = PreparedBatch::new(model, examples, st)?;
    Ok(evaluate_prepared(model, &batch, alpha, false)?.0)
}

/// Total loss with its exact gradient with respect to branch, trunk and `b0`.
pub fn loss_gradient(
    model: &DeepOnet,
    examples: &[TrainingExample],
    alpha: DiffusionFunction,
    st: &StencilConfig,
) -> Result<(LossBreakdown, DeepOnetGrad)> {
    let batch = PreparedBatch::new(model, examples, st)?;
    let (loss, grad) = evaluate_prepared(model, &batch, alpha, true)?;
    Ok((loss, grad.expect("gradient requested")))
}
