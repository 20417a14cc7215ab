//! Unstacked DeepONet: one branch net over the sensor values of `g`, one trunk
//! net over the query point `(τ, x)`, combined by a dot product plus a scalar
//! bias.

use ndarray::{Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::gp::SourceFunction;
use crate::nnet::{Activation, MlpConfig, MlpParams};

/// Space–time rectangle `[0, T] × [-L, L]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain {
    pub horizon: f64,
    pub half_width: f64,
}

impl Domain {
    pub fn new(horizon: f64, half_width: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite() && half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::Config(format!(
                "domain needs T > 0 and L > 0, got T = {horizon}, L = {half_width}"
            )));
        }
        Ok(Self {
            horizon,
            half_width,
        })
    }

    pub fn unit() -> Self {
        Self {
            horizon: 1.0,
            half_width: 1.0,
        }
    }

    pub fn contains(&self, tau: f64, x: f64) -> bool {
        (0.0..=self.horizon).contains(&tau) && (-self.half_width..=self.half_width).contains(&x)
    }

    pub fn check(&self, tau: f64, x: f64) -> Result<()> {
        if self.contains(tau, x) {
            Ok(())
        } else {
            Err(Error::Domain { tau, x })
        }
    }

    /// `n ≥ 2` evenly spaced times covering `[0, T]`.
    pub fn tau_grid(&self, n: usize) -> Vec<f64> {
        linspace(0.0, self.horizon, n)
    }

    /// `n ≥ 2` evenly spaced abscissae covering `[-L, L]`.
    pub fn x_grid(&self, n: usize) -> Vec<f64> {
        linspace(-self.half_width, self.half_width, n)
    }
}

impl Default for Domain {
    fn default() -> Self {
        Self::unit()
    }
}

pub(crate) fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => {
            let step = (b - a) / (n - 1) as f64;
            let mut v: Vec<f64> = (0..n).map(|i| a + i as f64 * step).collect();
            v[n - 1] = b;
            v
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryPoint {
    pub tau: f64,
    pub x: f64,
}

impl QueryPoint {
    pub fn new(tau: f64, x: f64) -> Self {
        Self { tau, x }
    }
}

/// Affine map applied to `(τ, x)` before the trunk net:
/// `(τ·tau_scale + tau_shift, x·x_scale + x_shift)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrunkScaling {
    pub tau_scale: f64,
    pub tau_shift: f64,
    pub x_scale: f64,
    pub x_shift: f64,
}

impl TrunkScaling {
    pub const IDENTITY: TrunkScaling = TrunkScaling {
        tau_scale: 1.0,
        tau_shift: 0.0,
        x_scale: 1.0,
        x_shift: 0.0,
    };

    /// Raw coordinates on the unit domain, otherwise a map onto `[-1, 1]²`.
    pub fn for_domain(domain: &Domain) -> Self {
        if domain.horizon == 1.0 && domain.half_width == 1.0 {
            Self::IDENTITY
        } else {
            Self {
                tau_scale: 2.0 / domain.horizon,
                tau_shift: -1.0,
                x_scale: 1.0 / domain.half_width,
                x_shift: 0.0,
            }
        }
    }

    #[inline]
    pub fn apply(&self, tau: f64, x: f64) -> [f64; 2] {
        [
            tau * self.tau_scale + self.tau_shift,
            x * self.x_scale + self.x_shift,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepOnetConfig {
    /// Number of sensors, the branch input width.
    pub sensors: usize,
    pub embedding_dim: usize,
    pub branch_hidden: Vec<usize>,
    pub trunk_hidden: Vec<usize>,
    pub activation: Activation,
    pub output_scale: f64,
    pub seed: u64,
}

impl Default for DeepOnetConfig {
    fn default() -> Self {
        Self {
            sensors: 100,
            embedding_dim: 64,
            branch_hidden: vec![64, 64],
            trunk_hidden: vec![64, 64],
            activation: Activation::Relu,
            output_scale: 1.0,
            seed: 0,
        }
    }
}

impl DeepOnetConfig {
    fn branch_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.sensors];
        s.extend(&self.branch_hidden);
        s.push(self.embedding_dim);
        s
    }

    fn trunk_sizes(&self) -> Vec<usize> {
        let mut s = vec![2];
        s.extend(&self.trunk_hidden);
        s.push(self.embedding_dim);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepOnet {
    pub branch: MlpParams,
    pub trunk: MlpParams,
    /// Fixed positive constant `c` multiplying the branch embedding.
    pub output_scale: f64,
    /// Trainable scalar added to the dot product.
    pub output_bias: f64,
    pub domain: Domain,
    pub trunk_scaling: TrunkScaling,
}

/// Gradient of a scalar with respect to every trainable entry of a [`DeepOnet`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeepOnetGrad {
    pub branch: MlpParams,
    pub trunk: MlpParams,
    pub output_bias: f64,
}

impl DeepOnetGrad {
    pub fn zeros_like(model: &DeepOnet) -> Self {
        Self {
            branch: model.branch.zeros_like(),
            trunk: model.trunk.zeros_like(),
            output_bias: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &DeepOnetGrad) {
        self.branch.add_assign(&other.branch);
        self.trunk.add_assign(&other.trunk);
        self.output_bias += other.output_bias;
    }

    pub fn scale(&mut self, factor: f64) {
        self.branch.scale(factor);
        self.trunk.scale(factor);
        self.output_bias *= factor;
    }

    /// Same ordering as [`DeepOnet::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.branch.to_flat();
        v.extend(self.trunk.iter());
        v.push(self.output_bias);
        v
    }
}

impl DeepOnet {
    pub fn new(config: &DeepOnetConfig, domain: Domain) -> Result<Self> {
        if !(config.output_scale > 0.0 && config.output_scale.is_finite()) {
            return Err(Error::Config("output scale c must be positive".into()));
        }
        if config.embedding_dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        let branch = MlpParams::init(&MlpConfig::new(
            config.branch_sizes(),
            config.activation,
            config.seed,
        ))?;
        let trunk = MlpParams::init(&MlpConfig::new(
            config.trunk_sizes(),
            config.activation,
            config.seed ^ 0x9E37_79B9_7F4A_7C15,
        ))?;
        Self::from_parts(branch, trunk, config.output_scale, 0.0, domain)
    }

    pub fn from_parts(
        branch: MlpParams,
        trunk: MlpParams,
        output_scale: f64,
        output_bias: f64,
        domain: Domain,
    ) -> Result<Self> {
        if trunk.input_dim() != 2 {
            return Err(Error::Shape {
                context: "trunk input",
                expected: 2,
                got: trunk.input_dim(),
            });
        }
        if branch.output_dim() != trunk.output_dim() {
            return Err(Error::Shape {
                context: "branch/trunk embedding",
                expected: trunk.output_dim(),
                got: branch.output_dim(),
            });
        }
        if !(output_scale > 0.0 && output_scale.is_finite()) {
            return Err(Error::Config("output scale c must be positive".into()));
        }
        Ok(Self {
            branch,
            trunk,
            output_scale,
            output_bias,
            trunk_scaling: TrunkScaling::for_domain(&domain),
            domain,
        })
    }

    pub fn sensors(&self) -> usize {
        self.branch.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.trunk.output_dim()
    }

    pub fn num_params(&self) -> usize {
        self.branch.num_params() + self.trunk.num_params() + 1
    }

    /// Branch entries, then trunk entries, then the output bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.branch.to_flat();
        v.extend(self.trunk.iter());
        v.push(self.output_bias);
        v
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape {
                context: "flat model parameters",
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let nb = self.branch.num_params();
        let nt = self.trunk.num_params();
        self.branch.set_flat(&values[..nb])?;
        self.trunk.set_flat(&values[nb..nb + nt])?;
        self.output_bias = values[nb + nt];
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.branch.is_finite() && self.trunk.is_finite() && self.output_bias.is_finite()
    }

    fn check_sensors(&self, got: usize) -> Result<()> {
        if got != self.sensors() {
            return Err(Error::Shape {
                context: "branch sensor count",
                expected: self.sensors(),
                got,
            });
        }
        Ok(())
    }

    /// `c · branch(g at sensors)`.
    pub fn branch_forward(&self, g: &SourceFunction) -> Result<Vec<f64>> {
        self.check_sensors(g.sensor_values().len())?;
        let mut e = self.branch.forward(g.sensor_values())?;
        e.iter_mut().for_each(|v| *v *= self.output_scale);
        Ok(e)
    }

    /// Branch embeddings for a batch of sensor vectors, one per row.
    pub fn branch_forward_batch(&self, sensors: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_sensors(sensors.ncols())?;
        let mut e = self.branch.forward_batch(sensors)?;
        e.mapv_inplace(|v| v * self.output_scale);
        Ok(e)
    }

    pub fn trunk_input(&self, tau: f64, x: f64) -> [f64; 2] {
        self.trunk_scaling.apply(tau, x)
    }

    pub fn trunk_forward(&self, y: QueryPoint) -> Result<Vec<f64>> {
        self.domain.check(y.tau, y.x)?;
        self.trunk.forward(&self.trunk_input(y.tau, y.x))
    }

    /// `branch(g) · trunk(y) + b0`.
    pub fn operator_eval(&self, g: &SourceFunction, y: QueryPoint) -> Result<f64> {
        let b = self.branch_forward(g)?;
        let t = self.trunk_forward(y)?;
        Ok(readout(&b, &t, self.output_bias))
    }

    /// Caches the branch embedding of `g` for repeated evaluation.
    pub fn bind<'a>(&'a self, g: &SourceFunction) -> Result<BoundOperator<'a>> {
        Ok(BoundOperator {
            model: self,
            embedding: self.branch_forward(g)?,
        })
    }

    pub fn operator_eval_batch(&self, g: &SourceFunction, points: &[QueryPoint]) -> Result<Vec<f64>> {
        self.bind(g)?.eval_batch(points)
    }

    /// `G(g)(τ_i, x_j)` over the tensor grid, shape `taus.len() × xs.len()`.
    pub fn operator_eval_grid(&self, g: &SourceFunction, taus: &[f64], xs: &[f64]) -> Result<Array2<f64>> {
        let bound = self.bind(g)?;
        let mut points = Vec::with_capacity(taus.len() * xs.len());
        for &tau in taus {
            for &x in xs {
                points.push(QueryPoint::new(tau, x));
            }
        }
        let values = bound.eval_batch(&points)?;
        Ok(Array2::from_shape_vec((taus.len(), xs.len()), values).expect("grid shape"))
    }
}

/// Dot product plus bias, summed in index order.
#[inline]
pub fn readout(branch: &[f64], trunk: &[f64], bias: f64) -> f64 {
    let mut s = 0.0;
    for (b, t) in branch.iter().zip(trunk) {
        s += b * t;
    }
    s + bias
}

#[inline]
pub(crate) fn readout_view(branch: ArrayView1<f64>, trunk: ArrayView1<f64>, bias: f64) -> f64 {
    let mut s = 0.0;
    for (b, t) in branch.iter().zip(trunk.iter()) {
        s += b * t;
    }
    s + bias
}

/// A model with the branch embedding of one source function precomputed.
#[derive(Debug, Clone)]
pub struct BoundOperator<'a> {
    model: &'a DeepOnet,
    embedding: Vec<f64>,
}

impl<'a> BoundOperator<'a> {
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }

    pub fn eval(&self, tau: f64, x: f64) -> Result<f64> {
        let t = self.model.trunk_forward(QueryPoint::new(tau, x))?;
        Ok(readout(&self.embedding, &t, self.model.output_bias))
    }

    pub fn eval_batch(&self, points: &[QueryPoint]) -> Result<Vec<f64>> {
        let mut inputs = Array2::zeros((points.len(), 2));
        for (i, p) in points.iter().enumerate() {
            self.model.domain.check(p.tau, p.x)?;
            let [a, b] = self.model.trunk_input(p.tau, p.x);
            inputs[[i, 0]] = a;
            inputs[[i, 1]] = b;
        }
        let t = self.model.trunk.forward_batch(inputs.view())?;
        let e = ArrayView1::from(&self.embedding[..]);
        Ok(t.rows()
            .into_iter()
            .map(|row| readout_view(e, row, self.model.output_bias))
            .collect())
    }
}
