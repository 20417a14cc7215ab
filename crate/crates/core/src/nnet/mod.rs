//! Dense feedforward networks with exact reverse-mode parameter gradients.
//!
//! Batches are row-major: one sample per row. Every hidden layer applies the
//! configured activation; the output layer is affine only.

mod adam;
pub mod tape;

pub use adam::{adam_step, AdamState};
pub use tape::{Tape, Var};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation's output `a = σ(z)`.
    /// For relu the subgradient at zero is 0.
    #[inline]
    pub fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    /// Input width first, output width last.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub init_seed: u64,
}

impl MlpConfig {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, init_seed: u64) -> Self {
        Self {
            layer_sizes,
            activation,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least an input and an output size, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }
}

/// One affine layer: `z = W a + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

/// Weights and biases of a feedforward network.
///
/// Gradients with respect to the parameters are returned in this same type,
/// so the two can be zipped entry by entry.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Post-activation values cached by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input batch, `activations[l]` the output of layer `l`.
    activations: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("trace holds at least the input")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.activations.pop().expect("trace holds at least the input")
    }
}

impl MlpParams {
    /// Random initialization: He scale `sqrt(2/fan_in)` for relu, Glorot scale
    /// `sqrt(2/(fan_in+fan_out))` for tanh, zero biases.
    pub fn init(config: &MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let layers = config
            .layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = match config.activation {
                    Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                    Activation::Tanh => (2.0 / (fan_in + fan_out) as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("finite positive std");
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || normal.sample(&mut rng));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            layers,
            activation: config.activation,
        })
    }

    /// All-zero parameters with the given layout.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        MlpConfig::new(layer_sizes.to_vec(), activation, 0).validate()?;
        Ok(Self {
            layers: layer_sizes
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
            activation,
        })
    }

    /// Builds a zero-filled value with the same shapes as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.fan_in(), l.fan_out()))
                .collect(),
            activation: self.activation,
        }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(Dense::fan_out));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameter entries in checkpoint order: per layer, row-major `W` then `b`.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Shape {
                context: "flat parameter vector",
                expected: self.num_params(),
                got: values.len(),
            });
        }
        for (p, v) in self.iter_mut().zip(values) {
            *p = *v;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// `self += other`, entrywise. Shapes must agree.
    pub fn add_assign(&mut self, other: &MlpParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let batch = ArrayView2::from_shape((1, input.len()), input).expect("contiguous slice");
        Ok(self.forward_batch(batch)?.into_raw_vec_and_offset().0)
    }

    /// Evaluates every row of `inputs`. The arithmetic for a row does not depend
    /// on the other rows, so batched and single evaluations agree bitwise.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(inputs.ncols())?;
        let last = self.layers.len() - 1;
        let mut a = inputs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            a = self.affine(layer, a.view());
            if l < last {
                let act = self.activation;
                a.mapv_inplace(|z| act.apply(z));
            }
        }
        Ok(a)
    }

    pub fn forward_trace(&self, inputs: ArrayView2<f64>) -> Result<ForwardTrace> {
        self.check_input(inputs.ncols())?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = self.affine(layer, activations[l].view());
            if l < last {
                let act = self.activation;
                a.mapv_inplace(|z| act.apply(z));
            }
            activations.push(a);
        }
        Ok(ForwardTrace { activations })
    }

    /// Reverse pass: given `d_out = ∂loss/∂output` for every row of the traced
    /// batch, returns `∂loss/∂θ` for every parameter entry.
    pub fn backward(&self, trace: &ForwardTrace, d_out: ArrayView2<f64>) -> Result<MlpParams> {
        let mut grads = self.zeros_like();
        self.backward_into(trace, d_out, &mut grads)?;
        Ok(grads)
    }

    /// Like [`MlpParams::backward`] but accumulates into `grads`.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        d_out: ArrayView2<f64>,
        grads: &mut MlpParams,
    ) -> Result<()> {
        self.backward_impl(trace, d_out, grads, false).map(|_| ())
    }

    /// Reverse pass that also returns `∂loss/∂input` for every row.
    pub fn backward_with_input_grad(
        &self,
        trace: &ForwardTrace,
        d_out: ArrayView2<f64>,
        grads: &mut MlpParams,
    ) -> Result<Array2<f64>> {
        Ok(self
            .backward_impl(trace, d_out, grads, true)?
            .expect("input gradient requested"))
    }

    fn backward_impl(
        &self,
        trace: &ForwardTrace,
        d_out: ArrayView2<f64>,
        grads: &mut MlpParams,
        want_input_grad: bool,
    ) -> Result<Option<Array2<f64>>> {
        let out = trace.output();
        if d_out.dim() != out.dim() {
            return Err(Error::Shape {
                context: "backward upstream gradient",
                expected: out.len(),
                got: d_out.len(),
            });
        }
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::Contract(
                "forward trace was produced by a different network".into(),
            ));
        }
        let mut delta = d_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            let a_prev = &trace.activations[l];
            let g = &mut grads.layers[l];
            ndarray::linalg::general_mat_mul(1.0, &delta.t(), a_prev, 1.0, &mut g.weight);
            g.bias += &delta.sum_axis(Axis(0));
            if l == 0 && !want_input_grad {
                return Ok(None);
            }
            let mut d_prev = delta.dot(&self.layers[l].weight);
            if l > 0 {
                let act = self.activation;
                ndarray::Zip::from(&mut d_prev)
                    .and(a_prev)
                    .for_each(|d, &a| *d *= act.derivative_from_output(a));
            }
            delta = d_prev;
        }
        Ok(Some(delta))
    }

    fn affine(&self, layer: &Dense, a: ArrayView2<f64>) -> Array2<f64> {
        let mut z = a.dot(&layer.weight.t());
        z += &layer.bias;
        z
    }

    fn check_input(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }
}

/// Gradient of a scalar built from network outputs.
///
/// Each entry of `nets` is a network together with the batch it is evaluated
/// on. `loss` receives a tape plus, per network, the outputs as tape variables
/// (`outputs[net][row][col]`) and must return the scalar root. The root is
/// differentiated with the tape, and the output adjoints are pushed through
/// each network with [`MlpParams::backward`].
pub fn grad_params<F>(
    nets: &[(&MlpParams, ArrayView2<f64>)],
    loss: F,
) -> Result<(f64, Vec<MlpParams>)>
where
    F: for<'t> FnOnce(&'t Tape, &[Vec<Vec<Var<'t>>>]) -> Var<'t>,
{
    let traces = nets
        .iter()
        .map(|(p, x)| p.forward_trace(x.view()))
        .collect::<Result<Vec<_>>>()?;
    let tape = Tape::new();
    let leaves: Vec<Vec<Vec<Var<'_>>>> = traces
        .iter()
        .map(|t| {
            t.output()
                .rows()
                .into_iter()
                .map(|row| row.iter().map(|&v| tape.var(v)).collect())
                .collect()
        })
        .collect();
    let root = loss(&tape, &leaves);
    let adjoints = tape.gradient(root)?;
    let mut grads = Vec::with_capacity(nets.len());
    for ((net, _), (trace, net_leaves)) in nets.iter().zip(traces.iter().zip(&leaves)) {
        let d_out = Array2::from_shape_fn(trace.output().dim(), |(r, c)| {
            adjoints[net_leaves[r][c].index()]
        });
        grads.push(net.backward(trace, d_out.view())?);
    }
    Ok((root.value(), grads))
}
