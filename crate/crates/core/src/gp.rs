//! Source-term sampling from a zero-mean Gaussian process with an
//! exponential-quadratic kernel.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GpConfig {
    /// Kernel amplitude σ_f².
    pub variance: f64,
    pub length_scale: f64,
    /// First rung of the diagonal jitter ladder.
    pub jitter: f64,
    pub jitter_factor: f64,
    pub max_jitter: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            variance: 1.0,
            length_scale: 0.2,
            jitter: 1e-10,
            jitter_factor: 10.0,
            max_jitter: 1e-4,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance >= 0.0 && self.variance.is_finite()) {
            return Err(Error::Config("GP variance must be non-negative".into()));
        }
        if !(self.length_scale > 0.0 && self.length_scale.is_finite()) {
            return Err(Error::Config("GP length scale must be positive".into()));
        }
        if !(self.jitter > 0.0 && self.jitter_factor > 1.0 && self.max_jitter >= self.jitter) {
            return Err(Error::Config(
                "jitter ladder must start positive, grow, and be bounded".into(),
            ));
        }
        Ok(())
    }

    /// The increasing sequence of diagonal shifts tried by
    /// [`cholesky_jittered`].
    pub fn jitter_ladder(&self) -> Vec<f64> {
        let mut ladder = Vec::new();
        let mut j = self.jitter;
        while j <= self.max_jitter * (1.0 + 1e-12) {
            ladder.push(j);
            j *= self.jitter_factor;
        }
        ladder
    }
}

/// `m` uniformly spaced sensors on `[-L, L]`, endpoints included.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorGrid {
    positions: Vec<f64>,
    half_width: f64,
}

impl SensorGrid {
    pub fn uniform(m: usize, half_width: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::Config(format!("need at least 2 sensors, got {m}")));
        }
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::Config("sensor half-width must be positive".into()));
        }
        let step = 2.0 * half_width / (m - 1) as f64;
        let mut positions: Vec<f64> = (0..m).map(|i| -half_width + i as f64 * step).collect();
        positions[m - 1] = half_width;
        Ok(Self {
            positions,
            half_width,
        })
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }
}

/// A source term `g(x)` stored by its values at the sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceFunction {
    values: Vec<f64>,
    grid: Arc<SensorGrid>,
}

impl SourceFunction {
    pub fn new(grid: Arc<SensorGrid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape {
                context: "source function sensor values",
                expected: grid.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("source values must be finite".into()));
        }
        Ok(Self { values, grid })
    }

    /// Builds a source by sampling a closure at the sensors.
    pub fn from_fn(grid: Arc<SensorGrid>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.positions().iter().map(|&x| f(x)).collect();
        Self::new(grid, values)
    }

    pub fn sensor_values(&self) -> &[f64] {
        &self.values
    }

    pub fn grid(&self) -> &Arc<SensorGrid> {
        &self.grid
    }

    /// Piecewise-linear interpolation between sensors; exact at sensors.
    pub fn eval(&self, x: f64) -> Result<f64> {
        let pos = self.grid.positions();
        let l = self.grid.half_width();
        if !(x >= -l && x <= l) {
            return Err(Error::Domain { tau: 0.0, x });
        }
        let step = 2.0 * l / (pos.len() - 1) as f64;
        let k = (((x + l) / step).floor() as usize).min(pos.len() - 2);
        // Floating-point rounding can land one cell off; fix it locally.
        let k = if x < pos[k] {
            k.saturating_sub(1)
        } else if x > pos[k + 1] {
            (k + 1).min(pos.len() - 2)
        } else {
            k
        };
        if x == pos[k] {
            return Ok(self.values[k]);
        }
        if x == pos[k + 1] {
            return Ok(self.values[k + 1]);
        }
        let w = (x - pos[k]) / (pos[k + 1] - pos[k]);
        Ok(self.values[k] + w * (self.values[k + 1] - self.values[k]))
    }
}

/// `K[i][j] = σ_f² exp(-(x_i - x_j)² / (2 l²))`.
pub fn kernel_matrix(grid: &SensorGrid, cfg: &GpConfig) -> Array2<f64> {
    let x = grid.positions();
    let inv = 1.0 / (2.0 * cfg.length_scale * cfg.length_scale);
    let m = x.len();
    let mut k = Array2::zeros((m, m));
    for i in 0..m {
        k[[i, i]] = cfg.variance;
        for j in 0..i {
            let d = x[i] - x[j];
            let v = cfg.variance * (-d * d * inv).exp();
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }
    k
}

/// Plain Cholesky factorization; `None` on a non-positive pivot.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
    }
    Some(l)
}

/// Lower-triangular factor together with the jitter that made it succeed.
#[derive(Debug, Clone, PartialEq)]
pub struct JitteredFactor {
    pub lower: Array2<f64>,
    pub jitter: f64,
}

/// Factors `K + λI` for the smallest λ on the jitter ladder that works.
pub fn cholesky_jittered(k: &Array2<f64>, cfg: &GpConfig) -> Result<JitteredFactor> {
    if k.nrows() != k.ncols() {
        return Err(Error::Shape {
            context: "kernel matrix",
            expected: k.nrows(),
            got: k.ncols(),
        });
    }
    for jitter in cfg.jitter_ladder() {
        let mut shifted = k.clone();
        shifted.diag_mut().mapv_inplace(|d| d + jitter);
        if let Some(lower) = cholesky(&shifted) {
            return Ok(JitteredFactor { lower, jitter });
        }
    }
    Err(Error::NotPositiveDefinite {
        max_jitter: cfg.max_jitter,
    })
}

/// Counter-based standard-normal stream: ChaCha20 keyed by `seed`, one
/// independent stream per `stream` index, Box–Muller on consecutive uniform pairs.
pub struct NormalStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl NormalStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng, spare: None }
    }

    /// Uniform on the open interval (0, 1) with 53 random bits.
    fn uniform_open(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform_open();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// `g = L z` with `z` standard normal from stream `stream` of `seed`.
pub fn sample_source(
    lower: &Array2<f64>,
    grid: &Arc<SensorGrid>,
    seed: u64,
    stream: u64,
) -> Result<SourceFunction> {
    let m = grid.len();
    if lower.dim() != (m, m) {
        return Err(Error::Shape {
            context: "Cholesky factor",
            expected: m,
            got: lower.nrows(),
        });
    }
    let mut normals = NormalStream::new(seed, stream);
    let z: Array1<f64> = (0..m).map(|_| normals.next_normal()).collect();
    let values = lower.dot(&z).to_vec();
    SourceFunction::new(Arc::clone(grid), values)
}

/// Factor once, then draw `count` sources from consecutive streams.
pub struct GpSampler {
    grid: Arc<SensorGrid>,
    factor: JitteredFactor,
}

impl GpSampler {
    pub fn new(grid: Arc<SensorGrid>, cfg: &GpConfig) -> Result<Self> {
        cfg.validate()?;
        let k = kernel_matrix(&grid, cfg);
        let factor = cholesky_jittered(&k, cfg)?;
        Ok(Self { grid, factor })
    }

    pub fn grid(&self) -> &Arc<SensorGrid> {
        &self.grid
    }

    pub fn factor(&self) -> &JitteredFactor {
        &self.factor
    }

    pub fn sample(&self, seed: u64, stream: u64) -> Result<SourceFunction> {
        sample_source(&self.factor.lower, &self.grid, seed, stream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn grid(m: usize) -> Arc<SensorGrid> {
        Arc::new(SensorGrid::uniform(m, 1.0).unwrap())
    }

    #[test]
    fn sensor_grid_endpoints() {
        let g = SensorGrid::uniform(100, 1.0).unwrap();
        assert_eq!(g.positions()[0], -1.0);
        assert_eq!(g.positions()[99], 1.0);
        assert!(g.positions().windows(2).all(|w| w[0] < w[1]));
        assert!(SensorGrid::uniform(1, 1.0).is_err());
    }

    #[test]
    fn kernel_diagonal_symmetry_and_value() {
        let g = SensorGrid::uniform(11, 1.0).unwrap(); // spacing 0.2
        let cfg = GpConfig::default();
        let k = kernel_matrix(&g, &cfg);
        for i in 0..11 {
            assert_eq!(k[[i, i]], cfg.variance);
            for j in 0..11 {
                assert_eq!(k[[i, j]], k[[j, i]]);
            }
        }
        assert!((k[[0, 1]] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((k[[0, 1]] - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn kernel_is_stationary() {
        let g = SensorGrid::uniform(21, 1.0).unwrap();
        let k = kernel_matrix(&g, &GpConfig::default());
        for gap in 1..5 {
            let reference = k[[0, gap]];
            for i in 0..(21 - gap) {
                assert!((k[[i, i + gap]] - reference).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cholesky_by_hand() {
        let f = cholesky_jittered(&array![[4.0, 2.0], [2.0, 3.0]], &GpConfig::default()).unwrap();
        let expected = array![[2.0, 0.0], [1.0, 2f64.sqrt()]];
        for (a, b) in f.lower.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn cholesky_of_identity() {
        let f = cholesky_jittered(&Array2::eye(5), &GpConfig::default()).unwrap();
        for (a, b) in f.lower.iter().zip(Array2::<f64>::eye(5).iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn indefinite_matrix_fails() {
        let err = cholesky_jittered(&array![[1.0, 2.0], [2.0, 1.0]], &GpConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { .. }));
    }

    #[test]
    fn jitter_ladder_is_increasing_and_bounded() {
        let ladder = GpConfig::default().jitter_ladder();
        assert_eq!(ladder.len(), 7);
        assert_eq!(ladder[0], 1e-10);
        assert!(ladder.windows(2).all(|w| w[0] < w[1]));
        assert!(*ladder.last().unwrap() <= 1e-4 * (1.0 + 1e-9));
    }

    #[test]
    fn kernel_factorizes_up_to_500_sensors() {
        let cfg = GpConfig::default();
        for m in [2, 20, 100, 250, 500] {
            let g = SensorGrid::uniform(m, 1.0).unwrap();
            let k = kernel_matrix(&g, &cfg);
            let f = cholesky_jittered(&k, &cfg).unwrap();
            let mut shifted = k.clone();
            shifted.diag_mut().mapv_inplace(|d| d + f.jitter);
            let rec = f.lower.dot(&f.lower.t());
            let err = (&rec - &shifted).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(err < 1e-8 * cfg.variance * m as f64, "m = {m}: {err}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = GpSampler::new(grid(30), &GpConfig::default()).unwrap();
        assert_eq!(s.sample(4, 2).unwrap(), s.sample(4, 2).unwrap());
        assert_ne!(s.sample(4, 2).unwrap(), s.sample(4, 3).unwrap());
        assert_ne!(s.sample(4, 2).unwrap(), s.sample(5, 2).unwrap());
    }

    #[test]
    fn zero_factor_gives_zero_source() {
        let g = grid(10);
        let s = sample_source(&Array2::zeros((10, 10)), &g, 1, 0).unwrap();
        assert!(s.sensor_values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_variance_is_pure_jitter() {
        let cfg = GpConfig {
            variance: 0.0,
            ..GpConfig::default()
        };
        let s = GpSampler::new(grid(50), &cfg).unwrap();
        assert!(s.factor().jitter <= 1e-4);
        for stream in 0..20 {
            assert!(s.sample(1, stream).unwrap().sensor_values().iter().all(|v| v.abs() <= 0.1));
        }
    }

    #[test]
    fn sample_mean_is_near_zero() {
        let s = GpSampler::new(grid(5), &GpConfig::default()).unwrap();
        let n = 10_000;
        let mut sum = [0.0; 5];
        for i in 0..n {
            let g = s.sample(99, i).unwrap();
            for (acc, v) in sum.iter_mut().zip(g.sensor_values()) {
                *acc += v;
            }
        }
        for acc in sum {
            assert!((acc / n as f64).abs() < 4.0 * (1.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn box_muller_moments() {
        let mut s = NormalStream::new(3, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| s.next_normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn interpolation() {
        let g = grid(3); // sensors at -1, 0, 1
        let s = SourceFunction::new(g, vec![1.0, 3.0, -1.0]).unwrap();
        assert_eq!(s.eval(0.0).unwrap(), 3.0);
        assert_eq!(s.eval(-1.0).unwrap(), 1.0);
        assert_eq!(s.eval(1.0).unwrap(), -1.0);
        assert_eq!(s.eval(-0.5).unwrap(), 2.0);
        assert!(matches!(s.eval(1.1), Err(Error::Domain { .. })));
        assert!(s.eval(f64::NAN).is_err());
    }

    #[test]
    fn source_rejects_wrong_length() {
        assert!(SourceFunction::new(grid(4), vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn interpolation_is_exact_on_sensors_and_bounded_between(
            values in prop::collection::vec(-5.0f64..5.0, 17),
            t in 0.0f64..1.0,
        ) {
            let g = grid(17);
            let s = SourceFunction::new(Arc::clone(&g), values.clone()).unwrap();
            for (x, v) in g.positions().iter().zip(&values) {
                prop_assert_eq!(s.eval(*x).unwrap(), *v);
            }
            let x = -1.0 + 2.0 * t;
            let y = s.eval(x).unwrap();
            let k = (((x + 1.0) / (2.0 / 16.0)).floor() as usize).min(15);
            let (lo, hi) = (values[k].min(values[k + 1]), values[k].max(values[k + 1]));
            prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        }
    }
}
