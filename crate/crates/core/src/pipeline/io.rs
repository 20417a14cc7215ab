//! Versioned little-endian binary containers for datasets and checkpoints.
//!
//! Both start with eight magic bytes and a `u32` format version. Counts are
//! `u64`, reals are `f64`, and every array is written row-major.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::deeponet::{DeepOnet, Domain, QueryPoint};
use crate::error::{Error, Result};
use crate::gp::{SensorGrid, SourceFunction};
use crate::nnet::{Activation, Dense, MlpParams};
use crate::physics::{CollocationSet, StencilConfig, TrainingExample};

use super::{Dataset, MetricHistory, MetricRecord};

pub const DATASET_MAGIC: &[u8; 8] = b"PIDNDATA";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PIDNCKPT";
pub const FORMAT_VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 8]) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }

    fn points(&mut self, pts: &[QueryPoint]) {
        for p in pts {
            self.f64(p.tau);
            self.f64(p.x);
        }
    }

    fn net(&mut self, net: &MlpParams) {
        self.u8(net.activation.code());
        let sizes = net.layer_sizes();
        self.len(sizes.len());
        for s in sizes {
            self.len(s);
        }
        for layer in &net.layers {
            self.f64s(layer.weight.iter());
            self.f64s(layer.bias.iter());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Self> {
        let mut r = Self { bytes, pos: 0 };
        let found = r.take(8)?;
        if found != magic {
            return Err(Error::Parse {
                offset: 0,
                message: format!(
                    "bad magic bytes, expected {:?}",
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(r)
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "unexpected end of file: needed {n} bytes, {} left",
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A count whose payload of `unit` bytes per item must still fit in the file.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64()?;
        let left = (self.bytes.len() - self.pos) as u64;
        if n.checked_mul(unit as u64).is_none_or(|b| b > left) {
            return Err(Error::Parse {
                offset: at as u64,
                message: format!("count {n} exceeds the remaining {left} bytes"),
            });
        }
        Ok(n as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn points(&mut self, n: usize) -> Result<Vec<QueryPoint>> {
        (0..n)
            .map(|_| Ok(QueryPoint::new(self.f64()?, self.f64()?)))
            .collect()
    }

    fn net(&mut self) -> Result<MlpParams> {
        let at = self.pos;
        let code = self.u8()?;
        let activation = match Activation::from_code(code) {
            Some(a) => a,
            None => {
                return Err(Error::Parse {
                    offset: at as u64,
                    message: format!("unknown activation code {code}"),
                })
            }
        };
        let n = self.count(8)?;
        if n < 2 {
            return self.fail("a network needs at least two layer sizes");
        }
        let sizes = (0..n)
            .map(|_| self.u64().map(|s| s as usize))
            .collect::<Result<Vec<_>>>()?;
        if sizes.contains(&0) {
            return self.fail("zero layer width");
        }
        let mut layers = Vec::with_capacity(n - 1);
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let needed = fan_in
                .checked_mul(fan_out)
                .and_then(|k| k.checked_add(fan_out))
                .and_then(|k| k.checked_mul(8));
            if needed.is_none_or(|b| b > self.bytes.len() - self.pos) {
                return self.fail("layer larger than the remaining file");
            }
            let weight = Array2::from_shape_vec((fan_out, fan_in), self.f64s(fan_in * fan_out)?)
                .expect("layer shape");
            let bias = Array1::from_vec(self.f64s(fan_out)?);
            layers.push(Dense { weight, bias });
        }
        Ok(MlpParams { layers, activation })
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return self.fail(format!("{} trailing bytes", self.bytes.len() - self.pos));
        }
        Ok(())
    }
}

fn parse_domain(r: &mut Reader<'_>) -> Result<Domain> {
    let at = r.pos as u64;
    let (t, l) = (r.f64()?, r.f64()?);
    Domain::new(t, l).map_err(|e| Error::Parse {
        offset: at,
        message: e.to_string(),
    })
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let mut w = Writer::new(DATASET_MAGIC);
    w.u64(data.seed);
    w.f64(data.domain.horizon);
    w.f64(data.domain.half_width);
    w.f64(data.stencil.h_x);
    w.f64(data.stencil.h_tau);
    let (q, p) = data
        .examples
        .first()
        .map(|e| (e.points.interior.len(), e.points.boundary.len()))
        .unwrap_or((0, 0));
    if data
        .examples
        .iter()
        .any(|e| e.points.interior.len() != q || e.points.boundary.len() != p)
    {
        return Err(Error::Contract("collocation sizes differ across functions".into()));
    }
    w.len(data.sensors());
    w.len(data.len());
    w.len(q);
    w.len(p);
    for ex in &data.examples {
        w.f64s(ex.source.sensor_values());
        w.points(&ex.points.interior);
        w.points(&ex.points.boundary);
    }
    Ok(w.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::open(bytes, DATASET_MAGIC)?;
    let seed = r.u64()?;
    let domain = parse_domain(&mut r)?;
    let stencil = StencilConfig {
        h_x: r.f64()?,
        h_tau: r.f64()?,
    };
    let at = r.pos as u64;
    let m = r.count(8)?;
    let grid = Arc::new(SensorGrid::uniform(m, domain.half_width).map_err(|e| Error::Parse {
        offset: at,
        message: e.to_string(),
    })?);
    let n = r.count(1)?;
    let q = r.count(16)?;
    let p = r.count(16)?;
    let per_function = (m + 2 * q + 2 * p) * 8;
    if n.checked_mul(per_function).is_none_or(|b| b > bytes.len() - r.pos) {
        return r.fail(format!("{n} functions do not fit in the remaining bytes"));
    }
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let values = r.f64s(m)?;
        let source = SourceFunction::new(Arc::clone(&grid), values)?;
        let interior = r.points(q)?;
        let boundary = r.points(p)?;
        examples.push(TrainingExample {
            source,
            points: CollocationSet { interior, boundary },
        });
    }
    r.finish()?;
    let data = Dataset {
        grid,
        examples,
        seed,
        domain,
        stencil,
    };
    data.validate().map_err(|e| Error::Parse {
        offset: bytes.len() as u64,
        message: format!("dataset violates its invariants: {e}"),
    })?;
    Ok(data)
}

pub fn save_dataset(data: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(data)?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

pub fn encode_checkpoint(model: &DeepOnet, history: &MetricHistory) -> Vec<u8> {
    let mut w = Writer::new(CHECKPOINT_MAGIC);
    w.f64(model.domain.horizon);
    w.f64(model.domain.half_width);
    w.f64(model.output_scale);
    w.f64(model.output_bias);
    w.net(&model.branch);
    w.net(&model.trunk);
    w.len(history.len());
    for rec in &history.records {
        w.u64(rec.iteration);
        w.f64(rec.physics_loss);
        w.f64(rec.operator_loss);
        w.f64(rec.total_loss);
        w.f64(rec.seconds);
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(DeepOnet, MetricHistory)> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC)?;
    let domain = parse_domain(&mut r)?;
    let output_scale = r.f64()?;
    let output_bias = r.f64()?;
    let branch = r.net()?;
    let at = r.pos as u64;
    let trunk = r.net()?;
    let model = DeepOnet::from_parts(branch, trunk, output_scale, output_bias, domain).map_err(|e| {
        Error::Parse {
            offset: at,
            message: e.to_string(),
        }
    })?;
    let n = r.count(40)?;
    let mut history = MetricHistory::default();
    for _ in 0..n {
        history.records.push(MetricRecord {
            iteration: r.u64()?,
            physics_loss: r.f64()?,
            operator_loss: r.f64()?,
            total_loss: r.f64()?,
            seconds: r.f64()?,
        });
    }
    r.finish()?;
    Ok((model, history))
}

pub fn save_checkpoint(model: &DeepOnet, history: &MetricHistory, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model, history))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(DeepOnet, MetricHistory)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Rejects a model whose sensor count or domain differs from the dataset's.
pub fn check_compatible(model: &DeepOnet, data: &Dataset) -> Result<()> {
    super::train::check_model_matches(model, data)
}
