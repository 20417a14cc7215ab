//! Plotter-agnostic CSV grids: the first row holds the x abscissae, every
//! following row starts with its τ value.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub fn write(path: &Path, taus: &[f64], xs: &[f64], values: &Array2<f64>) -> Result<()> {
    if values.dim() != (taus.len(), xs.len()) {
        return Err(Error::Shape {
            context: "CSV grid",
            expected: taus.len() * xs.len(),
            got: values.len(),
        });
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    let mut header = Vec::with_capacity(xs.len() + 1);
    header.push("tau\\x".to_string());
    header.extend(xs.iter().map(|x| x.to_string()));
    w.write_record(&header).map_err(csv_error)?;
    for (tau, row) in taus.iter().zip(values.rows()) {
        let mut rec = Vec::with_capacity(xs.len() + 1);
        rec.push(tau.to_string());
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a grid written by [`write`]: `(taus, xs, values)`.
pub fn read(path: &Path) -> Result<(Vec<f64>, Vec<f64>, Array2<f64>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_error)?;
    let parse = |s: &str, offset: u64| {
        s.parse::<f64>().map_err(|e| Error::Parse {
            offset,
            message: format!("bad number '{s}': {e}"),
        })
    };
    let xs = r
        .headers()
        .map_err(csv_error)?
        .iter()
        .skip(1)
        .map(|s| parse(s, 0))
        .collect::<Result<Vec<_>>>()?;
    let mut taus = Vec::new();
    let mut flat = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        let offset = rec.position().map(|p| p.byte()).unwrap_or(0);
        let mut fields = rec.iter();
        taus.push(parse(fields.next().unwrap_or(""), offset)?);
        for f in fields {
            flat.push(parse(f, offset)?);
        }
    }
    let values = Array2::from_shape_vec((taus.len(), xs.len()), flat).map_err(|e| Error::Parse {
        offset: 0,
        message: e.to_string(),
    })?;
    Ok((taus, xs, values))
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            offset: 0,
            message: format!("{other:?}"),
        },
    }
}
