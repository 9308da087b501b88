//! CSV encodings.
//!
//! Sequences: header `t,v0,…,v{n-1}`, one row per time step.
//! Kernels: header `t,k,b0_0,b0_1,…` with the block flattened row-major, one
//! row per stored block `(t, k)`. Block shape is read back from the header.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use super::{LinearCausalKernel, Sequence};
use crate::error::{Result, SlsError};

pub fn write_sequence_csv<W: Write>(seq: &Sequence, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..seq.dim()).map(|i| format!("v{i}")));
    w.write_record(&header)?;
    for (t, v) in seq.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(v.iter().map(|x| format_float(*x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sequence_csv<R: Read>(input: R) -> Result<Sequence> {
    let mut r = csv::Reader::from_reader(input);
    let dim = r.headers()?.len().saturating_sub(1);
    let mut values = Vec::new();
    for (expected_t, rec) in r.records().enumerate() {
        let rec = rec?;
        let t: usize = parse_field(&rec, 0)?;
        if t != expected_t {
            return Err(SlsError::Parse(format!(
                "sequence rows must be consecutive from t = 0; found t = {t} at row {expected_t}"
            )));
        }
        let v: Vec<f64> = (1..=dim).map(|i| parse_field(&rec, i)).collect::<Result<_>>()?;
        values.push(DVector::from_vec(v));
    }
    Sequence::new(dim, values)
}

pub fn write_kernel_csv<W: Write>(kernel: &LinearCausalKernel, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string(), "k".to_string()];
    for i in 0..kernel.out_dim() {
        for j in 0..kernel.in_dim() {
            header.push(format!("b{i}_{j}"));
        }
    }
    w.write_record(&header)?;
    for (t, k, block) in kernel.iter_blocks() {
        let mut row = vec![t.to_string(), k.to_string()];
        for i in 0..block.nrows() {
            for j in 0..block.ncols() {
                row.push(format_float(block[(i, j)]));
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a kernel written by [`write_kernel_csv`]. The FIR horizon is not part
/// of the CSV, so callers pass it (from a metadata header) or `None`.
pub fn read_kernel_csv<R: Read>(input: R, fir: Option<usize>) -> Result<LinearCausalKernel> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let (rows, cols) = block_shape(&headers)?;
    let mut entries: Vec<(usize, usize, DMatrix<f64>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let t: usize = parse_field(&rec, 0)?;
        let k: usize = parse_field(&rec, 1)?;
        let data: Vec<f64> = (2..2 + rows * cols)
            .map(|i| parse_field(&rec, i))
            .collect::<Result<_>>()?;
        entries.push((t, k, DMatrix::from_row_slice(rows, cols, &data)));
    }
    let horizon = entries
        .iter()
        .map(|(t, _, _)| *t)
        .max()
        .ok_or_else(|| SlsError::Parse("kernel CSV has no blocks".into()))?;
    let mut kernel = LinearCausalKernel::zeros(rows, cols, horizon, fir);
    let mut seen = 0usize;
    for (t, k, b) in entries {
        kernel.set_block(t, k, b)?;
        seen += 1;
    }
    let expected: usize = (0..=horizon).map(|t| kernel.lags_at(t)).sum();
    if seen != expected {
        return Err(SlsError::Parse(format!(
            "kernel CSV lists {seen} blocks, support requires {expected}"
        )));
    }
    Ok(kernel)
}

fn block_shape(headers: &csv::StringRecord) -> Result<(usize, usize)> {
    let mut rows = 0;
    let mut cols = 0;
    for name in headers.iter().skip(2) {
        let (i, j) = name
            .strip_prefix('b')
            .and_then(|s| s.split_once('_'))
            .and_then(|(i, j)| Some((i.parse::<usize>().ok()?, j.parse::<usize>().ok()?)))
            .ok_or_else(|| SlsError::Parse(format!("bad kernel column `{name}`")))?;
        rows = rows.max(i + 1);
        cols = cols.max(j + 1);
    }
    if rows * cols != headers.len().saturating_sub(2) || rows == 0 {
        return Err(SlsError::Parse("kernel header does not describe a full block".into()));
    }
    Ok((rows, cols))
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| SlsError::Parse(format!("missing column {i}")))?;
    raw.trim()
        .parse()
        .map_err(|_| SlsError::Parse(format!("cannot parse `{raw}` in column {i}")))
}

/// Shortest representation that round-trips exactly.
pub(crate) fn format_float(x: f64) -> String {
    format!("{x:?}")
}
