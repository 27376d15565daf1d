use std::fs;
use std::io::Write;
use std::path::Path;

use super::{EvalError, Result};
use crate::tensor::Tensor2D;

/// Softmax of every row over the time axis.
pub fn time_softmax(align: &Tensor2D) -> Tensor2D {
    let mut out = align.clone();
    for k in 0..out.rows() {
        let row = out.row_mut(k);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

/// One row per line, comma-separated, shortest round-tripping decimals.
pub fn write_csv<W: Write>(w: &mut W, m: &Tensor2D) -> std::io::Result<()> {
    for k in 0..m.rows() {
        let line: Vec<String> = m.row(k).iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_csv(text: &str) -> Result<Tensor2D> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|e| EvalError::Parse(format!("line {}: {e}", i + 1)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Tensor2D::from_rows(&rows).map_err(|e| EvalError::Parse(e.to_string()))
}

/// Binary 8-bit grayscale image, each row scaled by its own maximum so the
/// peak of every sentence is white.
pub fn write_pgm<W: Write>(w: &mut W, m: &Tensor2D) -> std::io::Result<()> {
    write!(w, "P5\n{} {}\n255\n", m.cols(), m.rows())?;
    let mut buf = Vec::with_capacity(m.len());
    for k in 0..m.rows() {
        let row = m.row(k);
        let peak = row.iter().copied().fold(0.0, f64::max);
        buf.extend(row.iter().map(|&v| {
            if peak > 0.0 {
                (255.0 * v / peak).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
    }
    w.write_all(&buf)
}

/// Normalizes over time and writes the CSV grid, plus a PGM image when
/// `pgm` is given. Returns the normalized matrix.
pub fn export_heatmap(align: &Tensor2D, csv: &Path, pgm: Option<&Path>) -> Result<Tensor2D> {
    let norm = time_softmax(align);
    let mut buf = Vec::new();
    write_csv(&mut buf, &norm)?;
    fs::write(csv, buf)?;
    if let Some(p) = pgm {
        let mut img = Vec::new();
        write_pgm(&mut img, &norm)?;
        fs::write(p, img)?;
    }
    Ok(norm)
}
