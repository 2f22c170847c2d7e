use super::types::Matrix;
use crate::error::{Error, Result};

const STD_EPS: f64 = 1e-8;
const RANGE_EPS: f64 = 1e-12;

/// Align-corners bilinear resize: output corner pixels coincide with input
/// corner pixels.
pub fn resize_bilinear(window: &Matrix, out_rows: usize, out_cols: usize) -> Result<Matrix> {
    let (h, w) = window.shape();
    if h < 2 || w < 2 {
        return Err(Error::invalid(format!(
            "bilinear resize needs at least 2x2 input, got {h}x{w}"
        )));
    }
    if out_rows < 2 || out_cols < 2 {
        return Err(Error::invalid("bilinear resize output must be at least 2x2"));
    }
    if (h, w) == (out_rows, out_cols) {
        return Ok(window.clone());
    }
    let sr = (h - 1) as f64 / (out_rows - 1) as f64;
    let sc = (w - 1) as f64 / (out_cols - 1) as f64;
    // Column taps are shared by every output row.
    let col_taps: Vec<(usize, f64)> = (0..out_cols)
        .map(|j| {
            let x = j as f64 * sc;
            let c0 = (x.floor() as usize).min(w - 2);
            (c0, x - c0 as f64)
        })
        .collect();
    let src = window.as_slice();
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for i in 0..out_rows {
        let y = i as f64 * sr;
        let r0 = (y.floor() as usize).min(h - 2);
        let fy = y - r0 as f64;
        let top = &src[r0 * w..(r0 + 1) * w];
        let bot = &src[(r0 + 1) * w..(r0 + 2) * w];
        for &(c0, fx) in &col_taps {
            let a = top[c0] as f64 * (1.0 - fx) + top[c0 + 1] as f64 * fx;
            let b = bot[c0] as f64 * (1.0 - fx) + bot[c0 + 1] as f64 * fx;
            out.push((a * (1.0 - fy) + b * fy) as f32);
        }
    }
    Matrix::new(out_rows, out_cols, out)
}

/// Instance standardization with the population standard deviation.
pub fn standardize(window: &Matrix) -> Result<Vec<f64>> {
    if !window.all_finite() {
        return Err(Error::invalid("ROI window contains non-finite values"));
    }
    let n = window.as_slice().len();
    if n == 0 {
        return Err(Error::invalid("empty ROI window"));
    }
    let mean = window.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let var = window
        .as_slice()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt() + STD_EPS;
    Ok(window
        .as_slice()
        .iter()
        .map(|&v| (v as f64 - mean) / std)
        .collect())
}

/// Standardize, then min-max rescale into `[0, 1]`. Constant windows map to
/// zeros.
pub fn normalize_rescale(window: &Matrix) -> Result<Matrix> {
    let z = standardize(window)?;
    let (lo, hi) = z
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo + RANGE_EPS;
    let data = z
        .iter()
        .map(|&v| ((v - lo) / range).clamp(0.0, 1.0) as f32)
        .collect();
    Matrix::new(window.rows(), window.cols(), data)
}
