//! Plain f64 reference implementations used as test oracles, plus helpers
//! for comparing autograd gradients against central differences.

#![allow(dead_code)]

use candle_core::{Device, Tensor, Var};
use pcus::multiscale::MultiScaleOutput;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn tensor2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), (rows, cols), &Device::Cpu).unwrap()
}

pub fn var2(rows: usize, cols: usize, v: &[f64]) -> Var {
    Var::from_tensor(&tensor2(rows, cols, v)).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// `(invariance, variance, covariance)` for row-major `[n, d]` inputs,
/// variance and covariance summed over both views.
pub fn vicreg_terms(z1: &[f64], z2: &[f64], n: usize, d: usize, target: f64, eps: f64) -> (f64, f64, f64) {
    let inv = z1.iter().zip(z2).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (n * d) as f64;
    let vc = |z: &[f64]| {
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| z[i * d + j]).sum::<f64>() / n as f64).collect();
        let cov = |a: usize, b: usize| {
            (0..n).map(|i| (z[i * d + a] - mean[a]) * (z[i * d + b] - mean[b])).sum::<f64>() / (n - 1) as f64
        };
        let mut v = 0.0;
        let mut c = 0.0;
        for a in 0..d {
            v += (target - (cov(a, a) + eps).sqrt()).max(0.0);
            for b in 0..d {
                if a != b {
                    c += cov(a, b).powi(2);
                }
            }
        }
        (v / d as f64, c / d as f64)
    };
    let (v1, c1) = vc(z1);
    let (v2, c2) = vc(z2);
    (inv, v1 + v2, c1 + c2)
}

pub fn vicreg_total(z1: &[f64], z2: &[f64], n: usize, d: usize) -> f64 {
    let (i, v, c) = vicreg_terms(z1, z2, n, d, 1.0, 1e-4);
    25.0 * i + 25.0 * v + c
}

/// Cross-entropy of a two-class logit pair.
pub fn ce2(l0: f64, l1: f64, y: u8) -> f64 {
    let m = l0.max(l1);
    let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
    lse - if y == 1 { l1 } else { l0 }
}

pub fn mean_ce(logits: &[f64], labels: &[u8]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| ce2(logits[2 * i], logits[2 * i + 1], y))
        .sum::<f64>()
        / labels.len() as f64
}

/// `(core_term, roi_term)` for `b` cores of `t` ROIs.
pub fn mo_terms(core: &[f64], roi: &[f64], mask: &[f64], y: &[u8], b: usize, t: usize) -> (f64, f64) {
    let core_term = mean_ce(core, y);
    let mut roi_term = 0.0;
    for i in 0..b {
        let mut s = 0.0;
        let mut m = 0.0;
        for j in 0..t {
            let k = i * t + j;
            s += mask[k] * ce2(roi[2 * k], roi[2 * k + 1], y[i]);
            m += mask[k];
        }
        roi_term += s / m;
    }
    (core_term, roi_term / b as f64)
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut p = x.to_vec();
    for i in 0..x.len() {
        p[i] = x[i] + h;
        let up = f(&p);
        p[i] = x[i] - h;
        let down = f(&p);
        p[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    g
}

/// `||a - b|| / max(||a||, ||b||)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Sensitivity/specificity/balanced-accuracy rows of the published results
/// table (percent).
pub const PUBLISHED_ROWS: [(&str, &str, f64, f64, f64); 8] = [
    ("ResNet18", "Linear", 65.3, 73.6, 69.0),
    ("ViT", "Linear", 69.1, 54.6, 62.8),
    ("CCT", "Linear", 70.6, 65.5, 68.1),
    ("PvT", "Linear", 71.4, 63.4, 67.4),
    ("ResNet18", "BERT", 63.4, 65.4, 64.4),
    ("ResNet18", "BERT + MO", 75.9, 66.3, 71.1),
    ("CCT", "BERT", 66.5, 56.5, 61.5),
    ("CCT", "BERT + MO", 53.3, 73.4, 63.4),
];

pub fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale).collect()
}

pub struct MoCase {
    pub b: usize,
    pub t: usize,
    pub core: Vec<f64>,
    pub roi: Vec<f64>,
    pub mask: Vec<f64>,
    pub y: Vec<u8>,
}

pub fn mo_case(rng: &mut ChaCha8Rng) -> MoCase {
    let b = rng.random_range(1..4);
    let t = rng.random_range(1..7);
    let mut mask: Vec<f64> = (0..b * t).map(|_| rng.random_range(0..2) as f64).collect();
    for i in 0..b {
        mask[i * t] = 1.0;
    }
    MoCase {
        b,
        t,
        core: randn(rng, 2 * b, 3.0),
        roi: randn(rng, 2 * b * t, 3.0),
        mask,
        y: (0..b).map(|_| rng.random_range(0..2)).collect(),
    }
}

pub fn mo_output(c: &MoCase) -> (candle_core::Var, candle_core::Var, MultiScaleOutput, Tensor) {
    let core = var2(c.b, 2, &c.core);
    let roi = candle_core::Var::from_tensor(
        &Tensor::from_vec(c.roi.clone(), (c.b, c.t, 2), &Device::Cpu).unwrap(),
    )
    .unwrap();
    let out = MultiScaleOutput {
        core_logits: core.as_tensor().clone(),
        roi_logits: roi.as_tensor().clone(),
    };
    let mask = tensor2(c.b, c.t, &c.mask);
    (core, roi, out, mask)
}
