//! Synthetic micro-ultrasound cores.
//!
//! Tissue is modelled as colored-noise speckle: white Gaussian noise shaped
//! in the Fourier domain by a power spectrum `(|f|^2 + f0^2)^(-slope/2)`
//! with `f0 = 1 / speckle_scale`. Benign and cancerous tissue differ in
//! slope, amplitude, and speckle scale. A cancer core carries one cancerous
//! stretch of the needle, of length `involvement` times the in-prostate
//! needle length, filled with the cancer texture.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::geometry::{needle_mask_intervals, needle_rectangle};
use super::roi::{extract_patches, RoiParams};
use super::types::{
    BiopsyCore, CancerSpan, Dataset, Matrix, NeedleGeometry, ProstateMask, RfFrame,
};
use crate::error::{Error, Result};
use crate::seed;

/// Lateral half-width, in samples, of the cancerous tissue around the axis.
const CANCER_HALF_WIDTH: f64 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextureParams {
    pub spectral_slope: f64,
    pub std: f64,
    /// Correlation length of the speckle in samples.
    pub speckle_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub cores_per_patient: usize,
    pub n_centers: usize,
    pub cancer_core_rate: f64,
    pub involvement_range: (f64, f64),
    pub benign_texture: TextureParams,
    pub cancer_texture: TextureParams,
    pub frame_rows: usize,
    pub frame_cols: usize,
    /// mm per axial sample.
    pub axial_spacing: f64,
    /// mm per lateral line.
    pub lateral_spacing: f64,
    pub needle_depth_mm: (f64, f64),
    pub max_needle_angle: f64,
    pub needle_width_mm: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 60,
            cores_per_patient: 2,
            n_centers: 5,
            cancer_core_rate: 0.133,
            involvement_range: (0.2, 0.8),
            benign_texture: TextureParams {
                spectral_slope: 1.0,
                std: 1.0,
                speckle_scale: 3.0,
            },
            cancer_texture: TextureParams {
                spectral_slope: 2.0,
                std: 1.3,
                speckle_scale: 4.0,
            },
            frame_rows: 512,
            frame_cols: 256,
            axial_spacing: 0.05,
            lateral_spacing: 0.1,
            needle_depth_mm: (16.0, 20.0),
            max_needle_angle: 10.0,
            needle_width_mm: 1.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        if self.n_patients == 0 || self.cores_per_patient == 0 || self.n_centers == 0 {
            return bad("patient, core and center counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.cancer_core_rate) {
            return bad("cancer_core_rate must lie in [0, 1]");
        }
        let (lo, hi) = self.involvement_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("involvement_range must be a sub-interval of (0, 1]");
        }
        for t in [&self.benign_texture, &self.cancer_texture] {
            if !(t.std > 0.0 && t.speckle_scale > 0.0 && t.spectral_slope.is_finite()) {
                return bad("texture std and speckle_scale must be positive");
            }
        }
        if self.frame_rows < 16 || self.frame_cols < 16 {
            return bad("frame must be at least 16x16");
        }
        if !(self.axial_spacing > 0.0 && self.lateral_spacing > 0.0) {
            return bad("spacings must be positive");
        }
        let (d0, d1) = self.needle_depth_mm;
        if !(d0 > 0.0 && d0 <= d1) {
            return bad("needle_depth_mm must be a positive range");
        }
        if !(0.0..90.0).contains(&self.max_needle_angle) || !(self.needle_width_mm > 0.0) {
            return bad("needle angle must lie in [0, 90) and width be positive");
        }
        Ok(())
    }
}

/// Generates a dataset that is a pure function of `config` (seed included).
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let n_cores = config.n_patients * config.cores_per_patient;
    let n_cancer = (config.cancer_core_rate * n_cores as f64).round() as usize;
    let mut labels: Vec<u8> = (0..n_cores).map(|i| (i < n_cancer) as u8).collect();
    labels.shuffle(&mut seed::rng(config.seed, &[seed::label("labels")]));

    let mut planner = FftPlanner::<f64>::new();
    let mut cores = Vec::with_capacity(n_cores);
    for p in 0..config.n_patients {
        let patient_id = format!("P{p:04}");
        let center_id = (p % config.n_centers) as u32;
        for j in 0..config.cores_per_patient {
            let idx = p * config.cores_per_patient + j;
            cores.push(generate_core(
                config,
                &mut planner,
                idx,
                format!("{patient_id}-C{j:02}"),
                patient_id.clone(),
                center_id,
                labels[idx],
            )?);
        }
    }
    Ok(Dataset { cores })
}

fn generate_core(
    cfg: &SynthConfig,
    planner: &mut FftPlanner<f64>,
    idx: usize,
    core_id: String,
    patient_id: String,
    center_id: u32,
    label: u8,
) -> Result<BiopsyCore> {
    let mut rng = seed::rng(cfg.seed, &[seed::label("core"), idx as u64]);
    let (rows, cols) = (cfg.frame_rows, cfg.frame_cols);

    let depth = rng.random_range(cfg.needle_depth_mm.0..=cfg.needle_depth_mm.1);
    let angle = if cfg.max_needle_angle > 0.0 {
        rng.random_range(-cfg.max_needle_angle..=cfg.max_needle_angle)
    } else {
        0.0
    };
    let needle = NeedleGeometry::new(angle, depth, cfg.needle_width_mm)?;
    let origin_row = (rows as f64 * 0.06).round();
    let jitter = cols as f64 * 0.08;
    let origin = (
        origin_row,
        cols as f64 / 2.0 + rng.random_range(-jitter..=jitter),
    );

    let involvement = if label == 1 {
        rng.random_range(cfg.involvement_range.0..=cfg.involvement_range.1)
    } else {
        0.0
    };

    let benign = colored_noise(rows, cols, &cfg.benign_texture, planner, &mut rng);
    let cancer = if label == 1 {
        Some(colored_noise(rows, cols, &cfg.cancer_texture, planner, &mut rng))
    } else {
        None
    };

    // Geometry is computed on a placeholder frame; samples are filled below.
    let placeholder = RfFrame::new(
        Matrix::zeros(rows, cols),
        cfg.axial_spacing,
        cfg.lateral_spacing,
        origin,
    )?;
    let rect = needle_rectangle(&placeholder, &needle)?;

    // Elliptical gland centred on the needle axis.
    let center_t = rect.length * rng.random_range(0.45..0.6);
    let gland_center = rect.point_at(center_t);
    let semi_rows = rect.length * rng.random_range(0.4..0.6);
    let semi_cols = cols as f64 * rng.random_range(0.25..0.4);
    let mask = ProstateMask::from_fn(rows, cols, |r, c| {
        let dr = (r as f64 - gland_center.0) / semi_rows;
        let dc = (c as f64 - gland_center.1) / semi_cols;
        dr * dr + dc * dc <= 1.0
    });

    let cancer_span = if label == 1 {
        let segment = needle_mask_intervals(&rect, &mask);
        let total = segment.total_length();
        let start = rng.random_range(0.0..=(1.0 - involvement) * total);
        Some(CancerSpan {
            start: segment.axis_position(start),
            end: segment.axis_position(start + involvement * total),
        })
    } else {
        None
    };

    let mut samples = benign;
    if let (Some(span), Some(cancer)) = (cancer_span, cancer) {
        for r in 0..rows {
            for c in 0..cols {
                let (t, s) = rect.project((r as f64, c as f64));
                if span.contains(t) && s.abs() <= CANCER_HALF_WIDTH {
                    samples[r * cols + c] = cancer[r * cols + c];
                }
            }
        }
    }
    let frame = RfFrame::new(
        Matrix::new(rows, cols, samples.into_iter().map(|v| v as f32).collect())?,
        cfg.axial_spacing,
        cfg.lateral_spacing,
        origin,
    )?;

    let core = BiopsyCore {
        core_id,
        patient_id,
        center_id,
        label,
        involvement,
        frame,
        needle,
        mask,
        cancer_span,
    };
    core.validate()?;
    Ok(core)
}

fn fft_2d(data: &mut [Complex<f64>], rows: usize, cols: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let row_fft = if inverse {
        planner.plan_fft_inverse(cols)
    } else {
        planner.plan_fft_forward(cols)
    };
    row_fft.process(data);
    let col_fft = if inverse {
        planner.plan_fft_inverse(rows)
    } else {
        planner.plan_fft_forward(rows)
    };
    let mut column = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
}

fn colored_noise(
    rows: usize,
    cols: usize,
    tex: &TextureParams,
    planner: &mut FftPlanner<f64>,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let mut field: Vec<Complex<f64>> = (0..rows * cols)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    fft_2d(&mut field, rows, cols, planner, false);
    let freq = |k: usize, n: usize| {
        let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        k / n as f64
    };
    let f0 = 1.0 / tex.speckle_scale;
    for r in 0..rows {
        let fr = freq(r, rows);
        for c in 0..cols {
            let fc = freq(c, cols);
            let power = (fr * fr + fc * fc + f0 * f0).powf(-tex.spectral_slope / 2.0);
            field[r * cols + c] *= power.sqrt();
        }
    }
    fft_2d(&mut field, rows, cols, planner, true);
    let real: Vec<f64> = field.iter().map(|z| z.re).collect();
    let n = real.len() as f64;
    let mean = real.iter().sum::<f64>() / n;
    let sd = (real.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    real.iter().map(|v| (v - mean) / sd * tex.std).collect()
}

/// Per-ROI pixel-variance statistics split by synthetic truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separability {
    pub benign_rois: usize,
    pub cancer_rois: usize,
    pub benign_mean_variance: f64,
    pub cancer_mean_variance: f64,
    /// Cohen's d of the per-ROI variance between the two groups.
    pub effect_size: f64,
}

pub fn measure_separability(dataset: &Dataset, params: &RoiParams) -> Result<Separability> {
    let mut groups: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for core in &dataset.cores {
        for patch in extract_patches(core, params)? {
            let px = patch.pixels.as_slice();
            let n = px.len() as f64;
            let mean = px.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = px.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            groups[patch.synth_truth.unwrap_or(0) as usize].push(var);
        }
    }
    let stats = |g: &[f64]| {
        let n = g.len().max(1) as f64;
        let m = g.iter().sum::<f64>() / n;
        let v = g.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        (m, v)
    };
    let (mb, vb) = stats(&groups[0]);
    let (mc, vc) = stats(&groups[1]);
    let pooled = ((vb + vc) / 2.0).sqrt().max(1e-12);
    Ok(Separability {
        benign_rois: groups[0].len(),
        cancer_rois: groups[1].len(),
        benign_mean_variance: mb,
        cancer_mean_variance: mc,
        effect_size: (mc - mb) / pooled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_patients: 6,
            cores_per_patient: 1,
            cancer_core_rate: 0.5,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(&small(3)).unwrap();
        let b = synth_generate(&small(3)).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(&small(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn centers_round_robin_and_labels_consistent() {
        let cfg = SynthConfig {
            n_patients: 23,
            cores_per_patient: 1,
            n_centers: 5,
            cancer_core_rate: 0.3,
            frame_rows: 256,
            frame_cols: 128,
            needle_depth_mm: (8.0, 10.0),
            ..Default::default()
        };
        let d = synth_generate(&cfg).unwrap();
        let mut per_center = [0usize; 5];
        for (pid, c) in d.patients() {
            assert!(pid.starts_with('P'));
            per_center[c as usize] += 1;
        }
        let (lo, hi) = (per_center.iter().min().unwrap(), per_center.iter().max().unwrap());
        assert!(hi - lo <= 1);
        for core in &d.cores {
            core.validate().unwrap();
            assert_eq!(core.label == 1, core.cancer_span.is_some());
        }
        assert_eq!(d.cores.iter().filter(|c| c.label == 1).count(), 7);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SynthConfig::default();
        cfg.cancer_core_rate = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.involvement_range = (0.0, 0.5);
        assert!(cfg.validate().is_err());
    }
}
