use serde::{Deserialize, Serialize};

use super::geometry::{needle_mask_intervals, needle_rectangle};
use super::preprocess::{normalize_rescale, resize_bilinear};
use super::types::{BiopsyCore, Matrix, RoiPatch};
use crate::error::{Error, Result};
use crate::{PATCHES_PER_CORE, ROI_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiParams {
    pub n_patches: usize,
    /// Physical side length of an ROI window in mm.
    pub roi_mm: f64,
    pub out_size: usize,
}

impl Default for RoiParams {
    fn default() -> Self {
        Self {
            n_patches: PATCHES_PER_CORE,
            roi_mm: 5.0,
            out_size: ROI_SIZE,
        }
    }
}

/// A raw ROI window cut from the RF frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiWindow {
    pub index: usize,
    /// Window center on the needle axis, sample coordinates.
    pub center: (f64, f64),
    /// Axis coordinate of the center, samples from the probe origin.
    pub axis_t: f64,
    pub top_left: (usize, usize),
    pub pixels: Matrix,
}

/// Cuts `n_patches` windows whose centers are equally spaced along the part
/// of the needle axis that lies inside the prostate mask.
pub fn extract_roi_grid(core: &BiopsyCore, params: &RoiParams) -> Result<Vec<RoiWindow>> {
    if params.n_patches == 0 {
        return Err(Error::invalid("n_patches must be positive"));
    }
    if !(params.roi_mm > 0.0) {
        return Err(Error::invalid("roi_mm must be positive"));
    }
    let frame = &core.frame;
    let rect = needle_rectangle(frame, &core.needle)?;
    let segment = needle_mask_intervals(&rect, &core.mask);
    if segment.is_empty() {
        return Err(Error::NoValidRoiRegion);
    }

    let (rows, cols) = frame.shape();
    let win_h = ((params.roi_mm / frame.axial_spacing()).round() as usize).max(2);
    let win_w = ((params.roi_mm / frame.lateral_spacing()).round() as usize).max(2);
    if win_h > rows || win_w > cols {
        return Err(Error::invalid(format!(
            "ROI window {win_h}x{win_w} samples exceeds frame {rows}x{cols}"
        )));
    }

    let total = segment.total_length();
    let n = params.n_patches;
    (0..n)
        .map(|k| {
            let s = if n == 1 {
                total / 2.0
            } else {
                total * k as f64 / (n - 1) as f64
            };
            let axis_t = segment.axis_position(s);
            let center = rect.point_at(axis_t);
            let r0 = (center.0 - win_h as f64 / 2.0).round().clamp(0.0, (rows - win_h) as f64);
            let c0 = (center.1 - win_w as f64 / 2.0).round().clamp(0.0, (cols - win_w) as f64);
            let top_left = (r0 as usize, c0 as usize);
            let pixels = frame.samples().window(top_left.0, top_left.1, win_h, win_w)?;
            Ok(RoiWindow {
                index: k,
                center,
                axis_t,
                top_left,
                pixels,
            })
        })
        .collect()
}

/// Resize to `out_size` square, instance-normalize, rescale into `[0, 1]`.
pub fn preprocess_window(window: &Matrix, out_size: usize) -> Result<Matrix> {
    normalize_rescale(&resize_bilinear(window, out_size, out_size)?)
}

/// Full extraction chain for one core: windows, preprocessing, weak labels,
/// and (for synthetic cores) per-ROI truth.
pub fn extract_patches(core: &BiopsyCore, params: &RoiParams) -> Result<Vec<RoiPatch>> {
    extract_roi_grid(core, params)?
        .into_iter()
        .map(|w| {
            Ok(RoiPatch {
                pixels: preprocess_window(&w.pixels, params.out_size)?,
                core_id: core.core_id.clone(),
                index_along_needle: w.index,
                weak_label: core.label,
                synth_truth: core.cancer_span.map(|span| span.contains(w.axis_t) as u8),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{NeedleGeometry, ProstateMask, RfFrame};

    fn core_with_mask(mask: impl FnMut(usize, usize) -> bool) -> BiopsyCore {
        let (rows, cols) = (300, 120);
        let frame = RfFrame::new(
            Matrix::from_fn(rows, cols, |r, c| ((r * 31 + c * 17) % 13) as f32),
            0.05,
            0.1,
            (20.0, 60.0),
        )
        .unwrap();
        BiopsyCore {
            core_id: "c0".into(),
            patient_id: "p0".into(),
            center_id: 0,
            label: 1,
            involvement: 0.5,
            frame,
            // 200 samples long along the axial direction
            needle: NeedleGeometry::new(0.0, 10.0, 1.0).unwrap(),
            mask: ProstateMask::from_fn(rows, cols, mask),
            cancer_span: None,
        }
    }

    #[test]
    fn full_mask_gives_equal_spacing_over_needle() {
        let core = core_with_mask(|_, _| true);
        let w = extract_roi_grid(&core, &RoiParams::default()).unwrap();
        assert_eq!(w.len(), 55);
        assert!((w[0].axis_t - 0.0).abs() < 1e-9);
        assert!((w[54].axis_t - 200.0).abs() < 1e-9);
        let step = w[1].axis_t - w[0].axis_t;
        for pair in w.windows(2) {
            assert!((pair[1].axis_t - pair[0].axis_t - step).abs() < 1e-9);
        }
        assert!(w.iter().all(|x| x.pixels.shape() == (100, 50)));
    }

    #[test]
    fn distal_half_mask_halves_spacing() {
        // Ray-mask oracle: the axis runs along col 60 from row 20 to row 220;
        // a mask of rows >= 120 meets it on t in [100, 200].
        let full = extract_roi_grid(&core_with_mask(|_, _| true), &RoiParams::default()).unwrap();
        let half = core_with_mask(|r, _| r >= 120);
        let w = extract_roi_grid(&half, &RoiParams::default()).unwrap();
        assert_eq!(w.len(), 55);
        let (t0, t1) = (100.0, 200.0);
        assert!((w[0].axis_t - t0).abs() <= 0.5);
        assert!((w[54].axis_t - t1).abs() <= 0.5);
        let full_step = full[1].axis_t - full[0].axis_t;
        let half_step = w[1].axis_t - w[0].axis_t;
        assert!((half_step - full_step / 2.0).abs() < 0.01);
        assert!(w.iter().all(|x| half.mask.contains_point(x.center.0, x.center.1)));
    }

    #[test]
    fn disjoint_mask_is_an_error() {
        let core = core_with_mask(|_, c| c < 10);
        let err = extract_roi_grid(&core, &RoiParams::default()).unwrap_err();
        assert_eq!(err.to_string(), "no valid ROI region");
    }

    #[test]
    fn patches_inherit_weak_label_and_stay_in_range() {
        let core = core_with_mask(|_, _| true);
        let p = extract_patches(&core, &RoiParams::default()).unwrap();
        assert_eq!(p.len(), 55);
        for (i, patch) in p.iter().enumerate() {
            assert_eq!(patch.index_along_needle, i);
            assert_eq!(patch.weak_label, 1);
            assert_eq!(patch.pixels.shape(), (256, 256));
            assert!(patch.pixels.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(patch.synth_truth, None);
        }
        assert_eq!(p, extract_patches(&core, &RoiParams::default()).unwrap());
    }
}
