use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f32` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                expected: format!("{rows}x{cols}"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Copies the `h x w` block whose top-left corner is `(r0, c0)`.
    pub fn window(&self, r0: usize, c0: usize, h: usize, w: usize) -> Result<Matrix> {
        if r0 + h > self.rows || c0 + w > self.cols {
            return Err(Error::invalid(format!(
                "window {h}x{w} at ({r0},{c0}) exceeds {}x{}",
                self.rows, self.cols
            )));
        }
        let mut data = Vec::with_capacity(h * w);
        for r in r0..r0 + h {
            data.extend_from_slice(&self.data[r * self.cols + c0..r * self.cols + c0 + w]);
        }
        Ok(Matrix { rows: h, cols: w, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Raw RF frame in sample coordinates: rows are axial samples, columns are
/// lateral lines.
#[derive(Clone, Debug, PartialEq)]
pub struct RfFrame {
    samples: Matrix,
    axial_spacing: f64,
    lateral_spacing: f64,
    probe_origin: (f64, f64),
}

impl RfFrame {
    pub fn new(
        samples: Matrix,
        axial_spacing: f64,
        lateral_spacing: f64,
        probe_origin: (f64, f64),
    ) -> Result<Self> {
        if samples.rows() == 0 || samples.cols() == 0 {
            return Err(Error::invalid("RF frame must be non-empty"));
        }
        if !(axial_spacing > 0.0 && lateral_spacing > 0.0) {
            return Err(Error::invalid("RF spacings must be positive"));
        }
        if !samples.all_finite() {
            return Err(Error::invalid("RF frame contains non-finite samples"));
        }
        if !(probe_origin.0.is_finite() && probe_origin.1.is_finite()) {
            return Err(Error::invalid("probe origin must be finite"));
        }
        Ok(Self {
            samples,
            axial_spacing,
            lateral_spacing,
            probe_origin,
        })
    }

    pub fn samples(&self) -> &Matrix {
        &self.samples
    }

    pub fn axial_spacing(&self) -> f64 {
        self.axial_spacing
    }

    pub fn lateral_spacing(&self) -> f64 {
        self.lateral_spacing
    }

    pub fn probe_origin(&self) -> (f64, f64) {
        self.probe_origin
    }

    pub fn shape(&self) -> (usize, usize) {
        self.samples.shape()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleGeometry {
    /// Degrees from the probe (axial) axis.
    pub angle: f64,
    /// Penetration depth in mm.
    pub depth: f64,
    /// Needle-trace width in mm.
    pub width: f64,
}

impl NeedleGeometry {
    pub fn new(angle: f64, depth: f64, width: f64) -> Result<Self> {
        let g = Self { angle, depth, width };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.depth > 0.0) {
            return Err(Error::invalid("needle depth must be positive"));
        }
        if !(self.width > 0.0) {
            return Err(Error::invalid("needle width must be positive"));
        }
        if !(self.angle > -90.0 && self.angle < 90.0) {
            return Err(Error::invalid("needle angle must lie in (-90, 90) degrees"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProstateMask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl ProstateMask {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape {
                expected: format!("{rows}x{cols}"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    /// Mask lookup at a continuous sample position (nearest sample); points
    /// outside the grid are outside the mask.
    pub fn contains_point(&self, row: f64, col: f64) -> bool {
        let (r, c) = (row.round(), col.round());
        if r < 0.0 || c < 0.0 || r >= self.rows as f64 || c >= self.cols as f64 {
            return false;
        }
        self.get(r as usize, c as usize)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }
}

/// Synthetic ground truth: the cancerous stretch of the needle axis, in
/// samples from the probe origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CancerSpan {
    pub start: f64,
    pub end: f64,
}

impl CancerSpan {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiopsyCore {
    pub core_id: String,
    pub patient_id: String,
    pub center_id: u32,
    /// 0 benign, 1 cancer.
    pub label: u8,
    /// Pathologist's cancer fraction; 0 for benign cores.
    pub involvement: f64,
    pub frame: RfFrame,
    pub needle: NeedleGeometry,
    pub mask: ProstateMask,
    /// Only present for synthetic cores.
    pub cancer_span: Option<CancerSpan>,
}

impl BiopsyCore {
    pub fn validate(&self) -> Result<()> {
        match self.label {
            0 if self.involvement != 0.0 => {
                return Err(Error::invalid(format!(
                    "benign core {} has nonzero involvement",
                    self.core_id
                )))
            }
            1 if !(self.involvement > 0.0 && self.involvement <= 1.0) => {
                return Err(Error::invalid(format!(
                    "cancer core {} needs involvement in (0, 1]",
                    self.core_id
                )))
            }
            0 | 1 => {}
            l => return Err(Error::invalid(format!("label must be 0 or 1, got {l}"))),
        }
        if self.mask.shape() != self.frame.shape() {
            return Err(Error::Shape {
                expected: format!("mask {:?}", self.frame.shape()),
                got: format!("{:?}", self.mask.shape()),
            });
        }
        self.needle.validate()
    }
}

/// One preprocessed ROI patch.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiPatch {
    pub pixels: Matrix,
    pub core_id: String,
    pub index_along_needle: usize,
    pub weak_label: u8,
    pub synth_truth: Option<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub cores: Vec<BiopsyCore>,
}

impl Dataset {
    /// `(patient_id, center_id)` pairs, one per patient, in first-seen order.
    pub fn patients(&self) -> Vec<(String, u32)> {
        let mut seen = std::collections::BTreeSet::new();
        self.cores
            .iter()
            .filter(|c| seen.insert(c.patient_id.clone()))
            .map(|c| (c.patient_id.clone(), c.center_id))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_copies_block() {
        let m = Matrix::from_fn(4, 5, |r, c| (r * 10 + c) as f32);
        let w = m.window(1, 2, 2, 3).unwrap();
        assert_eq!(w.as_slice(), &[12.0, 13.0, 14.0, 22.0, 23.0, 24.0]);
        assert!(m.window(3, 0, 2, 1).is_err());
    }

    #[test]
    fn frame_and_needle_validation() {
        let m = Matrix::zeros(2, 2);
        assert!(RfFrame::new(m.clone(), 0.0, 1.0, (0.0, 0.0)).is_err());
        let mut bad = m.clone();
        bad.set(0, 0, f32::NAN);
        assert!(RfFrame::new(bad, 1.0, 1.0, (0.0, 0.0)).is_err());
        assert!(RfFrame::new(m, 1.0, 1.0, (0.0, 0.0)).is_ok());
        assert!(NeedleGeometry::new(0.0, 0.0, 1.0).is_err());
        assert!(NeedleGeometry::new(90.0, 1.0, 1.0).is_err());
        assert!(NeedleGeometry::new(-45.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn label_involvement_consistency() {
        let frame = RfFrame::new(Matrix::zeros(4, 4), 1.0, 1.0, (0.0, 2.0)).unwrap();
        let mut core = BiopsyCore {
            core_id: "c".into(),
            patient_id: "p".into(),
            center_id: 0,
            label: 0,
            involvement: 0.2,
            frame,
            needle: NeedleGeometry::new(0.0, 3.0, 1.0).unwrap(),
            mask: ProstateMask::from_fn(4, 4, |_, _| true),
            cancer_span: None,
        };
        assert!(core.validate().is_err());
        core.label = 1;
        assert!(core.validate().is_ok());
        core.involvement = 0.0;
        assert!(core.validate().is_err());
    }
}
