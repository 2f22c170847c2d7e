//! Needle-trace geometry in sample coordinates `(row, col)`.
//!
//! The trace is a rectangle anchored at the probe origin whose long axis
//! points `angle` degrees off the axial direction. Its length is the needle
//! depth in axial samples and its width the trace width in lateral samples.

use super::types::{ProstateMask, RfFrame};
use super::NeedleGeometry;
use crate::error::{Error, Result};

/// Step, in samples, used when walking the needle axis.
const AXIS_STEP: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct Rectangle {
    /// Proximal-left, proximal-right, distal-right, distal-left.
    pub corners: [(f64, f64); 4],
    pub origin: (f64, f64),
    /// Unit vector along the needle.
    pub axis: (f64, f64),
    /// Unit vector across the needle (+90 degrees from `axis`).
    pub normal: (f64, f64),
    pub length: f64,
    pub width: f64,
    frame_shape: (usize, usize),
}

impl Rectangle {
    /// Point on the needle axis `t` samples from the origin.
    pub fn point_at(&self, t: f64) -> (f64, f64) {
        (
            self.origin.0 + t * self.axis.0,
            self.origin.1 + t * self.axis.1,
        )
    }

    /// Axis coordinate and signed lateral offset of a point.
    pub fn project(&self, p: (f64, f64)) -> (f64, f64) {
        let d = (p.0 - self.origin.0, p.1 - self.origin.1);
        (
            d.0 * self.axis.0 + d.1 * self.axis.1,
            d.0 * self.normal.0 + d.1 * self.normal.1,
        )
    }

    fn in_frame(&self, p: (f64, f64)) -> bool {
        let (h, w) = self.frame_shape;
        p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (h - 1) as f64 && p.1 <= (w - 1) as f64
    }

    /// True when `p` lies in the trace and inside the frame.
    pub fn contains(&self, p: (f64, f64)) -> bool {
        let (t, s) = self.project(p);
        let eps = 1e-9;
        self.in_frame(p)
            && t >= -eps
            && t <= self.length + eps
            && s.abs() <= self.width / 2.0 + eps
    }

    /// Axis-aligned bounds `(row_min, row_max, col_min, col_max)` of the
    /// trace clipped to the frame.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let (h, w) = self.frame_shape;
        let rows = self.corners.iter().map(|c| c.0);
        let cols = self.corners.iter().map(|c| c.1);
        let r0 = rows.clone().fold(f64::INFINITY, f64::min).max(0.0);
        let r1 = rows.fold(f64::NEG_INFINITY, f64::max).min((h - 1) as f64);
        let c0 = cols.clone().fold(f64::INFINITY, f64::min).max(0.0);
        let c1 = cols.fold(f64::NEG_INFINITY, f64::max).min((w - 1) as f64);
        (r0, r1, c0, c1)
    }
}

/// Separating-axis test between the rectangle and the frame box.
fn intersects_frame(rect: &Rectangle) -> bool {
    let (h, w) = rect.frame_shape;
    let frame = [
        (0.0, 0.0),
        (0.0, (w - 1) as f64),
        ((h - 1) as f64, (w - 1) as f64),
        ((h - 1) as f64, 0.0),
    ];
    let axes = [(1.0, 0.0), (0.0, 1.0), rect.axis, rect.normal];
    axes.iter().all(|a| {
        let proj = |pts: &[(f64, f64)]| {
            pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let v = p.0 * a.0 + p.1 * a.1;
                (lo.min(v), hi.max(v))
            })
        };
        let (a0, a1) = proj(&rect.corners);
        let (b0, b1) = proj(&frame);
        a0 <= b1 + 1e-9 && b0 <= a1 + 1e-9
    })
}

pub fn needle_rectangle(frame: &RfFrame, needle: &NeedleGeometry) -> Result<Rectangle> {
    needle.validate()?;
    let length = needle.depth / frame.axial_spacing();
    if length < 1.0 {
        return Err(Error::invalid(
            "needle depth is shorter than one axial sample",
        ));
    }
    let width = needle.width / frame.lateral_spacing();
    let theta = needle.angle.to_radians();
    let axis = (theta.cos(), theta.sin());
    let normal = (-theta.sin(), theta.cos());
    let origin = frame.probe_origin();
    let at = |t: f64, s: f64| {
        (
            origin.0 + t * axis.0 + s * normal.0,
            origin.1 + t * axis.1 + s * normal.1,
        )
    };
    let half = width / 2.0;
    let rect = Rectangle {
        corners: [
            at(0.0, -half),
            at(0.0, half),
            at(length, half),
            at(length, -half),
        ],
        origin,
        axis,
        normal,
        length,
        width,
        frame_shape: frame.shape(),
    };
    if !intersects_frame(&rect) {
        return Err(Error::NeedleOutsideFrame);
    }
    Ok(rect)
}

/// Portions of the needle axis lying inside the frame and the prostate mask,
/// as closed intervals of the axis coordinate `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisIntervals {
    pub intervals: Vec<(f64, f64)>,
}

impl AxisIntervals {
    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Summed length of all intervals.
    pub fn total_length(&self) -> f64 {
        self.intervals.iter().map(|(a, b)| b - a).sum()
    }

    /// Maps an arc-length position `s` in `[0, total_length]`, measured
    /// across the union of intervals, back to the axis coordinate.
    pub fn axis_position(&self, s: f64) -> f64 {
        let mut rest = s.max(0.0);
        for &(a, b) in &self.intervals {
            if rest <= b - a {
                return a + rest;
            }
            rest -= b - a;
        }
        self.intervals.last().map_or(0.0, |&(_, b)| b)
    }

    /// Arc-length position of an axis coordinate (inverse of
    /// [`axis_position`](Self::axis_position), clamping gaps to the next
    /// interval start).
    pub fn arc_position(&self, t: f64) -> f64 {
        let mut s = 0.0;
        for &(a, b) in &self.intervals {
            if t <= a {
                return s;
            }
            if t <= b {
                return s + (t - a);
            }
            s += b - a;
        }
        s
    }
}

pub fn needle_mask_intervals(rect: &Rectangle, mask: &ProstateMask) -> AxisIntervals {
    let steps = (rect.length / AXIS_STEP).floor() as usize;
    let mut intervals = Vec::new();
    let mut open: Option<(f64, f64)> = None;
    for i in 0..=steps {
        let t = (i as f64 * AXIS_STEP).min(rect.length);
        let p = rect.point_at(t);
        let inside = rect.contains(p) && mask.contains_point(p.0, p.1);
        open = match (open, inside) {
            (Some((a, _)), true) => Some((a, t)),
            (None, true) => Some((t, t)),
            (Some(iv), false) => {
                intervals.push(iv);
                None
            }
            (None, false) => None,
        };
    }
    intervals.extend(open);
    AxisIntervals { intervals }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Matrix;

    fn frame(rows: usize, cols: usize, ax: f64, lat: f64, origin: (f64, f64)) -> RfFrame {
        RfFrame::new(Matrix::zeros(rows, cols), ax, lat, origin).unwrap()
    }

    #[test]
    fn zero_angle_is_axis_aligned() {
        let f = frame(200, 200, 0.1, 0.5, (0.0, 100.0));
        let r = needle_rectangle(&f, &NeedleGeometry::new(0.0, 10.0, 2.0).unwrap()).unwrap();
        let expect = [(0.0, 98.0), (0.0, 102.0), (100.0, 102.0), (100.0, 98.0)];
        for (c, e) in r.corners.iter().zip(expect) {
            assert!((c.0 - e.0).abs() < 1e-9 && (c.1 - e.1).abs() < 1e-9, "{c:?} vs {e:?}");
        }
        assert_eq!(r.bounds(), (0.0, 100.0, 98.0, 102.0));
    }

    #[test]
    fn rotated_corners_match_rotation_matrix() {
        let f = frame(300, 300, 0.1, 0.5, (10.0, 150.0));
        let r = needle_rectangle(&f, &NeedleGeometry::new(45.0, 10.0, 2.0).unwrap()).unwrap();
        let (c, s) = (45f64.to_radians().cos(), 45f64.to_radians().sin());
        // rotate the zero-angle offsets (dr, dc) by the rotation matrix [[c, -s], [s, c]]
        let rot = |dr: f64, dc: f64| (10.0 + c * dr - s * dc, 150.0 + s * dr + c * dc);
        let expect = [rot(0.0, -2.0), rot(0.0, 2.0), rot(100.0, 2.0), rot(100.0, -2.0)];
        for (got, e) in r.corners.iter().zip(expect) {
            assert!((got.0 - e.0).abs() < 1e-9 && (got.1 - e.1).abs() < 1e-9);
        }
        let long = ((r.corners[2].0 - r.corners[1].0).powi(2)
            + (r.corners[2].1 - r.corners[1].1).powi(2))
        .sqrt();
        assert!((long - 100.0).abs() < 1e-9);
    }

    #[test]
    fn zero_depth_is_rejected() {
        let f = frame(10, 10, 0.1, 0.5, (0.0, 5.0));
        assert!(needle_rectangle(
            &f,
            &NeedleGeometry {
                angle: 0.0,
                depth: 0.0,
                width: 1.0
            }
        )
        .is_err());
    }

    #[test]
    fn needle_outside_frame() {
        let f = frame(50, 50, 0.1, 0.5, (-500.0, -500.0));
        let err = needle_rectangle(&f, &NeedleGeometry::new(0.0, 5.0, 1.0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::NeedleOutsideFrame));
        assert_eq!(err.to_string(), "needle outside frame");
    }

    #[test]
    fn partially_outside_is_clipped() {
        let f = frame(50, 50, 0.1, 0.5, (0.0, 25.0));
        let r = needle_rectangle(&f, &NeedleGeometry::new(0.0, 10.0, 2.0).unwrap()).unwrap();
        assert_eq!(r.bounds().1, 49.0);
        assert!(!r.contains((60.0, 25.0)));
        assert!(r.contains((40.0, 25.0)));
    }

    #[test]
    fn interval_arc_mapping() {
        let iv = AxisIntervals {
            intervals: vec![(0.0, 10.0), (20.0, 25.0)],
        };
        assert_eq!(iv.total_length(), 15.0);
        assert_eq!(iv.axis_position(12.0), 22.0);
        assert_eq!(iv.arc_position(22.0), 12.0);
        assert_eq!(iv.arc_position(15.0), 10.0);
    }
}
