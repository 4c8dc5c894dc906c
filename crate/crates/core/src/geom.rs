//! Circular cone-beam scan geometry.
//!
//! World frame: isocenter at the origin, rotation axis +z. At angle theta the
//! source sits at `sid * (-cos t, -sin t, 0)` and the central ray points from
//! the source through the isocenter. The flat detector is perpendicular to
//! the central ray at distance `sdd` from the source; its u axis is the
//! in-plane tangent `(-sin t, cos t, 0)` and its v axis is +z. Angle 0 puts
//! the source on -x. All geometry is f64.

use crate::error::{Error, Result};

pub(crate) mod vec3 {
    #[inline]
    pub fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }
    #[inline]
    pub fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }
    #[inline]
    pub fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
        [a[0] * s, a[1] * s, a[2] * s]
    }
    #[inline]
    pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
        a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    }
    #[inline]
    pub fn norm(a: [f64; 3]) -> f64 {
        dot(a, a).sqrt()
    }
    #[inline]
    pub fn normalize(a: [f64; 3]) -> [f64; 3] {
        scale(a, 1.0 / norm(a))
    }
}

use vec3::*;

/// Full-scale default source-to-detector distance (mm).
pub const DEFAULT_SDD_MM: f64 = 580.0;
/// Full-scale default source-to-isocenter distance (mm).
pub const DEFAULT_SID_MM: f64 = 392.0;
/// Desk-scale default detector size (pixels).
pub const DEFAULT_DET: (usize, usize) = (128, 96);
/// Desk-scale default detector pitch (mm), preserving the full-scale FOV.
pub const DEFAULT_PITCH_MM: f64 = 1.9;

/// A ray with unit direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

/// Circular cone-beam acquisition geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanGeometry {
    pub sdd_mm: f64,
    pub sid_mm: f64,
    pub nu: usize,
    pub nv: usize,
    pub pitch_u_mm: f64,
    pub pitch_v_mm: f64,
    pub angles_rad: Vec<f64>,
}

/// `n` view angles uniformly covering `arc_rad`, starting at 0, endpoint
/// excluded (a full circle does not repeat the first view).
pub fn uniform_angles(n: usize, arc_rad: f64) -> Vec<f64> {
    (0..n).map(|i| i as f64 * arc_rad / n as f64).collect()
}

impl ScanGeometry {
    pub fn new(
        sdd_mm: f64,
        sid_mm: f64,
        det: (usize, usize),
        pitch_mm: (f64, f64),
        angles_rad: Vec<f64>,
    ) -> Result<ScanGeometry> {
        if !(sid_mm > 0.0 && sdd_mm > sid_mm && sdd_mm.is_finite()) {
            return Err(Error::invalid("require 0 < sid < sdd"));
        }
        if det.0 == 0 || det.1 == 0 {
            return Err(Error::invalid("detector dimensions must be positive"));
        }
        if !(pitch_mm.0 > 0.0 && pitch_mm.1 > 0.0)
            || !pitch_mm.0.is_finite()
            || !pitch_mm.1.is_finite()
        {
            return Err(Error::invalid("detector pitch must be positive and finite"));
        }
        if angles_rad.is_empty() || angles_rad.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid("need at least one finite view angle"));
        }
        Ok(ScanGeometry {
            sdd_mm,
            sid_mm,
            nu: det.0,
            nv: det.1,
            pitch_u_mm: pitch_mm.0,
            pitch_v_mm: pitch_mm.1,
            angles_rad,
        })
    }

    /// Desk-scale default geometry: full-scale distances, 128x96 detector at
    /// 1.9 mm pitch, `n_views` over a full circle.
    pub fn desk_default(n_views: usize) -> ScanGeometry {
        ScanGeometry::new(
            DEFAULT_SDD_MM,
            DEFAULT_SID_MM,
            DEFAULT_DET,
            (DEFAULT_PITCH_MM, DEFAULT_PITCH_MM),
            uniform_angles(n_views, std::f64::consts::TAU),
        )
        .expect("default geometry is valid")
    }

    #[inline]
    pub fn n_views(&self) -> usize {
        self.angles_rad.len()
    }

    /// Central-ray unit direction (source toward isocenter) at a view.
    #[inline]
    pub fn central_dir(&self, view: usize) -> [f64; 3] {
        let (s, c) = self.angles_rad[view].sin_cos();
        [c, s, 0.0]
    }

    /// Detector u-axis (in-plane tangent) at a view.
    #[inline]
    pub fn u_axis(&self, view: usize) -> [f64; 3] {
        let (s, c) = self.angles_rad[view].sin_cos();
        [-s, c, 0.0]
    }

    /// Source position at a view.
    #[inline]
    pub fn source_position(&self, view: usize) -> [f64; 3] {
        scale(self.central_dir(view), -self.sid_mm)
    }

    /// Centre of the detector plane at a view.
    #[inline]
    pub fn detector_center(&self, view: usize) -> [f64; 3] {
        add(self.source_position(view), scale(self.central_dir(view), self.sdd_mm))
    }

    /// World position of the centre of detector pixel (iu, iv).
    pub fn pixel_center(&self, view: usize, iu: usize, iv: usize) -> [f64; 3] {
        let du = (iu as f64 - 0.5 * (self.nu as f64 - 1.0)) * self.pitch_u_mm;
        let dv = (iv as f64 - 0.5 * (self.nv as f64 - 1.0)) * self.pitch_v_mm;
        let c = self.detector_center(view);
        add(c, add(scale(self.u_axis(view), du), [0.0, 0.0, dv]))
    }

    /// Ray from the source through the centre of pixel (iu, iv).
    pub fn pixel_ray(&self, view: usize, iu: usize, iv: usize) -> Ray {
        let s = self.source_position(view);
        let p = self.pixel_center(view, iu, iv);
        Ray { origin: s, dir: normalize(sub(p, s)) }
    }

    /// Project a world point onto the detector at a view.
    ///
    /// Returns continuous pixel coordinates (u, v) — pixel (iu, iv) is at
    /// exactly (iu, iv) — and the FDK weight denominator
    /// `U = sid + <x, central_dir>`. `None` if the point is not in front of
    /// the source.
    pub fn project_point(&self, view: usize, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let s = self.source_position(view);
        let d = self.central_dir(view);
        let w = sub(p, s);
        let depth = dot(w, d);
        if depth <= 0.0 {
            return None;
        }
        let u_mm = self.sdd_mm * dot(w, self.u_axis(view)) / depth;
        let v_mm = self.sdd_mm * w[2] / depth;
        let u = u_mm / self.pitch_u_mm + 0.5 * (self.nu as f64 - 1.0);
        let v = v_mm / self.pitch_v_mm + 0.5 * (self.nv as f64 - 1.0);
        Some((u, v, depth))
    }
}
