//! Metal-trace handling in the projection domain: binarizing metal-only
//! projections into ground-truth traces, the reconstruction-based
//! consistency check that re-projects a supported 3D metal estimate, and
//! small 2D morphology helpers on trace stacks.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fproj::project_metal_mask;
pub use crate::fproj::TraceStack;
use crate::geom::ScanGeometry;
use crate::scalar::Real;
use crate::voxvol::{Grid3, Mask3};
use crate::xsim::{Domain, ProjectionStack};

/// Default line-integral threshold for ground-truth trace binarization:
/// far below a single metal voxel's contribution, far above numerical
/// noise.
pub const GT_TRACE_EPS: f64 = 0.01;

/// Default fraction of views that must support a voxel in the consistency
/// check.
pub const CONSISTENCY_TAU: f64 = 0.9;

/// Threshold a (noiseless, metal-only) line-integral stack into binary
/// traces: pixel set iff `p > eps`.
pub fn binarize_metal_projection<T: Real>(
    metal_only: &ProjectionStack<T>,
    eps: f64,
) -> Result<TraceStack> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::invalid("trace threshold must be positive"));
    }
    if metal_only.domain != Domain::LineIntegral {
        return Err(Error::invalid("trace binarization expects line integrals"));
    }
    let mut out = TraceStack::empty(metal_only.n_views(), metal_only.nu, metal_only.nv);
    let e = T::of(eps);
    for (b, &p) in out.bits_mut().iter_mut().zip(metal_only.data()) {
        *b = (p > e) as u8;
    }
    Ok(out)
}

/// Count, per voxel, the views whose trace covers the voxel's projection
/// (bilinear interpolation of the binary view image > 0.5).
pub fn support_counts(traces: &TraceStack, g: &ScanGeometry, grid: &Grid3) -> Result<Vec<u32>> {
    if traces.nu != g.nu || traces.nv != g.nv || traces.n_views != g.n_views() {
        return Err(Error::DimMismatch("trace stack does not match geometry".into()));
    }
    let n_views = g.n_views();
    let (nu, nv) = (g.nu, g.nv);
    // Binary views as f64 images for interpolation.
    let imgs: Vec<f64> = traces.bits().iter().map(|&b| b as f64).collect();
    let mut counts = vec![0u32; grid.len()];
    let slab = grid.nx * grid.ny;
    counts.par_chunks_mut(slab).enumerate().for_each(|(k, out)| {
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let x = grid.voxel_center(i, j, k);
                let mut c = 0u32;
                for view in 0..n_views {
                    let Some((up, vp, _)) = g.project_point(view, x) else {
                        continue;
                    };
                    let (iu0f, iv0f) = (up.floor(), vp.floor());
                    if iu0f < 0.0 || iv0f < 0.0 {
                        continue;
                    }
                    let (iu0, iv0) = (iu0f as usize, iv0f as usize);
                    if iu0 + 1 >= nu || iv0 + 1 >= nv {
                        continue;
                    }
                    let (fu, fv) = (up - iu0f, vp - iv0f);
                    let base = view * nu * nv + iv0 * nu + iu0;
                    let val = imgs[base] * (1.0 - fu) * (1.0 - fv)
                        + imgs[base + 1] * fu * (1.0 - fv)
                        + imgs[base + nu] * (1.0 - fu) * fv
                        + imgs[base + nu + 1] * fu * fv;
                    if val > 0.5 {
                        c += 1;
                    }
                }
                out[j * grid.nx + i] = c;
            }
        }
    });
    Ok(counts)
}

/// Consistency check: unfiltered backprojection of the binary traces gives
/// a per-voxel count of supporting views; voxels supported in at least
/// `tau` of all views form a 3D metal estimate, which is re-projected into
/// refined traces. Inconsistent detections (for example single-view blobs,
/// or metal outside the grid) do not survive.
pub fn consistency_check(
    traces: &TraceStack,
    g: &ScanGeometry,
    grid: &Grid3,
    tau: f64,
    min_path_mm: f64,
) -> Result<TraceStack> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid("support fraction must lie in [0, 1]"));
    }
    let counts = support_counts(traces, g, grid)?;
    let need = tau * g.n_views() as f64;
    let mut metal = Mask3::empty(grid.clone());
    for (b, &c) in metal.bits_mut().iter_mut().zip(&counts) {
        *b = (c as f64 >= need) as u8;
    }
    Ok(project_metal_mask(&metal, g, min_path_mm))
}

/// Moving-metal trace refinement from the comparison literature; the
/// algorithm is not described in enough detail to reproduce.
pub fn mmar_refine(_traces: &TraceStack) -> Result<TraceStack> {
    Err(Error::NotImplemented("moving-metal trace refinement"))
}

/// Erode every view with the 3x3 (8-neighborhood) structuring element,
/// applied `radius` times. Pixels on the view border erode against an
/// implicit zero frame.
pub fn erode_traces(traces: &TraceStack, radius: usize) -> TraceStack {
    morph_traces(traces, radius, false)
}

/// Dilate every view with the 3x3 structuring element, `radius` times.
pub fn dilate_traces(traces: &TraceStack, radius: usize) -> TraceStack {
    morph_traces(traces, radius, true)
}

fn morph_traces(traces: &TraceStack, radius: usize, dilate: bool) -> TraceStack {
    let (nu, nv) = (traces.nu as i64, traces.nv as i64);
    let mut cur = traces.clone();
    for _ in 0..radius {
        let src = cur.clone();
        let n_pix = traces.nu * traces.nv;
        cur.bits_mut().par_chunks_mut(n_pix).enumerate().for_each(|(view, out)| {
            for v in 0..nv {
                for u in 0..nu {
                    let mut hit = !dilate;
                    'scan: for dv in -1i64..=1 {
                        for du in -1i64..=1 {
                            let (x, y) = (u + du, v + dv);
                            let inside = x >= 0 && y >= 0 && x < nu && y < nv;
                            let val = inside
                                && src.bits()[(view * nv as usize + y as usize) * nu as usize
                                    + x as usize]
                                    != 0;
                            if dilate && val {
                                hit = true;
                                break 'scan;
                            }
                            if !dilate && !val {
                                hit = false;
                                break 'scan;
                            }
                        }
                    }
                    out[(v * nu + u) as usize] = hit as u8;
                }
            }
        });
    }
    cur
}
