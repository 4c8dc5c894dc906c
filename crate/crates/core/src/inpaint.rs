//! Projection-domain trace inpainting and the metal-artifact-reduction
//! chain built on it: fill each view's trace pixels from their
//! surroundings, reconstruct the inpainted stack, and reinsert the metal
//! voxels into the result.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fdk::{fdk_reconstruct, mu_to_hu};
use crate::fproj::TraceStack;
use crate::geom::ScanGeometry;
use crate::scalar::Real;
use crate::voxvol::{insert_metal, Grid3, Mask3, Volume3};
use crate::xsim::ProjectionStack;

/// Convergence threshold on the largest per-sweep update.
pub const INPAINT_TOL: f64 = 1e-6;
/// Sweep cap for the iterative solver.
pub const INPAINT_MAX_SWEEPS: usize = 10_000;

/// How trace pixels are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InpaintMode {
    /// Discrete harmonic extension of the surrounding values (Laplace
    /// equation, Gauss-Seidel iteration). Isotropic and bounded by the
    /// boundary values.
    Harmonic,
    /// Per-row linear interpolation between the nearest uncovered pixels.
    RowLinear,
}

/// Fill the trace pixels of one view in place. Pixels outside the trace
/// are never touched. A trace covering the whole view has no boundary to
/// extend and is an error; in row-linear mode the same holds per covered
/// row.
pub fn inpaint_view(
    values: &mut [f64],
    trace: &[bool],
    nu: usize,
    nv: usize,
    mode: InpaintMode,
) -> Result<()> {
    if values.len() != nu * nv || trace.len() != nu * nv {
        return Err(Error::DimMismatch("view and trace sizes differ".into()));
    }
    let holes = trace.iter().filter(|&&b| b).count();
    if holes == 0 {
        return Ok(());
    }
    if holes == nu * nv {
        return Err(Error::invalid("trace covers the entire view; nothing to extend"));
    }
    match mode {
        InpaintMode::Harmonic => inpaint_harmonic(values, trace, nu, nv),
        InpaintMode::RowLinear => inpaint_row_linear(values, trace, nu, nv),
    }
}

fn inpaint_harmonic(values: &mut [f64], trace: &[bool], nu: usize, nv: usize) -> Result<()> {
    // Initialize holes with the mean of all uncovered pixels that touch a
    // hole (the boundary ring), a cheap harmonic-ish starting guess.
    let mut boundary_sum = 0.0f64;
    let mut boundary_n = 0usize;
    let neighbors = |u: usize, v: usize| {
        let mut out = [usize::MAX; 4];
        let mut n = 0;
        if u > 0 {
            out[n] = v * nu + u - 1;
            n += 1;
        }
        if u + 1 < nu {
            out[n] = v * nu + u + 1;
            n += 1;
        }
        if v > 0 {
            out[n] = (v - 1) * nu + u;
            n += 1;
        }
        if v + 1 < nv {
            out[n] = (v + 1) * nu + u;
            n += 1;
        }
        (out, n)
    };
    for v in 0..nv {
        for u in 0..nu {
            let idx = v * nu + u;
            if trace[idx] {
                continue;
            }
            let (nb, n) = neighbors(u, v);
            if nb[..n].iter().any(|&j| trace[j]) {
                boundary_sum += values[idx];
                boundary_n += 1;
            }
        }
    }
    let init = if boundary_n > 0 { boundary_sum / boundary_n as f64 } else { 0.0 };
    let hole_idx: Vec<usize> = (0..nu * nv).filter(|&i| trace[i]).collect();
    for &i in &hole_idx {
        values[i] = init;
    }
    // Gauss-Seidel: each hole pixel becomes the average of its in-view
    // neighbors, sweeping in row-major order until the largest update is
    // below tolerance.
    for _sweep in 0..INPAINT_MAX_SWEEPS {
        let mut worst = 0.0f64;
        for &idx in &hole_idx {
            let (u, v) = (idx % nu, idx / nu);
            let (nb, n) = neighbors(u, v);
            let sum: f64 = nb[..n].iter().map(|&j| values[j]).sum();
            let new = sum / n as f64;
            worst = worst.max((new - values[idx]).abs());
            values[idx] = new;
        }
        if worst < INPAINT_TOL {
            return Ok(());
        }
    }
    Ok(())
}

fn inpaint_row_linear(values: &mut [f64], trace: &[bool], nu: usize, nv: usize) -> Result<()> {
    for v in 0..nv {
        let row = v * nu;
        let mut u = 0;
        while u < nu {
            if !trace[row + u] {
                u += 1;
                continue;
            }
            // Maximal covered run [u, end).
            let start = u;
            let mut end = u;
            while end < nu && trace[row + end] {
                end += 1;
            }
            let left = start.checked_sub(1).map(|l| values[row + l]);
            let right = (end < nu).then(|| values[row + end]);
            match (left, right) {
                (Some(a), Some(b)) => {
                    let span = (end - start + 1) as f64;
                    for (step, idx) in (start..end).enumerate() {
                        let f = (step + 1) as f64 / span;
                        values[row + idx] = a * (1.0 - f) + b * f;
                    }
                }
                (Some(a), None) => values[row + start..row + end].fill(a),
                (None, Some(b)) => values[row + start..row + end].fill(b),
                (None, None) => {
                    return Err(Error::invalid(format!(
                        "trace covers all of row {v}; no anchors for linear fill"
                    )))
                }
            }
            u = end;
        }
    }
    Ok(())
}

/// Inpaint every view of a stack. Uncovered pixels are copied bit-exactly;
/// covered pixels are solved in `f64` and converted to the stack's scalar
/// type.
pub fn inpaint_stack<T: Real>(
    p: &ProjectionStack<T>,
    traces: &TraceStack,
    mode: InpaintMode,
) -> Result<ProjectionStack<T>> {
    if p.nu != traces.nu || p.nv != traces.nv || p.n_views() != traces.n_views {
        return Err(Error::DimMismatch("stack and traces differ in shape".into()));
    }
    let n_pix = p.nu * p.nv;
    let mut out = p.clone();
    let results: Vec<Result<Vec<T>>> = (0..p.n_views())
        .into_par_iter()
        .map(|view| {
            let src = p.view(view);
            let tr: Vec<bool> = traces.bits()[view * n_pix..(view + 1) * n_pix]
                .iter()
                .map(|&b| b != 0)
                .collect();
            let mut work: Vec<f64> = src.iter().map(|v| v.as_f64()).collect();
            inpaint_view(&mut work, &tr, p.nu, p.nv, mode)?;
            // Exact copy outside the trace, solved values inside.
            Ok(src
                .iter()
                .zip(tr.iter())
                .zip(work.iter())
                .map(|((&orig, &hole), &solved)| if hole { T::of(solved) } else { orig })
                .collect())
        })
        .collect();
    for (view, r) in results.into_iter().enumerate() {
        let vals = r?;
        out.data_mut()[view * n_pix..(view + 1) * n_pix].copy_from_slice(&vals);
    }
    Ok(out)
}

/// Full metal-artifact-reduction chain: inpaint the traces, reconstruct,
/// convert to Hounsfield-like units against `mu_water`, and write the
/// metal voxel values back over the reconstruction.
pub fn mar_pipeline<T: Real>(
    p: &ProjectionStack<T>,
    traces: &TraceStack,
    g: &ScanGeometry,
    grid: &Grid3,
    metal3d: &Mask3,
    metal_hu: &Volume3<T>,
    mu_water: f64,
    mode: InpaintMode,
) -> Result<Volume3<T>> {
    let filled = inpaint_stack(p, traces, mode)?;
    let recon = fdk_reconstruct(&filled, g, grid)?;
    let hu = mu_to_hu(&recon, mu_water)?;
    insert_metal(&hu, metal3d, metal_hu)
}
