//! Volume-domain metal segmentation and mask refinement: global
//! thresholding, seeded connected region growing, 3D binary median
//! filtering, and binary dilation.

use rayon::prelude::*;
use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::voxvol::{Mask3, Volume3};

/// Default seed threshold (HU) for region growing.
pub const REGION_GROW_SEED_HU: f64 = 7000.0;
/// Default growth threshold (HU) for region growing.
pub const REGION_GROW_GROW_HU: f64 = 3000.0;

/// Neighborhood used by region growing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Face, edge, and corner neighbors.
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    if self == Connectivity::Six && dx.abs() + dy.abs() + dz.abs() != 1 {
                        continue;
                    }
                    out.push([dx, dy, dz]);
                }
            }
        }
        out
    }
}

/// Voxels at or above a threshold.
pub fn global_threshold<T: Real>(vol: &Volume3<T>, t_hu: f64) -> Mask3 {
    let mut mask = Mask3::empty(vol.grid.clone());
    let t = T::of(t_hu);
    for (b, &v) in mask.bits_mut().iter_mut().zip(vol.data()) {
        *b = (v >= t) as u8;
    }
    mask
}

/// Seeded region growing: the union of connected components of
/// `{v > grow_hu}` that contain at least one voxel with `v > seed_hu`
/// (strict inequalities). Breadth-first search from all seed voxels.
pub fn region_grow_metal<T: Real>(
    vol: &Volume3<T>,
    seed_hu: f64,
    grow_hu: f64,
    conn: Connectivity,
) -> Result<Mask3> {
    if seed_hu < grow_hu {
        return Err(Error::invalid("seed threshold must be >= growth threshold"));
    }
    let g = &vol.grid;
    let (nx, ny, nz) = (g.nx as i64, g.ny as i64, g.nz as i64);
    let seed_t = T::of(seed_hu);
    let grow_t = T::of(grow_hu);
    let allowed: Vec<bool> = vol.data().iter().map(|&v| v > grow_t).collect();
    let mut mask = Mask3::empty(g.clone());
    let mut queue = VecDeque::new();
    for (idx, &v) in vol.data().iter().enumerate() {
        if v > seed_t && mask.bits()[idx] == 0 {
            mask.bits_mut()[idx] = 1;
            queue.push_back(idx);
        }
    }
    let offsets = conn.offsets();
    while let Some(idx) = queue.pop_front() {
        let i = (idx % g.nx) as i64;
        let j = ((idx / g.nx) % g.ny) as i64;
        let k = (idx / (g.nx * g.ny)) as i64;
        for o in &offsets {
            let (x, y, z) = (i + o[0], j + o[1], k + o[2]);
            if x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz {
                continue;
            }
            let n = ((z as usize * g.ny) + y as usize) * g.nx + x as usize;
            if allowed[n] && mask.bits()[n] == 0 {
                mask.bits_mut()[n] = 1;
                queue.push_back(n);
            }
        }
    }
    Ok(mask)
}

/// Reference implementation of region growing by an iterated fixpoint:
/// start from the seed set and, in full passes over the volume, add every
/// allowed voxel adjacent to the current set until nothing changes. Kept
/// as an independent oracle for the breadth-first version.
pub fn region_grow_reference<T: Real>(
    vol: &Volume3<T>,
    seed_hu: f64,
    grow_hu: f64,
    conn: Connectivity,
) -> Result<Mask3> {
    if seed_hu < grow_hu {
        return Err(Error::invalid("seed threshold must be >= growth threshold"));
    }
    let g = &vol.grid;
    let (nx, ny, nz) = (g.nx as i64, g.ny as i64, g.nz as i64);
    let seed_t = T::of(seed_hu);
    let grow_t = T::of(grow_hu);
    let mut mask = Mask3::empty(g.clone());
    for (b, &v) in mask.bits_mut().iter_mut().zip(vol.data()) {
        *b = (v > seed_t) as u8;
    }
    let allowed: Vec<bool> = vol.data().iter().map(|&v| v > grow_t).collect();
    let offsets = conn.offsets();
    loop {
        let mut changed = false;
        let mut next = mask.clone();
        for idx in 0..allowed.len() {
            if !allowed[idx] || mask.bits()[idx] != 0 {
                continue;
            }
            let i = (idx % g.nx) as i64;
            let j = ((idx / g.nx) % g.ny) as i64;
            let k = (idx / (g.nx * g.ny)) as i64;
            let touches = offsets.iter().any(|o| {
                let (x, y, z) = (i + o[0], j + o[1], k + o[2]);
                x >= 0
                    && y >= 0
                    && z >= 0
                    && x < nx
                    && y < ny
                    && z < nz
                    && mask.bits()[((z as usize * g.ny) + y as usize) * g.nx + x as usize] != 0
            });
            if touches {
                next.bits_mut()[idx] = 1;
                changed = true;
            }
        }
        mask = next;
        if !changed {
            return Ok(mask);
        }
    }
}

/// Binary median filter over the `(2r+1)^3` neighborhood with zero padding;
/// the window has an odd voxel count, so ties cannot occur. Note that zero
/// padding erodes set voxels on grid edges and corners, where the window
/// majority includes padding.
pub fn median_filter3(mask: &Mask3, radius: usize) -> Result<Mask3> {
    if radius == 0 {
        return Err(Error::invalid("median radius must be >= 1"));
    }
    let g = &mask.grid;
    let r = radius as i64;
    let (nx, ny, nz) = (g.nx as i64, g.ny as i64, g.nz as i64);
    let window = (2 * radius + 1).pow(3);
    let majority = (window / 2 + 1) as u32;
    let mut out = Mask3::empty(g.clone());
    let slab = g.nx * g.ny;
    out.bits_mut().par_chunks_mut(slab).enumerate().for_each(|(kk, chunk)| {
        let k = kk as i64;
        for j in 0..ny {
            for i in 0..nx {
                let mut ones = 0u32;
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (x, y, z) = (i + dx, j + dy, k + dz);
                            if x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz {
                                continue;
                            }
                            let idx = ((z as usize * g.ny) + y as usize) * g.nx + x as usize;
                            if mask.bits()[idx] != 0 {
                                ones += 1;
                            }
                        }
                    }
                }
                chunk[(j * nx + i) as usize] = (ones >= majority) as u8;
            }
        }
    });
    Ok(out)
}

/// Binary dilation by the 26-neighborhood structuring element, applied
/// `radius` times.
pub fn dilate3(mask: &Mask3, radius: usize) -> Result<Mask3> {
    if radius == 0 {
        return Err(Error::invalid("dilation radius must be >= 1"));
    }
    let g = &mask.grid;
    let (nx, ny, nz) = (g.nx as i64, g.ny as i64, g.nz as i64);
    let mut cur = mask.clone();
    for _ in 0..radius {
        let src = cur.clone();
        let slab = g.nx * g.ny;
        cur.bits_mut().par_chunks_mut(slab).enumerate().for_each(|(kk, chunk)| {
            let k = kk as i64;
            for j in 0..ny {
                for i in 0..nx {
                    let mut any = false;
                    'scan: for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (x, y, z) = (i + dx, j + dy, k + dz);
                                if x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz {
                                    continue;
                                }
                                let idx =
                                    ((z as usize * g.ny) + y as usize) * g.nx + x as usize;
                                if src.bits()[idx] != 0 {
                                    any = true;
                                    break 'scan;
                                }
                            }
                        }
                    }
                    chunk[(j * nx + i) as usize] = any as u8;
                }
            }
        });
    }
    Ok(cur)
}
