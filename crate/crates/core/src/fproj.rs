//! Ray-driven forward projection: exact voxel/ray chord lengths by Siddon
//! boundary walking, line integrals of value volumes, and silhouette traces
//! of binary metal masks.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::vec3::{add, scale};
use crate::geom::{Ray, ScanGeometry};
use crate::scalar::Real;
use crate::voxvol::{Grid3, Mask3, MaterialVolume, Volume3};
use crate::xsim::{Domain, ProjectionStack};

/// One traversed voxel: linear index and chord length in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSeg {
    pub idx: usize,
    pub len_mm: f64,
}

/// Ordered voxel visits of one ray, entry to exit.
pub type PathSegments = Vec<PathSeg>;

/// Per-view stack of binary detector masks (metal traces).
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStack {
    pub n_views: usize,
    pub nu: usize,
    pub nv: usize,
    bits: Vec<u8>,
}

impl TraceStack {
    pub fn new(n_views: usize, nu: usize, nv: usize, bits: Vec<u8>) -> Result<TraceStack> {
        if bits.len() != n_views * nu * nv {
            return Err(Error::DimMismatch("trace bits do not match dimensions".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("trace bytes must be 0 or 1"));
        }
        Ok(TraceStack { n_views, nu, nv, bits })
    }

    pub fn empty(n_views: usize, nu: usize, nv: usize) -> TraceStack {
        TraceStack { n_views, nu, nv, bits: vec![0u8; n_views * nu * nv] }
    }

    #[inline]
    pub fn idx(&self, view: usize, iu: usize, iv: usize) -> usize {
        debug_assert!(view < self.n_views && iu < self.nu && iv < self.nv);
        (view * self.nv + iv) * self.nu + iu
    }

    #[inline]
    pub fn get(&self, view: usize, iu: usize, iv: usize) -> bool {
        self.bits[self.idx(view, iu, iv)] != 0
    }

    #[inline]
    pub fn set(&mut self, view: usize, iu: usize, iv: usize, on: bool) {
        let idx = self.idx(view, iu, iv);
        self.bits[idx] = on as u8;
    }

    #[inline]
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.bits
    }

    /// Bits of one view, v-major (u-fastest).
    pub fn view(&self, view: usize) -> &[u8] {
        let n = self.nu * self.nv;
        &self.bits[view * n..(view + 1) * n]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn count_view(&self, view: usize) -> usize {
        self.view(view).iter().filter(|&&b| b != 0).count()
    }
}

/// Intersection of a ray with the grid's AABB, as entry/exit parameters.
/// Returns `None` when the ray misses (or only grazes behind the origin).
fn aabb_range(ray: &Ray, grid: &Grid3) -> Option<(f64, f64)> {
    let (lo, hi) = grid.bounds();
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.dir[a];
        if d.abs() < 1e-300 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
        } else {
            let (ta, tb) = ((lo[a] - o) / d, (hi[a] - o) / d);
            let (ta, tb) = if ta <= tb { (ta, tb) } else { (tb, ta) };
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    if t1 > t0 {
        Some((t0, t1))
    } else {
        None
    }
}

/// Walk a ray through the grid, yielding every traversed voxel with its
/// exact chord length. Chords telescope: their sum equals the entry/exit
/// parameter difference of the grid AABB.
pub fn siddon_trace(ray: &Ray, grid: &Grid3) -> PathSegments {
    let mut segs = PathSegments::new();
    let (t_in, t_out) = match aabb_range(ray, grid) {
        Some(r) => r,
        None => return segs,
    };
    let (lo, _) = grid.bounds();
    let dims = [grid.nx, grid.ny, grid.nz];

    // Entry voxel indices, clamped against boundary-roundoff.
    let p_in = add(ray.origin, scale(ray.dir, t_in));
    let mut iv = [0isize; 3];
    for a in 0..3 {
        let f = ((p_in[a] - lo[a]) / grid.spacing[a]).floor() as isize;
        iv[a] = f.clamp(0, dims[a] as isize - 1);
    }

    // Per-axis boundary-crossing bookkeeping. `cross[a]` counts boundaries
    // already crossed, so each t is recomputed from the boundary coordinate
    // itself and the chord sums stay telescoping-exact.
    let mut step = [0isize; 3];
    let mut next_t = [f64::INFINITY; 3];
    let boundary_t = |a: usize, index: isize| -> f64 {
        let b = lo[a] + index as f64 * grid.spacing[a];
        (b - ray.origin[a]) / ray.dir[a]
    };
    for a in 0..3 {
        if ray.dir[a] > 1e-300 {
            step[a] = 1;
            next_t[a] = boundary_t(a, iv[a] + 1);
        } else if ray.dir[a] < -1e-300 {
            step[a] = -1;
            next_t[a] = boundary_t(a, iv[a]);
        }
    }

    let mut t_cur = t_in;
    loop {
        // Nearest upcoming boundary.
        let mut axis = 0;
        for a in 1..3 {
            if next_t[a] < next_t[axis] {
                axis = a;
            }
        }
        let t_next = next_t[axis].min(t_out);
        let len = t_next - t_cur;
        if len > 0.0 {
            segs.push(PathSeg {
                idx: grid.idx(iv[0] as usize, iv[1] as usize, iv[2] as usize),
                len_mm: len,
            });
        }
        if next_t[axis] >= t_out {
            break;
        }
        t_cur = next_t[axis];
        iv[axis] += step[axis];
        if iv[axis] < 0 || iv[axis] >= dims[axis] as isize {
            break;
        }
        let boundary_index = if step[axis] > 0 { iv[axis] + 1 } else { iv[axis] };
        next_t[axis] = boundary_t(axis, boundary_index);
    }
    segs
}

/// Line integral of a value volume along one ray (f64 accumulation).
pub fn integrate_ray<T: Real>(vol: &Volume3<T>, ray: &Ray) -> f64 {
    siddon_trace(ray, &vol.grid)
        .iter()
        .map(|s| vol.data()[s.idx].as_f64() * s.len_mm)
        .sum()
}

/// Path length through each material class along one ray, in mm.
pub fn material_paths(mat: &MaterialVolume, ray: &Ray) -> [f64; 4] {
    let mut acc = [0.0f64; 4];
    for s in siddon_trace(ray, &mat.grid) {
        acc[mat.labels()[s.idx].index()] += s.len_mm;
    }
    acc
}

/// Path length through set voxels of a mask along one ray, in mm.
pub fn mask_path(mask: &Mask3, ray: &Ray) -> f64 {
    siddon_trace(ray, &mask.grid)
        .iter()
        .filter(|s| mask.bits()[s.idx] != 0)
        .map(|s| s.len_mm)
        .sum()
}

/// Forward-project a value volume into a line-integral stack: every pixel
/// of every view holds the Siddon line integral along its ray.
pub fn forward_project_values<T: Real>(
    vol: &Volume3<T>,
    g: &ScanGeometry,
) -> ProjectionStack<T> {
    let n_pix = g.nu * g.nv;
    let mut data = vec![T::zero(); g.n_views() * n_pix];
    data.par_chunks_mut(n_pix).enumerate().for_each(|(view, out)| {
        for iv in 0..g.nv {
            for iu in 0..g.nu {
                let ray = g.pixel_ray(view, iu, iv);
                out[iv * g.nu + iu] = T::of(integrate_ray(vol, &ray));
            }
        }
    });
    ProjectionStack::from_geometry(g, Domain::LineIntegral, data)
        .expect("dimensions are consistent by construction")
}

/// Default silhouette threshold: half the smallest voxel spacing.
pub fn default_min_path_mm(grid: &Grid3) -> f64 {
    0.5 * grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Project a 3D metal mask into per-view binary traces: a pixel is set when
/// the metal path length along its ray exceeds `min_path_mm`.
pub fn project_metal_mask(mask: &Mask3, g: &ScanGeometry, min_path_mm: f64) -> TraceStack {
    let n_pix = g.nu * g.nv;
    let mut bits = vec![0u8; g.n_views() * n_pix];
    bits.par_chunks_mut(n_pix).enumerate().for_each(|(view, out)| {
        for iv in 0..g.nv {
            for iu in 0..g.nu {
                let ray = g.pixel_ray(view, iu, iv);
                out[iv * g.nu + iu] = (mask_path(mask, &ray) > min_path_mm) as u8;
            }
        }
    });
    TraceStack { n_views: g.n_views(), nu: g.nu, nv: g.nv, bits }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::vec3::sub;
    use crate::geom::uniform_angles;
    use crate::rng::StreamRng;
    use crate::voxvol::{
        rasterize_metal_mask, rasterize_phantom, segment_materials, PhantomSpec, Primitive,
        PrimitiveKind,
    };
    use std::f64::consts::TAU;

    fn unit_grid(n: usize) -> Grid3 {
        Grid3::centered([n, n, n], [1.0; 3]).unwrap()
    }

    /// Independent slab-test oracle for the total in-grid path length.
    fn slab_path(ray: &Ray, grid: &Grid3) -> f64 {
        let (lo, hi) = grid.bounds();
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if ray.dir[a].abs() < 1e-300 {
                if ray.origin[a] < lo[a] || ray.origin[a] > hi[a] {
                    return 0.0;
                }
            } else {
                let ta = (lo[a] - ray.origin[a]) / ray.dir[a];
                let tb = (hi[a] - ray.origin[a]) / ray.dir[a];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        (t1 - t0).max(0.0)
    }

    #[test]
    fn axis_aligned_ray_visits_every_voxel_once() {
        let grid = unit_grid(8);
        // Row j = 3, k = 4 has centres y = -0.5, z = 0.5.
        let ray = Ray { origin: [-100.0, -0.5, 0.5], dir: [1.0, 0.0, 0.0] };
        let segs = siddon_trace(&ray, &grid);
        assert_eq!(segs.len(), 8);
        for (i, s) in segs.iter().enumerate() {
            assert_eq!(s.idx, grid.idx(i, 3, 4));
            assert!((s.len_mm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_ray_yields_no_segments() {
        let grid = unit_grid(8);
        let ray = Ray { origin: [-100.0, 100.0, 0.0], dir: [1.0, 0.0, 0.0] };
        assert!(siddon_trace(&ray, &grid).is_empty());
    }

    #[test]
    fn chord_sum_matches_slab_test_on_random_rays() {
        let grid = Grid3::centered([13, 9, 11], [0.7, 1.3, 1.1]).unwrap();
        let mut rng = StreamRng::new(101);
        let mut hits = 0;
        for _ in 0..500 {
            // Random origin on a sphere, aimed at a random interior point.
            let dir0 = [
                rng.uniform_in(-1.0, 1.0),
                rng.uniform_in(-1.0, 1.0),
                rng.uniform_in(-1.0, 1.0),
            ];
            let n = (dir0[0] * dir0[0] + dir0[1] * dir0[1] + dir0[2] * dir0[2]).sqrt();
            if n < 1e-3 {
                continue;
            }
            let origin = [30.0 * dir0[0] / n, 30.0 * dir0[1] / n, 30.0 * dir0[2] / n];
            let target = [
                rng.uniform_in(-3.0, 3.0),
                rng.uniform_in(-3.0, 3.0),
                rng.uniform_in(-3.0, 3.0),
            ];
            let d = sub(target, origin);
            let dn = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let ray = Ray { origin, dir: [d[0] / dn, d[1] / dn, d[2] / dn] };
            let total: f64 = siddon_trace(&ray, &grid).iter().map(|s| s.len_mm).sum();
            let want = slab_path(&ray, &grid);
            assert!((total - want).abs() < 1e-9, "sum {total} vs slab {want}");
            if want > 0.0 {
                hits += 1;
            }
        }
        assert!(hits > 400, "almost all aimed rays should hit");
    }

    #[test]
    fn integral_matches_fine_sampling() {
        let grid = Grid3::centered([16, 16, 16], [1.0; 3]).unwrap();
        let mut rng = StreamRng::new(77);
        let data: Vec<f64> = (0..grid.len()).map(|_| rng.uniform()).collect();
        let vol = Volume3::new(grid.clone(), data).unwrap();
        let step = grid.spacing[0] / 50.0;
        for trial in 0..40 {
            let mut r = StreamRng::from_parts(55, &[trial]);
            let origin = [r.uniform_in(-40.0, -30.0), r.uniform_in(-4.0, 4.0), r.uniform_in(-4.0, 4.0)];
            let target = [r.uniform_in(-2.0, 2.0), r.uniform_in(-2.0, 2.0), r.uniform_in(-2.0, 2.0)];
            let d = sub(target, origin);
            let dn = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let ray = Ray { origin, dir: scale(d, 1.0 / dn) };
            let exact = integrate_ray(&vol, &ray);
            // Midpoint brute force over the slab range.
            let (lo, hi) = grid.bounds();
            let mut t0 = 0.0f64;
            let mut t1 = f64::INFINITY;
            for a in 0..3 {
                let ta = (lo[a] - ray.origin[a]) / ray.dir[a];
                let tb = (hi[a] - ray.origin[a]) / ray.dir[a];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
            if t1 <= t0 {
                continue;
            }
            let n = ((t1 - t0) / step).ceil() as usize;
            let h = (t1 - t0) / n as f64;
            let mut brute = 0.0;
            for m in 0..n {
                let t = t0 + (m as f64 + 0.5) * h;
                let p = add(ray.origin, scale(ray.dir, t));
                let i = ((p[0] - lo[0]) / grid.spacing[0]).floor() as isize;
                let j = ((p[1] - lo[1]) / grid.spacing[1]).floor() as isize;
                let k = ((p[2] - lo[2]) / grid.spacing[2]).floor() as isize;
                if (0..16).contains(&i) && (0..16).contains(&j) && (0..16).contains(&k) {
                    brute += vol.at(i as usize, j as usize, k as usize) * h;
                }
            }
            let denom = exact.abs().max(1e-9);
            assert!(
                (exact - brute).abs() / denom < 5e-3,
                "trial {trial}: exact {exact} vs brute {brute}"
            );
        }
    }

    fn odd_geometry(n_views: usize) -> ScanGeometry {
        ScanGeometry::new(580.0, 392.0, (9, 7), (1.9, 1.9), uniform_angles(n_views, TAU)).unwrap()
    }

    #[test]
    fn uniform_cylinder_central_ray_integral() {
        // Radius at a half-voxel boundary so the voxelized central chord
        // equals the analytic diameter exactly.
        let grid = Grid3::centered([45, 45, 9], [1.0; 3]).unwrap();
        let mu = 0.02;
        let mut data = vec![0.0f64; grid.len()];
        for k in 0..grid.nz {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    let c = grid.voxel_center(i, j, k);
                    if c[0] * c[0] + c[1] * c[1] <= 19.5 * 19.5 {
                        data[grid.idx(i, j, k)] = mu;
                    }
                }
            }
        }
        let vol = Volume3::new(grid, data).unwrap();
        let g = odd_geometry(1);
        let stack = forward_project_values(&vol, &g);
        let center = stack.at(0, g.nu / 2, g.nv / 2);
        let want = mu * 39.0;
        assert!(
            (center - want).abs() / want < 1e-6,
            "central integral {center} vs {want}"
        );
    }

    #[test]
    fn forward_projection_is_linear_and_zero_on_zero() {
        let grid = unit_grid(10);
        let mut rng = StreamRng::new(5);
        let v1 = Volume3::new(grid.clone(), (0..grid.len()).map(|_| rng.uniform()).collect())
            .unwrap();
        let v2 = Volume3::new(grid.clone(), (0..grid.len()).map(|_| rng.uniform()).collect())
            .unwrap();
        let g = odd_geometry(3);
        let zero = Volume3::filled(grid.clone(), 0.0f64);
        assert!(forward_project_values(&zero, &g).data().iter().all(|&p| p == 0.0));

        let (a, b) = (0.7, -1.3);
        let combo = Volume3::new(
            grid.clone(),
            v1.data().iter().zip(v2.data()).map(|(x, y)| a * x + b * y).collect(),
        )
        .unwrap();
        let p1 = forward_project_values(&v1, &g);
        let p2 = forward_project_values(&v2, &g);
        let pc = forward_project_values(&combo, &g);
        for idx in 0..pc.data().len() {
            let want = a * p1.data()[idx] + b * p2.data()[idx];
            assert!((pc.data()[idx] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn metal_mask_projection() {
        let grid = unit_grid(16);
        let g = odd_geometry(6);
        let empty = Mask3::empty(grid.clone());
        let t = project_metal_mask(&empty, &g, default_min_path_mm(&grid));
        assert_eq!(t.count(), 0);

        let spec = PhantomSpec {
            body: vec![],
            metal: vec![Primitive {
                kind: PrimitiveKind::Box,
                center_mm: [0.0, 0.0, 0.0],
                size_mm: [2.0, 2.0, 2.0],
                rot_z_deg: 0.0,
                hu: 8000.0,
            }],
            out_of_fov_offset_mm: None,
        };
        let mask = rasterize_metal_mask(&spec, &grid);
        let traces = project_metal_mask(&mask, &g, default_min_path_mm(&grid));
        for view in 0..g.n_views() {
            assert!(traces.count_view(view) > 0, "view {view} sees the cube");
        }

        // Monotone under dilation: growing the mask never clears a pixel.
        let mut grown = mask.clone();
        for k in 0..grid.nz {
            for j in 0..grid.ny {
                for i in 0..grid.nx {
                    if mask.get(i, j, k) {
                        for (di, dj, dk) in [(1i32, 0i32, 0i32), (0, 1, 0), (0, 0, 1)] {
                            let (a, b, c) = (
                                (i as i32 + di) as usize,
                                (j as i32 + dj) as usize,
                                (k as i32 + dk) as usize,
                            );
                            if a < grid.nx && b < grid.ny && c < grid.nz {
                                grown.set(a, b, c, true);
                            }
                        }
                    }
                }
            }
        }
        let grown_traces = project_metal_mask(&grown, &g, default_min_path_mm(&grid));
        for idx in 0..traces.bits().len() {
            assert!(traces.bits()[idx] <= grown_traces.bits()[idx]);
        }
    }

    #[test]
    fn out_of_fov_metal_projects_from_extended_grid() {
        let base = unit_grid(16);
        let spec = PhantomSpec {
            body: vec![],
            metal: vec![Primitive {
                kind: PrimitiveKind::Sphere,
                center_mm: [0.0, 0.0, 0.0],
                size_mm: [3.0, 0.0, 0.0],
                rot_z_deg: 0.0,
                hu: 8000.0,
            }],
            out_of_fov_offset_mm: Some([0.0, 0.0, 20.0]),
        };
        let ext = crate::voxvol::extended_grid(&spec, &base);
        let mask_base = rasterize_metal_mask(&spec, &base);
        let mask_ext = rasterize_metal_mask(&spec, &ext);
        assert_eq!(mask_base.count(), 0, "metal lies outside the base grid");
        assert!(mask_ext.count() > 0);

        // Wide detector sees the displaced metal in every view.
        let g = ScanGeometry::new(580.0, 392.0, (31, 31), (4.0, 4.0), uniform_angles(4, TAU))
            .unwrap();
        let traces = project_metal_mask(&mask_ext, &g, default_min_path_mm(&ext));
        for view in 0..g.n_views() {
            assert!(traces.count_view(view) > 0);
        }
        // Sanity: the phantom volume rasterized on the extended grid carries
        // the metal HU somewhere.
        let vol: Volume3<f64> = rasterize_phantom(&spec, &ext);
        let seg = segment_materials(&vol);
        assert!(seg.labels().iter().any(|&m| m == crate::voxvol::Material::Metal));
    }
}
