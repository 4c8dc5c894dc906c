//! Voxel volumes: HU volumes, material label volumes, binary masks, and the
//! geometric phantom description they are rasterized from.
//!
//! World frame: millimetres, isocenter at the origin, rotation axis +z. A
//! voxel `(i, j, k)` is centred at `origin + (i, j, k) * spacing` and the
//! linear layout is x-fastest. Primitive membership is decided at the voxel
//! centre with inclusive boundaries.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// HU below this is air, at/above is soft tissue.
pub const HU_AIR_SOFT: f64 = -500.0;
/// HU at/above this (and below the metal threshold) is bone.
pub const HU_SOFT_BONE: f64 = 500.0;
/// HU at/above this is metal.
pub const HU_BONE_METAL: f64 = 3400.0;
/// Background HU painted before any primitive.
pub const HU_BACKGROUND: f64 = -1000.0;

/// Four-class material model used by the projection simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Material {
    Air = 0,
    SoftTissue = 1,
    Bone = 2,
    Metal = 3,
}

impl Material {
    pub const ALL: [Material; 4] =
        [Material::Air, Material::SoftTissue, Material::Bone, Material::Metal];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    /// Threshold-based material classification of one HU value.
    #[inline]
    pub fn from_hu(v: f64) -> Material {
        if v < HU_AIR_SOFT {
            Material::Air
        } else if v < HU_SOFT_BONE {
            Material::SoftTissue
        } else if v < HU_BONE_METAL {
            Material::Bone
        } else {
            Material::Metal
        }
    }
}

/// Regular voxel lattice: dimensions, spacing (mm), and world position of
/// the centre of voxel (0, 0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid3 {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Grid3> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::invalid("grid spacing must be finite and positive"));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(Grid3 { nx: dims[0], ny: dims[1], nz: dims[2], spacing, origin })
    }

    /// Grid of `dims` voxels centred on the isocenter.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Grid3> {
        let origin = [
            -0.5 * (dims[0] as f64 - 1.0) * spacing[0],
            -0.5 * (dims[1] as f64 - 1.0) * spacing[1],
            -0.5 * (dims[2] as f64 - 1.0) * spacing[2],
        ];
        Grid3::new(dims, spacing, origin)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny && k < self.nz);
        (k * self.ny + j) * self.nx + i
    }

    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// World AABB of the voxelized region (voxel faces, not centres).
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let lo = [
            self.origin[0] - 0.5 * self.spacing[0],
            self.origin[1] - 0.5 * self.spacing[1],
            self.origin[2] - 0.5 * self.spacing[2],
        ];
        let hi = [
            lo[0] + self.nx as f64 * self.spacing[0],
            lo[1] + self.ny as f64 * self.spacing[1],
            lo[2] + self.nz as f64 * self.spacing[2],
        ];
        (lo, hi)
    }

    fn same_as(&self, other: &Grid3) -> bool {
        self.nx == other.nx
            && self.ny == other.ny
            && self.nz == other.nz
            && self.spacing == other.spacing
            && self.origin == other.origin
    }
}

/// Scalar voxel volume over a [`Grid3`]; all values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3<T: Real> {
    pub grid: Grid3,
    data: Vec<T>,
}

impl<T: Real> Volume3<T> {
    pub fn new(grid: Grid3, data: Vec<T>) -> Result<Volume3<T>> {
        if data.len() != grid.len() {
            return Err(Error::DimMismatch(format!(
                "volume data length {} does not match grid {}x{}x{}",
                data.len(),
                grid.nx,
                grid.ny,
                grid.nz
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("volume contains non-finite voxels"));
        }
        Ok(Volume3 { grid, data })
    }

    /// Volume filled with a constant value.
    pub fn filled(grid: Grid3, value: T) -> Volume3<T> {
        let n = grid.len();
        Volume3 { grid, data: vec![value; n] }
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.grid.idx(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        let idx = self.grid.idx(i, j, k);
        self.data[idx] = v;
    }

    /// Elementwise conversion to another scalar type.
    pub fn convert<U: Real>(&self) -> Volume3<U> {
        Volume3 {
            grid: self.grid.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Material label volume produced by [`segment_materials`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialVolume {
    pub grid: Grid3,
    labels: Vec<Material>,
}

impl MaterialVolume {
    pub fn new(grid: Grid3, labels: Vec<Material>) -> Result<MaterialVolume> {
        if labels.len() != grid.len() {
            return Err(Error::DimMismatch("label length does not match grid".into()));
        }
        Ok(MaterialVolume { grid, labels })
    }

    #[inline]
    pub fn labels(&self) -> &[Material] {
        &self.labels
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> Material {
        self.labels[self.grid.idx(i, j, k)]
    }
}

/// Binary voxel mask (0/1 per voxel).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3 {
    pub grid: Grid3,
    bits: Vec<u8>,
}

impl Mask3 {
    pub fn new(grid: Grid3, bits: Vec<u8>) -> Result<Mask3> {
        if bits.len() != grid.len() {
            return Err(Error::DimMismatch("mask length does not match grid".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("mask bytes must be 0 or 1"));
        }
        Ok(Mask3 { grid, bits })
    }

    pub fn empty(grid: Grid3) -> Mask3 {
        let n = grid.len();
        Mask3 { grid, bits: vec![0u8; n] }
    }

    #[inline]
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn bits_mut(&mut self) -> &mut [u8] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.bits[self.grid.idx(i, j, k)] != 0
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, on: bool) {
        let idx = self.grid.idx(i, j, k);
        self.bits[idx] = on as u8;
    }

    /// Number of set voxels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }
}

/// Classify every voxel of an HU volume into the four-material model.
pub fn segment_materials<T: Real>(vol: &Volume3<T>) -> MaterialVolume {
    let labels = vol.data().iter().map(|v| Material::from_hu(v.as_f64())).collect();
    MaterialVolume { grid: vol.grid.clone(), labels }
}

/// Geometric primitive shapes; `size_mm` semantics depend on the kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    /// size = (radius, -, -).
    Sphere,
    /// size = half-extents (hx, hy, hz).
    Box,
    /// Axis along z; size = (semi-axis x, semi-axis y, half-height).
    EllipticCylinder,
    /// Solid cylinder along the given axis; size = (radius, -, half-length).
    CappedCylinder(Axis),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// One solid primitive: shape, pose (centre + rotation about z), and HU.
#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center_mm: [f64; 3],
    pub size_mm: [f64; 3],
    pub rot_z_deg: f64,
    pub hu: f64,
}

impl Primitive {
    /// Membership test for a world-space point (inclusive boundary).
    pub fn contains(&self, p: [f64; 3], extra_offset: [f64; 3]) -> bool {
        let c = [
            self.center_mm[0] + extra_offset[0],
            self.center_mm[1] + extra_offset[1],
            self.center_mm[2] + extra_offset[2],
        ];
        let (s, co) = (-self.rot_z_deg.to_radians()).sin_cos();
        let dx = p[0] - c[0];
        let dy = p[1] - c[1];
        let q = [co * dx - s * dy, s * dx + co * dy, p[2] - c[2]];
        let sz = self.size_mm;
        match self.kind {
            PrimitiveKind::Sphere => {
                let r = sz[0];
                q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= r * r
            }
            PrimitiveKind::Box => {
                q[0].abs() <= sz[0] && q[1].abs() <= sz[1] && q[2].abs() <= sz[2]
            }
            PrimitiveKind::EllipticCylinder => {
                let (a, b, hz) = (sz[0], sz[1], sz[2]);
                (q[0] / a) * (q[0] / a) + (q[1] / b) * (q[1] / b) <= 1.0 && q[2].abs() <= hz
            }
            PrimitiveKind::CappedCylinder(axis) => {
                let (r, hl) = (sz[0], sz[2]);
                let (ax, r0, r1) = match axis {
                    Axis::X => (q[0], q[1], q[2]),
                    Axis::Y => (q[1], q[0], q[2]),
                    Axis::Z => (q[2], q[0], q[1]),
                };
                r0 * r0 + r1 * r1 <= r * r && ax.abs() <= hl
            }
        }
    }

    /// Conservative world AABB (rotation bounded by the xy circumradius).
    pub fn aabb(&self, extra_offset: [f64; 3]) -> ([f64; 3], [f64; 3]) {
        let sz = self.size_mm;
        let (ex, ey, ez) = match self.kind {
            PrimitiveKind::Sphere => (sz[0], sz[0], sz[0]),
            PrimitiveKind::Box | PrimitiveKind::EllipticCylinder => {
                let rxy = (sz[0] * sz[0] + sz[1] * sz[1]).sqrt();
                (rxy, rxy, sz[2])
            }
            PrimitiveKind::CappedCylinder(axis) => match axis {
                Axis::X => (sz[2], sz[0], sz[0]),
                Axis::Y => (sz[0], sz[2], sz[0]),
                Axis::Z => (sz[0], sz[0], sz[2]),
            },
        };
        let c = [
            self.center_mm[0] + extra_offset[0],
            self.center_mm[1] + extra_offset[1],
            self.center_mm[2] + extra_offset[2],
        ];
        ([c[0] - ex, c[1] - ey, c[2] - ez], [c[0] + ex, c[1] + ey, c[2] + ez])
    }
}

/// Default HU for soft-tissue body primitives.
pub const HU_SOFT_DEFAULT: f64 = 40.0;
/// Default HU for bone primitives.
pub const HU_BONE_DEFAULT: f64 = 1200.0;
/// Default HU for titanium-like metal inserts.
pub const HU_METAL_TITANIUM: f64 = 8000.0;
/// Default HU for steel-like metal inserts.
pub const HU_METAL_STEEL: f64 = 20000.0;

/// Declarative phantom: background, body primitives, metal inserts.
///
/// `out_of_fov_offset_mm` shifts every metal insert, which is how scenes with
/// metal outside the reconstruction grid (but inside the beam) are built.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhantomSpec {
    pub body: Vec<Primitive>,
    pub metal: Vec<Primitive>,
    pub out_of_fov_offset_mm: Option<[f64; 3]>,
}

impl PhantomSpec {
    fn metal_offset(&self) -> [f64; 3] {
        self.out_of_fov_offset_mm.unwrap_or([0.0; 3])
    }
}

/// Paint the phantom onto a grid: background, then body primitives in
/// order, then metal inserts in order (later primitives overwrite earlier
/// ones). Overlapping metal inserts produce a warning, not an error.
pub fn rasterize_phantom<T: Real>(spec: &PhantomSpec, grid: &Grid3) -> Volume3<T> {
    let mut vol = Volume3::filled(grid.clone(), T::of(HU_BACKGROUND));
    let off = spec.metal_offset();
    let mut metal_owner: Vec<u8> = Vec::new();
    let mut overlaps = 0usize;
    if spec.metal.len() > 1 {
        metal_owner = vec![0u8; grid.len()];
    }
    for k in 0..grid.nz {
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let p = grid.voxel_center(i, j, k);
                let idx = grid.idx(i, j, k);
                for prim in &spec.body {
                    if prim.contains(p, [0.0; 3]) {
                        vol.data_mut()[idx] = T::of(prim.hu);
                    }
                }
                for (m, prim) in spec.metal.iter().enumerate() {
                    if prim.contains(p, off) {
                        vol.data_mut()[idx] = T::of(prim.hu);
                        if !metal_owner.is_empty() {
                            if metal_owner[idx] != 0 && metal_owner[idx] != m as u8 + 1 {
                                overlaps += 1;
                            }
                            metal_owner[idx] = m as u8 + 1;
                        }
                    }
                }
            }
        }
    }
    if overlaps > 0 {
        log::warn!("phantom rasterization: {overlaps} voxels covered by more than one metal insert");
    }
    vol
}

/// Mask of voxels inside any metal insert (true metal, not recon-derived).
pub fn rasterize_metal_mask(spec: &PhantomSpec, grid: &Grid3) -> Mask3 {
    let mut mask = Mask3::empty(grid.clone());
    let off = spec.metal_offset();
    for k in 0..grid.nz {
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let p = grid.voxel_center(i, j, k);
                if spec.metal.iter().any(|prim| prim.contains(p, off)) {
                    mask.set(i, j, k, true);
                }
            }
        }
    }
    mask
}

/// Smallest grid with the same lattice as `base` that covers both `base`
/// and every phantom primitive. Used to simulate scenes whose metal lies
/// outside the reconstruction FOV.
pub fn extended_grid(spec: &PhantomSpec, base: &Grid3) -> Grid3 {
    let (mut lo, mut hi) = base.bounds();
    let off = spec.metal_offset();
    for prim in &spec.body {
        let (plo, phi) = prim.aabb([0.0; 3]);
        for a in 0..3 {
            lo[a] = lo[a].min(plo[a]);
            hi[a] = hi[a].max(phi[a]);
        }
    }
    for prim in &spec.metal {
        let (plo, phi) = prim.aabb(off);
        for a in 0..3 {
            lo[a] = lo[a].min(plo[a]);
            hi[a] = hi[a].max(phi[a]);
        }
    }
    let (blo, bhi) = base.bounds();
    let mut dims = [base.nx, base.ny, base.nz];
    let mut origin = base.origin;
    for a in 0..3 {
        let s = base.spacing[a];
        let below = ((blo[a] - lo[a]) / s).ceil().max(0.0) as usize;
        let above = ((hi[a] - bhi[a]) / s).ceil().max(0.0) as usize;
        dims[a] += below + above;
        origin[a] -= below as f64 * s;
    }
    Grid3 { nx: dims[0], ny: dims[1], nz: dims[2], spacing: base.spacing, origin }
}

/// Replace masked voxels with values from a second volume (metal put back
/// into a metal-free reconstruction).
pub fn insert_metal<T: Real>(
    base: &Volume3<T>,
    mask: &Mask3,
    values: &Volume3<T>,
) -> Result<Volume3<T>> {
    if !base.grid.same_as(&mask.grid) || !base.grid.same_as(&values.grid) {
        return Err(Error::DimMismatch("insert_metal: grids differ".into()));
    }
    let mut out = base.clone();
    for (idx, &m) in mask.bits().iter().enumerate() {
        if m != 0 {
            out.data_mut()[idx] = values.data()[idx];
        }
    }
    Ok(out)
}

/// Replace masked voxels with a constant HU value.
pub fn fill_masked<T: Real>(base: &Volume3<T>, mask: &Mask3, value: T) -> Result<Volume3<T>> {
    if !base.grid.same_as(&mask.grid) {
        return Err(Error::DimMismatch("fill_masked: grids differ".into()));
    }
    let mut out = base.clone();
    for (idx, &m) in mask.bits().iter().enumerate() {
        if m != 0 {
            out.data_mut()[idx] = value;
        }
    }
    Ok(out)
}

/// Clamp masked voxels from below so they re-segment as metal.
pub fn clip_metal_min<T: Real>(
    vol: &Volume3<T>,
    mask: &Mask3,
    min_hu: f64,
) -> Result<Volume3<T>> {
    if !vol.grid.same_as(&mask.grid) {
        return Err(Error::DimMismatch("clip_metal_min: grids differ".into()));
    }
    let floor = T::of(min_hu);
    let mut out = vol.clone();
    for (idx, &m) in mask.bits().iter().enumerate() {
        if m != 0 && out.data()[idx] < floor {
            out.data_mut()[idx] = floor;
        }
    }
    Ok(out)
}
