//! Synthetic X-ray projection: polychromatic source spectrum, per-material
//! attenuation tables, analytic primary simulation with Poisson counting
//! noise, an optional Monte Carlo transport mode with photoelectric,
//! Compton, and Rayleigh interactions, and flat-field log-normalization of
//! raw detector energies into line integrals.
//!
//! All randomness flows through counter-based streams keyed by
//! (seed, view, pixel), so results are bit-identical at any thread count.

use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fproj::{material_paths, siddon_trace};
use crate::geom::vec3::{add, dot, scale, sub};
use crate::geom::{Ray, ScanGeometry};
use crate::rng::StreamRng;
use crate::scalar::Real;
use crate::voxvol::{Material, MaterialVolume};

/// Electron rest energy in keV, as used by the Compton relation.
pub const ELECTRON_REST_KEV: f64 = 511.0;
/// Photons below this energy are removed from the source spectrum.
pub const SPECTRUM_MIN_KEV: f64 = 20.0;

/// What a projection stack's pixel values mean; doubles as the on-disk tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Domain {
    /// Detected energy per pixel (keV).
    RawEnergy = 0,
    /// Flat-field normalized line integrals, -ln(S/F).
    LineIntegral = 1,
}

impl Domain {
    pub fn from_tag(tag: u8) -> Result<Domain> {
        match tag {
            0 => Ok(Domain::RawEnergy),
            1 => Ok(Domain::LineIntegral),
            other => Err(Error::invalid(format!("unknown projection domain tag {other}"))),
        }
    }
}

/// Discrete source spectrum: bin energies (keV) and normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub energies_kev: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Spectrum {
    /// Monoenergetic spectrum at one energy.
    pub fn mono(e_kev: f64) -> Result<Spectrum> {
        if !(e_kev.is_finite() && e_kev > 0.0) {
            return Err(Error::invalid("mono energy must be positive"));
        }
        Ok(Spectrum { energies_kev: vec![e_kev], weights: vec![1.0] })
    }

    /// Mean photon energy, sum(w * E).
    pub fn mean_energy_kev(&self) -> f64 {
        self.energies_kev.iter().zip(&self.weights).map(|(e, w)| e * w).sum()
    }

    /// Mean squared photon energy, sum(w * E^2).
    pub fn mean_energy_sq(&self) -> f64 {
        self.energies_kev.iter().zip(&self.weights).map(|(e, w)| e * e * w).sum()
    }
}

/// Filtered bremsstrahlung source model: weight proportional to
/// `max(0, kvp - E) * E` on [20, kvp] keV, discretized into `n_bins`
/// equal-width bins at bin centres. With `n_bins = 1` the single bin sits at
/// the analytic mean energy of the continuous shape.
pub fn build_spectrum(kvp: f64, n_bins: usize) -> Result<Spectrum> {
    if !(kvp.is_finite() && kvp > SPECTRUM_MIN_KEV) {
        return Err(Error::invalid(format!(
            "tube voltage must exceed {SPECTRUM_MIN_KEV} keV"
        )));
    }
    if n_bins == 0 {
        return Err(Error::invalid("spectrum needs at least one bin"));
    }
    if n_bins == 1 {
        // Mean of w(E) = (kvp - E) E over [lo, kvp], by closed-form
        // polynomial integrals.
        let lo = SPECTRUM_MIN_KEV;
        let m2 = |e: f64| kvp * e.powi(3) / 3.0 - e.powi(4) / 4.0;
        let m1 = |e: f64| kvp * e.powi(2) / 2.0 - e.powi(3) / 3.0;
        let mean = (m2(kvp) - m2(lo)) / (m1(kvp) - m1(lo));
        return Ok(Spectrum { energies_kev: vec![mean], weights: vec![1.0] });
    }
    let width = (kvp - SPECTRUM_MIN_KEV) / n_bins as f64;
    let mut energies = Vec::with_capacity(n_bins);
    let mut weights = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let e = SPECTRUM_MIN_KEV + (b as f64 + 0.5) * width;
        energies.push(e);
        weights.push(((kvp - e) * e).max(0.0));
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(Spectrum { energies_kev: energies, weights })
}

/// Per-interaction shares of the total attenuation coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionSplit {
    pub photoelectric: f64,
    pub compton: f64,
    pub rayleigh: f64,
}

/// Energy-gridded linear attenuation (1/mm) per material, with interaction
/// fractions for the Monte Carlo mode. Queries interpolate linearly and
/// clamp outside the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttenuationTable {
    energies_kev: Vec<f64>,
    /// mu[material][energy index], 1/mm.
    mu: [Vec<f64>; 4],
    /// splits[material][energy index].
    splits: [Vec<InteractionSplit>; 4],
}

/// Coarse embedded attenuation data: 10 energies, 20-150 keV, for air,
/// water-equivalent soft tissue, cortical-like bone, and titanium-like
/// metal. Repository data assembled from a public compilation; contractual
/// properties are positivity, the material ordering, and monotone decrease
/// with energy.
const TABLE_ENERGIES: [f64; 10] =
    [20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 100.0, 120.0, 150.0];
const MU_AIR: [f64; 10] = [
    9.38e-5, 4.27e-5, 3.00e-5, 2.51e-5, 2.27e-5, 2.11e-5, 2.01e-5, 1.86e-5, 1.76e-5, 1.64e-5,
];
const MU_SOFT: [f64; 10] =
    [0.0810, 0.0376, 0.0268, 0.0227, 0.0206, 0.0193, 0.0184, 0.0171, 0.0162, 0.0151];
const MU_BONE: [f64; 10] =
    [0.768, 0.2554, 0.1279, 0.0814, 0.0605, 0.0503, 0.0428, 0.0357, 0.0321, 0.0284];
const MU_METAL: [f64; 10] =
    [4.858, 1.507, 0.661, 0.376, 0.247, 0.183, 0.145, 0.106, 0.0876, 0.0717];
const PE_FRAC: [[f64; 10]; 4] = [
    // air (water-like), soft tissue, bone, metal
    [0.55, 0.30, 0.16, 0.09, 0.055, 0.035, 0.025, 0.013, 0.008, 0.004],
    [0.55, 0.30, 0.16, 0.09, 0.055, 0.035, 0.025, 0.013, 0.008, 0.004],
    [0.85, 0.65, 0.45, 0.30, 0.21, 0.15, 0.11, 0.06, 0.04, 0.022],
    [0.95, 0.88, 0.75, 0.62, 0.50, 0.40, 0.32, 0.20, 0.14, 0.08],
];
const RAY_FRAC: [[f64; 10]; 4] = [
    [0.10, 0.08, 0.06, 0.05, 0.04, 0.035, 0.03, 0.025, 0.02, 0.015],
    [0.10, 0.08, 0.06, 0.05, 0.04, 0.035, 0.03, 0.025, 0.02, 0.015],
    [0.06, 0.05, 0.045, 0.04, 0.035, 0.03, 0.028, 0.024, 0.02, 0.016],
    [0.03, 0.028, 0.026, 0.024, 0.022, 0.02, 0.019, 0.017, 0.016, 0.015],
];

impl AttenuationTable {
    pub fn new(
        energies_kev: Vec<f64>,
        mu: [Vec<f64>; 4],
        splits: [Vec<InteractionSplit>; 4],
    ) -> Result<AttenuationTable> {
        if energies_kev.len() < 2 {
            return Err(Error::invalid("attenuation table needs at least two energies"));
        }
        if energies_kev.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("attenuation energies must be strictly increasing"));
        }
        for m in 0..4 {
            if mu[m].len() != energies_kev.len() || splits[m].len() != energies_kev.len() {
                return Err(Error::DimMismatch("attenuation rows must match energy grid".into()));
            }
            if mu[m].iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::invalid("attenuation values must be finite and >= 0"));
            }
            for s in &splits[m] {
                let total = s.photoelectric + s.compton + s.rayleigh;
                if s.photoelectric < 0.0 || s.compton < 0.0 || s.rayleigh < 0.0 {
                    return Err(Error::invalid("interaction fractions must be >= 0"));
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid("interaction fractions must sum to 1"));
                }
            }
        }
        Ok(AttenuationTable { energies_kev, mu, splits })
    }

    /// The embedded four-material table.
    pub fn embedded() -> AttenuationTable {
        let energies = TABLE_ENERGIES.to_vec();
        let mu = [MU_AIR.to_vec(), MU_SOFT.to_vec(), MU_BONE.to_vec(), MU_METAL.to_vec()];
        let mut splits: [Vec<InteractionSplit>; 4] = Default::default();
        for m in 0..4 {
            splits[m] = (0..energies.len())
                .map(|i| InteractionSplit {
                    photoelectric: PE_FRAC[m][i],
                    compton: 1.0 - PE_FRAC[m][i] - RAY_FRAC[m][i],
                    rayleigh: RAY_FRAC[m][i],
                })
                .collect();
        }
        AttenuationTable::new(energies, mu, splits).expect("embedded table is valid")
    }

    /// Uniform table for tests: one mu value and one split for everything.
    pub fn uniform(mu_per_mm: f64, split: InteractionSplit) -> AttenuationTable {
        let energies = vec![SPECTRUM_MIN_KEV, 150.0];
        AttenuationTable::new(
            energies,
            [(); 4].map(|_| vec![mu_per_mm; 2]),
            [(); 4].map(|_| vec![split; 2]),
        )
        .expect("uniform table is valid")
    }

    fn bracket(&self, e_kev: f64) -> (usize, f64) {
        let es = &self.energies_kev;
        if e_kev <= es[0] {
            return (0, 0.0);
        }
        if e_kev >= es[es.len() - 1] {
            return (es.len() - 2, 1.0);
        }
        let hi = es.partition_point(|&e| e < e_kev).max(1);
        let lo = hi - 1;
        ((lo), (e_kev - es[lo]) / (es[hi] - es[lo]))
    }

    /// Linear attenuation coefficient (1/mm) of a material at an energy.
    pub fn mu_lookup(&self, material: Material, e_kev: f64) -> f64 {
        let (lo, f) = self.bracket(e_kev);
        let row = &self.mu[material.index()];
        row[lo] * (1.0 - f) + row[lo + 1] * f
    }

    /// Interaction fractions of a material at an energy (renormalized after
    /// interpolation).
    pub fn split_lookup(&self, material: Material, e_kev: f64) -> InteractionSplit {
        let (lo, f) = self.bracket(e_kev);
        let row = &self.splits[material.index()];
        let pe = row[lo].photoelectric * (1.0 - f) + row[lo + 1].photoelectric * f;
        let co = row[lo].compton * (1.0 - f) + row[lo + 1].compton * f;
        let ra = row[lo].rayleigh * (1.0 - f) + row[lo + 1].rayleigh * f;
        let t = pe + co + ra;
        InteractionSplit { photoelectric: pe / t, compton: co / t, rayleigh: ra / t }
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies_kev
    }
}

/// Raw detector stack: deposited energy (keV) per pixel per view.
#[derive(Debug, Clone, PartialEq)]
pub struct RawProjection<T: Real> {
    pub nu: usize,
    pub nv: usize,
    pub angles_rad: Vec<f64>,
    pub photons_per_pixel: u32,
    pub seed: u64,
    data: Vec<T>,
}

impl<T: Real> RawProjection<T> {
    pub fn new(
        nu: usize,
        nv: usize,
        angles_rad: Vec<f64>,
        photons_per_pixel: u32,
        seed: u64,
        data: Vec<T>,
    ) -> Result<RawProjection<T>> {
        if data.len() != angles_rad.len() * nu * nv {
            return Err(Error::DimMismatch("raw projection data length mismatch".into()));
        }
        if photons_per_pixel == 0 {
            return Err(Error::invalid("photons per pixel must be positive"));
        }
        if data.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::invalid("raw energies must be finite and >= 0"));
        }
        Ok(RawProjection { nu, nv, angles_rad, photons_per_pixel, seed, data })
    }

    #[inline]
    pub fn n_views(&self) -> usize {
        self.angles_rad.len()
    }

    #[inline]
    pub fn idx(&self, view: usize, iu: usize, iv: usize) -> usize {
        (view * self.nv + iv) * self.nu + iu
    }

    #[inline]
    pub fn at(&self, view: usize, iu: usize, iv: usize) -> T {
        self.data[self.idx(view, iu, iv)]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// View as a generic projection stack in the raw-energy domain.
    pub fn to_stack(&self) -> ProjectionStack<T> {
        ProjectionStack {
            nu: self.nu,
            nv: self.nv,
            angles_rad: self.angles_rad.clone(),
            domain: Domain::RawEnergy,
            seed: self.seed,
            data: self.data.clone(),
            flagged: Vec::new(),
        }
    }
}

/// Projection stack with an explicit domain tag. Line-integral stacks carry
/// the linear indices of pixels whose raw value was floored during
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack<T: Real> {
    pub nu: usize,
    pub nv: usize,
    pub angles_rad: Vec<f64>,
    pub domain: Domain,
    pub seed: u64,
    data: Vec<T>,
    pub flagged: Vec<u64>,
}

impl<T: Real> ProjectionStack<T> {
    pub fn new(
        nu: usize,
        nv: usize,
        angles_rad: Vec<f64>,
        domain: Domain,
        seed: u64,
        data: Vec<T>,
    ) -> Result<ProjectionStack<T>> {
        if data.len() != angles_rad.len() * nu * nv {
            return Err(Error::DimMismatch("projection data length mismatch".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("projection values must be finite"));
        }
        Ok(ProjectionStack { nu, nv, angles_rad, domain, seed, data, flagged: Vec::new() })
    }

    pub fn from_geometry(g: &ScanGeometry, domain: Domain, data: Vec<T>) -> Result<Self> {
        ProjectionStack::new(g.nu, g.nv, g.angles_rad.clone(), domain, 0, data)
    }

    #[inline]
    pub fn n_views(&self) -> usize {
        self.angles_rad.len()
    }

    #[inline]
    pub fn idx(&self, view: usize, iu: usize, iv: usize) -> usize {
        (view * self.nv + iv) * self.nu + iu
    }

    #[inline]
    pub fn at(&self, view: usize, iu: usize, iv: usize) -> T {
        self.data[self.idx(view, iu, iv)]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Pixels of one view, v-major (u-fastest).
    pub fn view(&self, view: usize) -> &[T] {
        let n = self.nu * self.nv;
        &self.data[view * n..(view + 1) * n]
    }

    /// Matching-shape check against a geometry.
    pub fn check_geometry(&self, g: &ScanGeometry) -> Result<()> {
        if self.nu != g.nu || self.nv != g.nv || self.n_views() != g.n_views() {
            return Err(Error::DimMismatch(format!(
                "stack {}x{}x{} does not match geometry {}x{}x{}",
                self.n_views(),
                self.nu,
                self.nv,
                g.n_views(),
                g.nu,
                g.nv
            )));
        }
        Ok(())
    }

    pub fn convert<U: Real>(&self) -> ProjectionStack<U> {
        ProjectionStack {
            nu: self.nu,
            nv: self.nv,
            angles_rad: self.angles_rad.clone(),
            domain: self.domain,
            seed: self.seed,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
            flagged: self.flagged.clone(),
        }
    }
}

/// Knobs shared by the simulation entry points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub photons_per_pixel: u32,
    pub seed: u64,
    /// Poisson counting noise on detected quanta; off = expected values.
    pub noise: bool,
}

impl SimOptions {
    pub fn noiseless(photons_per_pixel: u32) -> SimOptions {
        SimOptions { photons_per_pixel, seed: 0, noise: false }
    }

    fn validate(&self) -> Result<()> {
        if self.photons_per_pixel == 0 {
            return Err(Error::invalid("photons per pixel must be positive"));
        }
        Ok(())
    }
}

const PRIMARY_SALT: u64 = 0x11;
const MC_SALT: u64 = 0x22;
const FLAT_SALT: u64 = 0x33;

fn poisson_count(rng: &mut StreamRng, lambda: f64) -> f64 {
    // Guard vanishing rates: below ~1e-16, exp(-lambda) rounds to exactly
    // 1.0 and the sampler's inversion loop returns -1. A nonzero count at
    // these rates has probability ~lambda, i.e. zero at f64 resolution.
    if lambda <= 1e-12 {
        return 0.0;
    }
    Poisson::new(lambda).expect("lambda > 0").sample(rng)
}

/// Analytic primary simulation: each pixel's expected quanta per spectrum
/// bin follow Beer-Lambert over the per-material Siddon path lengths,
/// `exp(-sum_m mu_m(E_b) * path_m)`, realized with optional Poisson noise
/// and detected as energy (ideal energy-integrating detector).
pub fn simulate_primary<T: Real>(
    mat: &MaterialVolume,
    g: &ScanGeometry,
    spectrum: &Spectrum,
    table: &AttenuationTable,
    opts: &SimOptions,
) -> Result<RawProjection<T>> {
    opts.validate()?;
    let n_pix = g.nu * g.nv;
    let n_bins = spectrum.energies_kev.len();
    // Per-bin attenuation coefficients per material, hoisted out of the loop.
    let mut mu_be = vec![[0.0f64; 4]; n_bins];
    for (b, &e) in spectrum.energies_kev.iter().enumerate() {
        for m in Material::ALL {
            mu_be[b][m.index()] = table.mu_lookup(m, e);
        }
    }
    let photons = opts.photons_per_pixel as f64;
    let mut data = vec![T::zero(); g.n_views() * n_pix];
    data.par_chunks_mut(n_pix).enumerate().for_each(|(view, out)| {
        for iv in 0..g.nv {
            for iu in 0..g.nu {
                let ray = g.pixel_ray(view, iu, iv);
                let paths = material_paths(mat, &ray);
                let mut rng =
                    StreamRng::from_parts(opts.seed, &[PRIMARY_SALT, view as u64, (iv * g.nu + iu) as u64]);
                let mut energy = 0.0f64;
                for b in 0..n_bins {
                    let line: f64 =
                        (0..4).map(|m| mu_be[b][m] * paths[m]).sum();
                    let lambda = photons * spectrum.weights[b] * (-line).exp();
                    let count =
                        if opts.noise { poisson_count(&mut rng, lambda) } else { lambda };
                    energy += spectrum.energies_kev[b] * count;
                }
                out[iv * g.nu + iu] = T::of(energy);
            }
        }
    });
    RawProjection::new(g.nu, g.nv, g.angles_rad.clone(), opts.photons_per_pixel, opts.seed, data)
}

/// Flat field: the primary simulation with no object in the beam. With
/// noise off, every pixel equals `photons * mean_energy` exactly.
pub fn flat_field<T: Real>(
    g: &ScanGeometry,
    spectrum: &Spectrum,
    opts: &SimOptions,
) -> Result<RawProjection<T>> {
    opts.validate()?;
    let n_pix = g.nu * g.nv;
    let photons = opts.photons_per_pixel as f64;
    let expected = photons * spectrum.mean_energy_kev();
    let mut data = vec![T::zero(); g.n_views() * n_pix];
    if opts.noise {
        data.par_chunks_mut(n_pix).enumerate().for_each(|(view, out)| {
            for pix in 0..n_pix {
                let mut rng =
                    StreamRng::from_parts(opts.seed, &[FLAT_SALT, view as u64, pix as u64]);
                let mut energy = 0.0f64;
                for (b, &e) in spectrum.energies_kev.iter().enumerate() {
                    let lambda = photons * spectrum.weights[b];
                    energy += e * poisson_count(&mut rng, lambda);
                }
                out[pix] = T::of(energy);
            }
        });
    } else {
        data.fill(T::of(expected));
    }
    RawProjection::new(g.nu, g.nv, g.angles_rad.clone(), opts.photons_per_pixel, opts.seed, data)
}

/// Flat-field normalization into line integrals: `p = -ln(S / F)`.
///
/// Any pixel with `S <= 0` is floored to half of one expected photon's
/// energy at that pixel (`0.5 * F / photons`) and its linear index recorded
/// in `flagged`. A non-positive flat-field pixel is an error.
pub fn normalize_log<T: Real>(
    s: &RawProjection<T>,
    f: &RawProjection<T>,
) -> Result<ProjectionStack<T>> {
    if s.nu != f.nu || s.nv != f.nv || s.n_views() != f.n_views() {
        return Err(Error::DimMismatch("signal and flat field shapes differ".into()));
    }
    let mut data = vec![T::zero(); s.data.len()];
    let mut flagged = Vec::new();
    for (idx, (&sv, &fv)) in s.data.iter().zip(f.data.iter()).enumerate() {
        let fv = fv.as_f64();
        if fv <= 0.0 {
            return Err(Error::invalid(format!(
                "flat field must be positive everywhere (pixel {idx})"
            )));
        }
        let sv = sv.as_f64();
        let p = if sv <= 0.0 {
            flagged.push(idx as u64);
            let floor = 0.5 * fv / f.photons_per_pixel as f64;
            -(floor / fv).ln()
        } else {
            -(sv / fv).ln()
        };
        data[idx] = T::of(p);
    }
    let mut stack = ProjectionStack::new(
        s.nu,
        s.nv,
        s.angles_rad.clone(),
        Domain::LineIntegral,
        s.seed,
        data,
    )?;
    stack.flagged = flagged;
    Ok(stack)
}

/// Scattered photon energy after a Compton event:
/// `E' = E / (1 + (E/511)(1 - cos theta))`.
#[inline]
pub fn compton_scatter_energy(e_kev: f64, cos_theta: f64) -> f64 {
    e_kev / (1.0 + e_kev / ELECTRON_REST_KEV * (1.0 - cos_theta))
}

/// Energy bookkeeping of one Monte Carlo run (keV).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct McLedger {
    pub sampled: f64,
    pub deposited: f64,
    pub absorbed: f64,
    pub escaped: f64,
}

/// Klein-Nishina polar angle by rejection: propose cos uniform on [-1, 1],
/// accept against the unnormalized differential cross-section (max 2).
fn sample_compton_cos(rng: &mut StreamRng, e_kev: f64) -> f64 {
    let k = e_kev / ELECTRON_REST_KEV;
    loop {
        let c = rng.uniform_in(-1.0, 1.0);
        let ratio = 1.0 / (1.0 + k * (1.0 - c));
        let f = ratio * ratio * (ratio + 1.0 / ratio - (1.0 - c * c));
        if rng.uniform() * 2.0 <= f {
            return c;
        }
    }
}

/// Thomson (coherent) polar angle by rejection against 1 + cos^2.
fn sample_rayleigh_cos(rng: &mut StreamRng) -> f64 {
    loop {
        let c = rng.uniform_in(-1.0, 1.0);
        if rng.uniform() * 2.0 <= 1.0 + c * c {
            return c;
        }
    }
}

/// Rotate `dir` by polar angle (cos t) with uniform azimuth.
fn deflect(rng: &mut StreamRng, dir: [f64; 3], cos_t: f64) -> [f64; 3] {
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = rng.uniform_in(0.0, std::f64::consts::TAU);
    // Orthonormal basis around dir.
    let a = if dir[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let t1 = {
        let c = [
            dir[1] * a[2] - dir[2] * a[1],
            dir[2] * a[0] - dir[0] * a[2],
            dir[0] * a[1] - dir[1] * a[0],
        ];
        let n = dot(c, c).sqrt();
        scale(c, 1.0 / n)
    };
    let t2 = [
        dir[1] * t1[2] - dir[2] * t1[1],
        dir[2] * t1[0] - dir[0] * t1[2],
        dir[0] * t1[1] - dir[1] * t1[0],
    ];
    let (sp, cp) = phi.sin_cos();
    let out = add(
        scale(dir, cos_t),
        add(scale(t1, sin_t * cp), scale(t2, sin_t * sp)),
    );
    scale(out, 1.0 / dot(out, out).sqrt())
}

/// Where a photon moving from `pos` along `dir` strikes the detector of a
/// view, if it does.
fn detector_hit(
    g: &ScanGeometry,
    view: usize,
    pos: [f64; 3],
    dir: [f64; 3],
) -> Option<(usize, usize)> {
    let d = g.central_dir(view);
    let along = dot(dir, d);
    if along <= 1e-12 {
        return None;
    }
    let c = g.detector_center(view);
    let t = dot(sub(c, pos), d) / along;
    if t <= 0.0 {
        return None;
    }
    let hit = add(pos, scale(dir, t));
    let rel = sub(hit, c);
    let u = dot(rel, g.u_axis(view)) / g.pitch_u_mm + 0.5 * g.nu as f64;
    let v = rel[2] / g.pitch_v_mm + 0.5 * g.nv as f64;
    if u < 0.0 || v < 0.0 {
        return None;
    }
    let (iu, iv) = (u.floor() as usize, v.floor() as usize);
    if iu < g.nu && iv < g.nv {
        Some((iu, iv))
    } else {
        None
    }
}

const MAX_SCATTERS: usize = 256;

/// Monte Carlo transport of individual photon histories.
///
/// Per pixel, `photons_per_pixel` photons are fired from the source through
/// uniformly sampled positions within the pixel, with energy drawn from the
/// spectrum. Free paths are sampled against the local attenuation; each
/// interaction is photoelectric (absorb), Compton (Klein-Nishina angle,
/// energy loss absorbed locally), or Rayleigh (Thomson angle, elastic).
/// Photons exiting toward the detector deposit their remaining energy in
/// the struck pixel. Returns the detector image and an energy ledger.
pub fn simulate_mc<T: Real>(
    mat: &MaterialVolume,
    g: &ScanGeometry,
    spectrum: &Spectrum,
    table: &AttenuationTable,
    opts: &SimOptions,
) -> Result<(RawProjection<T>, McLedger)> {
    opts.validate()?;
    let n_pix = g.nu * g.nv;
    // Cumulative weights for inverse-CDF energy sampling.
    let mut cum = Vec::with_capacity(spectrum.weights.len());
    let mut acc = 0.0;
    for &w in &spectrum.weights {
        acc += w;
        cum.push(acc);
    }

    // Each source pixel produces a local deposit list; merging happens in
    // pixel order afterwards, so thread count cannot change the result.
    struct PixelOut {
        deposits: Vec<(usize, f64)>,
        ledger: McLedger,
    }

    let transport_one = |view: usize, pix: usize| -> PixelOut {
        let mut out = PixelOut { deposits: Vec::new(), ledger: McLedger::default() };
        let (iu, iv) = (pix % g.nu, pix / g.nu);
        let src = g.source_position(view);
        for ph in 0..opts.photons_per_pixel {
            let mut rng = StreamRng::from_parts(
                opts.seed,
                &[MC_SALT, view as u64, pix as u64, ph as u64],
            );
            // Aim at a uniform point inside the pixel.
            let du = rng.uniform_in(-0.5, 0.5);
            let dv = rng.uniform_in(-0.5, 0.5);
            let center = g.pixel_center(view, iu, iv);
            let target = add(
                center,
                add(
                    scale(g.u_axis(view), du * g.pitch_u_mm),
                    [0.0, 0.0, dv * g.pitch_v_mm],
                ),
            );
            let to = sub(target, src);
            let mut dir = scale(to, 1.0 / dot(to, to).sqrt());
            let mut pos = src;
            // Inverse-CDF energy draw.
            let ue = rng.uniform();
            let bin = cum.partition_point(|&c| c < ue).min(cum.len() - 1);
            let e0 = spectrum.energies_kev[bin];
            let mut e = e0;
            out.ledger.sampled += e0;

            let mut alive = true;
            for _scatter in 0..MAX_SCATTERS {
                // Sample optical depth and march the ray through the grid.
                let tau_target = -(1.0 - rng.uniform()).ln();
                let ray = Ray { origin: pos, dir };
                let segs = siddon_trace(&ray, &mat.grid);
                let mut tau = 0.0f64;
                let mut t_interact = None;
                let mut mat_at = Material::Air;
                if !segs.is_empty() {
                    // Segments carry lengths only; recover the distance from
                    // pos to the grid entry (zero when pos is inside) so
                    // interaction points land in world coordinates.
                    let (lo, hi) = mat.grid.bounds();
                    let mut t0 = 0.0f64;
                    for a in 0..3 {
                        if dir[a].abs() > 1e-300 {
                            let ta = (lo[a] - pos[a]) / dir[a];
                            let tb = (hi[a] - pos[a]) / dir[a];
                            t0 = t0.max(ta.min(tb));
                        }
                    }
                    let mut t_cursor = t0.max(0.0);
                    for seg in &segs {
                        let m = mat.labels()[seg.idx];
                        let mu = table.mu_lookup(m, e);
                        let d_tau = mu * seg.len_mm;
                        if tau + d_tau >= tau_target && mu > 0.0 {
                            let frac = (tau_target - tau) / d_tau;
                            t_interact = Some(t_cursor + frac * seg.len_mm);
                            mat_at = m;
                            break;
                        }
                        tau += d_tau;
                        t_cursor += seg.len_mm;
                    }
                }
                match t_interact {
                    None => {
                        // Exits the grid (or missed it entirely).
                        match detector_hit(g, view, pos, dir) {
                            Some((hu, hv)) => {
                                out.deposits.push((hv * g.nu + hu, e));
                                out.ledger.deposited += e;
                            }
                            None => out.ledger.escaped += e,
                        }
                        alive = false;
                    }
                    Some(t_hit) => {
                        pos = add(pos, scale(dir, t_hit));
                        let split = table.split_lookup(mat_at, e);
                        let u = rng.uniform();
                        if u < split.photoelectric {
                            out.ledger.absorbed += e;
                            alive = false;
                        } else if u < split.photoelectric + split.compton {
                            let c = sample_compton_cos(&mut rng, e);
                            let e_new = compton_scatter_energy(e, c);
                            out.ledger.absorbed += e - e_new;
                            e = e_new;
                            dir = deflect(&mut rng, dir, c);
                        } else {
                            let c = sample_rayleigh_cos(&mut rng);
                            dir = deflect(&mut rng, dir, c);
                        }
                    }
                }
                if !alive {
                    break;
                }
            }
            if alive {
                // Safety cap reached; account the remainder as absorbed.
                out.ledger.absorbed += e;
            }
        }
        out
    };

    let mut data = vec![T::zero(); g.n_views() * n_pix];
    let mut ledger = McLedger::default();
    for view in 0..g.n_views() {
        let outs: Vec<PixelOut> =
            (0..n_pix).into_par_iter().map(|pix| transport_one(view, pix)).collect();
        let base = view * n_pix;
        for o in outs {
            for (pix, e) in o.deposits {
                let cur = data[base + pix].as_f64();
                data[base + pix] = T::of(cur + e);
            }
            ledger.sampled += o.ledger.sampled;
            ledger.deposited += o.ledger.deposited;
            ledger.absorbed += o.ledger.absorbed;
            ledger.escaped += o.ledger.escaped;
        }
    }
    let proj = RawProjection::new(
        g.nu,
        g.nv,
        g.angles_rad.clone(),
        opts.photons_per_pixel,
        opts.seed,
        data,
    )?;
    Ok((proj, ledger))
}
