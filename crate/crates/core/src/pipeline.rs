//! Orchestration: synthetic scene generation, the training-pair data
//! pipeline (scan → reconstruct → segment metal → re-simulate aligned
//! corrupted projections + ground-truth traces), held-out test scans graded
//! against the true metal geometry, the multi-method evaluation experiment,
//! and CSV reporting.
//!
//! Every stage is a pure function of its inputs and an explicit seed:
//! rerunning with the same configuration is bit-identical.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fdk::{fdk_reconstruct, mu_to_hu, water_mu};
use crate::fproj::{default_min_path_mm, project_metal_mask, TraceStack};
use crate::geom::ScanGeometry;
use crate::inpaint::{mar_pipeline, InpaintMode};
use crate::metrics::{confusion, dsc, fpr, iou, Confusion};
use crate::nnseg::{
    infer_stack, samples_from_stack, train, EpochStats, Sample, Strategy, TrainConfig, UNetParams,
};
use crate::rng::{stream_key, StreamRng};
use crate::segvol::{
    dilate3, global_threshold, median_filter3, region_grow_metal, Connectivity,
    REGION_GROW_GROW_HU, REGION_GROW_SEED_HU,
};
use crate::traces::{binarize_metal_projection, consistency_check, CONSISTENCY_TAU, GT_TRACE_EPS};
use crate::voxvol::{
    extended_grid, rasterize_metal_mask, rasterize_phantom, segment_materials, Axis, Grid3, Mask3,
    PhantomSpec, Primitive, PrimitiveKind, Volume3, HU_BONE_DEFAULT, HU_BONE_METAL,
    HU_METAL_STEEL, HU_METAL_TITANIUM, HU_SOFT_DEFAULT,
};
use crate::xsim::{
    flat_field, normalize_log, simulate_primary, AttenuationTable, ProjectionStack, SimOptions,
    Spectrum,
};

/// Photon budget for the "noisy" corrupted simulation, drawn uniformly per
/// scan (inclusive bounds).
pub const PHOTONS_NOISY_RANGE: [u32; 2] = [300, 1400];
/// Photon budget for the "clean" corrupted simulation.
pub const PHOTONS_CLEAN: u32 = 5000;

/// Stream salts keeping every random decision in its own seed stream.
/// Scene/scan salts are public so external dataset generators can derive
/// the exact same scans from the same master seed.
pub const SCENE_SALT: u64 = 0x5C;
pub const SCAN_SALT: u64 = 0x5D;
const PHOTON_SALT: u64 = 0x60;
const SIM_NOISY_SALT: u64 = 0x61;
const SIM_CLEAN_SALT: u64 = 0x62;
const SIM_TEST_SALT: u64 = 0x63;

/// Fixed acquisition pieces shared by every scan in a run.
#[derive(Debug, Clone)]
pub struct SceneContext {
    pub geometry: ScanGeometry,
    pub grid: Grid3,
    pub spectrum: Spectrum,
    pub table: AttenuationTable,
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

/// Draw a random anatomy-like scene sized to the grid: a soft-tissue torso
/// cylinder, two bone inserts, and (optionally) one or two metal implants
/// well inside the body.
pub fn random_phantom(grid: &Grid3, with_metal: bool, rng: &mut StreamRng) -> PhantomSpec {
    let (lo, hi) = grid.bounds();
    let hx = 0.5 * (hi[0] - lo[0]);
    let hy = 0.5 * (hi[1] - lo[1]);
    let hz = 0.5 * (hi[2] - lo[2]);
    let s = grid.spacing[0];

    let torso = [0.72 * hx, 0.66 * hy];
    let mut body = vec![Primitive {
        kind: PrimitiveKind::EllipticCylinder,
        center_mm: [0.0, 0.0, 0.0],
        size_mm: [torso[0], torso[1], hz],
        rot_z_deg: rng.uniform_in(-20.0, 20.0),
        hu: HU_SOFT_DEFAULT,
    }];
    // A bone column and a bone block, both inside the torso.
    body.push(Primitive {
        kind: PrimitiveKind::CappedCylinder(Axis::Z),
        center_mm: [
            rng.uniform_in(-0.3, 0.3) * torso[0],
            rng.uniform_in(-0.3, 0.3) * torso[1],
            0.0,
        ],
        size_mm: [rng.uniform_in(0.10, 0.16) * hx, 0.0, hz],
        rot_z_deg: 0.0,
        hu: HU_BONE_DEFAULT,
    });
    body.push(Primitive {
        kind: PrimitiveKind::Box,
        center_mm: [
            rng.uniform_in(-0.35, 0.35) * torso[0],
            rng.uniform_in(-0.35, 0.35) * torso[1],
            rng.uniform_in(-0.3, 0.3) * hz,
        ],
        size_mm: [
            rng.uniform_in(0.08, 0.14) * hx,
            rng.uniform_in(0.08, 0.14) * hy,
            rng.uniform_in(0.15, 0.3) * hz,
        ],
        rot_z_deg: rng.uniform_in(0.0, 90.0),
        hu: HU_BONE_DEFAULT,
    });

    let mut metal = Vec::new();
    if with_metal {
        let n = 1 + rng.below(2) as usize;
        for _ in 0..n {
            let r = rng.uniform_in(2.0 * s, 3.5 * s);
            let reach = 0.45 * torso[0].min(torso[1]);
            let center = [
                rng.uniform_in(-reach, reach),
                rng.uniform_in(-reach, reach),
                rng.uniform_in(-0.4, 0.4) * hz,
            ];
            let hu = if rng.below(2) == 0 { HU_METAL_TITANIUM } else { HU_METAL_STEEL };
            let kind = if rng.below(2) == 0 {
                PrimitiveKind::Sphere
            } else {
                PrimitiveKind::Box
            };
            metal.push(Primitive {
                kind,
                center_mm: center,
                size_mm: [r, r, r],
                rot_z_deg: 0.0,
                hu,
            });
        }
    }
    PhantomSpec { body, metal, out_of_fov_offset_mm: None }
}

/// Deterministic scene with one implant inside the grid and one above it:
/// the out-of-grid implant still shadows the detector, so methods that
/// reason only about in-grid voxels must lose its traces.
pub fn out_of_fov_scene(grid: &Grid3) -> PhantomSpec {
    let (lo, hi) = grid.bounds();
    let hx = 0.5 * (hi[0] - lo[0]);
    let hy = 0.5 * (hi[1] - lo[1]);
    let hz = 0.5 * (hi[2] - lo[2]);
    let s = grid.spacing[0];
    let r_oof = 3.0 * s;
    PhantomSpec {
        body: vec![Primitive {
            kind: PrimitiveKind::EllipticCylinder,
            center_mm: [0.0, 0.0, 0.0],
            size_mm: [0.72 * hx, 0.66 * hy, hz],
            rot_z_deg: 0.0,
            hu: HU_SOFT_DEFAULT,
        }],
        metal: vec![
            Primitive {
                kind: PrimitiveKind::Sphere,
                center_mm: [0.25 * hx, -0.2 * hy, 0.0],
                size_mm: [2.5 * s, 0.0, 0.0],
                rot_z_deg: 0.0,
                hu: HU_METAL_TITANIUM,
            },
            Primitive {
                kind: PrimitiveKind::Sphere,
                center_mm: [-0.2 * hx, 0.15 * hy, hz + r_oof + s],
                size_mm: [r_oof, 0.0, 0.0],
                rot_z_deg: 0.0,
                hu: HU_METAL_STEEL,
            },
        ],
        out_of_fov_offset_mm: None,
    }
}

/// Union the metal inserts of two scenes onto the first scene's anatomy,
/// mirroring how implant sets from separate scans are combined into one
/// training scene.
pub fn merge_metal(base: &PhantomSpec, donor: &PhantomSpec) -> PhantomSpec {
    let mut out = base.clone();
    out.metal.extend(donor.metal.iter().cloned());
    out
}

// ---------------------------------------------------------------------------
// Training-pair pipeline
// ---------------------------------------------------------------------------

/// Everything one synthetic training scan produces; intermediates are kept
/// so callers can write them out for inspection.
#[derive(Debug, Clone)]
pub struct TrainingScan {
    /// Line integrals of the original (uncorrupted-workflow) scan.
    pub original: ProjectionStack<f64>,
    /// Metal-corrupted line integrals at the drawn low photon budget.
    pub noisy: ProjectionStack<f64>,
    /// Metal-corrupted line integrals at the clean photon budget.
    pub clean: ProjectionStack<f64>,
    /// Ground-truth metal traces, aligned with `noisy`/`clean`.
    pub gt_traces: TraceStack,
    /// Reconstruction of `original` in HU.
    pub recon_hu: Volume3<f64>,
    /// Metal voxels segmented from `recon_hu`.
    pub metal_mask: Mask3,
    /// Metal-free reconstruction with segmented metal re-inserted; the
    /// volume the corrupted projections are simulated from.
    pub combined_hu: Volume3<f64>,
    /// The photon budget drawn for `noisy`.
    pub photons_noisy: u32,
}

fn simulate_line_integrals(
    ctx: &SceneContext,
    vol_hu: &Volume3<f64>,
    opts: &SimOptions,
) -> Result<ProjectionStack<f64>> {
    let mats = segment_materials(vol_hu);
    let raw = simulate_primary::<f64>(&mats, &ctx.geometry, &ctx.spectrum, &ctx.table, opts)?;
    let flat = flat_field::<f64>(
        &ctx.geometry,
        &ctx.spectrum,
        &SimOptions { noise: false, ..*opts },
    )?;
    normalize_log(&raw, &flat)
}

/// Run the full training-pair pipeline for one scene.
///
/// The original scan is simulated noiselessly at the clean photon budget,
/// reconstructed, and its metal segmented by thresholding plus median/dilate
/// cleanup. A metal-only volume yields the ground-truth traces; inpainting
/// those traces out of the original projections gives a metal-free volume,
/// and re-inserting the segmented metal gives the scene the corrupted
/// projections are simulated from — so the traces align with the corrupted
/// pair by construction, not by registration.
pub fn generate_training_scan(
    ctx: &SceneContext,
    spec: &PhantomSpec,
    photons_noisy_range: [u32; 2],
    photons_clean: u32,
    seed: u64,
) -> Result<TrainingScan> {
    if photons_noisy_range[0] == 0 || photons_noisy_range[0] > photons_noisy_range[1] {
        return Err(Error::invalid("noisy photon range must be 0 < lo <= hi"));
    }
    let g = &ctx.geometry;
    let ext = extended_grid(spec, &ctx.grid);
    let vol = rasterize_phantom::<f64>(spec, &ext);
    let original = simulate_line_integrals(
        ctx,
        &vol,
        &SimOptions { photons_per_pixel: photons_clean, seed: 0, noise: false },
    )?;

    let mu_water = water_mu(&ctx.table, &ctx.spectrum);
    let recon_hu = mu_to_hu(&fdk_reconstruct(&original, g, &ctx.grid)?, mu_water)?;
    let metal_mask = dilate3(&median_filter3(&global_threshold(&recon_hu, HU_BONE_METAL), 1)?, 1)?;
    let metal_hu = crate::voxvol::clip_metal_min(&recon_hu, &metal_mask, HU_BONE_METAL)?;

    // Ground truth: traces of the segmented metal alone.
    let air = Volume3::filled(ctx.grid.clone(), crate::voxvol::HU_BACKGROUND);
    let metal_only = crate::voxvol::insert_metal(&air, &metal_mask, &metal_hu)?;
    let metal_p = simulate_line_integrals(
        ctx,
        &metal_only,
        &SimOptions { photons_per_pixel: photons_clean, seed: 0, noise: false },
    )?;
    let gt_traces = binarize_metal_projection(&metal_p, GT_TRACE_EPS)?;

    // Metal-free volume + re-inserted metal = the simulation scene for the
    // corrupted pair.
    let combined_hu = mar_pipeline(
        &original,
        &gt_traces,
        g,
        &ctx.grid,
        &metal_mask,
        &metal_hu,
        mu_water,
        InpaintMode::Harmonic,
    )?;

    let span = (photons_noisy_range[1] - photons_noisy_range[0] + 1) as u64;
    let photons_noisy =
        photons_noisy_range[0] + StreamRng::from_parts(seed, &[PHOTON_SALT]).below(span) as u32;
    let noisy = simulate_line_integrals(
        ctx,
        &combined_hu,
        &SimOptions {
            photons_per_pixel: photons_noisy,
            seed: stream_key(seed, &[SIM_NOISY_SALT]),
            noise: true,
        },
    )?;
    let clean = simulate_line_integrals(
        ctx,
        &combined_hu,
        &SimOptions {
            photons_per_pixel: photons_clean,
            seed: stream_key(seed, &[SIM_CLEAN_SALT]),
            noise: true,
        },
    )?;
    Ok(TrainingScan {
        original,
        noisy,
        clean,
        gt_traces,
        recon_hu,
        metal_mask,
        combined_hu,
        photons_noisy,
    })
}

// ---------------------------------------------------------------------------
// Held-out test scans
// ---------------------------------------------------------------------------

/// A test scan: noisy projections of the true scene, graded against traces
/// of the true metal geometry (rasterized on the extended grid, so metal
/// outside the reconstruction grid still counts).
#[derive(Debug, Clone)]
pub struct TestScan {
    pub projections: ProjectionStack<f64>,
    pub gt: TraceStack,
    pub has_metal: bool,
}

/// Simulate one held-out scan of the true scene.
pub fn generate_test_scan(
    ctx: &SceneContext,
    spec: &PhantomSpec,
    photons: u32,
    seed: u64,
) -> Result<TestScan> {
    let ext = extended_grid(spec, &ctx.grid);
    let vol = rasterize_phantom::<f64>(spec, &ext);
    let projections = simulate_line_integrals(
        ctx,
        &vol,
        &SimOptions {
            photons_per_pixel: photons,
            seed: stream_key(seed, &[SIM_TEST_SALT]),
            noise: true,
        },
    )?;
    let metal = rasterize_metal_mask(spec, &ext);
    let gt = project_metal_mask(&metal, &ctx.geometry, default_min_path_mm(&ctx.grid));
    Ok(TestScan { projections, gt, has_metal: metal.count() > 0 })
}

// ---------------------------------------------------------------------------
// Streak metric
// ---------------------------------------------------------------------------

/// Sample standard deviation of HU inside a fixed soft-tissue annulus
/// (`r_inner ≤ radius ≤ r_outer`, `|z| ≤ z_half`, all mm). Streak artifacts
/// raise it; None with fewer than two voxels in the annulus.
pub fn streak_metric(
    vol: &Volume3<f64>,
    r_inner_mm: f64,
    r_outer_mm: f64,
    z_half_mm: f64,
) -> Option<f64> {
    let g = &vol.grid;
    let mut vals = Vec::new();
    for k in 0..g.nz {
        for j in 0..g.ny {
            for i in 0..g.nx {
                let c = g.voxel_center(i, j, k);
                let r = (c[0] * c[0] + c[1] * c[1]).sqrt();
                if r >= r_inner_mm && r <= r_outer_mm && c[2].abs() <= z_half_mm {
                    vals.push(vol.at(i, j, k));
                }
            }
        }
    }
    if vals.len() < 2 {
        return None;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Some(var.sqrt())
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

/// Trace-prediction methods compared by the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Classical: reconstruct, region-grow metal in 3D, forward-project.
    Cmar,
    /// Network trained on full projections.
    UnetFull,
    /// Network trained on quadrant crops.
    UnetCrops,
    /// Network trained on full projections plus crops.
    UnetFullCrops,
    /// Consistency check applied to the full+crops network's traces.
    ConsistencyOnUnet,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Cmar,
        Method::UnetFull,
        Method::UnetCrops,
        Method::UnetFullCrops,
        Method::ConsistencyOnUnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cmar => "cmar",
            Method::UnetFull => "unet-full",
            Method::UnetCrops => "unet-crops",
            Method::UnetFullCrops => "unet-full+crops",
            Method::ConsistencyOnUnet => "consistency",
        }
    }

    fn strategy(self) -> Option<Strategy> {
        match self {
            Method::UnetFull => Some(Strategy::Full),
            Method::UnetCrops => Some(Strategy::Crops),
            Method::UnetFullCrops | Method::ConsistencyOnUnet => Some(Strategy::FullPlusCrops),
            Method::Cmar => None,
        }
    }
}

/// Experiment shape: scan counts, training seeds, and the per-run training
/// configuration (its `strategy` and `seed` fields are overridden per run).
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n_train_scans: usize,
    pub n_val_scans: usize,
    pub n_test_metal: usize,
    pub n_test_metal_free: usize,
    /// Evenly spaced views taken from each training scan's stacks.
    pub views_per_train_scan: usize,
    pub include_out_of_fov_scene: bool,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub photons_noisy_range: [u32; 2],
    pub photons_clean: u32,
    /// Master seed for scene shapes and photon draws.
    pub scene_seed: u64,
}

/// One method × seed outcome over the test scans.
#[derive(Debug, Clone)]
pub struct MethodRow {
    pub method: Method,
    /// Training seed; None for the deterministic classical baseline.
    pub seed: Option<u64>,
    /// Per metal test scan.
    pub metal_dsc: Vec<Option<f64>>,
    pub metal_iou: Vec<Option<f64>>,
    /// Per metal-free test scan (false positives over true negatives).
    pub free_fpr: Vec<Option<f64>>,
    /// The constructed out-of-grid scene, when included.
    pub oof_dsc: Option<f64>,
}

/// One training run's history.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub strategy: Strategy,
    pub seed: u64,
    pub history: Vec<EpochStats>,
}

impl SeedRun {
    pub fn final_val_dsc(&self) -> Option<f64> {
        self.history.last().and_then(|e| e.val_dsc)
    }
}

/// Everything the experiment measured.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<MethodRow>,
    pub runs: Vec<SeedRun>,
    /// Per strategy: max − min of final validation Dice over the seeds.
    pub deltas: Vec<(Strategy, f64)>,
}

/// Mean of the defined entries; None when none are defined.
pub fn mean_defined(scores: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = scores.iter().flatten().copied().collect();
    if vals.is_empty() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

impl ExperimentReport {
    pub fn rows_for(&self, method: Method) -> Vec<&MethodRow> {
        self.rows.iter().filter(|r| r.method == method).collect()
    }

    /// Mean metal-scan Dice for a method, averaged over scans then seeds.
    pub fn mean_metal_dsc(&self, method: Method) -> Option<f64> {
        mean_defined(
            &self.rows_for(method).iter().map(|r| mean_defined(&r.metal_dsc)).collect::<Vec<_>>(),
        )
    }

    /// Per-seed mean FPR on the metal-free scans.
    pub fn per_seed_free_fpr(&self, method: Method) -> Vec<(u64, Option<f64>)> {
        self.rows_for(method)
            .iter()
            .filter_map(|r| r.seed.map(|s| (s, mean_defined(&r.free_fpr))))
            .collect()
    }

    /// Long-format CSV of every score.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("method,seed,kind,scan,dsc,iou,fpr\n");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
            for (i, (&d, &u)) in r.metal_dsc.iter().zip(&r.metal_iou).enumerate() {
                out.push_str(&format!(
                    "{},{},metal,{},{},{},\n",
                    r.method.name(),
                    seed,
                    i,
                    fmt(d),
                    fmt(u)
                ));
            }
            for (i, &f) in r.free_fpr.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},metal-free,{},,,{}\n",
                    r.method.name(),
                    seed,
                    i,
                    fmt(f)
                ));
            }
            if let Some(d) = r.oof_dsc {
                out.push_str(&format!(
                    "{},{},out-of-fov,0,{d:.6},,\n",
                    r.method.name(),
                    seed
                ));
            }
        }
        out
    }

    /// CSV of the per-strategy seed spread (max − min final validation
    /// Dice).
    pub fn deltas_csv(&self) -> String {
        let mut out = String::from("strategy,delta_final_val_dsc\n");
        for (s, d) in &self.deltas {
            let name = match s {
                Strategy::Full => "full",
                Strategy::Crops => "crops",
                Strategy::FullPlusCrops => "full+crops",
            };
            out.push_str(&format!("{name},{d:.6}\n"));
        }
        out
    }
}

/// Training-history CSV, one row per epoch.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_loss,val_dsc\n");
    for e in history {
        let dsc = e.val_dsc.map(|d| format!("{d:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.6e},{:.6},{:.6},{}\n",
            e.epoch, e.lr, e.train_loss, e.val_loss, dsc
        ));
    }
    out
}

/// Evenly spaced view subsample of a scan's samples (both stacks share GT).
fn scan_samples(scan: &TrainingScan, views: usize) -> Result<Vec<Sample>> {
    let n = scan.noisy.n_views();
    let take = views.min(n).max(1);
    let picked: Vec<usize> = (0..take).map(|i| i * n / take).collect();
    let noisy = samples_from_stack(&scan.noisy, &scan.gt_traces)?;
    let clean = samples_from_stack(&scan.clean, &scan.gt_traces)?;
    let mut out = Vec::with_capacity(2 * take);
    for &v in &picked {
        out.push(noisy[v].clone());
        out.push(clean[v].clone());
    }
    Ok(out)
}

/// Classical baseline: reconstruct, region-grow metal in 3D, re-project.
pub fn cmar_traces(ctx: &SceneContext, p: &ProjectionStack<f64>) -> Result<TraceStack> {
    let mu_water = water_mu(&ctx.table, &ctx.spectrum);
    let hu = mu_to_hu(&fdk_reconstruct(p, &ctx.geometry, &ctx.grid)?, mu_water)?;
    let mask = region_grow_metal(&hu, REGION_GROW_SEED_HU, REGION_GROW_GROW_HU, Connectivity::Six)?;
    Ok(project_metal_mask(&mask, &ctx.geometry, default_min_path_mm(&ctx.grid)))
}

fn score_traces(pred: &TraceStack, gt: &TraceStack) -> Result<Confusion> {
    confusion(pred, gt)
}

/// Run the full comparison: generate training and test scans, train each
/// network strategy with each seed, evaluate every method on every test
/// scan.
pub fn run_experiment(ctx: &SceneContext, cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("at least one training seed is required"));
    }
    if cfg.n_train_scans == 0 || cfg.n_val_scans == 0 {
        return Err(Error::invalid("training and validation scans are both required"));
    }

    // --- data ---------------------------------------------------------
    let n_scenes = cfg.n_train_scans + cfg.n_val_scans;
    let scans: Vec<TrainingScan> = (0..n_scenes)
        .into_par_iter()
        .map(|i| {
            let mut rng = StreamRng::from_parts(cfg.scene_seed, &[SCENE_SALT, i as u64]);
            let spec = random_phantom(&ctx.grid, true, &mut rng);
            generate_training_scan(
                ctx,
                &spec,
                cfg.photons_noisy_range,
                cfg.photons_clean,
                stream_key(cfg.scene_seed, &[SCAN_SALT, i as u64]),
            )
        })
        .collect::<Result<_>>()?;
    let mut train_samples = Vec::new();
    let mut val_samples = Vec::new();
    for (i, scan) in scans.iter().enumerate() {
        let samples = scan_samples(scan, cfg.views_per_train_scan)?;
        if i < cfg.n_train_scans {
            train_samples.extend(samples);
        } else {
            val_samples.extend(samples);
        }
    }

    let mut tests: Vec<TestScan> = Vec::new();
    for i in 0..cfg.n_test_metal + cfg.n_test_metal_free {
        let with_metal = i < cfg.n_test_metal;
        let mut rng = StreamRng::from_parts(cfg.scene_seed, &[SCENE_SALT, 1000 + i as u64]);
        let spec = random_phantom(&ctx.grid, with_metal, &mut rng);
        let span = (cfg.photons_noisy_range[1] - cfg.photons_noisy_range[0] + 1) as u64;
        let photons = cfg.photons_noisy_range[0]
            + StreamRng::from_parts(cfg.scene_seed, &[PHOTON_SALT, 1000 + i as u64]).below(span)
                as u32;
        tests.push(generate_test_scan(
            ctx,
            &spec,
            photons,
            stream_key(cfg.scene_seed, &[SCAN_SALT, 1000 + i as u64]),
        )?);
    }
    let oof = if cfg.include_out_of_fov_scene {
        Some(generate_test_scan(
            ctx,
            &out_of_fov_scene(&ctx.grid),
            cfg.photons_clean,
            stream_key(cfg.scene_seed, &[SCAN_SALT, 2000]),
        )?)
    } else {
        None
    };

    // --- methods ------------------------------------------------------
    let min_path = default_min_path_mm(&ctx.grid);
    let mut rows = Vec::new();
    let mut runs = Vec::new();

    // Classical baseline: no training, one row.
    {
        let mut row = MethodRow {
            method: Method::Cmar,
            seed: None,
            metal_dsc: Vec::new(),
            metal_iou: Vec::new(),
            free_fpr: Vec::new(),
            oof_dsc: None,
        };
        for t in &tests {
            let pred = cmar_traces(ctx, &t.projections)?;
            let c = score_traces(&pred, &t.gt)?;
            if t.has_metal {
                row.metal_dsc.push(dsc(&c));
                row.metal_iou.push(iou(&c));
            } else {
                row.free_fpr.push(fpr(&c));
            }
        }
        if let Some(t) = &oof {
            let pred = cmar_traces(ctx, &t.projections)?;
            row.oof_dsc = dsc(&score_traces(&pred, &t.gt)?);
        }
        rows.push(row);
    }

    // Network strategies × seeds; the consistency method reuses the
    // full+crops predictions of the same seed.
    for &seed in &cfg.seeds {
        let mut params_by_strategy: Vec<(Strategy, UNetParams<f64>)> = Vec::new();
        for strategy in [Strategy::Full, Strategy::Crops, Strategy::FullPlusCrops] {
            let mut tc = cfg.train.clone();
            tc.strategy = strategy;
            tc.seed = seed;
            let (params, history) = train(&train_samples, &val_samples, &tc)?;
            runs.push(SeedRun { strategy, seed, history });
            params_by_strategy.push((strategy, params));
        }
        for method in [Method::UnetFull, Method::UnetCrops, Method::UnetFullCrops] {
            let strategy = method.strategy().expect("network method");
            let params = &params_by_strategy
                .iter()
                .find(|(s, _)| *s == strategy)
                .expect("trained above")
                .1;
            let mut row = MethodRow {
                method,
                seed: Some(seed),
                metal_dsc: Vec::new(),
                metal_iou: Vec::new(),
                free_fpr: Vec::new(),
                oof_dsc: None,
            };
            let mut consistency_row = MethodRow {
                method: Method::ConsistencyOnUnet,
                seed: Some(seed),
                metal_dsc: Vec::new(),
                metal_iou: Vec::new(),
                free_fpr: Vec::new(),
                oof_dsc: None,
            };
            let with_consistency = method == Method::UnetFullCrops;
            let grade = |t: &TestScan,
                         row: &mut MethodRow,
                         cons: &mut MethodRow,
                         is_oof: bool|
             -> Result<()> {
                let pred = infer_stack(params, &t.projections)?;
                let c = score_traces(&pred, &t.gt)?;
                let refined = if with_consistency {
                    let r =
                        consistency_check(&pred, &ctx.geometry, &ctx.grid, CONSISTENCY_TAU, min_path)?;
                    Some(score_traces(&r, &t.gt)?)
                } else {
                    None
                };
                if is_oof {
                    row.oof_dsc = dsc(&c);
                    if let Some(rc) = refined {
                        cons.oof_dsc = dsc(&rc);
                    }
                } else if t.has_metal {
                    row.metal_dsc.push(dsc(&c));
                    row.metal_iou.push(iou(&c));
                    if let Some(rc) = refined {
                        cons.metal_dsc.push(dsc(&rc));
                        cons.metal_iou.push(iou(&rc));
                    }
                } else {
                    row.free_fpr.push(fpr(&c));
                    if let Some(rc) = refined {
                        cons.free_fpr.push(fpr(&rc));
                    }
                }
                Ok(())
            };
            for t in &tests {
                grade(t, &mut row, &mut consistency_row, false)?;
            }
            if let Some(t) = &oof {
                grade(t, &mut row, &mut consistency_row, true)?;
            }
            rows.push(row);
            if with_consistency {
                rows.push(consistency_row);
            }
        }
    }

    // --- seed spread ----------------------------------------------------
    let mut deltas = Vec::new();
    for strategy in [Strategy::Full, Strategy::Crops, Strategy::FullPlusCrops] {
        let finals: Vec<f64> = runs
            .iter()
            .filter(|r| r.strategy == strategy)
            .filter_map(|r| r.final_val_dsc())
            .collect();
        if let (Some(max), Some(min)) = (
            finals.iter().copied().reduce(f64::max),
            finals.iter().copied().reduce(f64::min),
        ) {
            deltas.push((strategy, max - min));
        }
    }

    Ok(ExperimentReport { rows, runs, deltas })
}
