//! `cbmar`: command-line driver for the cone-beam CT metal-segmentation
//! toolkit. Every subcommand is a thin wrapper over one library operation
//! chain; all randomness comes from the configuration file (or `--seed`),
//! never from the environment, so identical invocations produce
//! byte-identical outputs.
//!
//! Exit codes: 0 success, 2 validation error (bad arguments, malformed
//! files), 1 runtime error (I/O).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cbmar::error::{Error, Result};
use cbmar::fdk::{fdk_reconstruct, mu_to_hu, water_mu};
use cbmar::fproj::{default_min_path_mm, project_metal_mask};
use cbmar::inpaint::{inpaint_stack, mar_pipeline, InpaintMode};
use cbmar::manifest::{
    geometry_from, grid_from, phantom_from, simulation_from, Manifest, SectionReader,
};
use cbmar::metrics::{confusion, confusion_masks, dsc, fpr, iou};
use cbmar::nnseg::{infer_stack, samples_from_stack, train, Sample, Strategy, TrainConfig};
use cbmar::pipeline::{
    generate_training_scan, history_csv, random_phantom, SceneContext, PHOTONS_CLEAN,
    PHOTONS_NOISY_RANGE, SCAN_SALT, SCENE_SALT,
};
use cbmar::png::{
    save_axial_slice, save_projection_view, save_score_boxplot, save_trace_view, HU_WINDOW,
};
use cbmar::rng::{stream_key, StreamRng};
use cbmar::segvol::{
    dilate3, global_threshold, median_filter3, region_grow_metal, Connectivity,
    REGION_GROW_GROW_HU, REGION_GROW_SEED_HU,
};
use cbmar::traces::{consistency_check, CONSISTENCY_TAU};
use cbmar::voxvol::{extended_grid, rasterize_metal_mask, rasterize_phantom, segment_materials};
use cbmar::xsim::{flat_field, normalize_log, simulate_primary, AttenuationTable};

#[derive(Parser)]
#[command(name = "cbmar", version, about = "Cone-beam CT metal-trace segmentation toolkit")]
struct Cli {
    /// Override the seed given in the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the text configuration file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SegMethod {
    Threshold,
    RegionGrow,
}

#[derive(Clone, Copy, ValueEnum)]
enum Conn {
    #[value(name = "6")]
    Six,
    #[value(name = "26")]
    TwentySix,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Harmonic,
    RowLinear,
}

impl From<Mode> for InpaintMode {
    fn from(m: Mode) -> InpaintMode {
        match m {
            Mode::Harmonic => InpaintMode::Harmonic,
            Mode::RowLinear => InpaintMode::RowLinear,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Rasterize the configured phantom onto the configured grid.
    Phantom {
        #[command(flatten)]
        config: ConfigArg,
        /// Output volume (PVOL).
        #[arg(long)]
        out: PathBuf,
        /// Also write the true metal mask (PMSK).
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Rasterize on the grid extended to cover the whole scene.
        #[arg(long)]
        extended: bool,
    },
    /// Simulate projections of a volume with the configured source.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        /// Input volume (PVOL).
        #[arg(long)]
        input: PathBuf,
        /// Output projections (PPRJ).
        #[arg(long)]
        out: PathBuf,
        /// Write raw detected energies instead of line integrals.
        #[arg(long)]
        raw: bool,
    },
    /// Reconstruct a volume from line-integral projections.
    Reconstruct {
        #[command(flatten)]
        config: ConfigArg,
        /// Input projections (PPRJ).
        #[arg(long)]
        input: PathBuf,
        /// Output volume (PVOL).
        #[arg(long)]
        out: PathBuf,
        /// Keep attenuation values instead of converting to HU.
        #[arg(long)]
        mu: bool,
    },
    /// Segment metal voxels in a reconstructed HU volume.
    Segment3d {
        /// Input volume (PVOL).
        #[arg(long)]
        input: PathBuf,
        /// Output mask (PMSK).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "threshold")]
        method: SegMethod,
        /// Threshold for `threshold` (HU).
        #[arg(long, default_value_t = 3400.0)]
        threshold_hu: f64,
        /// Seed threshold for `region-grow` (HU).
        #[arg(long, default_value_t = REGION_GROW_SEED_HU)]
        seed_hu: f64,
        /// Growth threshold for `region-grow` (HU).
        #[arg(long, default_value_t = REGION_GROW_GROW_HU)]
        grow_hu: f64,
        /// Voxel connectivity for `region-grow`.
        #[arg(long, value_enum, default_value = "6")]
        conn: Conn,
        /// Apply median filter + dilation cleanup.
        #[arg(long)]
        clean: bool,
    },
    /// Forward-project a metal mask into per-view traces.
    ProjectMetal {
        #[command(flatten)]
        config: ConfigArg,
        /// Input mask (PMSK).
        #[arg(long)]
        input: PathBuf,
        /// Output traces (PTRC).
        #[arg(long)]
        out: PathBuf,
        /// Minimum metal path (mm) for a pixel to count (default: half the
        /// smallest voxel edge).
        #[arg(long)]
        min_path_mm: Option<f64>,
    },
    /// Generate a training dataset of corrupted scan pairs with aligned
    /// ground-truth traces.
    GenDataset {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train the segmentation network on a generated dataset.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Dataset directory produced by gen-dataset.
        #[arg(long)]
        data_dir: PathBuf,
        /// Output parameters (PNET).
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-epoch history CSV here.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Predict metal traces with a trained network.
    Infer {
        /// Input projections (PPRJ).
        #[arg(long)]
        input: PathBuf,
        /// Trained parameters (PNET).
        #[arg(long)]
        model: PathBuf,
        /// Output traces (PTRC).
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine traces by voxel-support consistency across views.
    Consistency {
        #[command(flatten)]
        config: ConfigArg,
        /// Input traces (PTRC).
        #[arg(long)]
        input: PathBuf,
        /// Output traces (PTRC).
        #[arg(long)]
        out: PathBuf,
        /// Fraction of views that must support a voxel.
        #[arg(long, default_value_t = CONSISTENCY_TAU)]
        tau: f64,
        #[arg(long)]
        min_path_mm: Option<f64>,
    },
    /// Fill traced pixels from their surroundings.
    Inpaint {
        /// Input projections (PPRJ).
        #[arg(long)]
        input: PathBuf,
        /// Traces to fill (PTRC).
        #[arg(long)]
        traces: PathBuf,
        /// Output projections (PPRJ).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "harmonic")]
        mode: Mode,
    },
    /// Full artifact-reduction chain: inpaint, reconstruct, re-insert metal.
    Mar {
        #[command(flatten)]
        config: ConfigArg,
        /// Input projections (PPRJ).
        #[arg(long)]
        input: PathBuf,
        /// Metal traces (PTRC).
        #[arg(long)]
        traces: PathBuf,
        /// Metal voxel mask (PMSK).
        #[arg(long)]
        metal_mask: PathBuf,
        /// Volume supplying the metal voxel values (PVOL, HU).
        #[arg(long)]
        metal_values: PathBuf,
        /// Output corrected volume (PVOL, HU).
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "harmonic")]
        mode: Mode,
    },
    /// Score predicted traces against ground truth.
    Evaluate {
        /// Ground-truth traces (PTRC).
        #[arg(long)]
        gt: PathBuf,
        /// Predicted traces (PTRC); repeat for several predictions.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        /// Write the report CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also draw a per-view Dice boxplot (one group per prediction).
        #[arg(long)]
        boxplot: Option<PathBuf>,
    },
    /// Render a stored artifact to PNG for inspection.
    ExportPng {
        /// Input file (PVOL, PPRJ, or PTRC; detected by magic).
        #[arg(long)]
        input: PathBuf,
        /// Output image.
        #[arg(long)]
        out: PathBuf,
        /// Axial slice index for volumes (default: middle).
        #[arg(long)]
        slice: Option<usize>,
        /// View index for projections/traces (default: 0).
        #[arg(long, default_value_t = 0)]
        view: usize,
        /// Display window for volumes: lo and hi HU.
        #[arg(long, num_args = 2, value_names = ["LO", "HI"],
              default_values_t = [HU_WINDOW[0], HU_WINDOW[1]])]
        window: Vec<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // Ignore the error from configuring twice (tests call run() twice).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.cmd, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::parse(&fs::read_to_string(path)?)
}

/// Geometry, grid, and source from one config file.
fn scene_context(m: &Manifest) -> Result<(SceneContext, cbmar::xsim::SimOptions)> {
    let (spectrum, opts) = simulation_from(m)?;
    Ok((
        SceneContext {
            geometry: geometry_from(m)?,
            grid: grid_from(m)?,
            spectrum,
            table: AttenuationTable::embedded(),
        },
        opts,
    ))
}

fn run(cmd: Cmd, seed_override: Option<u64>) -> Result<()> {
    match cmd {
        Cmd::Phantom { config, out, mask, extended } => {
            let m = load_manifest(&config.config)?;
            let spec = phantom_from(&m)?;
            let mut grid = grid_from(&m)?;
            if extended {
                grid = extended_grid(&spec, &grid);
            }
            cbmar::io::save_volume(&out, &rasterize_phantom::<f32>(&spec, &grid))?;
            if let Some(p) = mask {
                cbmar::io::save_mask(&p, &rasterize_metal_mask(&spec, &grid))?;
            }
            Ok(())
        }
        Cmd::Simulate { config, input, out, raw } => {
            let m = load_manifest(&config.config)?;
            let g = geometry_from(&m)?;
            let (spectrum, mut opts) = simulation_from(&m)?;
            if let Some(s) = seed_override {
                opts.seed = s;
            }
            let vol = cbmar::io::load_volume(&input)?.convert::<f64>();
            let mats = segment_materials(&vol);
            let table = AttenuationTable::embedded();
            let signal = simulate_primary::<f64>(&mats, &g, &spectrum, &table, &opts)?;
            let stack = if raw {
                signal.to_stack()
            } else {
                let flat = flat_field::<f64>(
                    &g,
                    &spectrum,
                    &cbmar::xsim::SimOptions { noise: false, ..opts },
                )?;
                normalize_log(&signal, &flat)?
            };
            cbmar::io::save_projections(&out, &stack.convert::<f32>())
        }
        Cmd::Reconstruct { config, input, out, mu } => {
            let m = load_manifest(&config.config)?;
            let g = geometry_from(&m)?;
            let grid = grid_from(&m)?;
            let stack = cbmar::io::load_projections(&input)?.convert::<f64>();
            let recon = fdk_reconstruct(&stack, &g, &grid)?;
            let vol = if mu {
                recon
            } else {
                let (spectrum, _) = simulation_from(&m)?;
                mu_to_hu(&recon, water_mu(&AttenuationTable::embedded(), &spectrum))?
            };
            cbmar::io::save_volume(&out, &vol.convert::<f32>())
        }
        Cmd::Segment3d { input, out, method, threshold_hu, seed_hu, grow_hu, conn, clean } => {
            let vol = cbmar::io::load_volume(&input)?.convert::<f64>();
            let mut mask = match method {
                SegMethod::Threshold => global_threshold(&vol, threshold_hu),
                SegMethod::RegionGrow => {
                    let c = match conn {
                        Conn::Six => Connectivity::Six,
                        Conn::TwentySix => Connectivity::TwentySix,
                    };
                    region_grow_metal(&vol, seed_hu, grow_hu, c)?
                }
            };
            if clean {
                mask = dilate3(&median_filter3(&mask, 1)?, 1)?;
            }
            cbmar::io::save_mask(&out, &mask)
        }
        Cmd::ProjectMetal { config, input, out, min_path_mm } => {
            let m = load_manifest(&config.config)?;
            let g = geometry_from(&m)?;
            let mask = cbmar::io::load_mask(&input)?;
            let min_path = min_path_mm.unwrap_or_else(|| default_min_path_mm(&mask.grid));
            cbmar::io::save_traces(&out, &project_metal_mask(&mask, &g, min_path))
        }
        Cmd::GenDataset { config, out_dir } => gen_dataset(&config.config, &out_dir, seed_override),
        Cmd::Train { config, data_dir, out, history } => {
            train_cmd(&config.config, &data_dir, &out, history.as_deref(), seed_override)
        }
        Cmd::Infer { input, model, out } => {
            let stack = cbmar::io::load_projections(&input)?.convert::<f64>();
            let params = cbmar::io::load_params(&model)?;
            cbmar::io::save_traces(&out, &infer_stack(&params, &stack)?)
        }
        Cmd::Consistency { config, input, out, tau, min_path_mm } => {
            let m = load_manifest(&config.config)?;
            let g = geometry_from(&m)?;
            let grid = grid_from(&m)?;
            let traces = cbmar::io::load_traces(&input)?;
            let min_path = min_path_mm.unwrap_or_else(|| default_min_path_mm(&grid));
            cbmar::io::save_traces(&out, &consistency_check(&traces, &g, &grid, tau, min_path)?)
        }
        Cmd::Inpaint { input, traces, out, mode } => {
            let stack = cbmar::io::load_projections(&input)?.convert::<f64>();
            let t = cbmar::io::load_traces(&traces)?;
            let filled = inpaint_stack(&stack, &t, mode.into())?;
            cbmar::io::save_projections(&out, &filled.convert::<f32>())
        }
        Cmd::Mar { config, input, traces, metal_mask, metal_values, out, mode } => {
            let m = load_manifest(&config.config)?;
            let g = geometry_from(&m)?;
            let grid = grid_from(&m)?;
            let (spectrum, _) = simulation_from(&m)?;
            let stack = cbmar::io::load_projections(&input)?.convert::<f64>();
            let t = cbmar::io::load_traces(&traces)?;
            let mask = cbmar::io::load_mask(&metal_mask)?;
            let values = cbmar::io::load_volume(&metal_values)?.convert::<f64>();
            let corrected = mar_pipeline(
                &stack,
                &t,
                &g,
                &grid,
                &mask,
                &values,
                water_mu(&AttenuationTable::embedded(), &spectrum),
                mode.into(),
            )?;
            cbmar::io::save_volume(&out, &corrected.convert::<f32>())
        }
        Cmd::Evaluate { gt, pred, out, boxplot } => evaluate(&gt, &pred, out.as_deref(), boxplot.as_deref()),
        Cmd::ExportPng { input, out, slice, view, window } => {
            export_png(&input, &out, slice, view, [window[0], window[1]])
        }
    }
}

// ---------------------------------------------------------------------------
// gen-dataset
// ---------------------------------------------------------------------------

struct DatasetConfig {
    n_scans: usize,
    photons_noisy: [u32; 2],
    photons_clean: u32,
    scene_seed: u64,
}

fn dataset_config(m: &Manifest) -> Result<DatasetConfig> {
    let mut r = SectionReader::new(m.one("dataset")?);
    let cfg = DatasetConfig {
        n_scans: r.req_num("n_scans")?,
        photons_noisy: [
            r.opt_num("photons_noisy_lo")?.unwrap_or(PHOTONS_NOISY_RANGE[0]),
            r.opt_num("photons_noisy_hi")?.unwrap_or(PHOTONS_NOISY_RANGE[1]),
        ],
        photons_clean: r.opt_num("photons_clean")?.unwrap_or(PHOTONS_CLEAN),
        scene_seed: r.opt_num("scene_seed")?.unwrap_or(0),
    };
    r.finish()?;
    Ok(cfg)
}

fn gen_dataset(config: &Path, out_dir: &Path, seed_override: Option<u64>) -> Result<()> {
    let m = load_manifest(config)?;
    let (ctx, _) = scene_context(&m)?;
    let mut cfg = dataset_config(&m)?;
    if let Some(s) = seed_override {
        cfg.scene_seed = s;
    }
    fs::create_dir_all(out_dir)?;
    let mut index = String::from("scan,photons_noisy,original,noisy,clean,gt,recon,metal_mask,combined\n");
    for i in 0..cfg.n_scans {
        let mut rng = StreamRng::from_parts(cfg.scene_seed, &[SCENE_SALT, i as u64]);
        let spec = random_phantom(&ctx.grid, true, &mut rng);
        let scan = generate_training_scan(
            &ctx,
            &spec,
            cfg.photons_noisy,
            cfg.photons_clean,
            stream_key(cfg.scene_seed, &[SCAN_SALT, i as u64]),
        )?;
        let names = [
            format!("scan_{i:03}_original.pprj"),
            format!("scan_{i:03}_noisy.pprj"),
            format!("scan_{i:03}_clean.pprj"),
            format!("scan_{i:03}_gt.ptrc"),
            format!("scan_{i:03}_recon.pvol"),
            format!("scan_{i:03}_metal.pmsk"),
            format!("scan_{i:03}_combined.pvol"),
        ];
        cbmar::io::save_projections(out_dir.join(&names[0]), &scan.original.convert::<f32>())?;
        cbmar::io::save_projections(out_dir.join(&names[1]), &scan.noisy.convert::<f32>())?;
        cbmar::io::save_projections(out_dir.join(&names[2]), &scan.clean.convert::<f32>())?;
        cbmar::io::save_traces(out_dir.join(&names[3]), &scan.gt_traces)?;
        cbmar::io::save_volume(out_dir.join(&names[4]), &scan.recon_hu.convert::<f32>())?;
        cbmar::io::save_mask(out_dir.join(&names[5]), &scan.metal_mask)?;
        cbmar::io::save_volume(out_dir.join(&names[6]), &scan.combined_hu.convert::<f32>())?;
        index.push_str(&format!(
            "{i},{},{}\n",
            scan.photons_noisy,
            names.join(",")
        ));
    }
    fs::write(out_dir.join("dataset.csv"), index)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainFileConfig {
    train: TrainConfig,
    n_val_scans: usize,
    views_per_scan: usize,
}

fn train_config(m: &Manifest) -> Result<TrainFileConfig> {
    let mut r = SectionReader::new(m.one("train")?);
    let d = TrainConfig::default();
    let strategy = match r.optional("strategy").unwrap_or("full+crops") {
        "full" => Strategy::Full,
        "crops" => Strategy::Crops,
        "full+crops" => Strategy::FullPlusCrops,
        other => {
            return Err(Error::Parse {
                line: r.header_line(),
                msg: format!("unknown strategy `{other}` (full|crops|full+crops)"),
            })
        }
    };
    let cfg = TrainFileConfig {
        train: TrainConfig {
            strategy,
            depth: r.opt_num("depth")?.unwrap_or(d.depth),
            base_channels: r.opt_num("base_channels")?.unwrap_or(d.base_channels),
            max_epochs: r.opt_num("max_epochs")?.unwrap_or(d.max_epochs),
            batch_size: r.opt_num("batch_size")?.unwrap_or(d.batch_size),
            lr_start: r.opt_num("lr_start")?.unwrap_or(d.lr_start),
            lr_end: r.opt_num("lr_end")?.unwrap_or(d.lr_end),
            lr_decay_epochs: r.opt_num("lr_decay_epochs")?.unwrap_or(d.lr_decay_epochs),
            patience: r.opt_num("patience")?.unwrap_or(d.patience),
            aug_prob: r.opt_num("aug_prob")?.unwrap_or(d.aug_prob),
            min_metal_px: r.opt_num("min_metal_px")?.unwrap_or(d.min_metal_px),
            seed: r.opt_num("seed")?.unwrap_or(d.seed),
        },
        n_val_scans: r.opt_num("n_val_scans")?.unwrap_or(1),
        views_per_scan: r.opt_num("views_per_scan")?.unwrap_or(8),
    };
    r.finish()?;
    Ok(cfg)
}

/// One dataset.csv row: the files of one scan.
struct ScanFiles {
    noisy: PathBuf,
    clean: PathBuf,
    gt: PathBuf,
}

fn read_dataset_index(dir: &Path) -> Result<Vec<ScanFiles>> {
    let text = fs::read_to_string(dir.join("dataset.csv"))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("dataset.csv: expected 9 columns, got {}", cols.len()),
            });
        }
        out.push(ScanFiles {
            noisy: dir.join(cols[3]),
            clean: dir.join(cols[4]),
            gt: dir.join(cols[5]),
        });
    }
    if out.is_empty() {
        return Err(Error::invalid("dataset.csv lists no scans"));
    }
    Ok(out)
}

fn scan_samples_from_files(files: &ScanFiles, views: usize) -> Result<Vec<Sample>> {
    let noisy = cbmar::io::load_projections(&files.noisy)?.convert::<f64>();
    let clean = cbmar::io::load_projections(&files.clean)?.convert::<f64>();
    let gt = cbmar::io::load_traces(&files.gt)?;
    let n = noisy.n_views();
    let take = views.min(n).max(1);
    let noisy_s = samples_from_stack(&noisy, &gt)?;
    let clean_s = samples_from_stack(&clean, &gt)?;
    let mut out = Vec::with_capacity(2 * take);
    for i in 0..take {
        let v = i * n / take;
        out.push(noisy_s[v].clone());
        out.push(clean_s[v].clone());
    }
    Ok(out)
}

fn train_cmd(
    config: &Path,
    data_dir: &Path,
    out: &Path,
    history: Option<&Path>,
    seed_override: Option<u64>,
) -> Result<()> {
    let m = load_manifest(config)?;
    let mut cfg = train_config(&m)?;
    if let Some(s) = seed_override {
        cfg.train.seed = s;
    }
    let scans = read_dataset_index(data_dir)?;
    if cfg.n_val_scans == 0 || cfg.n_val_scans >= scans.len() {
        return Err(Error::invalid(format!(
            "n_val_scans must be in 1..{} (dataset has {} scans)",
            scans.len(),
            scans.len()
        )));
    }
    let split = scans.len() - cfg.n_val_scans;
    let mut train_samples = Vec::new();
    let mut val_samples = Vec::new();
    for (i, files) in scans.iter().enumerate() {
        let s = scan_samples_from_files(files, cfg.views_per_scan)?;
        if i < split {
            train_samples.extend(s);
        } else {
            val_samples.extend(s);
        }
    }
    let (params, hist) = train(&train_samples, &val_samples, &cfg.train)?;
    cbmar::io::save_params(out, &params)?;
    if let Some(p) = history {
        fs::write(p, history_csv(&hist))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate / export-png
// ---------------------------------------------------------------------------

fn evaluate(gt: &Path, preds: &[PathBuf], out: Option<&Path>, boxplot: Option<&Path>) -> Result<()> {
    let gt_t = cbmar::io::load_traces(gt)?;
    let mut csv = String::from("pred,dsc,iou,fpr,tp,fp,fn,tn\n");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut groups = Vec::new();
    let n_pix = gt_t.nu * gt_t.nv;
    for p in preds {
        let pred_t = cbmar::io::load_traces(p)?;
        let c = confusion(&pred_t, &gt_t)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.display(),
            fmt(dsc(&c)),
            fmt(iou(&c)),
            fmt(fpr(&c)),
            c.true_pos,
            c.false_pos,
            c.false_neg,
            c.true_neg
        ));
        // Per-view Dice distribution for the boxplot.
        let mut per_view = Vec::new();
        for view in 0..gt_t.n_views {
            let pv: Vec<bool> =
                pred_t.bits()[view * n_pix..(view + 1) * n_pix].iter().map(|&b| b != 0).collect();
            let gv: Vec<bool> =
                gt_t.bits()[view * n_pix..(view + 1) * n_pix].iter().map(|&b| b != 0).collect();
            if let Some(d) = dsc(&confusion_masks(&pv, &gv)?) {
                per_view.push(d);
            }
        }
        if !per_view.is_empty() {
            groups.push((p.display().to_string(), per_view));
        }
    }
    match out {
        Some(p) => fs::write(p, csv)?,
        None => print!("{csv}"),
    }
    if let Some(p) = boxplot {
        save_score_boxplot(p, &groups)?;
    }
    Ok(())
}

fn export_png(
    input: &Path,
    out: &Path,
    slice: Option<usize>,
    view: usize,
    window: [f64; 2],
) -> Result<()> {
    let mut magic = [0u8; 4];
    {
        use std::io::Read;
        let mut f = fs::File::open(input)?;
        f.read_exact(&mut magic).map_err(|e| Error::Io(e.to_string()))?;
    }
    match &magic {
        b"PVOL" => {
            let vol = cbmar::io::load_volume(input)?.convert::<f64>();
            let k = slice.unwrap_or(vol.grid.nz / 2);
            save_axial_slice(out, &vol, k, window)
        }
        b"PPRJ" => {
            let p = cbmar::io::load_projections(input)?.convert::<f64>();
            save_projection_view(out, &p, view)
        }
        b"PTRC" => {
            let t = cbmar::io::load_traces(input)?;
            save_trace_view(out, &t, view)
        }
        other => Err(Error::Format {
            offset: 0,
            msg: format!("unrecognized magic {:?}", String::from_utf8_lossy(other)),
        }),
    }
}
