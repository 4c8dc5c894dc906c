//! 8-bit PNG export for visual inspection: windowed axial volume slices,
//! min-max normalized projection views, binary trace views, and a small
//! boxplot-style score chart. These are inspection aids; quantitative
//! results always come from the CSV reports.

use std::path::Path;

use image::{GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::fproj::TraceStack;
use crate::voxvol::Volume3;
use crate::xsim::ProjectionStack;

/// Default display window for HU slices (window/level covering air through
/// bright metal).
pub const HU_WINDOW: [f64; 2] = [-1000.0, 3000.0];

/// Clamp-and-scale one value into the 8-bit display range.
pub fn window_to_u8(v: f64, lo: f64, hi: f64) -> u8 {
    if hi <= lo {
        return 0;
    }
    let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    (t * 255.0).round() as u8
}

/// Write axial slice `k` of a volume, mapped through `[lo, hi]` to 8-bit
/// grayscale. Rows run from +y at the top to -y at the bottom.
pub fn save_axial_slice(
    path: impl AsRef<Path>,
    vol: &Volume3<f64>,
    k: usize,
    window: [f64; 2],
) -> Result<()> {
    let g = &vol.grid;
    if k >= g.nz {
        return Err(Error::invalid(format!("slice {k} out of range (nz = {})", g.nz)));
    }
    let img = GrayImage::from_fn(g.nx as u32, g.ny as u32, |x, y| {
        let j = g.ny - 1 - y as usize;
        image::Luma([window_to_u8(vol.at(x as usize, j, k), window[0], window[1])])
    });
    img.save(path.as_ref()).map_err(|e| Error::Io(e.to_string()))
}

/// Write one projection view, min-max normalized over that view. Rows run
/// from +v at the top to -v at the bottom.
pub fn save_projection_view(
    path: impl AsRef<Path>,
    p: &ProjectionStack<f64>,
    view: usize,
) -> Result<()> {
    if view >= p.n_views() {
        return Err(Error::invalid(format!("view {view} out of range ({})", p.n_views())));
    }
    let vals = p.view(view);
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let img = GrayImage::from_fn(p.nu as u32, p.nv as u32, |x, y| {
        let iv = p.nv - 1 - y as usize;
        image::Luma([window_to_u8(vals[iv * p.nu + x as usize], lo, hi)])
    });
    img.save(path.as_ref()).map_err(|e| Error::Io(e.to_string()))
}

/// Write one binary trace view (on = white).
pub fn save_trace_view(path: impl AsRef<Path>, t: &TraceStack, view: usize) -> Result<()> {
    if view >= t.n_views {
        return Err(Error::invalid(format!("view {view} out of range ({})", t.n_views)));
    }
    let img = GrayImage::from_fn(t.nu as u32, t.nv as u32, |x, y| {
        let iv = t.nv - 1 - y as usize;
        image::Luma([if t.get(view, x as usize, iv) { 255 } else { 0 }])
    });
    img.save(path.as_ref()).map_err(|e| Error::Io(e.to_string()))
}

/// Distinct fill colors for up to eight boxplot groups (repeats beyond).
const BOX_COLORS: [[u8; 3]; 8] = [
    [66, 133, 244],
    [219, 68, 55],
    [244, 180, 0],
    [15, 157, 88],
    [171, 71, 188],
    [0, 172, 193],
    [255, 112, 67],
    [93, 64, 55],
];

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[n - 1]
    }
}

/// Draw a boxplot-style summary of score groups on [0, 1]: one colored box
/// (quartiles), whiskers (min/max), and a black median bar per group, in
/// input order left to right. Groups are identified by color order; pair
/// the image with the CSV report for labels.
pub fn save_score_boxplot(path: impl AsRef<Path>, groups: &[(String, Vec<f64>)]) -> Result<()> {
    if groups.is_empty() || groups.iter().any(|(_, v)| v.is_empty()) {
        return Err(Error::invalid("boxplot needs at least one value per group"));
    }
    let (gw, h, margin) = (64u32, 320u32, 24u32);
    let w = margin * 2 + gw * groups.len() as u32;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let plot_h = (h - 2 * margin) as f64;
    let y_of = |score: f64| -> u32 {
        let t = score.clamp(0.0, 1.0);
        (h - margin) - (t * plot_h).round() as u32
    };
    // Axis: left border plus ticks at 0, 0.5, 1.
    for y in margin..=(h - margin) {
        img.put_pixel(margin - 8, y, Rgb([0, 0, 0]));
    }
    for &tick in &[0.0, 0.5, 1.0] {
        let y = y_of(tick);
        for x in (margin - 12)..(margin - 7) {
            img.put_pixel(x, y, Rgb([0, 0, 0]));
        }
    }
    for (gi, (_, scores)) in groups.iter().enumerate() {
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
        let (q1, med, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75));
        let cx = margin + gw * gi as u32 + gw / 2;
        let half = gw / 4;
        let color = Rgb(BOX_COLORS[gi % BOX_COLORS.len()]);
        // Whisker line.
        for y in y_of(max)..=y_of(min) {
            img.put_pixel(cx, y, Rgb([120, 120, 120]));
        }
        // Filled interquartile box.
        for y in y_of(q3)..=y_of(q1) {
            for x in (cx - half)..=(cx + half) {
                img.put_pixel(x, y, color);
            }
        }
        // Median bar.
        let ym = y_of(med);
        for x in (cx - half)..=(cx + half) {
            img.put_pixel(x, ym, Rgb([0, 0, 0]));
        }
    }
    img.save(path.as_ref()).map_err(|e| Error::Io(e.to_string()))
}
