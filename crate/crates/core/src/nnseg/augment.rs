//! Stochastic training-time augmentation of projection-view samples, plus
//! quadrant cropping. Every operator fires independently with the same
//! probability, in a fixed order, and always consumes exactly one
//! probability draw so that the random stream stays aligned whether or not
//! an operator fires. Geometric operators resample the image bilinearly
//! and the mask by nearest neighbour; integer shifts are exact on both.

use rand_distr::{Distribution, Normal};

use crate::rng::StreamRng;

use super::data::{Provenance, Sample};

/// Default augmentation probability per operator.
pub const AUG_PROB: f64 = 0.2;
/// Largest shift, as a fraction of each image dimension.
pub const SHIFT_FRAC: f64 = 0.1;
/// Scale factors are drawn uniformly from this range.
pub const RESCALE_RANGE: (f64, f64) = (0.9, 1.1);
/// Largest rotation magnitude in degrees.
pub const ROTATE_MAX_DEG: f64 = 15.0;
/// Additive noise sigma is drawn from [0, this fraction of the image max].
pub const NOISE_SIGMA_FRAC: f64 = 0.05;
/// Per-pixel multiplicative factor range.
pub const MULT_RANGE: (f64, f64) = (0.9, 1.1);
/// Elastic deformation: displacement amplitude (pixels) and smoothing sigma.
pub const ELASTIC_ALPHA_PX: f64 = 8.0;
pub const ELASTIC_SIGMA_PX: f64 = 4.0;

/// Bilinear image sample with zero outside the frame.
fn bilinear_at(image: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let yi = y0 as i64 + dy;
            let xi = x0 as i64 + dx;
            if yi >= 0 && yi < h as i64 && xi >= 0 && xi < w as i64 {
                acc += wy * wx * image[yi as usize * w + xi as usize];
            }
        }
    }
    acc
}

/// Nearest-neighbour mask sample, false outside the frame.
fn nearest_mask_at(mask: &[bool], h: usize, w: usize, y: f64, x: f64) -> bool {
    let yi = y.round() as i64;
    let xi = x.round() as i64;
    if yi >= 0 && yi < h as i64 && xi >= 0 && xi < w as i64 {
        mask[yi as usize * w + xi as usize]
    } else {
        false
    }
}

/// Apply an inverse coordinate map: output pixel (y, x) takes its value
/// from input location `map(y, x)`.
fn warp<F: Fn(f64, f64) -> (f64, f64)>(s: &Sample, map: F) -> Sample {
    let mut image = vec![0.0; s.len()];
    let mut mask = vec![false; s.len()];
    for y in 0..s.h {
        for x in 0..s.w {
            let (sy, sx) = map(y as f64, x as f64);
            image[y * s.w + x] = bilinear_at(&s.image, s.h, s.w, sy, sx);
            mask[y * s.w + x] = nearest_mask_at(&s.mask, s.h, s.w, sy, sx);
        }
    }
    Sample { image, mask, h: s.h, w: s.w, provenance: s.provenance }
}

/// Mirror left-right.
pub fn hflip(s: &Sample) -> Sample {
    let mut out = s.clone();
    for y in 0..s.h {
        for x in 0..s.w {
            out.image[y * s.w + x] = s.image[y * s.w + (s.w - 1 - x)];
            out.mask[y * s.w + x] = s.mask[y * s.w + (s.w - 1 - x)];
        }
    }
    out
}

/// Mirror top-bottom.
pub fn vflip(s: &Sample) -> Sample {
    let mut out = s.clone();
    for y in 0..s.h {
        for x in 0..s.w {
            out.image[y * s.w + x] = s.image[(s.h - 1 - y) * s.w + x];
            out.mask[y * s.w + x] = s.mask[(s.h - 1 - y) * s.w + x];
        }
    }
    out
}

/// Integer translation by (dy, dx) with zero padding; exact on image and
/// mask alike.
pub fn shift(s: &Sample, dy: i64, dx: i64) -> Sample {
    let mut out = Sample {
        image: vec![0.0; s.len()],
        mask: vec![false; s.len()],
        h: s.h,
        w: s.w,
        provenance: s.provenance,
    };
    for y in 0..s.h as i64 {
        for x in 0..s.w as i64 {
            let sy = y - dy;
            let sx = x - dx;
            if sy >= 0 && sy < s.h as i64 && sx >= 0 && sx < s.w as i64 {
                out.image[(y * s.w as i64 + x) as usize] =
                    s.image[(sy * s.w as i64 + sx) as usize];
                out.mask[(y * s.w as i64 + x) as usize] =
                    s.mask[(sy * s.w as i64 + sx) as usize];
            }
        }
    }
    out
}

/// Zoom about the image centre by `factor` (>1 magnifies).
pub fn rescale(s: &Sample, factor: f64) -> Sample {
    let cy = (s.h as f64 - 1.0) / 2.0;
    let cx = (s.w as f64 - 1.0) / 2.0;
    warp(s, |y, x| (cy + (y - cy) / factor, cx + (x - cx) / factor))
}

/// Rotate about the image centre by `deg` degrees (counter-clockwise in
/// (x right, y down) pixel coordinates).
pub fn rotate(s: &Sample, deg: f64) -> Sample {
    let th = deg.to_radians();
    let (sin, cos) = th.sin_cos();
    let cy = (s.h as f64 - 1.0) / 2.0;
    let cx = (s.w as f64 - 1.0) / 2.0;
    warp(s, |y, x| {
        let ry = y - cy;
        let rx = x - cx;
        (cy - sin * rx + cos * ry, cx + cos * rx + sin * ry)
    })
}

/// Add zero-mean Gaussian noise to the image only.
pub fn add_gaussian_noise(s: &mut Sample, sigma: f64, rng: &mut StreamRng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for v in &mut s.image {
        *v += normal.sample(rng);
    }
}

/// Multiply every image pixel by an independent uniform factor.
pub fn multiplicative_noise(s: &mut Sample, lo: f64, hi: f64, rng: &mut StreamRng) {
    for v in &mut s.image {
        *v *= rng.uniform_in(lo, hi);
    }
}

/// Smooth a field with a separable Gaussian (zero padding outside).
fn gaussian_smooth(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let mut rows = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = x + ki as i64 - radius;
                if sx >= 0 && sx < w as i64 {
                    acc += k * field[(y * w as i64 + sx) as usize];
                }
            }
            rows[(y * w as i64 + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = y + ki as i64 - radius;
                if sy >= 0 && sy < h as i64 {
                    acc += k * rows[(sy * w as i64 + x) as usize];
                }
            }
            out[(y * w as i64 + x) as usize] = acc;
        }
    }
    out
}

/// Elastic deformation: a smoothed random displacement field of amplitude
/// `alpha` pixels moves each output pixel's sampling location. Sampling
/// coordinates are clamped to the frame, so constant images stay constant.
pub fn elastic(s: &Sample, alpha: f64, sigma: f64, rng: &mut StreamRng) -> Sample {
    let n = s.len();
    let raw_dx: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let raw_dy: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let dx = gaussian_smooth(&raw_dx, s.h, s.w, sigma);
    let dy = gaussian_smooth(&raw_dy, s.h, s.w, sigma);
    let h = s.h as f64 - 1.0;
    let w = s.w as f64 - 1.0;
    warp(s, |y, x| {
        let i = y as usize * s.w + x as usize;
        ((y + alpha * dy[i]).clamp(0.0, h), (x + alpha * dx[i]).clamp(0.0, w))
    })
}

/// 8-connected components of the mask, as lists of pixel indices in
/// ascending scan order of their discovery seed.
fn mask_components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = vec![start];
        seen[start] = true;
        while let Some(i) = queue.pop() {
            comp.push(i);
            let y = (i / w) as i64;
            let x = (i % w) as i64;
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                        let j = (ny * w as i64 + nx) as usize;
                        if mask[j] && !seen[j] {
                            seen[j] = true;
                            queue.push(j);
                        }
                    }
                }
            }
        }
        comps.push(comp);
    }
    comps
}

/// Remove one randomly chosen connected component from the mask and paint
/// the corresponding image pixels with the (pre-fill) image mean. Does
/// nothing on an empty mask.
pub fn mask_dropout(s: &mut Sample, rng: &mut StreamRng) {
    let comps = mask_components(&s.mask, s.h, s.w);
    if comps.is_empty() {
        return;
    }
    let pick = rng.below(comps.len() as u64) as usize;
    let mean = s.image.iter().sum::<f64>() / s.len() as f64;
    for &i in &comps[pick] {
        s.mask[i] = false;
        s.image[i] = mean;
    }
}

/// Apply the full augmentation chain. Each operator fires independently
/// with probability `prob`; one probability draw is consumed per operator
/// regardless, and parameter draws happen only when an operator fires.
pub fn augment_sample(s: &Sample, prob: f64, rng: &mut StreamRng) -> Sample {
    let mut cur = s.clone();
    if rng.uniform() < prob {
        cur = hflip(&cur);
    }
    if rng.uniform() < prob {
        cur = vflip(&cur);
    }
    if rng.uniform() < prob {
        let my = ((s.h as f64) * SHIFT_FRAC).round() as u64;
        let mx = ((s.w as f64) * SHIFT_FRAC).round() as u64;
        let dy = rng.below(2 * my + 1) as i64 - my as i64;
        let dx = rng.below(2 * mx + 1) as i64 - mx as i64;
        cur = shift(&cur, dy, dx);
    }
    if rng.uniform() < prob {
        let f = rng.uniform_in(RESCALE_RANGE.0, RESCALE_RANGE.1);
        cur = rescale(&cur, f);
    }
    if rng.uniform() < prob {
        let deg = rng.uniform_in(-ROTATE_MAX_DEG, ROTATE_MAX_DEG);
        cur = rotate(&cur, deg);
    }
    if rng.uniform() < prob {
        let max = cur.image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max > 0.0 {
            let sigma = rng.uniform_in(0.0, NOISE_SIGMA_FRAC * max);
            add_gaussian_noise(&mut cur, sigma, rng);
        }
    }
    if rng.uniform() < prob {
        multiplicative_noise(&mut cur, MULT_RANGE.0, MULT_RANGE.1, rng);
    }
    if rng.uniform() < prob {
        cur = elastic(&cur, ELASTIC_ALPHA_PX, ELASTIC_SIGMA_PX, rng);
    }
    if rng.uniform() < prob {
        mask_dropout(&mut cur, rng);
    }
    cur
}

/// Split a sample into its four quadrants (top-left, top-right,
/// bottom-left, bottom-right; odd dimensions give the larger half to the
/// bottom/right), keeping only crops with at least `min_metal_px`
/// foreground pixels.
pub fn make_crops(s: &Sample, min_metal_px: usize) -> Vec<Sample> {
    let hy = s.h / 2;
    let hx = s.w / 2;
    let windows = [
        (0, hy, 0, hx),
        (0, hy, hx, s.w),
        (hy, s.h, 0, hx),
        (hy, s.h, hx, s.w),
    ];
    let mut out = Vec::new();
    for (y0, y1, x0, x1) in windows {
        if y0 == y1 || x0 == x1 {
            continue;
        }
        let (ch, cw) = (y1 - y0, x1 - x0);
        let mut image = Vec::with_capacity(ch * cw);
        let mut mask = Vec::with_capacity(ch * cw);
        for y in y0..y1 {
            for x in x0..x1 {
                image.push(s.image[y * s.w + x]);
                mask.push(s.mask[y * s.w + x]);
            }
        }
        let crop = Sample { image, mask, h: ch, w: cw, provenance: Provenance::Crop };
        if crop.metal_pixels() >= min_metal_px {
            out.push(crop);
        }
    }
    out
}

/// Foreground-pixel threshold for keeping a crop, scaled from 100 pixels
/// on a 948x740 detector down to the detector actually in use.
pub fn default_min_metal_px(nu: usize, nv: usize) -> usize {
    let scaled = 100.0 * (nu as f64 * nv as f64) / (948.0 * 740.0);
    (scaled.round() as usize).max(1)
}
