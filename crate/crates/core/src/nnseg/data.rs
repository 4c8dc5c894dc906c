//! Training samples: one projection view paired with its binary metal
//! trace, plus shape-bucketed batch construction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::traces::TraceStack;
use crate::xsim::{Domain, ProjectionStack};

/// Whether a sample is an untouched projection view or a quadrant crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Full,
    Crop,
}

/// One 2D training example: image rows are detector rows (v), columns are
/// detector columns (u).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub mask: Vec<bool>,
    pub h: usize,
    pub w: usize,
    pub provenance: Provenance,
}

impl Sample {
    pub fn new(
        image: Vec<f64>,
        mask: Vec<bool>,
        h: usize,
        w: usize,
        provenance: Provenance,
    ) -> Result<Sample> {
        if image.len() != h * w || mask.len() != h * w {
            return Err(Error::DimMismatch(format!(
                "sample {}x{} with {} image / {} mask values",
                h,
                w,
                image.len(),
                mask.len()
            )));
        }
        Ok(Sample { image, mask, h, w, provenance })
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.image[y * self.w + x]
    }

    pub fn mask_at(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.w + x]
    }

    /// Number of foreground pixels in the mask.
    pub fn metal_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Scale the image so its maximum becomes 1 (no-op for non-positive
    /// maxima, e.g. all-zero views).
    pub fn normalize_by_max(&mut self) {
        let max = self.image.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max > 0.0 {
            for v in &mut self.image {
                *v /= max;
            }
        }
    }
}

/// Turn every view of a line-integral stack and its trace stack into a
/// max-normalized full-view sample.
pub fn samples_from_stack(p: &ProjectionStack<f64>, traces: &TraceStack) -> Result<Vec<Sample>> {
    if p.domain != Domain::LineIntegral {
        return Err(Error::invalid("training samples need line-integral projections"));
    }
    if p.n_views() != traces.n_views || p.nu != traces.nu || p.nv != traces.nv {
        return Err(Error::DimMismatch(format!(
            "projections {}x{}x{} vs traces {}x{}x{}",
            p.n_views(),
            p.nu,
            p.nv,
            traces.n_views,
            traces.nu,
            traces.nv
        )));
    }
    let mut out = Vec::with_capacity(p.n_views());
    for view in 0..p.n_views() {
        let image = p.view(view).to_vec();
        let mut mask = vec![false; p.nu * p.nv];
        for v in 0..p.nv {
            for u in 0..p.nu {
                mask[v * p.nu + u] = traces.get(view, u, v);
            }
        }
        let mut s = Sample::new(image, mask, p.nv, p.nu, Provenance::Full)?;
        s.normalize_by_max();
        out.push(s);
    }
    Ok(out)
}

/// Shape-bucketed mini-batches: samples of identical (h, w) are shuffled
/// and chunked, then the batch order itself is shuffled. All randomness
/// comes from the supplied stream.
pub fn epoch_batches(
    samples: &[Sample],
    batch_size: usize,
    rng: &mut StreamRng,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut buckets: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        buckets.entry((s.h, s.w)).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, mut idxs) in buckets {
        shuffle(&mut idxs, rng);
        for chunk in idxs.chunks(batch_size) {
            batches.push(chunk.to_vec());
        }
    }
    shuffle(&mut batches, rng);
    Ok(batches)
}

/// Fisher-Yates driven by the stream generator.
fn shuffle<T>(items: &mut [T], rng: &mut StreamRng) {
    for i in (1..items.len()).rev() {
        let j = rng.below((i + 1) as u64) as usize;
        items.swap(i, j);
    }
}
