//! Mini-batch training of the segmentation network with Adam, a decaying
//! learning rate, per-epoch augmentation, and early stopping on the
//! validation loss. Per-sample work is parallel but every random draw
//! comes from a stream keyed by (seed, epoch, sample), and gradients are
//! reduced in sample order, so results do not depend on thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{dsc, Confusion};
use crate::rng::StreamRng;
use crate::traces::TraceStack;
use crate::xsim::{Domain, ProjectionStack};

use super::augment::{augment_sample, make_crops, AUG_PROB};
use super::data::{epoch_batches, Sample};
use super::loss::bce_with_logits;
use super::optim::{adam_step, lr_schedule, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use super::tensor::Tensor4;
use super::unet::{unet_backward, unet_forward, UNetParams};

const SHUFFLE_SALT: u64 = 0x51;
const AUG_SALT: u64 = 0x52;

/// Which views a model trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Full projection views only.
    Full,
    /// Quadrant crops only.
    Crops,
    /// Full views plus their quadrant crops.
    FullPlusCrops,
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub depth: usize,
    pub base_channels: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lr_decay_epochs: usize,
    pub patience: usize,
    pub aug_prob: f64,
    /// Crops below this foreground count are discarded.
    pub min_metal_px: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            strategy: Strategy::FullPlusCrops,
            depth: 4,
            base_channels: 16,
            max_epochs: 50,
            batch_size: 4,
            lr_start: 1e-4,
            lr_end: 1e-6,
            lr_decay_epochs: 25,
            patience: 5,
            aug_prob: AUG_PROB,
            min_metal_px: 1,
            seed: 2060,
        }
    }
}

/// Per-epoch record: losses, the learning rate used, and the validation
/// Dice score from the aggregated confusion counts (None when degenerate).
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dsc: Option<f64>,
}

fn expand_strategy(samples: &[Sample], strategy: Strategy, min_metal_px: usize) -> Vec<Sample> {
    match strategy {
        Strategy::Full => samples.to_vec(),
        Strategy::Crops => samples.iter().flat_map(|s| make_crops(s, min_metal_px)).collect(),
        Strategy::FullPlusCrops => {
            let mut out = samples.to_vec();
            out.extend(samples.iter().flat_map(|s| make_crops(s, min_metal_px)));
            out
        }
    }
}

fn sample_tensors(s: &Sample) -> Result<(Tensor4<f64>, Tensor4<f64>)> {
    let x = Tensor4::new(1, 1, s.h, s.w, s.image.clone())?;
    let y = Tensor4::new(
        1,
        1,
        s.h,
        s.w,
        s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )?;
    Ok((x, y))
}

/// Loss and gradient (in flat parameter order) of one sample.
fn sample_grad(params: &UNetParams<f64>, s: &Sample) -> Result<(f64, Vec<f64>)> {
    let (x, y) = sample_tensors(s)?;
    let (logits, cache) = unet_forward(params, &x)?;
    let (loss, g_logits) = bce_with_logits(&logits, &y)?;
    let (grads, _) = unet_backward(params, &cache, &g_logits)?;
    Ok((loss, grads.flatten()))
}

/// Loss and pixel confusion of one sample under the current parameters.
fn sample_eval(params: &UNetParams<f64>, s: &Sample) -> Result<(f64, Confusion)> {
    let (x, y) = sample_tensors(s)?;
    let (logits, _) = unet_forward(params, &x)?;
    let (loss, _) = bce_with_logits(&logits, &y)?;
    let pred: Vec<bool> = logits.data().iter().map(|&l| l >= 0.0).collect();
    let gt: Vec<bool> = y.data().iter().map(|&t| t == 1.0).collect();
    Ok((loss, crate::metrics::confusion_masks(&pred, &gt)?))
}

/// Train a fresh network. Returns the parameters with the best validation
/// loss seen, plus the full epoch history.
pub fn train(
    train_full: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<(UNetParams<f64>, Vec<EpochStats>)> {
    if cfg.max_epochs == 0 {
        return Err(Error::invalid("at least one epoch is required"));
    }
    if val.is_empty() {
        return Err(Error::invalid("validation set must not be empty"));
    }
    let train_set = expand_strategy(train_full, cfg.strategy, cfg.min_metal_px);
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty after strategy expansion"));
    }
    let mut params: UNetParams<f64> =
        UNetParams::init_he_uniform(cfg.depth, cfg.base_channels, cfg.seed)?;
    let mut flat = params.flatten();
    let mut adam = AdamState::new(flat.len());
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_flat = flat.clone();
    let mut stall = 0usize;
    for epoch in 0..cfg.max_epochs {
        let lr = lr_schedule(epoch, cfg.lr_start, cfg.lr_end, cfg.lr_decay_epochs);
        let mut shuffle_rng = StreamRng::from_parts(cfg.seed, &[SHUFFLE_SALT, epoch as u64]);
        let batches = epoch_batches(&train_set, cfg.batch_size, &mut shuffle_rng)?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let results: Vec<Result<(f64, Vec<f64>)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut rng =
                        StreamRng::from_parts(cfg.seed, &[AUG_SALT, epoch as u64, i as u64]);
                    let aug = augment_sample(&train_set[i], cfg.aug_prob, &mut rng);
                    sample_grad(&params, &aug)
                })
                .collect();
            let mut grad_sum = vec![0.0f64; flat.len()];
            for r in results {
                let (loss, g) = r?;
                loss_sum += loss;
                for (a, b) in grad_sum.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grad_sum {
                *g *= inv;
            }
            adam_step(&mut flat, &grad_sum, &mut adam, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)?;
            params.assign_from_flat(&flat)?;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let evals: Vec<Result<(f64, Confusion)>> =
            val.par_iter().map(|s| sample_eval(&params, s)).collect();
        let mut val_loss = 0.0;
        let mut conf = Confusion::default();
        for r in evals {
            let (loss, c) = r?;
            val_loss += loss;
            conf.add(&c);
        }
        val_loss /= val.len() as f64;
        history.push(EpochStats { epoch, lr, train_loss, val_loss, val_dsc: dsc(&conf) });
        if val_loss < best_val {
            best_val = val_loss;
            best_flat = flat.clone();
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.patience {
                break;
            }
        }
    }
    params.assign_from_flat(&best_flat)?;
    Ok((params, history))
}

/// Segment one view: the image is max-normalized (matching training
/// inputs), pushed through the network, and thresholded at logit zero
/// (foreground when the sigmoid reaches one half).
pub fn infer_view(
    params: &UNetParams<f64>,
    image: &[f64],
    h: usize,
    w: usize,
) -> Result<Vec<bool>> {
    if image.len() != h * w {
        return Err(Error::DimMismatch(format!(
            "image {}x{} with {} values",
            h,
            w,
            image.len()
        )));
    }
    let mut values = image.to_vec();
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > 0.0 {
        for v in &mut values {
            *v /= max;
        }
    }
    let x = Tensor4::new(1, 1, h, w, values)?;
    let (logits, _) = unet_forward(params, &x)?;
    Ok(logits.data().iter().map(|&l| l >= 0.0).collect())
}

/// Segment every view of a line-integral stack into a trace stack.
pub fn infer_stack(params: &UNetParams<f64>, p: &ProjectionStack<f64>) -> Result<TraceStack> {
    if p.domain != Domain::LineIntegral {
        return Err(Error::invalid("inference needs line-integral projections"));
    }
    let views: Vec<Result<Vec<bool>>> = (0..p.n_views())
        .into_par_iter()
        .map(|view| infer_view(params, p.view(view), p.nv, p.nu))
        .collect();
    let mut out = TraceStack::empty(p.n_views(), p.nu, p.nv);
    for (view, r) in views.into_iter().enumerate() {
        let bits = r?;
        for v in 0..p.nv {
            for u in 0..p.nu {
                out.set(view, u, v, bits[v * p.nu + u]);
            }
        }
    }
    Ok(out)
}
