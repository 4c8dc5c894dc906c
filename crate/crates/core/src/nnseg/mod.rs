//! Trace segmentation network: NCHW tensors, explicit forward/backward
//! layers, an encoder/decoder architecture with skip connections, binary
//! cross-entropy on logits, Adam, augmentation, and the training loop.

pub mod augment;
pub mod data;
#[cfg(test)]
pub(crate) mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod unet;

pub use augment::{augment_sample, default_min_metal_px, make_crops, AUG_PROB};
pub use data::{epoch_batches, samples_from_stack, Provenance, Sample};
pub use loss::bce_with_logits;
pub use optim::{adam_step, lr_schedule, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tensor::Tensor4;
pub use train::{infer_stack, infer_view, train, EpochStats, Strategy, TrainConfig};
pub use unet::{unet_backward, unet_forward, ConvParam, UNetCache, UNetParams};
