//! Encoder/decoder segmentation network assembled from the explicit
//! layers: repeated (conv 3x3, ReLU, instance norm) pairs with 2x2 max
//! pooling on the way down, bilinear upsampling plus skip concatenation on
//! the way up, and a final 1x1 projection to one logit channel. Forward
//! caches everything the hand-written backward pass needs.

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::scalar::Real;

use super::layers::{
    concat_pad_backward, concat_pad_forward, conv2d_backward, conv2d_forward,
    instance_norm_backward, instance_norm_forward, maxpool2x2_backward, maxpool2x2_forward,
    relu_backward, relu_forward, upsample_bilinear2x_backward, upsample_bilinear2x_forward,
    InstanceNormCache, INSTANCE_NORM_EPS,
};
use super::tensor::Tensor4;

const INIT_SALT: u64 = 0x1217;

/// One convolution's kernel (out_ch x in_ch x k x k) and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParam<T: Real> {
    pub w: Tensor4<T>,
    pub b: Vec<T>,
}

impl<T: Real> ConvParam<T> {
    fn zeros(oc: usize, ic: usize, k: usize) -> ConvParam<T> {
        ConvParam { w: Tensor4::zeros(oc, ic, k, k), b: vec![T::zero(); oc] }
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// All network parameters. The flattened order (encoder blocks from the
/// surface down, each conv as kernel-then-bias; decoder blocks from the
/// bottom up as up-conv, conv1, conv2; then the final 1x1) is the on-disk
/// and optimizer order.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T: Real> {
    pub depth: usize,
    pub base_channels: usize,
    /// Per resolution level: two 3x3 convs.
    pub enc: Vec<[ConvParam<T>; 2]>,
    /// Per upsampling level: post-upsample conv, then two 3x3 convs after
    /// the skip concatenation.
    pub dec: Vec<[ConvParam<T>; 3]>,
    /// 1x1 projection to a single logit channel.
    pub final_conv: ConvParam<T>,
}

/// Channel width of encoder level `d`.
fn level_channels(base: usize, d: usize) -> usize {
    base << d
}

impl<T: Real> UNetParams<T> {
    /// All-zero parameters for the given architecture.
    pub fn zeros(depth: usize, base_channels: usize) -> Result<UNetParams<T>> {
        if depth == 0 || base_channels == 0 {
            return Err(Error::invalid("depth and base channels must be positive"));
        }
        let mut enc = Vec::with_capacity(depth);
        for d in 0..depth {
            let cin = if d == 0 { 1 } else { level_channels(base_channels, d - 1) };
            let cout = level_channels(base_channels, d);
            enc.push([ConvParam::zeros(cout, cin, 3), ConvParam::zeros(cout, cout, 3)]);
        }
        let mut dec = Vec::with_capacity(depth);
        for j in 0..depth {
            let cin = if j == 0 {
                level_channels(base_channels, depth - 1)
            } else {
                level_channels(base_channels, depth - j)
            };
            let cskip = level_channels(base_channels, depth - 1 - j);
            dec.push([
                ConvParam::zeros(cskip, cin, 3),
                ConvParam::zeros(cskip, 2 * cskip, 3),
                ConvParam::zeros(cskip, cskip, 3),
            ]);
        }
        let final_conv = ConvParam::zeros(1, base_channels, 1);
        Ok(UNetParams { depth, base_channels, enc, dec, final_conv })
    }

    /// Seeded He-uniform initialization: kernels uniform in
    /// +-sqrt(6 / fan_in), biases zero. Identical parameters for identical
    /// (seed, architecture).
    pub fn init_he_uniform(depth: usize, base_channels: usize, seed: u64) -> Result<UNetParams<T>> {
        let mut p = UNetParams::zeros(depth, base_channels)?;
        let mut rng = StreamRng::from_parts(seed, &[INIT_SALT]);
        p.for_each_conv_mut(|conv| {
            let fan_in = (conv.w.c * conv.w.h * conv.w.w) as f64;
            let limit = (6.0 / fan_in).sqrt();
            for v in conv.w.data_mut() {
                *v = T::of(rng.uniform_in(-limit, limit));
            }
        });
        Ok(p)
    }

    fn for_each_conv_mut<F: FnMut(&mut ConvParam<T>)>(&mut self, mut f: F) {
        for block in &mut self.enc {
            for conv in block.iter_mut() {
                f(conv);
            }
        }
        for block in &mut self.dec {
            for conv in block.iter_mut() {
                f(conv);
            }
        }
        f(&mut self.final_conv);
    }

    fn convs(&self) -> Vec<&ConvParam<T>> {
        let mut out = Vec::new();
        for block in &self.enc {
            out.extend(block.iter());
        }
        for block in &self.dec {
            out.extend(block.iter());
        }
        out.push(&self.final_conv);
        out
    }

    /// Total parameter count.
    pub fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.len()).sum()
    }

    /// Parameters in the canonical flat order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for conv in self.convs() {
            out.extend_from_slice(conv.w.data());
            out.extend_from_slice(&conv.b);
        }
        out
    }

    /// Overwrite all parameters from a flat slice in canonical order.
    pub fn assign_from_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut pos = 0;
        self.for_each_conv_mut(|conv| {
            let wl = conv.w.len();
            conv.w.data_mut().copy_from_slice(&flat[pos..pos + wl]);
            pos += wl;
            let bl = conv.b.len();
            conv.b.copy_from_slice(&flat[pos..pos + bl]);
            pos += bl;
        });
        Ok(())
    }

    pub fn convert<U: Real>(&self) -> UNetParams<U> {
        let conv = |c: &ConvParam<T>| ConvParam {
            w: c.w.convert::<U>(),
            b: c.b.iter().map(|v| U::of(v.as_f64())).collect(),
        };
        UNetParams {
            depth: self.depth,
            base_channels: self.base_channels,
            enc: self.enc.iter().map(|b| [conv(&b[0]), conv(&b[1])]).collect(),
            dec: self.dec.iter().map(|b| [conv(&b[0]), conv(&b[1]), conv(&b[2])]).collect(),
            final_conv: conv(&self.final_conv),
        }
    }
}

/// Cache of one conv -> ReLU -> instance-norm unit.
struct ConvUnitCache<T: Real> {
    x: Tensor4<T>,
    pre_relu: Tensor4<T>,
    norm: InstanceNormCache<T>,
}

fn conv_unit_forward<T: Real>(
    x: &Tensor4<T>,
    p: &ConvParam<T>,
) -> Result<(Tensor4<T>, ConvUnitCache<T>)> {
    let pre_relu = conv2d_forward(x, &p.w, &p.b)?;
    let activated = relu_forward(&pre_relu);
    let norm = instance_norm_forward(&activated, INSTANCE_NORM_EPS);
    let out = norm.y.clone();
    Ok((out, ConvUnitCache { x: x.clone(), pre_relu, norm }))
}

fn conv_unit_backward<T: Real>(
    p: &ConvParam<T>,
    cache: &ConvUnitCache<T>,
    gout: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Vec<T>)> {
    let g_norm = instance_norm_backward(&cache.norm, gout)?;
    let g_act = relu_backward(&cache.pre_relu, &g_norm)?;
    conv2d_backward(&cache.x, &p.w, &g_act)
}

struct EncCache<T: Real> {
    unit1: ConvUnitCache<T>,
    unit2: ConvUnitCache<T>,
    pool_in_shape: (usize, usize, usize, usize),
    argmax: Vec<u32>,
}

struct DecCache<T: Real> {
    up_in_shape: (usize, usize, usize, usize),
    unit_up: ConvUnitCache<T>,
    dec_shape: (usize, usize, usize, usize),
    skip_shape: (usize, usize, usize, usize),
    unit1: ConvUnitCache<T>,
    unit2: ConvUnitCache<T>,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct UNetCache<T: Real> {
    enc: Vec<EncCache<T>>,
    dec: Vec<DecCache<T>>,
    final_in: Tensor4<T>,
}

/// Forward pass: single-channel image batch to single-channel logit batch
/// of the same spatial size.
pub fn unet_forward<T: Real>(
    params: &UNetParams<T>,
    x: &Tensor4<T>,
) -> Result<(Tensor4<T>, UNetCache<T>)> {
    if x.c != 1 {
        return Err(Error::invalid("network input must have one channel"));
    }
    let min = 1usize << params.depth;
    if x.h < min || x.w < min {
        return Err(Error::invalid(format!(
            "input {}x{} too small for depth {} (needs >= {min} per side)",
            x.h, x.w, params.depth
        )));
    }
    let mut enc_caches = Vec::with_capacity(params.depth);
    let mut skips: Vec<Tensor4<T>> = Vec::with_capacity(params.depth);
    let mut cur = x.clone();
    for block in &params.enc {
        let (a, unit1) = conv_unit_forward(&cur, &block[0])?;
        let (skip, unit2) = conv_unit_forward(&a, &block[1])?;
        let (pooled, argmax) = maxpool2x2_forward(&skip);
        enc_caches.push(EncCache { unit1, unit2, pool_in_shape: skip.shape(), argmax });
        skips.push(skip);
        cur = pooled;
    }
    let mut dec_caches = Vec::with_capacity(params.depth);
    for (j, block) in params.dec.iter().enumerate() {
        let up_in_shape = cur.shape();
        let up = upsample_bilinear2x_forward(&cur);
        let (dec_t, unit_up) = conv_unit_forward(&up, &block[0])?;
        let skip = &skips[params.depth - 1 - j];
        let cat = concat_pad_forward(&dec_t, skip)?;
        let (a, unit1) = conv_unit_forward(&cat, &block[1])?;
        let (out, unit2) = conv_unit_forward(&a, &block[2])?;
        dec_caches.push(DecCache {
            up_in_shape,
            unit_up,
            dec_shape: dec_t.shape(),
            skip_shape: skip.shape(),
            unit1,
            unit2,
        });
        cur = out;
    }
    let logits = conv2d_forward(&cur, &params.final_conv.w, &params.final_conv.b)?;
    Ok((logits, UNetCache { enc: enc_caches, dec: dec_caches, final_in: cur }))
}

/// Backward pass: parameter gradients (same structure as the parameters)
/// and the gradient with respect to the input image.
pub fn unet_backward<T: Real>(
    params: &UNetParams<T>,
    cache: &UNetCache<T>,
    g_logits: &Tensor4<T>,
) -> Result<(UNetParams<T>, Tensor4<T>)> {
    let mut grads = UNetParams::zeros(params.depth, params.base_channels)?;
    let (mut gcur, gw_f, gb_f) =
        conv2d_backward(&cache.final_in, &params.final_conv.w, g_logits)?;
    grads.final_conv = ConvParam {
        w: Tensor4::new(
            params.final_conv.w.n,
            params.final_conv.w.c,
            1,
            1,
            gw_f.data().to_vec(),
        )?,
        b: gb_f,
    };
    // Decoder in reverse; collect the gradients flowing into each skip.
    let mut gskips: Vec<Option<Tensor4<T>>> = (0..params.depth).map(|_| None).collect();
    for j in (0..params.depth).rev() {
        let dc = &cache.dec[j];
        let block = &params.dec[j];
        let (g_a, gw2, gb2) = conv_unit_backward(&block[2], &dc.unit2, &gcur)?;
        grads.dec[j][2] = ConvParam { w: gw2, b: gb2 };
        let (g_cat, gw1, gb1) = conv_unit_backward(&block[1], &dc.unit1, &g_a)?;
        grads.dec[j][1] = ConvParam { w: gw1, b: gb1 };
        let (g_dec_t, g_skip) = concat_pad_backward(dc.dec_shape, dc.skip_shape, &g_cat)?;
        gskips[params.depth - 1 - j] = Some(g_skip);
        let (g_up, gw_up, gb_up) = conv_unit_backward(&block[0], &dc.unit_up, &g_dec_t)?;
        grads.dec[j][0] = ConvParam { w: gw_up, b: gb_up };
        gcur = upsample_bilinear2x_backward(dc.up_in_shape, &g_up)?;
    }
    // Encoder in reverse; each skip receives the pooled path plus its
    // decoder contribution.
    for d in (0..params.depth).rev() {
        let ec = &cache.enc[d];
        let block = &params.enc[d];
        let mut g_skip = maxpool2x2_backward(ec.pool_in_shape, &ec.argmax, &gcur)?;
        if let Some(extra) = &gskips[d] {
            g_skip.add_assign(extra)?;
        }
        let (g_a, gw2, gb2) = conv_unit_backward(&block[1], &ec.unit2, &g_skip)?;
        grads.enc[d][1] = ConvParam { w: gw2, b: gb2 };
        let (g_in, gw1, gb1) = conv_unit_backward(&block[0], &ec.unit1, &g_a)?;
        grads.enc[d][0] = ConvParam { w: gw1, b: gb1 };
        gcur = g_in;
    }
    Ok((grads, gcur))
}
