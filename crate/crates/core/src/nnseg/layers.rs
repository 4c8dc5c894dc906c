//! Network building blocks with explicit forward and backward passes:
//! same-padding 2D convolution, ReLU, instance normalization, 2x2 max
//! pooling, 2x bilinear upsampling, and padded channel concatenation.
//! Every backward pass is verified against central finite differences.

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::tensor::Tensor4;

/// Same-padding convolution with an odd square kernel
/// (`w`: out_ch x in_ch x k x k), stride 1, zero padding of (k-1)/2.
pub fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    b: &[T],
) -> Result<Tensor4<T>> {
    let k = w.h;
    if w.w != k || k % 2 == 0 {
        return Err(Error::invalid("kernel must be square with odd size"));
    }
    if w.c != x.c {
        return Err(Error::DimMismatch(format!(
            "kernel expects {} input channels, tensor has {}",
            w.c, x.c
        )));
    }
    if b.len() != w.n {
        return Err(Error::DimMismatch("bias length must equal output channels".into()));
    }
    let r = (k / 2) as isize;
    let (h, wid) = (x.h, x.w);
    let mut out = Tensor4::zeros(x.n, w.n, h, wid);
    for n in 0..x.n {
        for oc in 0..w.n {
            let bias = b[oc];
            for y in 0..h {
                for xx in 0..wid {
                    let mut acc = bias;
                    for ic in 0..x.c {
                        for ky in 0..k {
                            let sy = y as isize + ky as isize - r;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let sx = xx as isize + kx as isize - r;
                                if sx < 0 || sx >= wid as isize {
                                    continue;
                                }
                                acc += w.at(oc, ic, ky, kx)
                                    * x.at(n, ic, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.set(n, oc, y, xx, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel, and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    gout: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>, Vec<T>)> {
    let k = w.h;
    let r = (k / 2) as isize;
    if gout.n != x.n || gout.c != w.n || gout.h != x.h || gout.w != x.w {
        return Err(Error::DimMismatch("upstream gradient shape mismatch".into()));
    }
    let (h, wid) = (x.h, x.w);
    let mut gx = Tensor4::zeros(x.n, x.c, h, wid);
    let mut gw = Tensor4::zeros(w.n, w.c, k, k);
    let mut gb = vec![T::zero(); w.n];
    for n in 0..x.n {
        for oc in 0..w.n {
            for y in 0..h {
                for xx in 0..wid {
                    let g = gout.at(n, oc, y, xx);
                    if g == T::zero() {
                        continue;
                    }
                    gb[oc] += g;
                    for ic in 0..x.c {
                        for ky in 0..k {
                            let sy = y as isize + ky as isize - r;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let sx = xx as isize + kx as isize - r;
                                if sx < 0 || sx >= wid as isize {
                                    continue;
                                }
                                let gwi = gw.idx(oc, ic, ky, kx);
                                gw.data_mut()[gwi] += g * x.at(n, ic, sy as usize, sx as usize);
                                let gxi = gx.idx(n, ic, sy as usize, sx as usize);
                                gx.data_mut()[gxi] += g * w.at(oc, ic, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Elementwise `max(0, x)`.
pub fn relu_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// ReLU gradient: passes where the forward input was strictly positive.
pub fn relu_backward<T: Real>(x: &Tensor4<T>, gout: &Tensor4<T>) -> Result<Tensor4<T>> {
    if x.shape() != gout.shape() {
        return Err(Error::DimMismatch("relu gradient shape mismatch".into()));
    }
    let mut g = gout.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *gv = T::zero();
        }
    }
    Ok(g)
}

/// Per-(sample, channel) standardization state for the backward pass.
#[derive(Debug, Clone)]
pub struct InstanceNormCache<T: Real> {
    /// Normalized output (mean 0, variance 1 per plane).
    pub y: Tensor4<T>,
    /// `1 / sqrt(var + eps)` per (sample, channel) plane.
    pub inv_std: Vec<T>,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Instance normalization without learned affine parameters: each
/// (sample, channel) plane is shifted to mean 0 and scaled to unit
/// variance (biased variance estimate, stabilized by `eps`).
pub fn instance_norm_forward<T: Real>(x: &Tensor4<T>, eps: f64) -> InstanceNormCache<T> {
    let m = (x.h * x.w) as f64;
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.n * x.c);
    for n in 0..x.n {
        for c in 0..x.c {
            let plane = x.plane(n, c);
            let mean = plane.iter().copied().sum::<T>().as_f64() / m;
            let var = plane.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / m;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(T::of(inv));
            let base = (n * x.c + c) * x.h * x.w;
            for (i, &v) in plane.iter().enumerate() {
                y.data_mut()[base + i] = T::of((v.as_f64() - mean) * inv);
            }
        }
    }
    InstanceNormCache { y, inv_std }
}

/// Instance-norm gradient, including the mean and variance terms:
/// `gx = inv_std * (g - mean(g) - y * mean(g*y))` per plane.
pub fn instance_norm_backward<T: Real>(
    cache: &InstanceNormCache<T>,
    gout: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let y = &cache.y;
    if y.shape() != gout.shape() {
        return Err(Error::DimMismatch("norm gradient shape mismatch".into()));
    }
    let m = (y.h * y.w) as f64;
    let mut gx = Tensor4::zeros(y.n, y.c, y.h, y.w);
    for n in 0..y.n {
        for c in 0..y.c {
            let yp = y.plane(n, c);
            let gp = gout.plane(n, c);
            let mean_g = gp.iter().copied().sum::<T>().as_f64() / m;
            let mean_gy =
                gp.iter().zip(yp).map(|(&g, &yv)| g.as_f64() * yv.as_f64()).sum::<f64>() / m;
            let inv = cache.inv_std[n * y.c + c].as_f64();
            let base = (n * y.c + c) * y.h * y.w;
            for i in 0..yp.len() {
                let v = inv * (gp[i].as_f64() - mean_g - yp[i].as_f64() * mean_gy);
                gx.data_mut()[base + i] = T::of(v);
            }
        }
    }
    Ok(gx)
}

/// 2x2 max pooling with floor semantics (odd trailing row/column dropped).
/// Returns the pooled tensor and the flat input index of each selected
/// maximum (first occurrence in scan order wins ties).
pub fn maxpool2x2_forward<T: Real>(x: &Tensor4<T>) -> (Tensor4<T>, Vec<u32>) {
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Tensor4::zeros(x.n, x.c, h2, w2);
    let mut arg = vec![0u32; x.n * x.c * h2 * w2];
    let mut oi = 0;
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let mut best = x.at(n, c, 2 * y, 2 * xx);
                    let mut best_idx = x.idx(n, c, 2 * y, 2 * xx);
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x.at(n, c, 2 * y + dy, 2 * xx + dx);
                            if v > best {
                                best = v;
                                best_idx = x.idx(n, c, 2 * y + dy, 2 * xx + dx);
                            }
                        }
                    }
                    out.set(n, c, y, xx, best);
                    arg[oi] = best_idx as u32;
                    oi += 1;
                }
            }
        }
    }
    (out, arg)
}

/// Max-pool gradient: routes each upstream value to its argmax position.
pub fn maxpool2x2_backward<T: Real>(
    x_shape: (usize, usize, usize, usize),
    argmax: &[u32],
    gout: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let (n, c, h, w) = x_shape;
    if argmax.len() != gout.len() {
        return Err(Error::DimMismatch("argmax length mismatch".into()));
    }
    let mut gx = Tensor4::zeros(n, c, h, w);
    for (i, &src) in argmax.iter().enumerate() {
        gx.data_mut()[src as usize] += gout.data()[i];
    }
    Ok(gx)
}

/// Source coordinate and interpolation weights for one upsampled index
/// under half-pixel-center doubling: `src = (o + 0.5)/2 - 0.5`, clamped.
#[inline]
fn up2_src(o: usize, len: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear 2x upsampling with half-pixel-center sampling (no corner
/// alignment): output pixel `o` reads input coordinate `(o + 0.5)/2 - 0.5`
/// per axis, clamped at the borders.
pub fn upsample_bilinear2x_forward<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let (h2, w2) = (2 * x.h, 2 * x.w);
    let mut out = Tensor4::zeros(x.n, x.c, h2, w2);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..h2 {
                let (y0, y1, fy) = up2_src(y, x.h);
                for xx in 0..w2 {
                    let (x0, x1, fx) = up2_src(xx, x.w);
                    let v = x.at(n, c, y0, x0).as_f64() * (1.0 - fy) * (1.0 - fx)
                        + x.at(n, c, y0, x1).as_f64() * (1.0 - fy) * fx
                        + x.at(n, c, y1, x0).as_f64() * fy * (1.0 - fx)
                        + x.at(n, c, y1, x1).as_f64() * fy * fx;
                    out.set(n, c, y, xx, T::of(v));
                }
            }
        }
    }
    out
}

/// Adjoint of the bilinear upsampling: scatter each upstream value back to
/// its source corners with the same weights.
pub fn upsample_bilinear2x_backward<T: Real>(
    in_shape: (usize, usize, usize, usize),
    gout: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let (n, c, h, w) = in_shape;
    if gout.n != n || gout.c != c || gout.h != 2 * h || gout.w != 2 * w {
        return Err(Error::DimMismatch("upsample gradient shape mismatch".into()));
    }
    let mut gx = Tensor4::zeros(n, c, h, w);
    for nn in 0..n {
        for cc in 0..c {
            for y in 0..gout.h {
                let (y0, y1, fy) = up2_src(y, h);
                for xx in 0..gout.w {
                    let (x0, x1, fx) = up2_src(xx, w);
                    let g = gout.at(nn, cc, y, xx).as_f64();
                    let mut scatter = |yy: usize, xv: usize, wgt: f64| {
                        let idx = gx.idx(nn, cc, yy, xv);
                        gx.data_mut()[idx] += T::of(g * wgt);
                    };
                    scatter(y0, x0, (1.0 - fy) * (1.0 - fx));
                    scatter(y0, x1, (1.0 - fy) * fx);
                    scatter(y1, x0, fy * (1.0 - fx));
                    scatter(y1, x1, fy * fx);
                }
            }
        }
    }
    Ok(gx)
}

/// Zero-pad the decoder tensor on the right/bottom to the skip tensor's
/// spatial size, then concatenate channels as [decoder, skip].
pub fn concat_pad_forward<T: Real>(dec: &Tensor4<T>, skip: &Tensor4<T>) -> Result<Tensor4<T>> {
    if dec.n != skip.n {
        return Err(Error::DimMismatch("batch sizes differ".into()));
    }
    if dec.h > skip.h || dec.w > skip.w {
        return Err(Error::DimMismatch("decoder tensor larger than skip tensor".into()));
    }
    let (h, w) = (skip.h, skip.w);
    let mut out = Tensor4::zeros(dec.n, dec.c + skip.c, h, w);
    for n in 0..dec.n {
        for c in 0..dec.c {
            for y in 0..dec.h {
                for xx in 0..dec.w {
                    out.set(n, c, y, xx, dec.at(n, c, y, xx));
                }
            }
        }
        for c in 0..skip.c {
            for y in 0..h {
                for xx in 0..w {
                    out.set(n, dec.c + c, y, xx, skip.at(n, c, y, xx));
                }
            }
        }
    }
    Ok(out)
}

/// Split the concatenation gradient back into (decoder, skip) parts,
/// cropping the decoder part to its original size.
pub fn concat_pad_backward<T: Real>(
    dec_shape: (usize, usize, usize, usize),
    skip_shape: (usize, usize, usize, usize),
    gout: &Tensor4<T>,
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    let (n, cd, hd, wd) = dec_shape;
    let (_, cs, hs, ws) = skip_shape;
    if gout.n != n || gout.c != cd + cs || gout.h != hs || gout.w != ws {
        return Err(Error::DimMismatch("concat gradient shape mismatch".into()));
    }
    let mut gdec = Tensor4::zeros(n, cd, hd, wd);
    let mut gskip = Tensor4::zeros(n, cs, hs, ws);
    for nn in 0..n {
        for c in 0..cd {
            for y in 0..hd {
                for xx in 0..wd {
                    gdec.set(nn, c, y, xx, gout.at(nn, c, y, xx));
                }
            }
        }
        for c in 0..cs {
            for y in 0..hs {
                for xx in 0..ws {
                    gskip.set(nn, c, y, xx, gout.at(nn, cd + c, y, xx));
                }
            }
        }
    }
    Ok((gdec, gskip))
}
