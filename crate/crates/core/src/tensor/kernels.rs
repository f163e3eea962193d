//! Raw compute kernels shared by the tape's forward and backward passes.
//! Convolution lowers to im2col + GEMM; the column buffer is rebuilt in the
//! backward pass instead of being stored, trading FLOPs for memory.

use super::scalar::Scalar;

/// Output spatial size of a convolution along one axis.
pub fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfold one image `[C, H, W]` into columns `[C*K*K, Ho*Wo]` (row-major).
/// Out-of-bounds taps read as zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(col.len(), c * k * k * ho * wo);
    let n = ho * wo;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ci * k + ki) * k + kj) * n..((ci * k + ki) * k + kj + 1) * n];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let out = &mut row[oh * wo..(oh + 1) * wo];
                    if ih < 0 || ih >= h as isize {
                        for v in out.iter_mut() {
                            *v = T::ZERO;
                        }
                        continue;
                    }
                    let xrow = &xc[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, v) in out.iter_mut().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        *v = if iw < 0 || iw >= w as isize { T::ZERO } else { xrow[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Fold columns `[C*K*K, Ho*Wo]` back into an image `[C, H, W]`,
/// accumulating into `dx` (the adjoint of [`im2col`]).
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<T: Scalar>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    debug_assert_eq!(dx.len(), c * h * w);
    let n = ho * wo;
    for ci in 0..c {
        let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ci * k + ki) * k + kj) * n..((ci * k + ki) * k + kj + 1) * n];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dxrow = &mut dxc[ih as usize * w..(ih as usize + 1) * w];
                    let src = &row[oh * wo..(oh + 1) * wo];
                    for (ow, &v) in src.iter().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && iw < w as isize {
                            dxrow[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 average pooling with stride 2 over `[B, C, H, W]`; H and W must be even.
pub fn avg_pool2<T: Scalar>(x: &[T], bc: usize, h: usize, w: usize, y: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    for i in 0..bc {
        let xp = &x[i * h * w..(i + 1) * h * w];
        let yp = &mut y[i * ho * wo..(i + 1) * ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                let base = (2 * oh) * w + 2 * ow;
                yp[oh * wo + ow] =
                    (xp[base] + xp[base + 1] + xp[base + w] + xp[base + w + 1]) * quarter;
            }
        }
    }
}

/// Adjoint of [`avg_pool2`]: spread each output gradient over its 2x2 window.
pub fn avg_pool2_back<T: Scalar>(dy: &[T], bc: usize, h: usize, w: usize, dx: &mut [T]) {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    for i in 0..bc {
        let dyp = &dy[i * ho * wo..(i + 1) * ho * wo];
        let dxp = &mut dx[i * h * w..(i + 1) * h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let g = dyp[oh * wo + ow] * quarter;
                let base = (2 * oh) * w + 2 * ow;
                dxp[base] += g;
                dxp[base + 1] += g;
                dxp[base + w] += g;
                dxp[base + w + 1] += g;
            }
        }
    }
}

/// Nearest-neighbour 2x upsampling over `[B, C, H, W]`.
pub fn upsample_nearest2<T: Scalar>(x: &[T], bc: usize, h: usize, w: usize, y: &mut [T]) {
    let (ho, wo) = (2 * h, 2 * w);
    for i in 0..bc {
        let xp = &x[i * h * w..(i + 1) * h * w];
        let yp = &mut y[i * ho * wo..(i + 1) * ho * wo];
        for oh in 0..ho {
            let ih = oh / 2;
            for ow in 0..wo {
                yp[oh * wo + ow] = xp[ih * w + ow / 2];
            }
        }
    }
}

/// Adjoint of [`upsample_nearest2`]: sum each 2x2 block of output gradients.
pub fn upsample_nearest2_back<T: Scalar>(dy: &[T], bc: usize, h: usize, w: usize, dx: &mut [T]) {
    let wo = 2 * w;
    for i in 0..bc {
        let dyp = &dy[i * 4 * h * w..(i + 1) * 4 * h * w];
        let dxp = &mut dx[i * h * w..(i + 1) * h * w];
        for ih in 0..h {
            for iw in 0..w {
                let base = (2 * ih) * wo + 2 * iw;
                dxp[ih * w + iw] +=
                    dyp[base] + dyp[base + 1] + dyp[base + wo] + dyp[base + wo + 1];
            }
        }
    }
}

/// Per-slice mean and inverse standard deviation over contiguous chunks of
/// length `chunk` (used by both group and layer normalization). Statistics
/// accumulate in f64 so f32 and f64 runs agree to f32 precision.
pub fn norm_stats<T: Scalar>(x: &[T], chunk: usize, eps: f64, mean: &mut [T], invstd: &mut [T]) {
    debug_assert_eq!(x.len(), chunk * mean.len());
    for (i, (m, s)) in mean.iter_mut().zip(invstd.iter_mut()).enumerate() {
        let part = &x[i * chunk..(i + 1) * chunk];
        let mu: f64 = part.iter().map(|v| v.to_f64()).sum::<f64>() / chunk as f64;
        let var: f64 =
            part.iter().map(|v| (v.to_f64() - mu) * (v.to_f64() - mu)).sum::<f64>() / chunk as f64;
        *m = T::from_f64(mu);
        *s = T::from_f64(1.0 / (var + eps).sqrt());
    }
}
