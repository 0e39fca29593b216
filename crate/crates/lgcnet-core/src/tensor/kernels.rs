//! Flat-buffer kernels for the tape ops.
//!
//! All feature maps are `(C, H, W)` row-major `f64` slices. Every kernel has
//! a fixed iteration order; nothing here is allowed to depend on thread
//! count or allocation addresses.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Output extent of a padded convolution / pooling window.
#[inline]
pub fn conv_out_extent(n: usize, k: usize, stride: usize, dilation: usize, pad: usize) -> usize {
    (n + 2 * pad - dilation * (k - 1) - 1) / stride + 1
}

// ─── dense convolution ──────────────────────────────────────────────────────

/// `out (cout,oh,ow) += conv(x (cin,h,w), w (cout,cin,k,k))`, `out` zeroed by caller.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let oh = conv_out_extent(h, k, stride, dilation, pad);
    let ow = conv_out_extent(w, k, stride, dilation, pad);
    debug_assert_eq!(out.len(), cout * oh * ow);
    for co in 0..cout {
        let out_c = &mut out[co * oh * ow..(co + 1) * oh * ow];
        if let Some(b) = bias {
            out_c.fill(b[co]);
        }
        for ci in 0..cin {
            let x_c = &x[ci * h * w..(ci + 1) * h * w];
            let w_base = ((co * cin) + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wgt[w_base + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    accumulate_tap(x_c, h, w, oh, ow, stride, dilation, pad, ky, kx, wv, out_c);
                }
            }
        }
    }
}

/// Adds `wv * x[iy, ix]` into every valid output position for one kernel tap.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_tap(
    x_c: &[f64],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    ky: usize,
    kx: usize,
    wv: f64,
    out_c: &mut [f64],
) {
    let dy = (ky * dilation) as isize - pad as isize;
    let dx = (kx * dilation) as isize - pad as isize;
    for oy in 0..oh {
        let iy = oy as isize * stride as isize + dy;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let x_row = &x_c[iy as usize * w..(iy as usize + 1) * w];
        let out_row = &mut out_c[oy * ow..(oy + 1) * ow];
        // valid ox range: 0 <= ox*stride + dx < w
        let ox_lo = if dx < 0 {
            ((-dx) as usize).div_ceil(stride)
        } else {
            0
        };
        let ox_hi = {
            let lim = w as isize - dx; // ox*stride < lim
            if lim <= 0 {
                0
            } else {
                usize::min(ow, ((lim - 1) as usize) / stride + 1)
            }
        };
        if stride == 1 {
            let base = dx;
            for ox in ox_lo..ox_hi {
                out_row[ox] += wv * x_row[(ox as isize + base) as usize];
            }
        } else {
            for ox in ox_lo..ox_hi {
                out_row[ox] += wv * x_row[(ox as isize * stride as isize + dx) as usize];
            }
        }
    }
}

/// Gradient w.r.t. the convolution input; `dx` accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_x(
    dout: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let oh = conv_out_extent(h, k, stride, dilation, pad);
    let ow = conv_out_extent(w, k, stride, dilation, pad);
    for co in 0..cout {
        let dout_c = &dout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let dx_c = &mut dx[ci * h * w..(ci + 1) * h * w];
            let w_base = ((co * cin) + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wgt[w_base + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    scatter_tap(dout_c, h, w, oh, ow, stride, dilation, pad, ky, kx, wv, dx_c);
                }
            }
        }
    }
}

/// Adds `wv * dout[oy, ox]` into the input positions that fed each output.
#[allow(clippy::too_many_arguments)]
#[inline]
fn scatter_tap(
    dout_c: &[f64],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    ky: usize,
    kx: usize,
    wv: f64,
    dx_c: &mut [f64],
) {
    let dy = (ky * dilation) as isize - pad as isize;
    let dx_off = (kx * dilation) as isize - pad as isize;
    for oy in 0..oh {
        let iy = oy as isize * stride as isize + dy;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let dout_row = &dout_c[oy * ow..(oy + 1) * ow];
        let dx_row = &mut dx_c[iy as usize * w..(iy as usize + 1) * w];
        for (ox, &g) in dout_row.iter().enumerate() {
            let ix = ox as isize * stride as isize + dx_off;
            if ix >= 0 && ix < w as isize {
                dx_row[ix as usize] += wv * g;
            }
        }
    }
}

/// Gradient w.r.t. the convolution weights; `dw` accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_w(
    dout: &[f64],
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
    dw: &mut [f64],
) {
    let oh = conv_out_extent(h, k, stride, dilation, pad);
    let ow = conv_out_extent(w, k, stride, dilation, pad);
    for co in 0..cout {
        let dout_c = &dout[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let x_c = &x[ci * h * w..(ci + 1) * h * w];
            let w_base = ((co * cin) + ci) * k * k;
            for ky in 0..k {
                let dy = (ky * dilation) as isize - pad as isize;
                for kx in 0..k {
                    let dxo = (kx * dilation) as isize - pad as isize;
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = oy as isize * stride as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_c[iy as usize * w..(iy as usize + 1) * w];
                        let dout_row = &dout_c[oy * ow..(oy + 1) * ow];
                        for (ox, &g) in dout_row.iter().enumerate() {
                            let ix = ox as isize * stride as isize + dxo;
                            if ix >= 0 && ix < w as isize {
                                acc += g * x_row[ix as usize];
                            }
                        }
                    }
                    dw[w_base + ky * k + kx] += acc;
                }
            }
        }
    }
}

/// Gradient w.r.t. a per-output-channel bias.
pub fn conv2d_bwd_b(dout: &[f64], cout: usize, ohw: usize, db: &mut [f64]) {
    for co in 0..cout {
        let mut acc = 0.0;
        for &g in &dout[co * ohw..(co + 1) * ohw] {
            acc += g;
        }
        db[co] += acc;
    }
}

// ─── depthwise convolution (3×3) ────────────────────────────────────────────

pub fn dwconv3_fwd(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    wgt: &[f64], // (c, 3, 3)
    stride: usize,
    dilation: usize,
    out: &mut [f64],
) {
    let pad = dilation;
    let oh = conv_out_extent(h, 3, stride, dilation, pad);
    let ow = conv_out_extent(w, 3, stride, dilation, pad);
    for ci in 0..c {
        let x_c = &x[ci * h * w..(ci + 1) * h * w];
        let out_c = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for ky in 0..3 {
            for kx in 0..3 {
                let wv = wgt[ci * 9 + ky * 3 + kx];
                accumulate_tap(x_c, h, w, oh, ow, stride, dilation, pad, ky, kx, wv, out_c);
            }
        }
    }
}

pub fn dwconv3_bwd_x(
    dout: &[f64],
    c: usize,
    h: usize,
    w: usize,
    wgt: &[f64],
    stride: usize,
    dilation: usize,
    dx: &mut [f64],
) {
    let pad = dilation;
    let oh = conv_out_extent(h, 3, stride, dilation, pad);
    let ow = conv_out_extent(w, 3, stride, dilation, pad);
    for ci in 0..c {
        let dout_c = &dout[ci * oh * ow..(ci + 1) * oh * ow];
        let dx_c = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let wv = wgt[ci * 9 + ky * 3 + kx];
                if wv == 0.0 {
                    continue;
                }
                scatter_tap(dout_c, h, w, oh, ow, stride, dilation, pad, ky, kx, wv, dx_c);
            }
        }
    }
}

pub fn dwconv3_bwd_w(
    dout: &[f64],
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    dilation: usize,
    dw: &mut [f64],
) {
    let pad = dilation;
    let oh = conv_out_extent(h, 3, stride, dilation, pad);
    let ow = conv_out_extent(w, 3, stride, dilation, pad);
    for ci in 0..c {
        let dout_c = &dout[ci * oh * ow..(ci + 1) * oh * ow];
        let x_c = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            let dy = (ky * dilation) as isize - pad as isize;
            for kx in 0..3 {
                let dxo = (kx * dilation) as isize - pad as isize;
                let mut acc = 0.0;
                for oy in 0..oh {
                    let iy = oy as isize * stride as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = &x_c[iy as usize * w..(iy as usize + 1) * w];
                    let dout_row = &dout_c[oy * ow..(oy + 1) * ow];
                    for (ox, &g) in dout_row.iter().enumerate() {
                        let ix = ox as isize * stride as isize + dxo;
                        if ix >= 0 && ix < w as isize {
                            acc += g * x_row[ix as usize];
                        }
                    }
                }
                dw[ci * 9 + ky * 3 + kx] += acc;
            }
        }
    }
}

// ─── transposed convolution (2×2, stride 2) ─────────────────────────────────

/// Exact ×2 upsampling transposed convolution: every output pixel draws from
/// exactly one input pixel. Weight layout `(cin, cout, 2, 2)`.
pub fn tconv2_fwd(x: &[f64], cin: usize, h: usize, w: usize, wgt: &[f64], cout: usize, out: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for co in 0..cout {
        let out_c = &mut out[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let x_c = &x[ci * h * w..(ci + 1) * h * w];
            let wb = (ci * cout + co) * 4;
            for oy in 0..oh {
                let iy = oy / 2;
                let ky = oy % 2;
                let x_row = &x_c[iy * w..(iy + 1) * w];
                let out_row = &mut out_c[oy * ow..(oy + 1) * ow];
                let w0 = wgt[wb + ky * 2];
                let w1 = wgt[wb + ky * 2 + 1];
                for ix in 0..w {
                    let xv = x_row[ix];
                    out_row[2 * ix] += w0 * xv;
                    out_row[2 * ix + 1] += w1 * xv;
                }
            }
        }
    }
}

pub fn tconv2_bwd_x(dout: &[f64], cin: usize, h: usize, w: usize, wgt: &[f64], cout: usize, dx: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ci in 0..cin {
        let dx_c = &mut dx[ci * h * w..(ci + 1) * h * w];
        for co in 0..cout {
            let dout_c = &dout[co * oh * ow..(co + 1) * oh * ow];
            let wb = (ci * cout + co) * 4;
            for oy in 0..oh {
                let iy = oy / 2;
                let ky = oy % 2;
                let dout_row = &dout_c[oy * ow..(oy + 1) * ow];
                let dx_row = &mut dx_c[iy * w..(iy + 1) * w];
                let w0 = wgt[wb + ky * 2];
                let w1 = wgt[wb + ky * 2 + 1];
                for ix in 0..w {
                    dx_row[ix] += w0 * dout_row[2 * ix] + w1 * dout_row[2 * ix + 1];
                }
            }
        }
    }
}

pub fn tconv2_bwd_w(dout: &[f64], x: &[f64], cin: usize, h: usize, w: usize, cout: usize, dw: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ci in 0..cin {
        let x_c = &x[ci * h * w..(ci + 1) * h * w];
        for co in 0..cout {
            let dout_c = &dout[co * oh * ow..(co + 1) * oh * ow];
            let wb = (ci * cout + co) * 4;
            let mut acc = [0.0f64; 4];
            for oy in 0..oh {
                let iy = oy / 2;
                let ky = oy % 2;
                let x_row = &x_c[iy * w..(iy + 1) * w];
                let dout_row = &dout_c[oy * ow..(oy + 1) * ow];
                for ix in 0..w {
                    let xv = x_row[ix];
                    acc[ky * 2] += dout_row[2 * ix] * xv;
                    acc[ky * 2 + 1] += dout_row[2 * ix + 1] * xv;
                }
            }
            for (t, a) in acc.iter().enumerate() {
                dw[wb + t] += a;
            }
        }
    }
}

// ─── pooling ────────────────────────────────────────────────────────────────

/// 3×3 max pooling, padding 1. Records the flat argmax per output for backward.
pub fn maxpool3_fwd(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    out: &mut [f64],
    argmax: &mut Vec<u32>,
) {
    let oh = conv_out_extent(h, 3, stride, 1, 1);
    let ow = conv_out_extent(w, 3, stride, 1, 1);
    argmax.clear();
    argmax.reserve(c * oh * ow);
    for ci in 0..c {
        let x_c = &x[ci * h * w..(ci + 1) * h * w];
        let out_c = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        let v = x_c[idx];
                        if v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                out_c[oy * ow + ox] = best;
                argmax.push((ci * h * w + best_idx) as u32);
            }
        }
    }
}

pub fn maxpool3_bwd(dout: &[f64], argmax: &[u32], dx: &mut [f64]) {
    for (&g, &idx) in dout.iter().zip(argmax.iter()) {
        dx[idx as usize] += g;
    }
}

/// Adaptive average pooling band boundaries (same partition rule as the usual
/// framework convention: `start = floor(i*n/o)`, `end = ceil((i+1)*n/o)`).
#[inline]
fn adaptive_band(i: usize, n: usize, o: usize) -> (usize, usize) {
    ((i * n) / o, ((i + 1) * n + o - 1) / o)
}

pub fn adaptive_avg_fwd(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut [f64]) {
    for ci in 0..c {
        let x_c = &x[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_band(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_band(ox, w, ow);
                let mut acc = 0.0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += x_c[iy * w + ix];
                    }
                }
                out[ci * oh * ow + oy * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
}

pub fn adaptive_avg_bwd(dout: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
    for ci in 0..c {
        let dx_c = &mut dx[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_band(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_band(ox, w, ow);
                let g = dout[ci * oh * ow + oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        dx_c[iy * w + ix] += g;
                    }
                }
            }
        }
    }
}

// ─── bilinear resampling ────────────────────────────────────────────────────

/// Source taps for one destination coordinate (half-pixel convention).
#[inline]
fn bilinear_taps(dst: usize, src_n: usize, dst_n: usize) -> (usize, usize, f64) {
    let scale = src_n as f64 / dst_n as f64;
    let s = (dst as f64 + 0.5) * scale - 0.5;
    let s0 = math::floor(s);
    let frac = s - s0;
    let i0 = if s0 < 0.0 { 0 } else { s0 as usize };
    let i0 = i0.min(src_n - 1);
    let i1 = (i0 + 1).min(src_n - 1);
    // when s < 0 both taps clamp to 0; weight split is then irrelevant
    let frac = if s0 < 0.0 { 0.0 } else { frac };
    (i0, i1, frac)
}

pub fn bilinear_fwd(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut [f64]) {
    let mut xtaps = Vec::with_capacity(ow);
    for ox in 0..ow {
        xtaps.push(bilinear_taps(ox, w, ow));
    }
    for ci in 0..c {
        let x_c = &x[ci * h * w..(ci + 1) * h * w];
        let out_c = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_taps(oy, h, oh);
            let row0 = &x_c[y0 * w..(y0 + 1) * w];
            let row1 = &x_c[y1 * w..(y1 + 1) * w];
            let out_row = &mut out_c[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let top = row0[x0] * (1.0 - fx) + row0[x1] * fx;
                let bot = row1[x0] * (1.0 - fx) + row1[x1] * fx;
                out_row[ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
}

pub fn bilinear_bwd(dout: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
    let mut xtaps = Vec::with_capacity(ow);
    for ox in 0..ow {
        xtaps.push(bilinear_taps(ox, w, ow));
    }
    for ci in 0..c {
        let dx_c = &mut dx[ci * h * w..(ci + 1) * h * w];
        let dout_c = &dout[ci * oh * ow..(ci + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_taps(oy, h, oh);
            for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                let g = dout_c[oy * ow + ox];
                dx_c[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                dx_c[y0 * w + x1] += g * (1.0 - fy) * fx;
                dx_c[y1 * w + x0] += g * fy * (1.0 - fx);
                dx_c[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}

// ─── normalization ──────────────────────────────────────────────────────────

pub const BN_EPS: f64 = 1e-5;

/// Per-channel normalization over the spatial extent with affine transform.
/// Returns the biased variance which backward needs via `invstd`.
pub fn bn_train_fwd(
    x: &[f64],
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    out: &mut [f64],
    mean: &mut Vec<f64>,
    invstd: &mut Vec<f64>,
) {
    mean.clear();
    invstd.clear();
    let n = hw as f64;
    for ci in 0..c {
        let x_c = &x[ci * hw..(ci + 1) * hw];
        let mut m = 0.0;
        for &v in x_c {
            m += v;
        }
        m /= n;
        let mut var = 0.0;
        for &v in x_c {
            let d = v - m;
            var += d * d;
        }
        var /= n;
        let istd = 1.0 / math::sqrt(var + BN_EPS);
        let (g, b) = (gamma[ci], beta[ci]);
        let out_c = &mut out[ci * hw..(ci + 1) * hw];
        for (o, &v) in out_c.iter_mut().zip(x_c.iter()) {
            *o = (v - m) * istd * g + b;
        }
        mean.push(m);
        invstd.push(istd);
    }
}

/// Standard batch-norm backward from saved `(mean, invstd)`.
#[allow(clippy::too_many_arguments)]
pub fn bn_train_bwd(
    dout: &[f64],
    x: &[f64],
    c: usize,
    hw: usize,
    gamma: &[f64],
    mean: &[f64],
    invstd: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let n = hw as f64;
    for ci in 0..c {
        let x_c = &x[ci * hw..(ci + 1) * hw];
        let dout_c = &dout[ci * hw..(ci + 1) * hw];
        let (m, istd, g) = (mean[ci], invstd[ci], gamma[ci]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for (&dy, &xv) in dout_c.iter().zip(x_c.iter()) {
            sum_dy += dy;
            sum_dy_xhat += dy * (xv - m) * istd;
        }
        dgamma[ci] += sum_dy_xhat;
        dbeta[ci] += sum_dy;
        let dx_c = &mut dx[ci * hw..(ci + 1) * hw];
        let k = g * istd / n;
        for ((d, &dy), &xv) in dx_c.iter_mut().zip(dout_c.iter()).zip(x_c.iter()) {
            let xhat = (xv - m) * istd;
            *d += k * (n * dy - sum_dy - xhat * sum_dy_xhat);
        }
    }
}

/// Inference-mode normalization: a fixed per-channel affine map.
pub fn bn_eval_fwd(
    x: &[f64],
    c: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    run_mean: &[f64],
    run_var: &[f64],
    out: &mut [f64],
) {
    for ci in 0..c {
        let istd = 1.0 / math::sqrt(run_var[ci] + BN_EPS);
        let scale = gamma[ci] * istd;
        let shift = beta[ci] - run_mean[ci] * scale;
        let x_c = &x[ci * hw..(ci + 1) * hw];
        let out_c = &mut out[ci * hw..(ci + 1) * hw];
        for (o, &v) in out_c.iter_mut().zip(x_c.iter()) {
            *o = v * scale + shift;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn bn_eval_bwd(
    dout: &[f64],
    x: &[f64],
    c: usize,
    hw: usize,
    gamma: &[f64],
    run_mean: &[f64],
    run_var: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    for ci in 0..c {
        let istd = 1.0 / math::sqrt(run_var[ci] + BN_EPS);
        let scale = gamma[ci] * istd;
        let dout_c = &dout[ci * hw..(ci + 1) * hw];
        let x_c = &x[ci * hw..(ci + 1) * hw];
        let dx_c = &mut dx[ci * hw..(ci + 1) * hw];
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for ((d, &dy), &xv) in dx_c.iter_mut().zip(dout_c.iter()).zip(x_c.iter()) {
            *d += dy * scale;
            sum_dy += dy;
            sum_dy_xhat += dy * (xv - run_mean[ci]) * istd;
        }
        dgamma[ci] += sum_dy_xhat;
        dbeta[ci] += sum_dy;
    }
}

// ─── small dense algebra ────────────────────────────────────────────────────

/// `out (n,m) = a (n,k) * b (k,m)`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    out.fill(0.0);
    for i in 0..n {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * m..(kk + 1) * m];
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let x_r = &x[r * cols..(r + 1) * cols];
        let out_r = &mut out[r * cols..(r + 1) * cols];
        let mut mx = f64::NEG_INFINITY;
        for &v in x_r {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for (o, &v) in out_r.iter_mut().zip(x_r.iter()) {
            let e = math::exp(v - mx);
            *o = e;
            sum += e;
        }
        for o in out_r.iter_mut() {
            *o /= sum;
        }
    }
}

/// Softmax backward from the saved output: `dx = (dy - sum(dy*s)) * s` per row.
pub fn softmax_rows_bwd(dout: &[f64], s: &[f64], rows: usize, cols: usize, dx: &mut [f64]) {
    for r in 0..rows {
        let s_r = &s[r * cols..(r + 1) * cols];
        let dy_r = &dout[r * cols..(r + 1) * cols];
        let mut dot = 0.0;
        for (&dy, &sv) in dy_r.iter().zip(s_r.iter()) {
            dot += dy * sv;
        }
        let dx_r = &mut dx[r * cols..(r + 1) * cols];
        for ((d, &dy), &sv) in dx_r.iter_mut().zip(dy_r.iter()).zip(s_r.iter()) {
            *d += (dy - dot) * sv;
        }
    }
}

// ─── pixel-wise cross entropy ───────────────────────────────────────────────

/// Sum of per-pixel negative log-likelihoods over non-ignored pixels.
/// `logits` is `(k, h*w)` channel-major; labels are class indices or `ignore`.
/// Returns `(nll_sum, pixel_count)`.
pub fn ce_sum_fwd(logits: &[f64], k: usize, hw: usize, labels: &[u16], ignore: u16) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..hw {
        let y = labels[p];
        if y == ignore {
            continue;
        }
        let mut mx = f64::NEG_INFINITY;
        for c in 0..k {
            let v = logits[c * hw + p];
            if v > mx {
                mx = v;
            }
        }
        let mut lse = 0.0;
        for c in 0..k {
            lse += math::exp(logits[c * hw + p] - mx);
        }
        let lse = math::ln(lse) + mx;
        sum += lse - logits[y as usize * hw + p];
        count += 1;
    }
    (sum, count)
}

/// Backward of the NLL sum: `dlogits[c] += g * (softmax_c - [c == y])`.
pub fn ce_sum_bwd(logits: &[f64], k: usize, hw: usize, labels: &[u16], ignore: u16, g: f64, dlogits: &mut [f64]) {
    let mut probs = vec![0.0f64; k];
    for p in 0..hw {
        let y = labels[p];
        if y == ignore {
            continue;
        }
        let mut mx = f64::NEG_INFINITY;
        for c in 0..k {
            let v = logits[c * hw + p];
            if v > mx {
                mx = v;
            }
        }
        let mut sum = 0.0;
        for c in 0..k {
            let e = math::exp(logits[c * hw + p] - mx);
            probs[c] = e;
            sum += e;
        }
        for c in 0..k {
            let soft = probs[c] / sum;
            let t = if c == y as usize { 1.0 } else { 0.0 };
            dlogits[c * hw + p] += g * (soft - t);
        }
    }
}
