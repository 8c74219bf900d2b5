//! Raw convolution kernels. Hot path of the whole crate: 1x1 kernels are
//! plane-wide multiply-adds, 3-wide stride-1 kernels run fused three-tap row
//! loops with scalar edge handling, everything else falls back to generic
//! window loops. Work parallelizes over independent output (or input)
//! channels, which keeps results bitwise identical for any thread count.

use rayon::prelude::*;

pub(crate) struct ConvDims {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn new(
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<ConvDims> {
        let ho = out_extent(h, kh, stride, pad)?;
        let wo = out_extent(w, kw, stride, pad)?;
        Some(ConvDims {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }
}

fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Accumulate one kernel-row tap set into an output row for the window of
/// `ow` in [lo, hi).
#[inline]
fn row_taps(
    out_row: &mut [f64],
    in_row: &[f64],
    taps: &[f64],
    pad: usize,
    w: usize,
    lo: usize,
    hi: usize,
) {
    for (kj, &wgt) in taps.iter().enumerate() {
        let t_lo = pad.saturating_sub(kj).max(lo);
        let t_hi = (w + pad).saturating_sub(kj).min(hi);
        if t_lo >= t_hi {
            continue;
        }
        let src = &in_row[t_lo + kj - pad..t_hi + kj - pad];
        let dst = &mut out_row[t_lo..t_hi];
        for (a, &b) in dst.iter_mut().zip(src) {
            *a += wgt * b;
        }
    }
}

pub(crate) fn forward(input: &[f64], kernel: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.cout * d.ho * d.wo];
    let out_plane = d.ho * d.wo;
    let in_plane = d.h * d.w;
    let kper = d.cin * d.kh * d.kw;

    out.par_chunks_mut(out_plane).enumerate().for_each(|(co, plane)| {
        let kbase = co * kper;
        if d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0 {
            for ci in 0..d.cin {
                let wgt = kernel[kbase + ci];
                let src = &input[ci * in_plane..(ci + 1) * in_plane];
                for (dst, &s) in plane.iter_mut().zip(src) {
                    *dst += wgt * s;
                }
            }
        } else if d.stride == 1 && d.kw == 3 {
            // fused three-tap rows with scalar edges
            let lo = d.pad.min(d.wo);
            let hi = (d.w + d.pad).saturating_sub(2).min(d.wo).max(lo);
            for oh in 0..d.ho {
                let row = &mut plane[oh * d.wo..(oh + 1) * d.wo];
                for ci in 0..d.cin {
                    for ki in 0..d.kh {
                        let ih = oh + ki;
                        if ih < d.pad || ih - d.pad >= d.h {
                            continue;
                        }
                        let in_row = &input[ci * in_plane + (ih - d.pad) * d.w..][..d.w];
                        let taps = &kernel[kbase + ci * d.kh * 3 + ki * 3..][..3];
                        let (w0, w1, w2) = (taps[0], taps[1], taps[2]);
                        // interior: all three taps in frame
                        let n = hi - lo;
                        if n > 0 {
                            let dst = &mut row[lo..hi];
                            let src = &in_row[lo - d.pad..lo - d.pad + n + 2];
                            let (s0, s1, s2) = (&src[..n], &src[1..n + 1], &src[2..n + 2]);
                            for i in 0..n {
                                dst[i] += w0 * s0[i] + w1 * s1[i] + w2 * s2[i];
                            }
                        }
                        if lo > 0 {
                            row_taps(row, in_row, taps, d.pad, d.w, 0, lo);
                        }
                        if hi < d.wo {
                            row_taps(row, in_row, taps, d.pad, d.w, hi, d.wo);
                        }
                    }
                }
            }
        } else if d.stride == 1 {
            for oh in 0..d.ho {
                let row = &mut plane[oh * d.wo..(oh + 1) * d.wo];
                for ci in 0..d.cin {
                    for ki in 0..d.kh {
                        let ih = oh + ki;
                        if ih < d.pad || ih - d.pad >= d.h {
                            continue;
                        }
                        let in_row = &input[ci * in_plane + (ih - d.pad) * d.w..][..d.w];
                        let taps = &kernel[kbase + ci * d.kh * d.kw + ki * d.kw..][..d.kw];
                        row_taps(row, in_row, taps, d.pad, d.w, 0, d.wo);
                    }
                }
            }
        } else {
            for oh in 0..d.ho {
                for ow in 0..d.wo {
                    let mut acc = 0.0;
                    for ci in 0..d.cin {
                        for ki in 0..d.kh {
                            let ih = oh * d.stride + ki;
                            if ih < d.pad || ih - d.pad >= d.h {
                                continue;
                            }
                            for kj in 0..d.kw {
                                let iw = ow * d.stride + kj;
                                if iw < d.pad || iw - d.pad >= d.w {
                                    continue;
                                }
                                acc += kernel[kbase + ci * d.kh * d.kw + ki * d.kw + kj]
                                    * input[ci * in_plane + (ih - d.pad) * d.w + (iw - d.pad)];
                            }
                        }
                    }
                    plane[oh * d.wo + ow] = acc;
                }
            }
        }
    });
    out
}

/// Gradient with respect to the kernel: correlation of input with upstream.
pub(crate) fn backward_kernel(input: &[f64], upstream: &[f64], d: &ConvDims) -> Vec<f64> {
    let kper = d.cin * d.kh * d.kw;
    let mut grad = vec![0.0; d.cout * kper];
    let out_plane = d.ho * d.wo;
    let in_plane = d.h * d.w;

    grad.par_chunks_mut(kper).enumerate().for_each(|(co, g)| {
        let up = &upstream[co * out_plane..(co + 1) * out_plane];
        if d.stride == 1 && d.kw == 3 {
            let lo = d.pad.min(d.wo);
            let hi = (d.w + d.pad).saturating_sub(2).min(d.wo).max(lo);
            for ci in 0..d.cin {
                for ki in 0..d.kh {
                    // four independent accumulator lanes per tap so the
                    // reduction can use parallel FMA chains; lane order is
                    // fixed, so results do not depend on thread count
                    let mut lanes = [[0.0f64; 4]; 3];
                    let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                    for oh in 0..d.ho {
                        let ih = oh + ki;
                        if ih < d.pad || ih - d.pad >= d.h {
                            continue;
                        }
                        let in_row = &input[ci * in_plane + (ih - d.pad) * d.w..][..d.w];
                        let up_row = &up[oh * d.wo..(oh + 1) * d.wo];
                        let n = hi - lo;
                        if n > 0 {
                            let ups = &up_row[lo..hi];
                            let src = &in_row[lo - d.pad..lo - d.pad + n + 2];
                            let (s0, s1, s2) = (&src[..n], &src[1..n + 1], &src[2..n + 2]);
                            let mut i = 0;
                            while i + 4 <= n {
                                for lane in 0..4 {
                                    let u = ups[i + lane];
                                    lanes[0][lane] += u * s0[i + lane];
                                    lanes[1][lane] += u * s1[i + lane];
                                    lanes[2][lane] += u * s2[i + lane];
                                }
                                i += 4;
                            }
                            while i < n {
                                let u = ups[i];
                                a0 += u * s0[i];
                                a1 += u * s1[i];
                                a2 += u * s2[i];
                                i += 1;
                            }
                        }
                        // edges per tap
                        for (kj, acc) in [(0, &mut a0), (1, &mut a1), (2, &mut a2)] {
                            for range in [(0, lo), (hi, d.wo)] {
                                let t_lo = d.pad.saturating_sub(kj).max(range.0);
                                let t_hi = (d.w + d.pad).saturating_sub(kj).min(range.1);
                                for ow in t_lo..t_hi {
                                    *acc += up_row[ow] * in_row[ow + kj - d.pad];
                                }
                            }
                        }
                    }
                    let slot = &mut g[ci * d.kh * 3 + ki * 3..][..3];
                    slot[0] = a0 + lanes[0].iter().sum::<f64>();
                    slot[1] = a1 + lanes[1].iter().sum::<f64>();
                    slot[2] = a2 + lanes[2].iter().sum::<f64>();
                }
            }
        } else if d.stride == 1 {
            for ci in 0..d.cin {
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let mut acc = 0.0;
                        for oh in 0..d.ho {
                            let ih = oh + ki;
                            if ih < d.pad || ih - d.pad >= d.h {
                                continue;
                            }
                            let t_lo = d.pad.saturating_sub(kj);
                            let t_hi = (d.w + d.pad).saturating_sub(kj).min(d.wo);
                            if t_lo >= t_hi {
                                continue;
                            }
                            let up_row = &up[oh * d.wo + t_lo..oh * d.wo + t_hi];
                            let in_row = &input
                                [ci * in_plane + (ih - d.pad) * d.w + t_lo + kj - d.pad..][..t_hi - t_lo];
                            let mut dot = 0.0;
                            for (&a, &b) in up_row.iter().zip(in_row) {
                                dot += a * b;
                            }
                            acc += dot;
                        }
                        g[ci * d.kh * d.kw + ki * d.kw + kj] = acc;
                    }
                }
            }
        } else {
            for ci in 0..d.cin {
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let mut acc = 0.0;
                        for oh in 0..d.ho {
                            let ih = oh * d.stride + ki;
                            if ih < d.pad || ih - d.pad >= d.h {
                                continue;
                            }
                            for ow in 0..d.wo {
                                let iw = ow * d.stride + kj;
                                if iw < d.pad || iw - d.pad >= d.w {
                                    continue;
                                }
                                acc += up[oh * d.wo + ow]
                                    * input[ci * in_plane + (ih - d.pad) * d.w + (iw - d.pad)];
                            }
                        }
                        g[ci * d.kh * d.kw + ki * d.kw + kj] = acc;
                    }
                }
            }
        }
    });
    grad
}

/// Gradient with respect to the input: full correlation of upstream with the
/// flipped kernel, accumulated over output channels.
pub(crate) fn backward_input(kernel: &[f64], upstream: &[f64], d: &ConvDims) -> Vec<f64> {
    let in_plane = d.h * d.w;
    let out_plane = d.ho * d.wo;
    let kper = d.cin * d.kh * d.kw;
    let mut grad = vec![0.0; d.cin * in_plane];

    grad.par_chunks_mut(in_plane).enumerate().for_each(|(ci, g)| {
        if d.kh == 1 && d.kw == 1 && d.stride == 1 && d.pad == 0 {
            for co in 0..d.cout {
                let wgt = kernel[co * kper + ci];
                let up = &upstream[co * out_plane..(co + 1) * out_plane];
                for (dst, &u) in g.iter_mut().zip(up) {
                    *dst += wgt * u;
                }
            }
        } else if d.stride == 1 && d.kw == 3 {
            // d_in[iw] += sum_kj taps[kj] * up[iw + pad - kj]:
            // a three-tap correlation with flipped taps
            let lo = 2usize.saturating_sub(d.pad).min(d.w);
            let hi = (d.wo + 0).saturating_sub(d.pad).min(d.w).max(lo);
            for co in 0..d.cout {
                let up = &upstream[co * out_plane..(co + 1) * out_plane];
                for ki in 0..d.kh {
                    let taps = &kernel[co * kper + ci * d.kh * 3 + ki * 3..][..3];
                    let (w0, w1, w2) = (taps[0], taps[1], taps[2]);
                    for ih in 0..d.h {
                        let oh = ih + d.pad;
                        if oh < ki || oh - ki >= d.ho {
                            continue;
                        }
                        let up_row = &up[(oh - ki) * d.wo..(oh - ki + 1) * d.wo];
                        let g_row = &mut g[ih * d.w..(ih + 1) * d.w];
                        // interior: up indices iw+pad-2 .. iw+pad all valid
                        let n = hi - lo;
                        if n > 0 {
                            let dst = &mut g_row[lo..hi];
                            let src = &up_row[(lo + d.pad) - 2..(lo + d.pad) - 2 + n + 2];
                            let (s0, s1, s2) = (&src[..n], &src[1..n + 1], &src[2..n + 2]);
                            for i in 0..n {
                                dst[i] += w2 * s0[i] + w1 * s1[i] + w0 * s2[i];
                            }
                        }
                        for (kj, &wgt) in taps.iter().enumerate() {
                            for range in [(0, lo), (hi, d.w)] {
                                let t_lo = kj.saturating_sub(d.pad).max(range.0);
                                let t_hi = (d.wo + kj).saturating_sub(d.pad).min(range.1);
                                for iw in t_lo..t_hi {
                                    g_row[iw] += wgt * up_row[iw + d.pad - kj];
                                }
                            }
                        }
                    }
                }
            }
        } else if d.stride == 1 {
            for co in 0..d.cout {
                let up = &upstream[co * out_plane..(co + 1) * out_plane];
                for ki in 0..d.kh {
                    for ih in 0..d.h {
                        let oh = ih + d.pad;
                        if oh < ki || oh - ki >= d.ho {
                            continue;
                        }
                        let up_row = &up[(oh - ki) * d.wo..(oh - ki + 1) * d.wo];
                        let g_row = &mut g[ih * d.w..(ih + 1) * d.w];
                        for kj in 0..d.kw {
                            let wgt = kernel[co * kper + ci * d.kh * d.kw + ki * d.kw + kj];
                            let t_lo = kj.saturating_sub(d.pad);
                            let t_hi = (d.wo + kj).saturating_sub(d.pad).min(d.w);
                            if t_lo >= t_hi {
                                continue;
                            }
                            let src = &up_row[t_lo + d.pad - kj..t_hi + d.pad - kj];
                            let dst = &mut g_row[t_lo..t_hi];
                            for (a, &b) in dst.iter_mut().zip(src) {
                                *a += wgt * b;
                            }
                        }
                    }
                }
            }
        } else {
            for co in 0..d.cout {
                let up = &upstream[co * out_plane..(co + 1) * out_plane];
                for oh in 0..d.ho {
                    for ow in 0..d.wo {
                        let u = up[oh * d.wo + ow];
                        for ki in 0..d.kh {
                            let ih = oh * d.stride + ki;
                            if ih < d.pad || ih - d.pad >= d.h {
                                continue;
                            }
                            for kj in 0..d.kw {
                                let iw = ow * d.stride + kj;
                                if iw < d.pad || iw - d.pad >= d.w {
                                    continue;
                                }
                                g[(ih - d.pad) * d.w + (iw - d.pad)] +=
                                    u * kernel[co * kper + ci * d.kh * d.kw + ki * d.kw + kj];
                            }
                        }
                    }
                }
            }
        }
    });
    grad
}
