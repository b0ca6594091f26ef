//! Deformable 2D convolution: every kernel tap reads a bilinearly
//! interpolated value at its offset-displaced location.
//!
//! With all offsets zero the sampled positions are exactly the integer grid
//! of a standard zero-padded convolution, so the op reduces to `conv2d`.
//!
//! The kernels process one (input-channel, tap) plane at a time: the sampled
//! plane is materialized once and streamed into every output channel with
//! unit stride.

use crate::ops::linalg::conv_output_size;
use crate::tape::{BufId, Op, Tape};
use crate::{Error, Result};

/// Deformable convolution, stride 1.
///
/// `x (B, Cin, H, W)`, `w (Cout, Cin, kh, kw)`, `b (Cout)`, and
/// `offsets (B, 2K, Ho, Wo)` with `K = kh*kw`, channel pairs `(2k, 2k+1)`
/// holding `(d_row, d_col)` in pixels for tap `k` (row-major over the
/// kernel). One offset group is shared across channels.
pub fn deform_conv2d(tape: &mut Tape, x: BufId, w: BufId, b: BufId, offsets: BufId, pad: usize) -> Result<BufId> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    let os = tape.shape(offsets).to_vec();
    if xs.len() != 4 || ws.len() != 4 || os.len() != 4 {
        return Err(Error::config("deform_conv2d: x, w, offsets must be rank 4"));
    }
    if xs[1] != ws[1] {
        return Err(Error::config(format!(
            "deform_conv2d: input channels {} do not match kernel input channels {}",
            xs[1], ws[1]
        )));
    }
    if tape.numel(b) != ws[0] {
        return Err(Error::config(format!(
            "deform_conv2d: bias length {} does not match output channels {}",
            tape.numel(b),
            ws[0]
        )));
    }
    let k = ws[2] * ws[3];
    let oh = conv_output_size(xs[2], ws[2], 1, pad);
    let ow = conv_output_size(xs[3], ws[3], 1, pad);
    if os[1] != 2 * k {
        return Err(Error::config(format!(
            "deform_conv2d: offset field has {} channels, kernel with {k} taps needs {}",
            os[1],
            2 * k
        )));
    }
    if os[0] != xs[0] || os[2] != oh || os[3] != ow {
        return Err(Error::config(format!(
            "deform_conv2d: offset field shape {os:?} does not match output ({}, {}, {oh}, {ow})",
            xs[0],
            2 * k
        )));
    }
    let xs4 = [xs[0], xs[1], xs[2], xs[3]];
    let ws4 = [ws[0], ws[1], ws[2], ws[3]];
    let data = deform_conv2d_forward(tape.value(x), tape.value(w), tape.value(b), tape.value(offsets), xs4, ws4, pad);
    Ok(tape.push_op(vec![xs[0], ws[0], oh, ow], data, |out| Op::DeformConv2d { x, w, b, offsets, out, pad }))
}

/// Bilinearly sample one channel plane at tap positions displaced by the
/// tap's offset pair; positions and corner data are recomputed identically
/// in forward and backward.
#[allow(clippy::too_many_arguments)]
fn sample_plane(
    x: &[f64],
    xbase: usize,
    h: usize,
    wd: usize,
    off_r: &[f64],
    off_c: &[f64],
    ki: usize,
    kj: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    plane: &mut [f64],
) {
    for oi in 0..oh {
        let row_base = oi * ow;
        for oj in 0..ow {
            let pos = row_base + oj;
            let r = (oi + ki) as f64 - pad as f64 + off_r[pos];
            let c = (oj + kj) as f64 - pad as f64 + off_c[pos];
            let r0 = r.floor();
            let c0 = c.floor();
            let (tr, tc) = (r - r0, c - c0);
            let (r0i, c0i) = (r0 as isize, c0 as isize);
            let mut v = 0.0;
            if r0i >= 0 && r0i < h as isize {
                let row = xbase + r0i as usize * wd;
                if c0i >= 0 && c0i < wd as isize {
                    v += (1.0 - tr) * (1.0 - tc) * x[row + c0i as usize];
                }
                if c0i + 1 >= 0 && c0i + 1 < wd as isize {
                    v += (1.0 - tr) * tc * x[row + (c0i + 1) as usize];
                }
            }
            if r0i + 1 >= 0 && r0i + 1 < h as isize {
                let row = xbase + (r0i + 1) as usize * wd;
                if c0i >= 0 && c0i < wd as isize {
                    v += tr * (1.0 - tc) * x[row + c0i as usize];
                }
                if c0i + 1 >= 0 && c0i + 1 < wd as isize {
                    v += tr * tc * x[row + (c0i + 1) as usize];
                }
            }
            plane[pos] = v;
        }
    }
}

pub(crate) fn deform_conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    off: &[f64],
    xs: [usize; 4],
    ws: [usize; 4],
    pad: usize,
) -> Vec<f64> {
    let [bn, cin, h, wd] = xs;
    let [cout, _, kh, kw] = ws;
    let k = kh * kw;
    let oh = conv_output_size(h, kh, 1, pad);
    let ow = conv_output_size(wd, kw, 1, pad);
    let ohw = oh * ow;
    let mut out = vec![0.0; bn * cout * ohw];
    let mut plane = vec![0.0; ohw];
    for b in 0..bn {
        for o in 0..cout {
            let obase = (b * cout + o) * ohw;
            out[obase..obase + ohw].iter_mut().for_each(|v| *v = bias[o]);
        }
        let offb = b * 2 * k * ohw;
        for ki in 0..kh {
            for kj in 0..kw {
                let kk = ki * kw + kj;
                let off_r = &off[offb + (2 * kk) * ohw..offb + (2 * kk + 1) * ohw];
                let off_c = &off[offb + (2 * kk + 1) * ohw..offb + (2 * kk + 2) * ohw];
                for ci in 0..cin {
                    sample_plane(x, (b * cin + ci) * h * wd, h, wd, off_r, off_c, ki, kj, pad, oh, ow, &mut plane);
                    for o in 0..cout {
                        let wv = w[((o * cin + ci) * kh + ki) * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        let orow = &mut out[(b * cout + o) * ohw..(b * cout + o + 1) * ohw];
                        for (ov, pv) in orow.iter_mut().zip(plane.iter()) {
                            *ov += wv * pv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn deform_conv2d_backward(
    x: &[f64],
    w: &[f64],
    off: &[f64],
    g: &[f64],
    xs: [usize; 4],
    ws: [usize; 4],
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let [bn, cin, h, wd] = xs;
    let [cout, _, kh, kw] = ws;
    let k = kh * kw;
    let oh = conv_output_size(h, kh, 1, pad);
    let ow = conv_output_size(wd, kw, 1, pad);
    let ohw = oh * ow;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    let mut doff = vec![0.0; off.len()];
    let mut plane = vec![0.0; ohw];
    let mut gw_plane = vec![0.0; ohw];
    for b in 0..bn {
        for o in 0..cout {
            let obase = (b * cout + o) * ohw;
            db[o] += g[obase..obase + ohw].iter().sum::<f64>();
        }
        let offb = b * 2 * k * ohw;
        for ki in 0..kh {
            for kj in 0..kw {
                let kk = ki * kw + kj;
                let off_r = &off[offb + (2 * kk) * ohw..offb + (2 * kk + 1) * ohw];
                let off_c = &off[offb + (2 * kk + 1) * ohw..offb + (2 * kk + 2) * ohw];
                for ci in 0..cin {
                    let xbase = (b * cin + ci) * h * wd;
                    sample_plane(x, xbase, h, wd, off_r, off_c, ki, kj, pad, oh, ow, &mut plane);
                    // dw[o, ci, tap] = dot(g[o], plane);
                    // gw_plane = sum_o w[o, ci, tap] * g[o]
                    gw_plane.iter_mut().for_each(|v| *v = 0.0);
                    for o in 0..cout {
                        let grow = &g[(b * cout + o) * ohw..(b * cout + o + 1) * ohw];
                        let wv = w[((o * cin + ci) * kh + ki) * kw + kj];
                        let mut acc = 0.0;
                        if wv != 0.0 {
                            for ((gp, pv), gw) in grow.iter().zip(plane.iter()).zip(gw_plane.iter_mut()) {
                                acc += gp * pv;
                                *gw += wv * gp;
                            }
                        } else {
                            for (gp, pv) in grow.iter().zip(plane.iter()) {
                                acc += gp * pv;
                            }
                        }
                        dw[((o * cin + ci) * kh + ki) * kw + kj] += acc;
                    }
                    // scatter gw_plane through the bilinear weights
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let pos = oi * ow + oj;
                            let gw = gw_plane[pos];
                            if gw == 0.0 {
                                continue;
                            }
                            let r = (oi + ki) as f64 - pad as f64 + off_r[pos];
                            let c = (oj + kj) as f64 - pad as f64 + off_c[pos];
                            let r0 = r.floor();
                            let c0 = c.floor();
                            let (tr, tc) = (r - r0, c - c0);
                            let (r0i, c0i) = (r0 as isize, c0 as isize);
                            let fetch = |ri: isize, cj: isize| -> (f64, Option<usize>) {
                                if ri >= 0 && ri < h as isize && cj >= 0 && cj < wd as isize {
                                    let idx = xbase + (ri as usize) * wd + cj as usize;
                                    (x[idx], Some(idx))
                                } else {
                                    (0.0, None)
                                }
                            };
                            let (v00, i00) = fetch(r0i, c0i);
                            let (v01, i01) = fetch(r0i, c0i + 1);
                            let (v10, i10) = fetch(r0i + 1, c0i);
                            let (v11, i11) = fetch(r0i + 1, c0i + 1);
                            if let Some(i) = i00 {
                                dx[i] += gw * (1.0 - tr) * (1.0 - tc);
                            }
                            if let Some(i) = i01 {
                                dx[i] += gw * (1.0 - tr) * tc;
                            }
                            if let Some(i) = i10 {
                                dx[i] += gw * tr * (1.0 - tc);
                            }
                            if let Some(i) = i11 {
                                dx[i] += gw * tr * tc;
                            }
                            doff[offb + (2 * kk) * ohw + pos] +=
                                gw * (-(1.0 - tc) * v00 - tc * v01 + (1.0 - tc) * v10 + tc * v11);
                            doff[offb + (2 * kk + 1) * ohw + pos] +=
                                gw * (-(1.0 - tr) * v00 + (1.0 - tr) * v01 - tr * v10 + tr * v11);
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db, doff)
}
