//! Spatial resampling: bilinear up/down-sampling and differentiable
//! point sampling for the deformable operators.

use crate::tape::{BufId, Op, Tape};
use crate::{Error, Result};

/// Bilinear upsampling by an integer factor, align-corners-false.
/// Border samples clamp to the edge, so constant maps stay constant.
pub fn upsample_bilinear(tape: &mut Tape, x: BufId, factor: usize) -> Result<BufId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || factor == 0 {
        return Err(Error::config(format!("upsample_bilinear: bad shape {s:?} or factor {factor}")));
    }
    let [b, c, h, w] = [s[0], s[1], s[2], s[3]];
    let (oh, ow) = (h * factor, w * factor);
    let xv = tape.value(x);
    let mut data = vec![0.0; b * c * oh * ow];
    let weights_h = axis_weights(h, factor);
    let weights_w = axis_weights(w, factor);
    for bi in 0..b {
        for ci in 0..c {
            let xb = (bi * c + ci) * h * w;
            let ob = (bi * c + ci) * oh * ow;
            for oi in 0..oh {
                let (i0, i1, ti) = weights_h[oi];
                for oj in 0..ow {
                    let (j0, j1, tj) = weights_w[oj];
                    let v = (1.0 - ti) * ((1.0 - tj) * xv[xb + i0 * w + j0] + tj * xv[xb + i0 * w + j1])
                        + ti * ((1.0 - tj) * xv[xb + i1 * w + j0] + tj * xv[xb + i1 * w + j1]);
                    data[ob + oi * ow + oj] = v;
                }
            }
        }
    }
    Ok(tape.push_op(vec![b, c, oh, ow], data, |out| Op::UpsampleBilinear { x, out, factor }))
}

/// `(low index, high index, weight on high)` per destination index.
fn axis_weights(n: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let on = n * factor;
    (0..on)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let i0f = src.floor();
            let t = src - i0f;
            let i0 = (i0f.max(0.0) as usize).min(n - 1);
            let i1 = ((i0f + 1.0).max(0.0) as usize).min(n - 1);
            (i0, i1, t)
        })
        .collect()
}

pub(crate) fn upsample_bilinear_backward(g: &[f64], xs: [usize; 4], factor: usize) -> Vec<f64> {
    let [b, c, h, w] = xs;
    let (oh, ow) = (h * factor, w * factor);
    let mut dx = vec![0.0; b * c * h * w];
    let weights_h = axis_weights(h, factor);
    let weights_w = axis_weights(w, factor);
    for bi in 0..b {
        for ci in 0..c {
            let xb = (bi * c + ci) * h * w;
            let ob = (bi * c + ci) * oh * ow;
            for oi in 0..oh {
                let (i0, i1, ti) = weights_h[oi];
                for oj in 0..ow {
                    let (j0, j1, tj) = weights_w[oj];
                    let gv = g[ob + oi * ow + oj];
                    dx[xb + i0 * w + j0] += gv * (1.0 - ti) * (1.0 - tj);
                    dx[xb + i0 * w + j1] += gv * (1.0 - ti) * tj;
                    dx[xb + i1 * w + j0] += gv * ti * (1.0 - tj);
                    dx[xb + i1 * w + j1] += gv * ti * tj;
                }
            }
        }
    }
    dx
}

/// Non-overlapping mean pooling by an integer factor.
pub fn downsample_avg(tape: &mut Tape, x: BufId, factor: usize) -> Result<BufId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || factor == 0 {
        return Err(Error::config(format!("downsample: bad shape {s:?} or factor {factor}")));
    }
    let [b, c, h, w] = [s[0], s[1], s[2], s[3]];
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::config(format!("downsample: {h}x{w} not divisible by factor {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let xv = tape.value(x);
    let mut data = vec![0.0; b * c * oh * ow];
    for bi in 0..b {
        for ci in 0..c {
            let xb = (bi * c + ci) * h * w;
            let ob = (bi * c + ci) * oh * ow;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut s = 0.0;
                    for di in 0..factor {
                        for dj in 0..factor {
                            s += xv[xb + (oi * factor + di) * w + oj * factor + dj];
                        }
                    }
                    data[ob + oi * ow + oj] = s * inv;
                }
            }
        }
    }
    Ok(tape.push_op(vec![b, c, oh, ow], data, |out| Op::DownsampleAvg { x, out, factor }))
}

pub(crate) fn downsample_avg_backward(g: &[f64], xs: [usize; 4], factor: usize) -> Vec<f64> {
    let [b, c, h, w] = xs;
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut dx = vec![0.0; b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let xb = (bi * c + ci) * h * w;
            let ob = (bi * c + ci) * oh * ow;
            for oi in 0..oh {
                for oj in 0..ow {
                    let gv = g[ob + oi * ow + oj] * inv;
                    for di in 0..factor {
                        for dj in 0..factor {
                            dx[xb + (oi * factor + di) * w + oj * factor + dj] += gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

// ── Point sampling ───────────────────────────────────────────────────

/// Bilinear interpolation of `x (B, C, H, W)` at continuous `(row, col)`
/// positions `points (B, P, 2)`. Out-of-bounds neighbors contribute zero.
/// Output is `(B, C, P, 1)` so downstream 1x1 convolutions treat the sampled
/// set as a feature map over P positions.
pub fn bilinear_sample(tape: &mut Tape, x: BufId, points: BufId) -> Result<BufId> {
    let xs = tape.shape(x).to_vec();
    let ps = tape.shape(points).to_vec();
    if xs.len() != 4 {
        return Err(Error::config("bilinear_sample: x must be rank 4"));
    }
    if ps.len() != 3 || ps[2] != 2 || ps[0] != xs[0] {
        return Err(Error::config(format!(
            "bilinear_sample: points must be (batch, P, 2) with batch {}, got {ps:?}",
            xs[0]
        )));
    }
    if tape.value(points).iter().any(|v| !v.is_finite()) {
        return Err(Error::input("bilinear_sample: non-finite point coordinates"));
    }
    let [b, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
    let p = ps[1];
    let xv = tape.value(x);
    let pv = tape.value(points);
    let mut data = vec![0.0; b * c * p];
    for bi in 0..b {
        for pi in 0..p {
            let r = pv[(bi * p + pi) * 2];
            let cc = pv[(bi * p + pi) * 2 + 1];
            let corners = corner_weights(r, cc, h, w);
            for ci in 0..c {
                let xb = (bi * c + ci) * h * w;
                let mut v = 0.0;
                for &(idx, wt) in corners.iter().flatten() {
                    v += wt * xv[xb + idx];
                }
                data[(bi * c + ci) * p + pi] = v;
            }
        }
    }
    Ok(tape.push_op(vec![b, c, p, 1], data, |out| Op::BilinearSample { x, points, out }))
}

/// Up to four `(flat index, weight)` pairs for the in-bounds corners around
/// a continuous `(row, col)` position.
#[inline]
fn corner_weights(r: f64, c: f64, h: usize, w: usize) -> [Option<(usize, f64)>; 4] {
    let r0 = r.floor();
    let c0 = c.floor();
    let tr = r - r0;
    let tc = c - c0;
    let (r0i, c0i) = (r0 as isize, c0 as isize);
    let mut out = [None; 4];
    let mut put = |slot: usize, ri: isize, ci: isize, wt: f64| {
        if ri >= 0 && ri < h as isize && ci >= 0 && ci < w as isize {
            out[slot] = Some(((ri as usize) * w + ci as usize, wt));
        }
    };
    put(0, r0i, c0i, (1.0 - tr) * (1.0 - tc));
    put(1, r0i, c0i + 1, (1.0 - tr) * tc);
    put(2, r0i + 1, c0i, tr * (1.0 - tc));
    put(3, r0i + 1, c0i + 1, tr * tc);
    out
}

pub(crate) fn bilinear_sample_backward(
    x: &[f64],
    points: &[f64],
    g: &[f64],
    xs: [usize; 4],
    ps: [usize; 4],
) -> (Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = xs;
    let p = ps[1];
    let mut dx = vec![0.0; x.len()];
    let mut dpoints = vec![0.0; b * p * 2];
    for bi in 0..b {
        for pi in 0..p {
            let r = points[(bi * p + pi) * 2];
            let cc = points[(bi * p + pi) * 2 + 1];
            let r0 = r.floor();
            let c0 = cc.floor();
            let tr = r - r0;
            let tc = cc - c0;
            let (r0i, c0i) = (r0 as isize, c0 as isize);
            let fetch = |ri: isize, ci: isize, xb: usize| -> (f64, Option<usize>) {
                if ri >= 0 && ri < h as isize && ci >= 0 && ci < w as isize {
                    let idx = (ri as usize) * w + ci as usize;
                    (x[xb + idx], Some(idx))
                } else {
                    (0.0, None)
                }
            };
            let mut dr = 0.0;
            let mut dc = 0.0;
            for ci in 0..c {
                let xb = (bi * c + ci) * h * w;
                let gv = g[(bi * c + ci) * p + pi];
                if gv == 0.0 {
                    continue;
                }
                let (v00, i00) = fetch(r0i, c0i, xb);
                let (v01, i01) = fetch(r0i, c0i + 1, xb);
                let (v10, i10) = fetch(r0i + 1, c0i, xb);
                let (v11, i11) = fetch(r0i + 1, c0i + 1, xb);
                if let Some(i) = i00 {
                    dx[xb + i] += gv * (1.0 - tr) * (1.0 - tc);
                }
                if let Some(i) = i01 {
                    dx[xb + i] += gv * (1.0 - tr) * tc;
                }
                if let Some(i) = i10 {
                    dx[xb + i] += gv * tr * (1.0 - tc);
                }
                if let Some(i) = i11 {
                    dx[xb + i] += gv * tr * tc;
                }
                dr += gv * (-(1.0 - tc) * v00 - tc * v01 + (1.0 - tc) * v10 + tc * v11);
                dc += gv * (-(1.0 - tr) * v00 + (1.0 - tr) * v01 - tr * v10 + tr * v11);
            }
            dpoints[(bi * p + pi) * 2] = dr;
            dpoints[(bi * p + pi) * 2 + 1] = dc;
        }
    }
    (dx, dpoints)
}

/// Turn a `(B, 2K, h, w)` offset field into absolute sampling points
/// `(B, K*h*w, 2)` by adding a constant base grid (the fixed sampling
/// locations the offsets displace). `base` is `K*h*w*2` long, shared across
/// the batch, ordered `(k, i, j, axis)`.
pub fn offsets_to_points(tape: &mut Tape, offsets: BufId, base: &[f64]) -> Result<BufId> {
    let s = tape.shape(offsets).to_vec();
    if s.len() != 4 || s[1] % 2 != 0 {
        return Err(Error::config(format!("offsets_to_points: offsets must be (B, 2K, h, w), got {s:?}")));
    }
    let [b, c2, h, w] = [s[0], s[1], s[2], s[3]];
    let k = c2 / 2;
    let p = k * h * w;
    if base.len() != p * 2 {
        return Err(Error::config(format!(
            "offsets_to_points: base grid has {} entries, expected {}",
            base.len(),
            p * 2
        )));
    }
    let ov = tape.value(offsets);
    let mut data = vec![0.0; b * p * 2];
    for bi in 0..b {
        for ki in 0..k {
            for i in 0..h {
                for j in 0..w {
                    let pi = (ki * h + i) * w + j;
                    let dst = (bi * p + pi) * 2;
                    data[dst] = base[pi * 2] + ov[((bi * c2 + 2 * ki) * h + i) * w + j];
                    data[dst + 1] = base[pi * 2 + 1] + ov[((bi * c2 + 2 * ki + 1) * h + i) * w + j];
                }
            }
        }
    }
    Ok(tape.push_op(vec![b, p, 2], data, |out| Op::OffsetsToPoints { offsets, out }))
}

pub(crate) fn offsets_to_points_backward(g: &[f64], os: [usize; 4]) -> Vec<f64> {
    let [b, c2, h, w] = os;
    let k = c2 / 2;
    let p = k * h * w;
    let mut doff = vec![0.0; b * c2 * h * w];
    for bi in 0..b {
        for ki in 0..k {
            for i in 0..h {
                for j in 0..w {
                    let pi = (ki * h + i) * w + j;
                    let src = (bi * p + pi) * 2;
                    doff[((bi * c2 + 2 * ki) * h + i) * w + j] = g[src];
                    doff[((bi * c2 + 2 * ki + 1) * h + i) * w + j] = g[src + 1];
                }
            }
        }
    }
    doff
}
