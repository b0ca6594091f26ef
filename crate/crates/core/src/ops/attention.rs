//! Scaled dot-product attention cores.
//!
//! `local_attention` restricts each query to the w x w neighborhood centered
//! on it, with the window clamped at borders so every query sees exactly
//! w x w keys. `cross_attention` lets every query attend over one shared
//! token set (the sampled reference points of deformable attention).
//! Projections are applied by the caller; these ops take Q/K/V directly.
//!
//! Internally each (batch, head) slab is transposed to position-major
//! `(positions, head_dim)` so every dot product and accumulation runs over
//! contiguous memory.

use crate::tape::{BufId, Op, Tape};
use crate::{Error, Result};

fn head_layout(tape: &Tape, q: BufId, heads: usize, what: &str) -> Result<([usize; 4], usize)> {
    let s = tape.shape(q).to_vec();
    if s.len() != 4 {
        return Err(Error::config(format!("{what}: queries must be rank 4")));
    }
    if heads == 0 || s[1] % heads != 0 {
        return Err(Error::config(format!(
            "{what}: channels {} not divisible by head count {heads}",
            s[1]
        )));
    }
    Ok(([s[0], s[1], s[2], s[3]], s[1] / heads))
}

/// Clamped window start so the window fits inside `[0, n)`.
#[inline]
fn window_start(i: usize, win: usize, n: usize) -> usize {
    let half = win / 2;
    let lo = i.saturating_sub(half);
    lo.min(n - win)
}

/// Gather one head slab into position-major `(positions, dh)`.
fn to_pos_major(src: &[f64], b: usize, c: usize, ch0: usize, dh: usize, hw: usize, dst: &mut [f64]) {
    for d in 0..dh {
        let chan = &src[(b * c + ch0 + d) * hw..(b * c + ch0 + d + 1) * hw];
        for (pos, v) in chan.iter().enumerate() {
            dst[pos * dh + d] = *v;
        }
    }
}

fn from_pos_major(src: &[f64], b: usize, c: usize, ch0: usize, dh: usize, hw: usize, dst: &mut [f64]) {
    for d in 0..dh {
        let chan = &mut dst[(b * c + ch0 + d) * hw..(b * c + ch0 + d + 1) * hw];
        for (pos, o) in chan.iter_mut().enumerate() {
            *o += src[pos * dh + d];
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Neighborhood attention over `(B, C, H, W)` maps.
pub fn local_attention(tape: &mut Tape, q: BufId, k: BufId, v: BufId, heads: usize, window: usize) -> Result<BufId> {
    let (shape, dh) = head_layout(tape, q, heads, "local_attention")?;
    let [b, c, h, w] = shape;
    if tape.shape(k) != tape.shape(q) || tape.shape(v) != tape.shape(q) {
        return Err(Error::config("local_attention: q/k/v shapes differ"));
    }
    if window % 2 == 0 || window == 0 {
        return Err(Error::config(format!("local_attention: window must be odd, got {window}")));
    }
    if window > h || window > w {
        return Err(Error::config(format!(
            "local_attention: window {window} larger than feature map {h}x{w}"
        )));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let hw = h * w;
    let wsq = window * window;
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    let mut out = vec![0.0; qv.len()];
    let mut probs = vec![0.0; b * heads * hw * wsq];
    let mut qt = vec![0.0; hw * dh];
    let mut kt = vec![0.0; hw * dh];
    let mut vt = vec![0.0; hw * dh];
    let mut ot = vec![0.0; hw * dh];
    let mut scores = vec![0.0; wsq];
    for bi in 0..b {
        for hd in 0..heads {
            let ch0 = hd * dh;
            to_pos_major(qv, bi, c, ch0, dh, hw, &mut qt);
            to_pos_major(kv, bi, c, ch0, dh, hw, &mut kt);
            to_pos_major(vv, bi, c, ch0, dh, hw, &mut vt);
            ot.iter_mut().for_each(|o| *o = 0.0);
            for i in 0..h {
                let si = window_start(i, window, h);
                for j in 0..w {
                    let sj = window_start(j, window, w);
                    let pos = i * w + j;
                    let qrow = &qt[pos * dh..(pos + 1) * dh];
                    let mut mx = f64::NEG_INFINITY;
                    for wi in 0..window {
                        for wj in 0..window {
                            let key = (si + wi) * w + sj + wj;
                            let s = dot(qrow, &kt[key * dh..(key + 1) * dh]) * scale;
                            scores[wi * window + wj] = s;
                            mx = mx.max(s);
                        }
                    }
                    let mut denom = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        denom += *s;
                    }
                    let pbase = ((bi * heads + hd) * hw + pos) * wsq;
                    let orow = &mut ot[pos * dh..(pos + 1) * dh];
                    for wi in 0..window {
                        for wj in 0..window {
                            let t = wi * window + wj;
                            let p = scores[t] / denom;
                            probs[pbase + t] = p;
                            let key = (si + wi) * w + sj + wj;
                            axpy(orow, p, &vt[key * dh..(key + 1) * dh]);
                        }
                    }
                }
            }
            from_pos_major(&ot, bi, c, ch0, dh, hw, &mut out);
        }
    }
    Ok(tape.push_op(vec![b, c, h, w], out, |out| Op::LocalAttention { q, k, v, out, heads, window, probs }))
}

pub(crate) fn local_attention_backward(
    qv: &[f64],
    kv: &[f64],
    vv: &[f64],
    probs: &[f64],
    g: &[f64],
    shape: [usize; 4],
    heads: usize,
    window: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = shape;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let hw = h * w;
    let wsq = window * window;
    let mut dq = vec![0.0; qv.len()];
    let mut dk = vec![0.0; kv.len()];
    let mut dv = vec![0.0; vv.len()];
    let mut qt = vec![0.0; hw * dh];
    let mut kt = vec![0.0; hw * dh];
    let mut vt = vec![0.0; hw * dh];
    let mut gt = vec![0.0; hw * dh];
    let mut dqt = vec![0.0; hw * dh];
    let mut dkt = vec![0.0; hw * dh];
    let mut dvt = vec![0.0; hw * dh];
    let mut gv_dot = vec![0.0; wsq];
    for bi in 0..b {
        for hd in 0..heads {
            let ch0 = hd * dh;
            to_pos_major(qv, bi, c, ch0, dh, hw, &mut qt);
            to_pos_major(kv, bi, c, ch0, dh, hw, &mut kt);
            to_pos_major(vv, bi, c, ch0, dh, hw, &mut vt);
            to_pos_major(g, bi, c, ch0, dh, hw, &mut gt);
            dqt.iter_mut().for_each(|o| *o = 0.0);
            dkt.iter_mut().for_each(|o| *o = 0.0);
            dvt.iter_mut().for_each(|o| *o = 0.0);
            for i in 0..h {
                let si = window_start(i, window, h);
                for j in 0..w {
                    let sj = window_start(j, window, w);
                    let pos = i * w + j;
                    let pbase = ((bi * heads + hd) * hw + pos) * wsq;
                    let grow = &gt[pos * dh..(pos + 1) * dh];
                    let mut pg_sum = 0.0;
                    for wi in 0..window {
                        for wj in 0..window {
                            let t = wi * window + wj;
                            let key = (si + wi) * w + sj + wj;
                            let gd = dot(grow, &vt[key * dh..(key + 1) * dh]);
                            axpy(&mut dvt[key * dh..(key + 1) * dh], probs[pbase + t], grow);
                            gv_dot[t] = gd;
                            pg_sum += probs[pbase + t] * gd;
                        }
                    }
                    let qrow = &qt[pos * dh..(pos + 1) * dh];
                    let dqrow = &mut dqt[pos * dh..(pos + 1) * dh];
                    for wi in 0..window {
                        for wj in 0..window {
                            let t = wi * window + wj;
                            let ds = probs[pbase + t] * (gv_dot[t] - pg_sum) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let key = (si + wi) * w + sj + wj;
                            axpy(dqrow, ds, &kt[key * dh..(key + 1) * dh]);
                            axpy(&mut dkt[key * dh..(key + 1) * dh], ds, qrow);
                        }
                    }
                }
            }
            from_pos_major(&dqt, bi, c, ch0, dh, hw, &mut dq);
            from_pos_major(&dkt, bi, c, ch0, dh, hw, &mut dk);
            from_pos_major(&dvt, bi, c, ch0, dh, hw, &mut dv);
        }
    }
    (dq, dk, dv)
}

/// Attention of a query grid over one shared token set.
/// `q` is `(B, C, H, W)`; `k`/`v` are `(B, C, R, 1)` sampled tokens.
pub fn cross_attention(tape: &mut Tape, q: BufId, k: BufId, v: BufId, heads: usize) -> Result<BufId> {
    let (shape, dh) = head_layout(tape, q, heads, "cross_attention")?;
    let [b, c, h, w] = shape;
    let ks = tape.shape(k).to_vec();
    if ks.len() != 4 || ks[0] != b || ks[1] != c {
        return Err(Error::config(format!("cross_attention: bad key shape {ks:?}")));
    }
    if tape.shape(v) != tape.shape(k) {
        return Err(Error::config("cross_attention: k/v shapes differ"));
    }
    let r = ks[2] * ks[3];
    if r == 0 {
        return Err(Error::config("cross_attention: empty token set"));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let hw = h * w;
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    let mut out = vec![0.0; qv.len()];
    let mut probs = vec![0.0; b * heads * hw * r];
    let mut qt = vec![0.0; hw * dh];
    let mut kt = vec![0.0; r * dh];
    let mut vt = vec![0.0; r * dh];
    let mut ot = vec![0.0; hw * dh];
    let mut scores = vec![0.0; r];
    for bi in 0..b {
        for hd in 0..heads {
            let ch0 = hd * dh;
            to_pos_major(qv, bi, c, ch0, dh, hw, &mut qt);
            to_pos_major(kv, bi, c, ch0, dh, r, &mut kt);
            to_pos_major(vv, bi, c, ch0, dh, r, &mut vt);
            ot.iter_mut().for_each(|o| *o = 0.0);
            for pos in 0..hw {
                let qrow = &qt[pos * dh..(pos + 1) * dh];
                let mut mx = f64::NEG_INFINITY;
                for (t, s) in scores.iter_mut().enumerate() {
                    *s = dot(qrow, &kt[t * dh..(t + 1) * dh]) * scale;
                    mx = mx.max(*s);
                }
                let mut denom = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    denom += *s;
                }
                let pbase = ((bi * heads + hd) * hw + pos) * r;
                let orow = &mut ot[pos * dh..(pos + 1) * dh];
                for (t, s) in scores.iter().enumerate() {
                    let p = s / denom;
                    probs[pbase + t] = p;
                    axpy(orow, p, &vt[t * dh..(t + 1) * dh]);
                }
            }
            from_pos_major(&ot, bi, c, ch0, dh, hw, &mut out);
        }
    }
    Ok(tape.push_op(vec![b, c, h, w], out, |out| Op::CrossAttention { q, k, v, out, heads, probs }))
}

pub(crate) fn cross_attention_backward(
    qv: &[f64],
    kv: &[f64],
    vv: &[f64],
    probs: &[f64],
    g: &[f64],
    qshape: [usize; 4],
    kshape: [usize; 4],
    heads: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = qshape;
    let r = kshape[2] * kshape[3];
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let hw = h * w;
    let mut dq = vec![0.0; qv.len()];
    let mut dk = vec![0.0; kv.len()];
    let mut dv = vec![0.0; vv.len()];
    let mut qt = vec![0.0; hw * dh];
    let mut kt = vec![0.0; r * dh];
    let mut vt = vec![0.0; r * dh];
    let mut gt = vec![0.0; hw * dh];
    let mut dqt = vec![0.0; hw * dh];
    let mut dkt = vec![0.0; r * dh];
    let mut dvt = vec![0.0; r * dh];
    let mut gv_dot = vec![0.0; r];
    for bi in 0..b {
        for hd in 0..heads {
            let ch0 = hd * dh;
            to_pos_major(qv, bi, c, ch0, dh, hw, &mut qt);
            to_pos_major(kv, bi, c, ch0, dh, r, &mut kt);
            to_pos_major(vv, bi, c, ch0, dh, r, &mut vt);
            to_pos_major(g, bi, c, ch0, dh, hw, &mut gt);
            dqt.iter_mut().for_each(|o| *o = 0.0);
            dkt.iter_mut().for_each(|o| *o = 0.0);
            dvt.iter_mut().for_each(|o| *o = 0.0);
            for pos in 0..hw {
                let pbase = ((bi * heads + hd) * hw + pos) * r;
                let grow = &gt[pos * dh..(pos + 1) * dh];
                let mut pg_sum = 0.0;
                for t in 0..r {
                    let gd = dot(grow, &vt[t * dh..(t + 1) * dh]);
                    axpy(&mut dvt[t * dh..(t + 1) * dh], probs[pbase + t], grow);
                    gv_dot[t] = gd;
                    pg_sum += probs[pbase + t] * gd;
                }
                let qrow = &qt[pos * dh..(pos + 1) * dh];
                let dqrow = &mut dqt[pos * dh..(pos + 1) * dh];
                for t in 0..r {
                    let ds = probs[pbase + t] * (gv_dot[t] - pg_sum) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    axpy(dqrow, ds, &kt[t * dh..(t + 1) * dh]);
                    axpy(&mut dkt[t * dh..(t + 1) * dh], ds, qrow);
                }
            }
            from_pos_major(&dqt, bi, c, ch0, dh, hw, &mut dq);
            from_pos_major(&dkt, bi, c, ch0, dh, r, &mut dk);
            from_pos_major(&dvt, bi, c, ch0, dh, r, &mut dv);
        }
    }
    (dq, dk, dv)
}
