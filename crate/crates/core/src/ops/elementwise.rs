//! Pointwise and channel-structure operations.

use crate::tape::{BufId, Op, Tape};
use crate::{Error, Result};

fn same_shape(tape: &Tape, a: BufId, b: BufId, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::input(format!(
            "{what}: operand shapes differ, {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Elementwise `max(0, x)`.
pub fn relu(tape: &mut Tape, x: BufId) -> BufId {
    let data: Vec<f64> = tape.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    let shape = tape.shape(x).to_vec();
    tape.push_op(shape, data, |out| Op::Relu { x, out })
}

pub(crate) fn relu_backward(x: &[f64], g: &[f64]) -> Vec<f64> {
    x.iter().zip(g).map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 }).collect()
}

pub fn tanh(tape: &mut Tape, x: BufId) -> BufId {
    let data: Vec<f64> = tape.value(x).iter().map(|v| v.tanh()).collect();
    let shape = tape.shape(x).to_vec();
    tape.push_op(shape, data, |out| Op::Tanh { x, out })
}

pub(crate) fn tanh_backward(out: &[f64], g: &[f64]) -> Vec<f64> {
    out.iter().zip(g).map(|(&y, &gv)| gv * (1.0 - y * y)).collect()
}

pub fn add(tape: &mut Tape, a: BufId, b: BufId) -> Result<BufId> {
    same_shape(tape, a, b, "add")?;
    let data: Vec<f64> = tape.value(a).iter().zip(tape.value(b)).map(|(x, y)| x + y).collect();
    let shape = tape.shape(a).to_vec();
    Ok(tape.push_op(shape, data, |out| Op::Add { a, b, out }))
}

pub fn scale(tape: &mut Tape, x: BufId, c: f64) -> BufId {
    let data: Vec<f64> = tape.value(x).iter().map(|v| v * c).collect();
    let shape = tape.shape(x).to_vec();
    tape.push_op(shape, data, |out| Op::Scale { x, out, c })
}

/// Multiply each channel of a `(B, C, H, W)` map by a fixed factor.
pub fn scale_channels(tape: &mut Tape, x: BufId, factors: Vec<f64>) -> Result<BufId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1] != factors.len() {
        return Err(Error::config(format!(
            "scale_channels: {} factors for shape {s:?}",
            factors.len()
        )));
    }
    let data = scale_channels_apply(tape.value(x), [s[0], s[1], s[2], s[3]], &factors);
    Ok(tape.push_op(s, data, |out| Op::ScaleChannels { x, out, factors }))
}

pub(crate) fn scale_channels_apply(x: &[f64], shape: [usize; 4], factors: &[f64]) -> Vec<f64> {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let f = factors[ci];
            for p in 0..hw {
                out[base + p] = x[base + p] * f;
            }
        }
    }
    out
}

/// Per-pixel convex combination `(1 - u) * f_self + u * f_other` with the
/// gate `u` broadcast across channels. `u` has shape `(B, 1, H, W)`.
pub fn gated_fuse(tape: &mut Tape, f_self: BufId, f_other: BufId, gate: BufId) -> Result<BufId> {
    same_shape(tape, f_self, f_other, "gated_fuse")?;
    let fs = tape.shape(f_self).to_vec();
    let us = tape.shape(gate);
    if us.len() != 4 || us[1] != 1 || us[0] != fs[0] || us[2] != fs[2] || us[3] != fs[3] {
        return Err(Error::input(format!(
            "gated_fuse: gate shape {us:?} does not broadcast over features {fs:?}"
        )));
    }
    let [b, c, h, w] = [fs[0], fs[1], fs[2], fs[3]];
    let hw = h * w;
    let (a, o, u) = (tape.value(f_self), tape.value(f_other), tape.value(gate));
    let mut data = vec![0.0; a.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let ubase = bi * hw;
            for p in 0..hw {
                let uv = u[ubase + p];
                data[base + p] = (1.0 - uv) * a[base + p] + uv * o[base + p];
            }
        }
    }
    Ok(tape.push_op(fs, data, |out| Op::GatedFuse { f_self, f_other, gate, out }))
}

pub(crate) fn gated_fuse_backward(
    a: &[f64],
    o: &[f64],
    u: &[f64],
    g: &[f64],
    shape: [usize; 4],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let mut da = vec![0.0; a.len()];
    let mut do_ = vec![0.0; o.len()];
    let mut du = vec![0.0; b * hw];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let ubase = bi * hw;
            for p in 0..hw {
                let uv = u[ubase + p];
                let gv = g[base + p];
                da[base + p] = gv * (1.0 - uv);
                do_[base + p] = gv * uv;
                du[ubase + p] += gv * (o[base + p] - a[base + p]);
            }
        }
    }
    (da, do_, du)
}

/// Extract channel `ch` as a `(B, 1, H, W)` map.
pub fn slice_channel(tape: &mut Tape, x: BufId, ch: usize) -> Result<BufId> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || ch >= s[1] {
        return Err(Error::input(format!("slice_channel: channel {ch} out of range for {s:?}")));
    }
    let [b, c, h, w] = [s[0], s[1], s[2], s[3]];
    let hw = h * w;
    let xv = tape.value(x);
    let mut data = vec![0.0; b * hw];
    for bi in 0..b {
        data[bi * hw..(bi + 1) * hw].copy_from_slice(&xv[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]);
    }
    Ok(tape.push_op(vec![b, 1, h, w], data, |out| Op::SliceChannel { x, out, ch }))
}

pub(crate) fn slice_channel_backward(g: &[f64], shape: [usize; 4], ch: usize) -> Vec<f64> {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let mut dx = vec![0.0; b * c * hw];
    for bi in 0..b {
        dx[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].copy_from_slice(&g[bi * hw..(bi + 1) * hw]);
    }
    dx
}

/// Concatenate two maps along the channel axis.
pub fn concat_channels(tape: &mut Tape, a: BufId, b: BufId) -> Result<BufId> {
    let sa = tape.shape(a).to_vec();
    let sb = tape.shape(b).to_vec();
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
        return Err(Error::input(format!("concat_channels: incompatible shapes {sa:?} and {sb:?}")));
    }
    let (bn, ca, cb, h, w) = (sa[0], sa[1], sb[1], sa[2], sa[3]);
    let hw = h * w;
    let (av, bv) = (tape.value(a), tape.value(b));
    let mut data = Vec::with_capacity(bn * (ca + cb) * hw);
    for bi in 0..bn {
        data.extend_from_slice(&av[bi * ca * hw..(bi + 1) * ca * hw]);
        data.extend_from_slice(&bv[bi * cb * hw..(bi + 1) * cb * hw]);
    }
    Ok(tape.push_op(vec![bn, ca + cb, h, w], data, |out| Op::ConcatChannels { a, b, out }))
}

pub(crate) fn concat_channels_backward(g: &[f64], sa: [usize; 4], sb: [usize; 4]) -> (Vec<f64>, Vec<f64>) {
    let [bn, ca, h, w] = sa;
    let cb = sb[1];
    let hw = h * w;
    let mut da = vec![0.0; bn * ca * hw];
    let mut db = vec![0.0; bn * cb * hw];
    let stride = (ca + cb) * hw;
    for bi in 0..bn {
        da[bi * ca * hw..(bi + 1) * ca * hw].copy_from_slice(&g[bi * stride..bi * stride + ca * hw]);
        db[bi * cb * hw..(bi + 1) * cb * hw]
            .copy_from_slice(&g[bi * stride + ca * hw..(bi + 1) * stride]);
    }
    (da, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::new();
        let x = tape.alloc(vec![3], vec![-1.0, 0.0, 2.0]);
        let y = relu(&mut tape, x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn gated_fuse_endpoints_and_midpoint() {
        let mut tape = Tape::new();
        let a = tape.alloc(vec![1, 2, 2, 2], vec![2.0; 8]);
        let b = tape.alloc(vec![1, 2, 2, 2], vec![4.0; 8]);
        for (u_val, expect) in [(0.0, 2.0), (1.0, 4.0), (0.5, 3.0)] {
            let u = tape.alloc(vec![1, 1, 2, 2], vec![u_val; 4]);
            let y = gated_fuse(&mut tape, a, b, u).unwrap();
            assert!(tape.value(y).iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::new();
        let a = tape.alloc(vec![2, 1, 1, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = tape.alloc(vec![2, 1, 1, 3], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = concat_channels(&mut tape, a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 2, 1, 3]);
        let s0 = slice_channel(&mut tape, c, 0).unwrap();
        let s1 = slice_channel(&mut tape, c, 1).unwrap();
        assert_eq!(tape.value(s0), tape.value(a));
        assert_eq!(tape.value(s1), tape.value(b));
    }
}
