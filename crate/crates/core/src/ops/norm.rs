//! Batch norm, layer norm, channel softmax, and normalized channel entropy.

use crate::tape::{BufId, Op, Tape};
use crate::{Error, Result};

/// Probabilities below this are clamped before `p ln p`.
pub const ENTROPY_CLAMP: f64 = 1e-12;

fn check_per_channel(tape: &Tape, x: BufId, p: BufId, what: &str) -> Result<[usize; 4]> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(Error::config(format!("{what}: input must be rank 4")));
    }
    if tape.numel(p) != xs[1] {
        return Err(Error::config(format!(
            "{what}: per-channel parameter has {} entries, input has {} channels",
            tape.numel(p),
            xs[1]
        )));
    }
    Ok([xs[0], xs[1], xs[2], xs[3]])
}

/// Training-mode batch normalization over `(B, H, W)` per channel.
///
/// Returns the output buffer plus the biased batch mean/variance so the
/// caller can fold them into running statistics.
pub fn batch_norm_train(
    tape: &mut Tape,
    x: BufId,
    scale: BufId,
    shift: BufId,
    eps: f64,
) -> Result<(BufId, Vec<f64>, Vec<f64>)> {
    let shape = check_per_channel(tape, x, scale, "batch_norm")?;
    check_per_channel(tape, x, shift, "batch_norm")?;
    let [b, c, h, w] = shape;
    let n = (b * h * w) as f64;
    let hw = h * w;
    let xv = tape.value(x);
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            s += xv[base..base + hw].iter().sum::<f64>();
        }
        mean[ci] = s / n;
        let mut v = 0.0;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for p in 0..hw {
                let d = xv[base + p] - mean[ci];
                v += d * d;
            }
        }
        var[ci] = v / n;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (sv, tv) = (tape.value(scale), tape.value(shift));
    let mut data = vec![0.0; xv.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let (m, is, g, be) = (mean[ci], inv_std[ci], sv[ci], tv[ci]);
            for p in 0..hw {
                data[base + p] = g * (xv[base + p] - m) * is + be;
            }
        }
    }
    let mean_c = mean.clone();
    let var_c = var;
    let inv_c = inv_std.clone();
    let out = tape.push_op(vec![b, c, h, w], data, |out| Op::BatchNormTrain {
        x,
        scale,
        shift,
        out,
        mean: mean_c,
        inv_std: inv_c,
    });
    Ok((out, mean, var_c))
}

pub(crate) fn batch_norm_train_backward(
    x: &[f64],
    scale: &[f64],
    g: &[f64],
    shape: [usize; 4],
    mean: &[f64],
    inv_std: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let n = (b * h * w) as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for ci in 0..c {
        let (m, is) = (mean[ci], inv_std[ci]);
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for p in 0..hw {
                let xh = (x[base + p] - m) * is;
                sum_g += g[base + p];
                sum_gx += g[base + p] * xh;
            }
        }
        dshift[ci] = sum_g;
        dscale[ci] = sum_gx;
        let k = scale[ci] * is / n;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for p in 0..hw {
                let xh = (x[base + p] - m) * is;
                dx[base + p] = k * (n * g[base + p] - sum_g - xh * sum_gx);
            }
        }
    }
    (dx, dscale, dshift)
}

/// Eval-mode batch normalization using fixed running statistics.
pub fn batch_norm_eval(
    tape: &mut Tape,
    x: BufId,
    scale: BufId,
    shift: BufId,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<BufId> {
    let shape = check_per_channel(tape, x, scale, "batch_norm")?;
    check_per_channel(tape, x, shift, "batch_norm")?;
    let [b, c, h, w] = shape;
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::config(format!(
            "batch_norm: running statistics have {}/{} entries, input has {c} channels",
            running_mean.len(),
            running_var.len()
        )));
    }
    let hw = h * w;
    let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let xv = tape.value(x);
    let (sv, tv) = (tape.value(scale), tape.value(shift));
    let mut data = vec![0.0; xv.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            let (m, is, ga, be) = (running_mean[ci], inv_std[ci], sv[ci], tv[ci]);
            for p in 0..hw {
                data[base + p] = ga * (xv[base + p] - m) * is + be;
            }
        }
    }
    let mean_r = running_mean.to_vec();
    Ok(tape.push_op(vec![b, c, h, w], data, |out| Op::BatchNormEval {
        x,
        scale,
        shift,
        out,
        mean_r,
        inv_std_r: inv_std,
    }))
}

pub(crate) fn batch_norm_eval_backward(
    x: &[f64],
    scale: &[f64],
    g: &[f64],
    shape: [usize; 4],
    mean_r: &[f64],
    inv_std_r: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let mut dx = vec![0.0; x.len()];
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for ci in 0..c {
        let (m, is) = (mean_r[ci], inv_std_r[ci]);
        let k = scale[ci] * is;
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for p in 0..hw {
                let gv = g[base + p];
                dx[base + p] = gv * k;
                dscale[ci] += gv * (x[base + p] - m) * is;
                dshift[ci] += gv;
            }
        }
    }
    (dx, dscale, dshift)
}

/// Layer normalization across channels at every spatial position.
pub fn layer_norm(tape: &mut Tape, x: BufId, scale: BufId, shift: BufId, eps: f64) -> Result<BufId> {
    let shape = check_per_channel(tape, x, scale, "layer_norm")?;
    check_per_channel(tape, x, shift, "layer_norm")?;
    let [b, c, h, w] = shape;
    let hw = h * w;
    let xv = tape.value(x);
    let (sv, tv) = (tape.value(scale), tape.value(shift));
    let positions = b * hw;
    let mut mean = vec![0.0; positions];
    let mut inv_std = vec![0.0; positions];
    let mut data = vec![0.0; xv.len()];
    for bi in 0..b {
        for p in 0..hw {
            let pos = bi * hw + p;
            let mut s = 0.0;
            for ci in 0..c {
                s += xv[(bi * c + ci) * hw + p];
            }
            let m = s / c as f64;
            let mut v = 0.0;
            for ci in 0..c {
                let d = xv[(bi * c + ci) * hw + p] - m;
                v += d * d;
            }
            let is = 1.0 / (v / c as f64 + eps).sqrt();
            mean[pos] = m;
            inv_std[pos] = is;
            for ci in 0..c {
                let idx = (bi * c + ci) * hw + p;
                data[idx] = sv[ci] * (xv[idx] - m) * is + tv[ci];
            }
        }
    }
    Ok(tape.push_op(vec![b, c, h, w], data, |out| Op::LayerNorm { x, scale, shift, out, mean, inv_std }))
}

pub(crate) fn layer_norm_backward(
    x: &[f64],
    scale: &[f64],
    g: &[f64],
    shape: [usize; 4],
    mean: &[f64],
    inv_std: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let cn = c as f64;
    let mut dx = vec![0.0; x.len()];
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for bi in 0..b {
        for p in 0..hw {
            let pos = bi * hw + p;
            let (m, is) = (mean[pos], inv_std[pos]);
            let mut sum_gh = 0.0;
            let mut sum_ghx = 0.0;
            for ci in 0..c {
                let idx = (bi * c + ci) * hw + p;
                let xh = (x[idx] - m) * is;
                let gh = g[idx] * scale[ci];
                sum_gh += gh;
                sum_ghx += gh * xh;
                dscale[ci] += g[idx] * xh;
                dshift[ci] += g[idx];
            }
            for ci in 0..c {
                let idx = (bi * c + ci) * hw + p;
                let xh = (x[idx] - m) * is;
                let gh = g[idx] * scale[ci];
                dx[idx] = is * (gh - sum_gh / cn - xh * sum_ghx / cn);
            }
        }
    }
    (dx, dscale, dshift)
}

/// Softmax across the channel axis at every pixel, with max subtraction.
pub fn softmax_channel(tape: &mut Tape, x: BufId) -> Result<BufId> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(Error::config("softmax_channel: input must be rank 4"));
    }
    let [b, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
    let hw = h * w;
    let xv = tape.value(x);
    let mut data = vec![0.0; xv.len()];
    for bi in 0..b {
        for p in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(xv[(bi * c + ci) * hw + p]);
            }
            let mut sum = 0.0;
            for ci in 0..c {
                let e = (xv[(bi * c + ci) * hw + p] - mx).exp();
                data[(bi * c + ci) * hw + p] = e;
                sum += e;
            }
            for ci in 0..c {
                data[(bi * c + ci) * hw + p] /= sum;
            }
        }
    }
    Ok(tape.push_op(vec![b, c, h, w], data, |out| Op::SoftmaxChannel { x, out }))
}

pub(crate) fn softmax_channel_backward(out: &[f64], g: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let mut dx = vec![0.0; out.len()];
    for bi in 0..b {
        for p in 0..hw {
            let mut dot = 0.0;
            for ci in 0..c {
                let idx = (bi * c + ci) * hw + p;
                dot += out[idx] * g[idx];
            }
            for ci in 0..c {
                let idx = (bi * c + ci) * hw + p;
                dx[idx] = out[idx] * (g[idx] - dot);
            }
        }
    }
    dx
}

/// Normalized entropy of a per-pixel class distribution: `(B, C, H, W)`
/// probabilities to a `(B, 1, H, W)` map in `[0, 1]`.
pub fn entropy_channel(tape: &mut Tape, p: BufId) -> Result<BufId> {
    let ps = tape.shape(p).to_vec();
    if ps.len() != 4 || ps[1] < 2 {
        return Err(Error::config(format!("entropy_channel: need rank-4 input with >= 2 channels, got {ps:?}")));
    }
    let [b, c, h, w] = [ps[0], ps[1], ps[2], ps[3]];
    let hw = h * w;
    let ln_c = (c as f64).ln();
    let pv = tape.value(p);
    let mut data = vec![0.0; b * hw];
    for bi in 0..b {
        for pos in 0..hw {
            let mut ent = 0.0;
            for ci in 0..c {
                let q = pv[(bi * c + ci) * hw + pos].max(ENTROPY_CLAMP);
                ent -= q * q.ln();
            }
            data[bi * hw + pos] = ent / ln_c;
        }
    }
    Ok(tape.push_op(vec![b, 1, h, w], data, |out| Op::EntropyChannel { p, out }))
}

pub(crate) fn entropy_channel_backward(p: &[f64], g: &[f64], shape: [usize; 4]) -> Vec<f64> {
    let [b, c, h, w] = shape;
    let hw = h * w;
    let ln_c = (c as f64).ln();
    let mut dp = vec![0.0; p.len()];
    for bi in 0..b {
        for pos in 0..hw {
            let gv = g[bi * hw + pos];
            for ci in 0..c {
                let idx = (bi * c + ci) * hw + pos;
                if p[idx] > ENTROPY_CLAMP {
                    dp[idx] = -gv * (p[idx].ln() + 1.0) / ln_c;
                }
            }
        }
    }
    dp
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut tape = Tape::new();
        let x = tape.alloc(vec![1, 2, 1, 1], vec![0.0, 0.0]);
        let y = softmax_channel(&mut tape, x).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let x2 = tape.alloc(vec![1, 2, 1, 1], vec![1000.0, 0.0]);
        let y2 = softmax_channel(&mut tape, x2).unwrap();
        let out = tape.value(y2);
        assert!(out.iter().all(|v| v.is_finite()));
        assert!(close(out[0], 1.0, 1e-12) && close(out[1], 0.0, 1e-12));
    }

    #[test]
    fn softmax_sums_to_one_per_pixel() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37 % 17) as f64 - 8.0) * 0.7).collect();
        let x = tape.alloc(vec![2, 3, 4, 4], vals);
        let y = softmax_channel(&mut tape, x).unwrap();
        let out = tape.value(y);
        for bi in 0..2 {
            for p in 0..16 {
                let s: f64 = (0..3).map(|c| out[(bi * 3 + c) * 16 + p]).sum();
                assert!(close(s, 1.0, 1e-9), "pixel sum {s}");
                assert!((0..3).all(|c| out[(bi * 3 + c) * 16 + p] >= 0.0));
            }
        }
    }

    #[test]
    fn batch_norm_constant_input_maps_to_zero() {
        let mut tape = Tape::new();
        let x = tape.alloc(vec![2, 2, 3, 3], vec![5.0; 36]);
        let scale = tape.alloc(vec![2], vec![1.0; 2]);
        let shift = tape.alloc(vec![2], vec![0.0; 2]);
        let (y, mean, var) = batch_norm_train(&mut tape, x, scale, shift, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
        assert_eq!(mean, vec![5.0, 5.0]);
        assert_eq!(var, vec![0.0, 0.0]);
    }

    #[test]
    fn batch_norm_eval_identity_stats() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..18).map(|i| i as f64 * 0.3 - 2.0).collect();
        let x = tape.alloc(vec![1, 2, 3, 3], vals.clone());
        let scale = tape.alloc(vec![2], vec![1.0; 2]);
        let shift = tape.alloc(vec![2], vec![0.0; 2]);
        let y = batch_norm_eval(&mut tape, x, scale, shift, &[0.0, 0.0], &[1.0, 1.0], 1e-5).unwrap();
        for (o, v) in tape.value(y).iter().zip(&vals) {
            assert!(close(*o, *v, 1e-4), "{o} vs {v}");
        }
    }

    #[test]
    fn batch_norm_training_normalizes_statistics() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..2 * 3 * 16).map(|i| ((i * 31 % 23) as f64) * 0.61 - 7.0).collect();
        let x = tape.alloc(vec![2, 3, 4, 4], vals);
        let scale = tape.alloc(vec![3], vec![1.0; 3]);
        let shift = tape.alloc(vec![3], vec![0.0; 3]);
        let (y, _, _) = batch_norm_train(&mut tape, x, scale, shift, 1e-5).unwrap();
        let out = tape.value(y);
        let n = 2.0 * 16.0;
        for c in 0..3 {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for bi in 0..2 {
                for p in 0..16 {
                    let v = out[(bi * 3 + c) * 16 + p];
                    s += v;
                    s2 += v * v;
                }
            }
            let m = s / n;
            let var = s2 / n - m * m;
            assert!(m.abs() < 1e-6, "channel mean {m}");
            assert!((var - 1.0).abs() < 1e-4, "channel var {var}");
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut tape = Tape::new();
        let x = tape.alloc(vec![1, 3, 2, 2], vec![0.0; 12]);
        let scale = tape.alloc(vec![2], vec![1.0; 2]);
        let shift = tape.alloc(vec![3], vec![0.0; 3]);
        assert!(batch_norm_train(&mut tape, x, scale, shift, 1e-5).is_err());
    }

    #[test]
    fn entropy_extremes() {
        let mut tape = Tape::new();
        let p = tape.alloc(vec![1, 2, 1, 2], vec![0.5, 1.0, 0.5, 0.0]);
        let u = entropy_channel(&mut tape, p).unwrap();
        let out = tape.value(u);
        assert!(close(out[0], 1.0, 1e-9), "uniform gives {}", out[0]);
        assert!(close(out[1], 0.0, 1e-9), "one-hot gives {}", out[1]);
    }

    #[test]
    fn entropy_direct_value() {
        // -(0.9 log2 0.9 + 0.1 log2 0.1) = 0.46899...
        let mut tape = Tape::new();
        let p = tape.alloc(vec![1, 2, 1, 1], vec![0.9, 0.1]);
        let u = entropy_channel(&mut tape, p).unwrap();
        assert!(close(tape.value(u)[0], 0.46900, 1e-5));
    }

    #[test]
    fn entropy_invariant_to_channel_permutation() {
        let mut tape = Tape::new();
        let p1 = tape.alloc(vec![1, 3, 1, 1], vec![0.2, 0.5, 0.3]);
        let p2 = tape.alloc(vec![1, 3, 1, 1], vec![0.5, 0.3, 0.2]);
        let u1 = entropy_channel(&mut tape, p1).unwrap();
        let u2 = entropy_channel(&mut tape, p2).unwrap();
        assert!(close(tape.value(u1)[0], tape.value(u2)[0], 1e-15));
    }

    #[test]
    fn layer_norm_normalizes_each_position() {
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..1 * 4 * 2 * 2).map(|i| (i as f64).sin() * 3.0).collect();
        let x = tape.alloc(vec![1, 4, 2, 2], vals);
        let scale = tape.alloc(vec![4], vec![1.0; 4]);
        let shift = tape.alloc(vec![4], vec![0.0; 4]);
        let y = layer_norm(&mut tape, x, scale, shift, 1e-6).unwrap();
        let out = tape.value(y);
        for p in 0..4 {
            let m: f64 = (0..4).map(|c| out[c * 4 + p]).sum::<f64>() / 4.0;
            let v: f64 = (0..4).map(|c| (out[c * 4 + p] - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
