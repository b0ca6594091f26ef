//! Convolution, linear maps, and matrix products.

use crate::tape::{BufId, Op, Tape};
use crate::{Error, Result};

/// Output spatial size for one axis: `floor((n + 2 pad - k) / stride) + 1`.
pub fn conv_output_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// 2D cross-correlation with zero padding.
///
/// `x` is `(B, Cin, H, W)`, `w` is `(Cout, Cin, kh, kw)` with odd spatial
/// size, `b` is `(Cout)`.
pub fn conv2d(tape: &mut Tape, x: BufId, w: BufId, b: BufId, stride: usize, pad: usize) -> Result<BufId> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::config("conv2d: x and w must be rank 4"));
    }
    if ws[2] % 2 == 0 || ws[3] % 2 == 0 {
        return Err(Error::config(format!("conv2d: kernel spatial size must be odd, got {}x{}", ws[2], ws[3])));
    }
    if stride == 0 {
        return Err(Error::config("conv2d: stride must be >= 1"));
    }
    if xs[1] != ws[1] {
        return Err(Error::config(format!(
            "conv2d: input channels {} do not match kernel input channels {}",
            xs[1], ws[1]
        )));
    }
    if tape.numel(b) != ws[0] {
        return Err(Error::config(format!(
            "conv2d: bias length {} does not match output channels {}",
            tape.numel(b),
            ws[0]
        )));
    }
    if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
        return Err(Error::config(format!(
            "conv2d: padded input {}x{} smaller than kernel {}x{}",
            xs[2] + 2 * pad,
            xs[3] + 2 * pad,
            ws[2],
            ws[3]
        )));
    }
    let xs4 = [xs[0], xs[1], xs[2], xs[3]];
    let ws4 = [ws[0], ws[1], ws[2], ws[3]];
    let (data, oshape) = conv2d_forward(tape.value(x), tape.value(w), tape.value(b), xs4, ws4, stride, pad);
    Ok(tape.push_op(oshape.to_vec(), data, |out| Op::Conv2d { x, w, b, out, stride, pad }))
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    xs: [usize; 4],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [bn, cin, h, wd] = xs;
    let [cout, _, kh, kw] = ws;
    let oh = conv_output_size(h, kh, stride, pad);
    let ow = conv_output_size(wd, kw, stride, pad);
    let mut out = vec![0.0; bn * cout * oh * ow];
    for b in 0..bn {
        for o in 0..cout {
            let obase = (b * cout + o) * oh * ow;
            out[obase..obase + oh * ow].iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..cin {
                let xbase = (b * cin + c) * h * wd;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = w[((o * cin + c) * kh + ki) * kw + kj];
                        if wv == 0.0 {
                            continue;
                        }
                        // valid output rows: 0 <= oi*stride - pad + ki < h
                        let (oi_lo, oi_hi) = valid_range(oh, h, stride, pad, ki);
                        let (oj_lo, oj_hi) = valid_range(ow, wd, stride, pad, kj);
                        for oi in oi_lo..oi_hi {
                            let ii = oi * stride + ki - pad;
                            let orow = obase + oi * ow;
                            let xrow = xbase + ii * wd;
                            for oj in oj_lo..oj_hi {
                                let jj = oj * stride + kj - pad;
                                out[orow + oj] += wv * x[xrow + jj];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, [bn, cout, oh, ow])
}

/// Range of output indices whose tap `k` lands inside `[0, n)`.
#[inline]
fn valid_range(on: usize, n: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // oi*stride + k - pad >= 0  =>  oi >= ceil((pad - k)/stride)
    let lo = if pad > k { (pad - k + stride - 1) / stride } else { 0 };
    // oi*stride + k - pad <= n-1  =>  oi <= (n-1+pad-k)/stride
    let hi = if n + pad > k { ((n - 1 + pad - k) / stride + 1).min(on) } else { 0 };
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    xs: [usize; 4],
    ws: [usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [bn, cin, h, wd] = xs;
    let [cout, _, kh, kw] = ws;
    let oh = conv_output_size(h, kh, stride, pad);
    let ow = conv_output_size(wd, kw, stride, pad);
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; cout];
    for b in 0..bn {
        for o in 0..cout {
            let obase = (b * cout + o) * oh * ow;
            db[o] += g[obase..obase + oh * ow].iter().sum::<f64>();
            for c in 0..cin {
                let xbase = (b * cin + c) * h * wd;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wv = w[((o * cin + c) * kh + ki) * kw + kj];
                        let mut wacc = 0.0;
                        let (oi_lo, oi_hi) = valid_range(oh, h, stride, pad, ki);
                        let (oj_lo, oj_hi) = valid_range(ow, wd, stride, pad, kj);
                        for oi in oi_lo..oi_hi {
                            let ii = oi * stride + ki - pad;
                            let orow = obase + oi * ow;
                            let xrow = xbase + ii * wd;
                            for oj in oj_lo..oj_hi {
                                let jj = oj * stride + kj - pad;
                                let gv = g[orow + oj];
                                wacc += gv * x[xrow + jj];
                                dx[xrow + jj] += gv * wv;
                            }
                        }
                        dw[((o * cin + c) * kh + ki) * kw + kj] += wacc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Row-batched affine map: `x (N, In) -> (N, Out)` with `w (Out, In)`.
pub fn linear(tape: &mut Tape, x: BufId, w: BufId, b: BufId) -> Result<BufId> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(w).to_vec();
    if xs.len() != 2 || ws.len() != 2 {
        return Err(Error::config("linear: x and w must be rank 2"));
    }
    if xs[1] != ws[1] {
        return Err(Error::config(format!(
            "linear: input width {} does not match weight input width {}",
            xs[1], ws[1]
        )));
    }
    if tape.numel(b) != ws[0] {
        return Err(Error::config(format!(
            "linear: bias length {} does not match output width {}",
            tape.numel(b),
            ws[0]
        )));
    }
    let (n, input_w, out_w) = (xs[0], xs[1], ws[0]);
    let (xv, wv, bv) = (tape.value(x), tape.value(w), tape.value(b));
    let mut data = vec![0.0; n * out_w];
    for i in 0..n {
        for o in 0..out_w {
            let mut acc = bv[o];
            let xrow = &xv[i * input_w..(i + 1) * input_w];
            let wrow = &wv[o * input_w..(o + 1) * input_w];
            for (xe, we) in xrow.iter().zip(wrow) {
                acc += xe * we;
            }
            data[i * out_w + o] = acc;
        }
    }
    Ok(tape.push_op(vec![n, out_w], data, |out| Op::Linear { x, w, b, out }))
}

pub(crate) fn linear_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    xs: [usize; 2],
    ws: [usize; 2],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [n, input_w] = xs;
    let [out_w, _] = ws;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; out_w];
    for i in 0..n {
        for o in 0..out_w {
            let gv = g[i * out_w + o];
            db[o] += gv;
            for k in 0..input_w {
                dx[i * input_w + k] += gv * w[o * input_w + k];
                dw[o * input_w + k] += gv * x[i * input_w + k];
            }
        }
    }
    (dx, dw, db)
}

/// Plain rank-2 matrix product `(m, k) x (k, n)`.
pub fn matmul(tape: &mut Tape, a: BufId, b: BufId) -> Result<BufId> {
    let sa = tape.shape(a).to_vec();
    let sb = tape.shape(b).to_vec();
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::config(format!("matmul: incompatible shapes {sa:?} x {sb:?}")));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let data = matmul_raw(tape.value(a), tape.value(b), m, k, n);
    Ok(tape.push_op(vec![m, n], data, |out| Op::MatMul { a, b, out }))
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub(crate) fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    sa: [usize; 2],
    sb: [usize; 2],
) -> (Vec<f64>, Vec<f64>) {
    let [m, k] = sa;
    let n = sb[1];
    // da = g . b^T ; db = a^T . g
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let grow = &g[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            da[i * k + kk] = acc;
        }
    }
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let grow = &g[i * n..(i + 1) * n];
            let drow = &mut db[kk * n..(kk + 1) * n];
            for (d, gv) in drow.iter_mut().zip(grow) {
                *d += av * gv;
            }
        }
    }
    (da, db)
}
