//! Independent brute-force oracles for convolution, bilinear sampling, and
//! both attention forms. Every oracle here recomputes the operation from its
//! definition with plain loops, sharing no code with the library kernels.

use ugdseg_core::deform::{AttentionConfig, DeformAttentionLayer, LocalAttentionLayer};
use ugdseg_core::ops;
use ugdseg_core::params::{Initializer, ParamStore};
use ugdseg_core::rng::SplitMix64;
use ugdseg_core::tape::{Session, Tape};

fn rand_vec(rng: &mut SplitMix64, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.range_f64(lo, hi)).collect()
}

// ── Naive convolution oracle ─────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    (bn, cin, h, wd): (usize, usize, usize, usize),
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; bn * cout * oh * ow];
    for b in 0..bn {
        for o in 0..cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if ii >= 0 && ii < h as isize && jj >= 0 && jj < wd as isize {
                                    acc += w[((o * cin + c) * kh + ki) * kw + kj]
                                        * x[((b * cin + c) * h + ii as usize) * wd + jj as usize];
                                }
                            }
                        }
                    }
                    out[((b * cout + o) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_naive_loop_on_random_shapes() {
    let mut rng = SplitMix64::new(0xC0DE);
    for draw in 0..40 {
        let bn = 1 + rng.below(2);
        let cin = 1 + rng.below(4);
        let cout = 1 + rng.below(4);
        let k = if rng.below(2) == 0 { 1 } else { 3 };
        let stride = 1 + rng.below(2);
        let pad = rng.below(2);
        let h = (k + rng.below(8)).min(8).max(k);
        let w = (k + rng.below(8)).min(8).max(k);
        let x = rand_vec(&mut rng, bn * cin * h * w, -1.0, 1.0);
        let wv = rand_vec(&mut rng, cout * cin * k * k, -1.0, 1.0);
        let bv = rand_vec(&mut rng, cout, -0.5, 0.5);

        let mut tape = Tape::new();
        let xb = tape.alloc(vec![bn, cin, h, w], x.clone());
        let wb = tape.alloc(vec![cout, cin, k, k], wv.clone());
        let bb = tape.alloc(vec![cout], bv.clone());
        let y = ops::conv2d(&mut tape, xb, wb, bb, stride, pad).unwrap();
        let expect = conv_oracle(&x, &wv, &bv, (bn, cin, h, w), (cout, k, k), stride, pad);
        assert_eq!(tape.value(y).len(), expect.len(), "draw {draw}");
        for (a, b) in tape.value(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "draw {draw}: {a} vs {b}");
        }
    }
}

// ── Bilinear sampling oracle ─────────────────────────────────────────

fn bilinear_oracle(x: &[f64], h: usize, w: usize, r: f64, c: f64) -> f64 {
    let r0 = r.floor() as isize;
    let c0 = c.floor() as isize;
    let (tr, tc) = (r - r0 as f64, c - c0 as f64);
    let get = |ri: isize, ci: isize| -> f64 {
        if ri >= 0 && ri < h as isize && ci >= 0 && ci < w as isize {
            x[ri as usize * w + ci as usize]
        } else {
            0.0
        }
    };
    (1.0 - tr) * (1.0 - tc) * get(r0, c0)
        + (1.0 - tr) * tc * get(r0, c0 + 1)
        + tr * (1.0 - tc) * get(r0 + 1, c0)
        + tr * tc * get(r0 + 1, c0 + 1)
}

#[test]
fn bilinear_sample_matches_four_corner_oracle() {
    let mut rng = SplitMix64::new(0xB111);
    let x = rand_vec(&mut rng, 36, -2.0, 2.0);
    let points: Vec<f64> = (0..200).map(|_| rng.range_f64(-1.5, 6.5)).collect();
    let mut tape = Tape::new();
    let xb = tape.alloc(vec![1, 1, 6, 6], x.clone());
    let pb = tape.alloc(vec![1, 100, 2], points.clone());
    let y = ops::bilinear_sample(&mut tape, xb, pb).unwrap();
    for p in 0..100 {
        let expect = bilinear_oracle(&x, 6, 6, points[2 * p], points[2 * p + 1]);
        let got = tape.value(y)[p];
        assert!((got - expect).abs() < 1e-12, "point {p}: {got} vs {expect}");
    }
}

// ── Deformable convolution oracle ────────────────────────────────────

#[test]
fn deform_conv_matches_loop_plus_bilinear_oracle() {
    let mut rng = SplitMix64::new(0xDEF0);
    for _ in 0..10 {
        let (bn, cin, cout, h, w) = (1, 2, 2, 5, 5);
        let x = rand_vec(&mut rng, bn * cin * h * w, -1.0, 1.0);
        let wv = rand_vec(&mut rng, cout * cin * 9, -1.0, 1.0);
        let bv = rand_vec(&mut rng, cout, -0.5, 0.5);
        let off = rand_vec(&mut rng, bn * 18 * h * w, -1.0, 1.0);

        let mut tape = Tape::new();
        let xb = tape.alloc(vec![bn, cin, h, w], x.clone());
        let wb = tape.alloc(vec![cout, cin, 3, 3], wv.clone());
        let bb = tape.alloc(vec![cout], bv.clone());
        let ob = tape.alloc(vec![bn, 18, h, w], off.clone());
        let y = ops::deform_conv2d(&mut tape, xb, wb, bb, ob, 1).unwrap();

        for o in 0..cout {
            for oi in 0..h {
                for oj in 0..w {
                    let mut acc = bv[o];
                    for c in 0..cin {
                        for ki in 0..3usize {
                            for kj in 0..3usize {
                                let kk = ki * 3 + kj;
                                let dr = off[(2 * kk) * h * w + oi * w + oj];
                                let dc = off[(2 * kk + 1) * h * w + oi * w + oj];
                                let r = oi as f64 + ki as f64 - 1.0 + dr;
                                let cc = oj as f64 + kj as f64 - 1.0 + dc;
                                acc += wv[((o * cin + c) * 3 + ki) * 3 + kj]
                                    * bilinear_oracle(&x[c * h * w..(c + 1) * h * w], h, w, r, cc);
                            }
                        }
                    }
                    let got = tape.value(y)[(o * h + oi) * w + oj];
                    assert!((got - acc).abs() < 1e-10, "{got} vs {acc}");
                }
            }
        }
    }
}

#[test]
fn deform_conv_zero_offsets_equal_conv2d_many_draws() {
    let mut rng = SplitMix64::new(0x2E60);
    for draw in 0..20 {
        let bn = 1 + rng.below(2);
        let cin = 1 + rng.below(3);
        let cout = 1 + rng.below(3);
        let h = 3 + rng.below(5);
        let w = 3 + rng.below(5);
        let x = rand_vec(&mut rng, bn * cin * h * w, -1.0, 1.0);
        let wv = rand_vec(&mut rng, cout * cin * 9, -1.0, 1.0);
        let bv = rand_vec(&mut rng, cout, -0.5, 0.5);

        let mut tape = Tape::new();
        let xb = tape.alloc(vec![bn, cin, h, w], x);
        let wb = tape.alloc(vec![cout, cin, 3, 3], wv);
        let bb = tape.alloc(vec![cout], bv);
        let ob = tape.alloc(vec![bn, 18, h, w], vec![0.0; bn * 18 * h * w]);
        let y_def = ops::deform_conv2d(&mut tape, xb, wb, bb, ob, 1).unwrap();
        let y_std = ops::conv2d(&mut tape, xb, wb, bb, 1, 1).unwrap();
        for (a, b) in tape.value(y_def).iter().zip(tape.value(y_std)) {
            assert!((a - b).abs() < 1e-10, "draw {draw}: {a} vs {b}");
        }
    }
}

// ── Local attention oracle (full layer, projections included) ────────

/// 1x1 convolution as a per-pixel matrix-vector product.
fn project(x: &[f64], w: &[f64], b: &[f64], c_in: usize, c_out: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * hw];
    for o in 0..c_out {
        for p in 0..hw {
            let mut acc = b[o];
            for c in 0..c_in {
                acc += w[o * c_in + c] * x[c * hw + p];
            }
            out[o * hw + p] = acc;
        }
    }
    out
}

fn fetch(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap().value.clone()
}

#[test]
fn local_attention_matches_per_query_softmax_oracle() {
    let (c, h, w, window) = (4usize, 5usize, 5usize, 3usize);
    let hw = h * w;
    let mut store = ParamStore::new();
    let mut init = Initializer::new(31);
    let layer = LocalAttentionLayer::init(
        &mut store,
        &mut init,
        "la",
        c,
        &AttentionConfig { heads: 1, window, ..Default::default() },
    )
    .unwrap();
    let mut rng = SplitMix64::new(0x10CA1);
    let x = rand_vec(&mut rng, c * hw, -1.0, 1.0);

    let mut sess = Session::new(&store, false);
    let xb = sess.tape.alloc(vec![1, c, h, w], x.clone());
    let yb = layer.forward(&mut sess, xb).unwrap();
    let got = sess.tape.value(yb).to_vec();

    // Oracle: explicit projections, clamped windows, per-query softmax.
    let q = project(&x, &fetch(&store, "la.q.w"), &fetch(&store, "la.q.b"), c, c, hw);
    let k = project(&x, &fetch(&store, "la.k.w"), &fetch(&store, "la.k.b"), c, c, hw);
    let v = project(&x, &fetch(&store, "la.v.w"), &fetch(&store, "la.v.b"), c, c, hw);
    let scale = 1.0 / (c as f64).sqrt();
    let mut attn = vec![0.0; c * hw];
    for i in 0..h {
        for j in 0..w {
            let si = (i.saturating_sub(window / 2)).min(h - window);
            let sj = (j.saturating_sub(window / 2)).min(w - window);
            let mut weights = Vec::new();
            for wi in 0..window {
                for wj in 0..window {
                    let t = (si + wi) * w + sj + wj;
                    let mut s = 0.0;
                    for d in 0..c {
                        s += q[d * hw + i * w + j] * k[d * hw + t];
                    }
                    weights.push((t, s * scale));
                }
            }
            let mx = weights.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = weights.iter().map(|(_, s)| (s - mx).exp()).sum();
            for d in 0..c {
                let mut acc = 0.0;
                for (t, s) in &weights {
                    acc += (s - mx).exp() / denom * v[d * hw + t];
                }
                attn[d * hw + i * w + j] = acc;
            }
        }
    }
    let expect = project(&attn, &fetch(&store, "la.o.w"), &fetch(&store, "la.o.b"), c, c, hw);
    for (a, b) in got.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn local_attention_is_translation_equivariant_in_the_interior() {
    let (c, h, w) = (4usize, 8usize, 8usize);
    let mut store = ParamStore::new();
    let mut init = Initializer::new(77);
    let layer = LocalAttentionLayer::init(
        &mut store,
        &mut init,
        "la",
        c,
        &AttentionConfig { heads: 2, window: 3, ..Default::default() },
    )
    .unwrap();
    let mut rng = SplitMix64::new(0x7A57);
    let x = rand_vec(&mut rng, c * h * w, -1.0, 1.0);
    // shifted copy: x2[i][j] = x[i-1][j-1]
    let mut x2 = vec![0.0; c * h * w];
    for ci in 0..c {
        for i in 1..h {
            for j in 1..w {
                x2[(ci * h + i) * w + j] = x[(ci * h + i - 1) * w + j - 1];
            }
        }
    }
    let mut sess = Session::new(&store, false);
    let xb = sess.tape.alloc(vec![1, c, h, w], x);
    let y1 = layer.forward(&mut sess, xb).unwrap();
    let x2b = sess.tape.alloc(vec![1, c, h, w], x2);
    let y2 = layer.forward(&mut sess, x2b).unwrap();
    let (v1, v2) = (sess.tape.value(y1), sess.tape.value(y2));
    // compare interior where both queries see full, un-clamped windows
    for ci in 0..c {
        for i in 2..h - 2 {
            for j in 2..w - 2 {
                let a = v1[(ci * h + i) * w + j];
                let b = v2[(ci * h + i + 1) * w + j + 1];
                assert!((a - b).abs() < 1e-8, "({ci},{i},{j}): {a} vs {b}");
            }
        }
    }
}

// ── Deformable attention zero-offset oracle ──────────────────────────

#[test]
fn deformable_attention_zero_offsets_match_grid_attention_oracle() {
    for draw in 0..20u64 {
        let (c, h, w, factor) = (4usize, 4usize, 4usize, 2usize);
        let hw = h * w;
        let r_count = (h / factor) * (w / factor);
        let mut store = ParamStore::new();
        let mut init = Initializer::new(1000 + draw);
        let layer = DeformAttentionLayer::init(
            &mut store,
            &mut init,
            "da",
            c,
            &AttentionConfig { heads: 1, ref_downsample: factor, ..Default::default() },
            true, // offset subnet present but zero-initialized
        )
        .unwrap();
        let mut rng = SplitMix64::new(0xDA7A ^ draw);
        let x = rand_vec(&mut rng, c * hw, -1.0, 1.0);

        let mut sess = Session::new(&store, false);
        let xb = sess.tape.alloc(vec![1, c, h, w], x.clone());
        let yb = layer.forward(&mut sess, xb).unwrap();
        let got = sess.tape.value(yb).to_vec();

        // Oracle: sample tokens at uniform grid centers, project, attend.
        let mut tokens = vec![0.0; c * r_count];
        let mut t = 0;
        for ri in 0..h / factor {
            for rj in 0..w / factor {
                let rr = (ri as f64 + 0.5) * factor as f64 - 0.5;
                let cc = (rj as f64 + 0.5) * factor as f64 - 0.5;
                for d in 0..c {
                    tokens[d * r_count + t] = bilinear_oracle(&x[d * hw..(d + 1) * hw], h, w, rr, cc);
                }
                t += 1;
            }
        }
        let q = project(&x, &fetch(&store, "da.q.w"), &fetch(&store, "da.q.b"), c, c, hw);
        let k = project(&tokens, &fetch(&store, "da.k.w"), &fetch(&store, "da.k.b"), c, c, r_count);
        let v = project(&tokens, &fetch(&store, "da.v.w"), &fetch(&store, "da.v.b"), c, c, r_count);
        let scale = 1.0 / (c as f64).sqrt();
        let mut attn = vec![0.0; c * hw];
        for pos in 0..hw {
            let scores: Vec<f64> = (0..r_count)
                .map(|t| (0..c).map(|d| q[d * hw + pos] * k[d * r_count + t]).sum::<f64>() * scale)
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            for d in 0..c {
                attn[d * hw + pos] = scores
                    .iter()
                    .enumerate()
                    .map(|(t, s)| (s - mx).exp() / denom * v[d * r_count + t])
                    .sum();
            }
        }
        let expect = project(&attn, &fetch(&store, "da.o.w"), &fetch(&store, "da.o.b"), c, c, hw);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-8, "draw {draw}: {a} vs {b}");
        }
    }
}
