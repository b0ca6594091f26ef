//! Term-by-term oracles for the deep supervision aggregate and the total
//! objective, driven through hand-built probability maps and a real network.

use ugdseg_core::losses::{bdou_alpha, downsample_mask, total_loss, LossConfig, LossWeights};
use ugdseg_core::metrics::SegmentationMask;
use ugdseg_core::network::{Network, NetworkConfig, NetworkOutput};
use ugdseg_core::rng::SplitMix64;
use ugdseg_core::tape::{BufId, Session};
use ugdseg_core::tensor::FeatureMap;

fn tiny_net() -> Network {
    let cfg = NetworkConfig {
        stage_channels: [2, 4, 8, 16],
        input_height: 16,
        input_width: 16,
        heads: [1, 1, 1, 1],
        ..Default::default()
    };
    Network::new(cfg, 11).unwrap()
}

fn blob_mask(h: usize, w: usize, r: f64) -> SegmentationMask {
    let mut m = SegmentationMask::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let d = ((i as f64 - h as f64 / 2.0).powi(2) + (j as f64 - w as f64 / 2.0).powi(2)).sqrt();
            if d < r {
                m.data[i * w + j] = 1;
            }
        }
    }
    m
}

/// Scalar boundary-DoU recomputed from raw slices, independent of the tape.
fn bdou_scalar(p: &[f64], y: &[f64], alpha: f64, smooth: f64) -> f64 {
    let inter: f64 = p.iter().zip(y).map(|(a, b)| a * b).sum();
    let union: f64 = p.iter().sum::<f64>() + y.iter().sum::<f64>() - inter;
    (union - inter) / (union - alpha * inter + smooth)
}

/// Foreground channel of a `(1, 2, h, w)` probability buffer.
fn fg(sess: &Session, id: BufId) -> Vec<f64> {
    let v = sess.tape.value(id);
    v[v.len() / 2..].to_vec()
}

#[test]
fn deep_supervision_matches_ten_term_hand_expansion() {
    let net = tiny_net();
    let mask = blob_mask(16, 16, 5.0);
    let mut rng = SplitMix64::new(0xD5);
    let image = FeatureMap::new([1, 1, 16, 16], (0..256).map(|_| rng.range_f64(0.0, 1.0)).collect()).unwrap();

    let mut sess = Session::new(&net.store, false);
    let out = net.forward(&mut sess, &image).unwrap();
    let cfg = LossConfig::default();
    let lb = total_loss(&mut sess, &out, std::slice::from_ref(&mask), &cfg, true).unwrap();

    // Hand expansion: sum over 4 stages x 2 branches + 2 final branches,
    // each at its own resolution with its own alpha.
    let w = [0.1, 0.2, 0.5, 0.8];
    let mut expect_ds = 0.0;
    for (i, (pc, pt)) in out.intermediates.iter().enumerate() {
        let shape = sess.tape.shape(pt.to_owned()).to_vec();
        let y_small = downsample_mask(&mask, shape[2], shape[3]);
        let alpha = bdou_alpha(std::slice::from_ref(&y_small));
        let yv: Vec<f64> = y_small.data.iter().map(|&v| v as f64).collect();
        expect_ds += w[i] * bdou_scalar(&fg(&sess, pc.unwrap()), &yv, alpha, cfg.bdou_smooth);
        expect_ds += w[i] * bdou_scalar(&fg(&sess, *pt), &yv, alpha, cfg.bdou_smooth);
    }
    let y_full: Vec<f64> = mask.data.iter().map(|&v| v as f64).collect();
    let alpha_full = bdou_alpha(std::slice::from_ref(&mask));
    expect_ds += 1.0 * bdou_scalar(&fg(&sess, out.branch_cnn.unwrap()), &y_full, alpha_full, cfg.bdou_smooth);
    expect_ds += 1.0 * bdou_scalar(&fg(&sess, out.branch_trans), &y_full, alpha_full, cfg.bdou_smooth);

    assert!((lb.l_ds - expect_ds).abs() < 1e-12, "{} vs {expect_ds}", lb.l_ds);
    assert!((lb.total - (lb.l_ds + lb.l_seg)).abs() < 1e-9);
    assert!(lb.terms.iter().all(|(_, v)| *v >= 0.0));
}

#[test]
fn deep_supervision_is_linear_in_the_weights() {
    let net = tiny_net();
    let mask = blob_mask(16, 16, 4.0);
    let image = FeatureMap::new([1, 1, 16, 16], (0..256).map(|i| (i as f64 * 0.11).sin().abs()).collect()).unwrap();

    let run = |weights: LossWeights| -> f64 {
        let mut sess = Session::new(&net.store, false);
        let out = net.forward(&mut sess, &image).unwrap();
        let cfg = LossConfig { weights, ..Default::default() };
        let lb = total_loss(&mut sess, &out, std::slice::from_ref(&mask), &cfg, true).unwrap();
        lb.l_ds
    };
    let base = run(LossWeights::default());
    let doubled = run(LossWeights {
        w_cnn: [0.2, 0.4, 1.0, 1.6, 2.0],
        w_trans: [0.2, 0.4, 1.0, 1.6, 2.0],
    });
    assert!((doubled - 2.0 * base).abs() < 1e-12, "{doubled} vs {}", 2.0 * base);
}

#[test]
fn toggling_deep_supervision_off_reports_zero_ds() {
    let net = tiny_net();
    let mask = blob_mask(16, 16, 4.0);
    let image = FeatureMap::zeros([1, 1, 16, 16]);
    let mut sess = Session::new(&net.store, false);
    let out = net.forward(&mut sess, &image).unwrap();
    let cfg = LossConfig::default();
    let lb = total_loss(&mut sess, &out, std::slice::from_ref(&mask), &cfg, false).unwrap();
    assert_eq!(lb.l_ds, 0.0);
    assert!((lb.total - lb.l_seg).abs() < 1e-12);
    assert!((lb.l_seg - (lb.dice + lb.bdou_final)).abs() < 1e-12);
}

#[test]
fn total_recomposes_from_parts_on_random_outputs() {
    let net = tiny_net();
    let mask = blob_mask(16, 16, 6.0);
    let mut rng = SplitMix64::new(0x70701);
    for _ in 0..5 {
        let image = FeatureMap::new([1, 1, 16, 16], (0..256).map(|_| rng.range_f64(0.0, 1.0)).collect()).unwrap();
        let mut sess = Session::new(&net.store, false);
        let out = net.forward(&mut sess, &image).unwrap();
        let lb = total_loss(&mut sess, &out, std::slice::from_ref(&mask), &LossConfig::default(), true).unwrap();
        let term_sum: f64 = lb.terms.iter().map(|(_, v)| v).sum();
        assert!((lb.total - term_sum).abs() < 1e-12, "{} vs {term_sum}", lb.total);
        assert!(lb.total.is_finite() && lb.total >= 0.0);
    }
}

#[test]
fn perfect_fused_prediction_drives_seg_loss_to_zero() {
    // Build a fake output whose fused map equals the one-hot target.
    let net = tiny_net();
    let mask = blob_mask(16, 16, 5.0);
    let image = FeatureMap::zeros([1, 1, 16, 16]);
    let mut sess = Session::new(&net.store, false);
    let out = net.forward(&mut sess, &image).unwrap();
    let mut fused = vec![0.0; 2 * 256];
    for (i, &m) in mask.data.iter().enumerate() {
        fused[i] = 1.0 - m as f64;
        fused[256 + i] = m as f64;
    }
    let perfect = sess.tape.alloc(vec![1, 2, 16, 16], fused);
    let fake = NetworkOutput { fused: perfect, ..out };
    let lb = total_loss(&mut sess, &fake, std::slice::from_ref(&mask), &LossConfig::default(), false).unwrap();
    // dice <= eps bound, bdou exactly zero
    assert_eq!(lb.bdou_final, 0.0);
    let bound = 1.0 / (2.0 * mask.foreground_count() as f64 + 1.0);
    assert!(lb.dice <= bound + 1e-12, "{} vs {bound}", lb.dice);
}

#[test]
fn coarse_predict_composes_conv_and_softmax() {
    use ugdseg_core::ops;
    use ugdseg_core::params::{Initializer, ParamStore};
    use ugdseg_core::ugem::{coarse_predict, init_head};

    let mut store = ParamStore::new();
    let mut init = Initializer::new(3);
    let head = init_head(&mut store, &mut init, "head", 3, 2).unwrap();
    let mut rng = SplitMix64::new(0xC0A);
    let x = FeatureMap::new([1, 3, 4, 4], (0..48).map(|_| rng.range_f64(-1.0, 1.0)).collect()).unwrap();

    let mut sess = Session::new(&store, false);
    let xid = sess.input(&x);
    let p = coarse_predict(&mut sess, xid, &head).unwrap();

    // the same composition spelled out through raw ops
    let w = sess.param("head.w").unwrap();
    let b = sess.param("head.b").unwrap();
    let logits = ops::conv2d(&mut sess.tape, xid, w, b, 1, 0).unwrap();
    let expect = ops::softmax_channel(&mut sess.tape, logits).unwrap();
    for (a, e) in sess.tape.value(p).iter().zip(sess.tape.value(expect)) {
        assert!((a - e).abs() < 1e-12);
    }
}
