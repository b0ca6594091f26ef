//! Finite-difference checks for every differentiable primitive.

use ugdseg_core::gradcheck::{grad_check, kink_free_values, uniform_values, CheckTarget, GradCheckReport};
use ugdseg_core::ops;
use ugdseg_core::tape::{BufId, Tape};
use ugdseg_core::Result;

const TOL: f64 = 1e-4;
const SEEDS: [u64; 2] = [11, 5309];

fn assert_pass(name: &str, report: &GradCheckReport) {
    eprintln!("{name}: max_rel_err {:.3e}", report.max_rel_err());
    assert!(report.passed(), "{name} failed\n{report}");
}

fn check<F>(name: &str, targets: &[CheckTarget], build: F)
where
    F: Fn(&mut Tape, &[BufId]) -> Result<BufId>,
{
    let report = grad_check(targets, TOL, build).unwrap();
    assert_pass(name, &report);
}

#[test]
fn conv2d_gradients() {
    for seed in SEEDS {
        let targets = [
            CheckTarget::new("x", vec![1, 2, 4, 4], uniform_values(32, seed, -1.0, 1.0)),
            CheckTarget::new("w", vec![3, 2, 3, 3], uniform_values(54, seed + 1, -0.5, 0.5)),
            CheckTarget::new("b", vec![3], uniform_values(3, seed + 2, -0.5, 0.5)),
        ];
        check("conv2d", &targets, |t, ids| ops::conv2d(t, ids[0], ids[1], ids[2], 1, 1));
        check("conv2d_stride2", &targets, |t, ids| ops::conv2d(t, ids[0], ids[1], ids[2], 2, 1));
    }
}

#[test]
fn batch_norm_gradients() {
    for seed in SEEDS {
        let targets = [
            CheckTarget::new("x", vec![2, 3, 3, 3], uniform_values(54, seed, -2.0, 2.0)),
            CheckTarget::new("scale", vec![3], uniform_values(3, seed + 1, 0.5, 1.5)),
            CheckTarget::new("shift", vec![3], uniform_values(3, seed + 2, -0.5, 0.5)),
        ];
        check("batch_norm_train", &targets, |t, ids| {
            let (y, _, _) = ops::batch_norm_train(t, ids[0], ids[1], ids[2], 1e-5)?;
            Ok(y)
        });
        check("batch_norm_eval", &targets, |t, ids| {
            ops::batch_norm_eval(t, ids[0], ids[1], ids[2], &[0.1, -0.2, 0.3], &[0.9, 1.1, 1.4], 1e-5)
        });
    }
}

#[test]
fn layer_norm_gradients() {
    for seed in SEEDS {
        let targets = [
            CheckTarget::new("x", vec![1, 4, 3, 3], uniform_values(36, seed, -2.0, 2.0)),
            CheckTarget::new("scale", vec![4], uniform_values(4, seed + 1, 0.5, 1.5)),
            CheckTarget::new("shift", vec![4], uniform_values(4, seed + 2, -0.5, 0.5)),
        ];
        check("layer_norm", &targets, |t, ids| ops::layer_norm(t, ids[0], ids[1], ids[2], 1e-6));
    }
}

#[test]
fn linear_and_matmul_gradients() {
    for seed in SEEDS {
        let targets = [
            CheckTarget::new("x", vec![3, 4], uniform_values(12, seed, -1.0, 1.0)),
            CheckTarget::new("w", vec![2, 4], uniform_values(8, seed + 1, -1.0, 1.0)),
            CheckTarget::new("b", vec![2], uniform_values(2, seed + 2, -1.0, 1.0)),
        ];
        check("linear", &targets, |t, ids| ops::linear(t, ids[0], ids[1], ids[2]));

        let mm = [
            CheckTarget::new("a", vec![3, 4], uniform_values(12, seed, -1.0, 1.0)),
            CheckTarget::new("b", vec![4, 2], uniform_values(8, seed + 3, -1.0, 1.0)),
        ];
        check("matmul", &mm, |t, ids| ops::matmul(t, ids[0], ids[1]));
    }
}

#[test]
fn softmax_relu_tanh_gradients() {
    for seed in SEEDS {
        let sm = [CheckTarget::new("x", vec![1, 3, 2, 2], uniform_values(12, seed, -2.0, 2.0))];
        check("softmax_channel", &sm, |t, ids| ops::softmax_channel(t, ids[0]));

        let re = [CheckTarget::new("x", vec![2, 2, 2, 2], kink_free_values(16, seed))];
        check("relu", &re, |t, ids| Ok(ops::relu(t, ids[0])));

        let th = [CheckTarget::new("x", vec![6], uniform_values(6, seed, -2.0, 2.0))];
        check("tanh", &th, |t, ids| Ok(ops::tanh(t, ids[0])));
    }
}

#[test]
fn backward_trivial_identities() {
    // sum(relu(x)) with positive x: gradient of x is all ones.
    let mut tape = Tape::new();
    let x = tape.alloc(vec![4], vec![0.5, 1.0, 2.0, 3.0]);
    let y = ops::relu(&mut tape, x);
    let loss = ops::sum_all(&mut tape, y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);

    // sum(softmax(x)) is constant 1 per pixel: gradient of x is zero.
    let mut tape = Tape::new();
    let x = tape.alloc(vec![1, 3, 1, 2], vec![0.3, -0.4, 1.2, 0.0, 2.0, -1.0]);
    let y = ops::softmax_channel(&mut tape, x).unwrap();
    let loss = ops::sum_all(&mut tape, y);
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).unwrap().iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn resample_gradients() {
    for seed in SEEDS {
        let up = [CheckTarget::new("x", vec![1, 2, 3, 3], uniform_values(18, seed, -1.0, 1.0))];
        check("upsample_bilinear", &up, |t, ids| ops::upsample_bilinear(t, ids[0], 2));

        let down = [CheckTarget::new("x", vec![1, 2, 4, 4], uniform_values(32, seed, -1.0, 1.0))];
        check("downsample_avg", &down, |t, ids| ops::downsample_avg(t, ids[0], 2));
    }
}

#[test]
fn bilinear_sample_gradients() {
    for seed in SEEDS {
        // Fractional points strictly inside the map, away from integer
        // coordinates (floor discontinuities).
        let pts: Vec<f64> = uniform_values(12, seed + 9, 0.2, 4.6)
            .iter()
            .map(|v| {
                let f = v.fract();
                if f < 0.1 || f > 0.9 {
                    v.floor() + 0.5
                } else {
                    *v
                }
            })
            .collect();
        let targets = [
            CheckTarget::new("x", vec![1, 2, 6, 6], uniform_values(72, seed, -1.0, 1.0)),
            CheckTarget::new("points", vec![1, 6, 2], pts),
        ];
        check("bilinear_sample", &targets, |t, ids| ops::bilinear_sample(t, ids[0], ids[1]));
    }
}

#[test]
fn offsets_to_points_gradients() {
    let base: Vec<f64> = (0..8).map(|i| (i / 2) as f64).collect();
    let targets = [CheckTarget::new("offsets", vec![1, 2, 2, 2], uniform_values(8, 3, -0.4, 0.4))];
    check("offsets_to_points", &targets, |t, ids| ops::offsets_to_points(t, ids[0], &base));
}

#[test]
fn deform_conv2d_gradients() {
    for seed in SEEDS {
        let targets = [
            CheckTarget::new("x", vec![1, 2, 5, 5], uniform_values(50, seed, -1.0, 1.0)),
            CheckTarget::new("w", vec![2, 2, 3, 3], uniform_values(36, seed + 1, -0.5, 0.5)),
            CheckTarget::new("b", vec![2], uniform_values(2, seed + 2, -0.5, 0.5)),
            CheckTarget::new(
                "offsets",
                vec![1, 18, 5, 5],
                // Strictly fractional so no sampling point sits on the floor
                // discontinuity.
                uniform_values(450, seed + 3, -1.0, 1.0)
                    .iter()
                    .map(|v| v * 0.8 + 0.25 * v.signum().max(0.0) + 0.1)
                    .collect(),
            ),
        ];
        check("deform_conv2d", &targets, |t, ids| {
            ops::deform_conv2d(t, ids[0], ids[1], ids[2], ids[3], 1)
        });
    }
}

#[test]
fn attention_gradients() {
    for seed in SEEDS {
        let la = [
            CheckTarget::new("q", vec![1, 4, 4, 4], uniform_values(64, seed, -1.0, 1.0)),
            CheckTarget::new("k", vec![1, 4, 4, 4], uniform_values(64, seed + 1, -1.0, 1.0)),
            CheckTarget::new("v", vec![1, 4, 4, 4], uniform_values(64, seed + 2, -1.0, 1.0)),
        ];
        check("local_attention", &la, |t, ids| ops::local_attention(t, ids[0], ids[1], ids[2], 2, 3));

        let ca = [
            CheckTarget::new("q", vec![1, 4, 3, 3], uniform_values(36, seed, -1.0, 1.0)),
            CheckTarget::new("k", vec![1, 4, 5, 1], uniform_values(20, seed + 1, -1.0, 1.0)),
            CheckTarget::new("v", vec![1, 4, 5, 1], uniform_values(20, seed + 2, -1.0, 1.0)),
        ];
        check("cross_attention", &ca, |t, ids| ops::cross_attention(t, ids[0], ids[1], ids[2], 2));
    }
}

#[test]
fn fuse_entropy_and_structure_gradients() {
    for seed in SEEDS {
        let gf = [
            CheckTarget::new("f_self", vec![1, 3, 3, 3], uniform_values(27, seed, -1.0, 1.0)),
            CheckTarget::new("f_other", vec![1, 3, 3, 3], uniform_values(27, seed + 1, -1.0, 1.0)),
            CheckTarget::new("gate", vec![1, 1, 3, 3], uniform_values(9, seed + 2, 0.1, 0.9)),
        ];
        check("gated_fuse", &gf, |t, ids| ops::gated_fuse(t, ids[0], ids[1], ids[2]));

        // Entropy checked through softmax so inputs are valid distributions.
        let en = [CheckTarget::new("logits", vec![1, 2, 3, 3], uniform_values(18, seed, -1.5, 1.5))];
        check("entropy_channel", &en, |t, ids| {
            let p = ops::softmax_channel(t, ids[0])?;
            ops::entropy_channel(t, p)
        });

        let sc = [CheckTarget::new("x", vec![1, 2, 2, 2], uniform_values(8, seed, -1.0, 1.0))];
        check("scale_channels", &sc, |t, ids| ops::scale_channels(t, ids[0], vec![2.0, -0.5]));

        let cc = [
            CheckTarget::new("a", vec![1, 2, 2, 2], uniform_values(8, seed, -1.0, 1.0)),
            CheckTarget::new("b", vec![1, 1, 2, 2], uniform_values(4, seed + 1, -1.0, 1.0)),
        ];
        check("concat_channels", &cc, |t, ids| ops::concat_channels(t, ids[0], ids[1]));
        check("slice_channel", &cc[..1], |t, ids| ops::slice_channel(t, ids[0], 1));
    }
}

#[test]
fn loss_gradients() {
    for seed in SEEDS {
        let y: Vec<f64> = uniform_values(16, seed + 7, 0.0, 1.0).iter().map(|v| (*v > 0.5) as u8 as f64).collect();
        let p = CheckTarget::new("p", vec![1, 1, 4, 4], uniform_values(16, seed, 0.05, 0.95));
        let y_dice = y.clone();
        check("dice_loss", std::slice::from_ref(&p), move |t, ids| {
            ops::dice_loss_op(t, ids[0], y_dice.clone(), 1.0)
        });
        let y_bdou = y.clone();
        check("boundary_dou_loss", std::slice::from_ref(&p), move |t, ids| {
            ops::boundary_dou_loss_op(t, ids[0], y_bdou.clone(), 0.6, 1e-6)
        });
    }
}
