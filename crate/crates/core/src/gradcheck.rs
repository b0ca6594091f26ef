//! Central finite-difference validation of analytic gradients.

use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::tape::{BufId, Tape};
use crate::{ops, Result};

/// Central-difference step at 64-bit precision.
pub const FD_STEP: f64 = 1e-5;

/// Relative-error floor: differences below this magnitude are compared
/// absolutely so finite-difference noise on near-zero gradients does not
/// produce spurious failures.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckItem {
    pub name: String,
    pub max_rel_err: f64,
    pub non_finite: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub items: Vec<GradCheckItem>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| !i.non_finite && i.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.items.iter().map(|i| i.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failing(&self) -> Vec<&GradCheckItem> {
        self.items
            .iter()
            .filter(|i| i.non_finite || i.max_rel_err >= self.tolerance)
            .collect()
    }
}

/// A leaf tensor whose gradient is under test.
#[derive(Debug, Clone)]
pub struct CheckTarget {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl CheckTarget {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Self {
        CheckTarget { name: name.to_string(), shape, data }
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Fixed probe vector collapsing an arbitrary output to a scalar so a single
/// backward pass covers the whole Jacobian.
fn probe(n: usize) -> Vec<f64> {
    let mut rng = SplitMix64::new(0x5EED_0001 ^ n as u64);
    (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect()
}

/// Check the gradients of `build`'s output with respect to every target.
///
/// `build` must be a pure function of the registered buffers: it is re-run
/// under perturbed inputs for the central differences.
pub fn grad_check<F>(targets: &[CheckTarget], tolerance: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[BufId]) -> Result<BufId>,
{
    let eval = |data: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<BufId> = targets
            .iter()
            .zip(data)
            .map(|(t, d)| tape.alloc(t.shape.clone(), d.clone()))
            .collect();
        let out = build(&mut tape, &ids)?;
        let r = probe(tape.numel(out));
        let loss = ops::dot_const(&mut tape, out, r)?;
        Ok(tape.scalar(loss))
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<BufId> = targets.iter().map(|t| tape.alloc(t.shape.clone(), t.data.clone())).collect();
    let out = build(&mut tape, &ids)?;
    let r = probe(tape.numel(out));
    let loss = ops::dot_const(&mut tape, out, r)?;
    tape.backward(loss)?;

    let mut data: Vec<Vec<f64>> = targets.iter().map(|t| t.data.clone()).collect();
    let mut items = Vec::with_capacity(targets.len());
    for (ti, target) in targets.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(ids[ti]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; target.data.len()],
        };
        if analytic.iter().any(|v| !v.is_finite()) {
            items.push(GradCheckItem { name: target.name.clone(), max_rel_err: f64::INFINITY, non_finite: true });
            continue;
        }
        let mut max_err: f64 = 0.0;
        for e in 0..target.data.len() {
            let orig = data[ti][e];
            data[ti][e] = orig + FD_STEP;
            let fp = eval(&data)?;
            data[ti][e] = orig - FD_STEP;
            let fm = eval(&data)?;
            data[ti][e] = orig;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            max_err = max_err.max(rel_err(analytic[e], numeric));
        }
        items.push(GradCheckItem { name: target.name.clone(), max_rel_err: max_err, non_finite: false });
    }
    Ok(GradCheckReport { items, tolerance })
}

/// Check every trainable parameter of a store against finite differences of
/// a scalar loss.
///
/// `analytic` runs one forward+backward pass and returns named gradients;
/// `eval` returns the loss under the store's current values. For large
/// stores `max_elements` caps how many elements per tensor are probed
/// (chosen deterministically from the tensor name).
pub fn grad_check_store<FA, FE>(
    store: &mut ParamStore,
    tolerance: f64,
    max_elements: Option<usize>,
    fd_step: f64,
    analytic: FA,
    eval: FE,
) -> Result<GradCheckReport>
where
    FA: FnOnce(&ParamStore) -> Result<Vec<(String, Vec<f64>)>>,
    FE: Fn(&ParamStore) -> Result<f64>,
{
    let grads = analytic(store)?;
    let lookup: std::collections::HashMap<&str, &Vec<f64>> =
        grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
    let names: Vec<String> = store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    let mut items = Vec::with_capacity(names.len());
    for name in names {
        let n = store.get(&name)?.value.len();
        let zero = vec![0.0; n];
        let analytic_g: Vec<f64> = lookup.get(name.as_str()).copied().unwrap_or(&zero).clone();
        if analytic_g.iter().any(|v| !v.is_finite()) {
            items.push(GradCheckItem { name, max_rel_err: f64::INFINITY, non_finite: true });
            continue;
        }
        let elements: Vec<usize> = match max_elements {
            Some(cap) if n > cap => {
                let mut rng = SplitMix64::new(name.bytes().fold(0u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64)));
                let mut picked: Vec<usize> = (0..cap).map(|_| rng.below(n)).collect();
                picked.sort_unstable();
                picked.dedup();
                picked
            }
            _ => (0..n).collect(),
        };
        let mut max_err: f64 = 0.0;
        for e in elements {
            let orig = store.get(&name)?.value[e];
            store.get_mut(&name)?.value[e] = orig + fd_step;
            let fp = eval(store)?;
            store.get_mut(&name)?.value[e] = orig - fd_step;
            let fm = eval(store)?;
            store.get_mut(&name)?.value[e] = orig;
            let numeric = (fp - fm) / (2.0 * fd_step);
            max_err = max_err.max(rel_err(analytic_g[e], numeric));
        }
        items.push(GradCheckItem { name, max_rel_err: max_err, non_finite: false });
    }
    Ok(GradCheckReport { items, tolerance })
}

/// Random values kept away from relu kinks: magnitudes at least 0.1.
pub fn kink_free_values(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    (0..n)
        .map(|_| {
            let v = rng.range_f64(-1.0, 1.0);
            v + 0.1 * v.signum()
        })
        .collect()
}

/// Plain uniform values in `(lo, hi)`.
pub fn uniform_values(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| rng.range_f64(lo, hi)).collect()
}

/// Named gradient checks over every differentiable operation, the composed
/// blocks, and the full network. Shared by the CLI and the acceptance suite.
pub mod suite {
    use super::*;
    use crate::blocks::{CnnBlock, TransformerBlock};
    use crate::deform::{AttentionConfig, DeformAttentionLayer, LocalAttentionLayer};
    use crate::losses::{total_loss, LossConfig};
    use crate::metrics::SegmentationMask;
    use crate::network::{Network, NetworkConfig};
    use crate::ops;
    use crate::params::{Initializer, ParamStore};
    use crate::tape::{BufId, Session};

    pub const OP_TOL: f64 = 1e-4;
    pub const NETWORK_TOL: f64 = 1e-3;

    /// Scalarize an arbitrary buffer with the fixed probe vector.
    fn probe_loss(sess: &mut Session, out: BufId) -> Result<BufId> {
        let r = probe(sess.tape.numel(out));
        ops::dot_const(&mut sess.tape, out, r)
    }

    /// Check all trainable entries of `store` (inputs included, registered
    /// as trainable tensors) against finite differences of `loss_fn`.
    fn store_check<L>(
        store: &mut ParamStore,
        tol: f64,
        max_elements: Option<usize>,
        loss_fn: L,
    ) -> Result<GradCheckReport>
    where
        L: Fn(&mut Session) -> Result<BufId>,
    {
        grad_check_store(
            store,
            tol,
            max_elements,
            FD_STEP,
            |s| {
                let mut sess = Session::new(s, true);
                let loss = loss_fn(&mut sess)?;
                sess.tape.backward(loss)?;
                Ok(sess.finish().0)
            },
            |s| {
                let mut sess = Session::new(s, true);
                let loss = loss_fn(&mut sess)?;
                Ok(sess.tape.scalar(loss))
            },
        )
    }

    /// Per-operation checks at `OP_TOL`, covering every differentiable
    /// primitive plus the parameterized attention and gating composites.
    pub fn check_ops(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
        let mut results = Vec::new();
        let mut run = |name: &str, report: Result<GradCheckReport>| -> Result<()> {
            results.push((name.to_string(), report?));
            Ok(())
        };

        run("conv2d", grad_check(
            &[
                CheckTarget::new("x", vec![1, 2, 4, 4], uniform_values(32, seed, -1.0, 1.0)),
                CheckTarget::new("w", vec![3, 2, 3, 3], uniform_values(54, seed ^ 1, -0.5, 0.5)),
                CheckTarget::new("b", vec![3], uniform_values(3, seed ^ 2, -0.5, 0.5)),
            ],
            OP_TOL,
            |t, ids| ops::conv2d(t, ids[0], ids[1], ids[2], 1, 1),
        ))?;

        let bn_targets = [
            CheckTarget::new("x", vec![2, 3, 3, 3], uniform_values(54, seed ^ 3, -2.0, 2.0)),
            CheckTarget::new("scale", vec![3], uniform_values(3, seed ^ 4, 0.5, 1.5)),
            CheckTarget::new("shift", vec![3], uniform_values(3, seed ^ 5, -0.5, 0.5)),
        ];
        run("batch_norm_train", grad_check(&bn_targets, OP_TOL, |t, ids| {
            Ok(ops::batch_norm_train(t, ids[0], ids[1], ids[2], 1e-5)?.0)
        }))?;
        run("batch_norm_eval", grad_check(&bn_targets, OP_TOL, |t, ids| {
            ops::batch_norm_eval(t, ids[0], ids[1], ids[2], &[0.1, -0.2, 0.3], &[0.9, 1.1, 1.4], 1e-5)
        }))?;

        run("layer_norm", grad_check(
            &[
                CheckTarget::new("x", vec![1, 4, 3, 3], uniform_values(36, seed ^ 6, -2.0, 2.0)),
                CheckTarget::new("scale", vec![4], uniform_values(4, seed ^ 7, 0.5, 1.5)),
                CheckTarget::new("shift", vec![4], uniform_values(4, seed ^ 8, -0.5, 0.5)),
            ],
            OP_TOL,
            |t, ids| ops::layer_norm(t, ids[0], ids[1], ids[2], 1e-6),
        ))?;

        run("linear", grad_check(
            &[
                CheckTarget::new("x", vec![3, 4], uniform_values(12, seed ^ 9, -1.0, 1.0)),
                CheckTarget::new("w", vec![2, 4], uniform_values(8, seed ^ 10, -1.0, 1.0)),
                CheckTarget::new("b", vec![2], uniform_values(2, seed ^ 11, -1.0, 1.0)),
            ],
            OP_TOL,
            |t, ids| ops::linear(t, ids[0], ids[1], ids[2]),
        ))?;

        run("softmax_channel", grad_check(
            &[CheckTarget::new("x", vec![1, 3, 2, 2], uniform_values(12, seed ^ 12, -2.0, 2.0))],
            OP_TOL,
            |t, ids| ops::softmax_channel(t, ids[0]),
        ))?;

        run("relu", grad_check(
            &[CheckTarget::new("x", vec![2, 2, 2, 2], kink_free_values(16, seed ^ 13))],
            OP_TOL,
            |t, ids| Ok(ops::relu(t, ids[0])),
        ))?;

        run("upsample_bilinear", grad_check(
            &[CheckTarget::new("x", vec![1, 2, 3, 3], uniform_values(18, seed ^ 14, -1.0, 1.0))],
            OP_TOL,
            |t, ids| ops::upsample_bilinear(t, ids[0], 2),
        ))?;

        run("downsample", grad_check(
            &[CheckTarget::new("x", vec![1, 2, 4, 4], uniform_values(32, seed ^ 15, -1.0, 1.0))],
            OP_TOL,
            |t, ids| ops::downsample_avg(t, ids[0], 2),
        ))?;

        let pts: Vec<f64> = uniform_values(12, seed ^ 16, 0.3, 4.7)
            .iter()
            .map(|v| if v.fract() < 0.1 || v.fract() > 0.9 { v.floor() + 0.5 } else { *v })
            .collect();
        run("bilinear_sample", grad_check(
            &[
                CheckTarget::new("x", vec![1, 2, 6, 6], uniform_values(72, seed ^ 17, -1.0, 1.0)),
                CheckTarget::new("points", vec![1, 6, 2], pts),
            ],
            OP_TOL,
            |t, ids| ops::bilinear_sample(t, ids[0], ids[1]),
        ))?;

        let offsets: Vec<f64> = uniform_values(450, seed ^ 18, -0.85, 0.85)
            .iter()
            .map(|v| v + 0.07 * v.signum())
            .collect();
        run("deformable_conv2d", grad_check(
            &[
                CheckTarget::new("x", vec![1, 2, 5, 5], uniform_values(50, seed ^ 19, -1.0, 1.0)),
                CheckTarget::new("w", vec![2, 2, 3, 3], uniform_values(36, seed ^ 20, -0.5, 0.5)),
                CheckTarget::new("b", vec![2], uniform_values(2, seed ^ 21, -0.5, 0.5)),
                CheckTarget::new("offsets", vec![1, 18, 5, 5], offsets),
            ],
            OP_TOL,
            |t, ids| ops::deform_conv2d(t, ids[0], ids[1], ids[2], ids[3], 1),
        ))?;

        // Parameterized composites, gradients flowing into projections and
        // offset predictors.
        {
            let mut store = ParamStore::new();
            let mut init = Initializer::new(seed ^ 22);
            let layer = LocalAttentionLayer::init(
                &mut store,
                &mut init,
                "la",
                4,
                &AttentionConfig { heads: 2, window: 3, ..Default::default() },
            )?;
            store.add("x", vec![1, 4, 4, 4], uniform_values(64, seed ^ 23, -1.0, 1.0), true)?;
            run("local_attention", store_check(&mut store, OP_TOL, None, |sess| {
                let x = sess.param("x")?;
                let out = layer.forward(sess, x)?;
                probe_loss(sess, out)
            }))?;
        }
        {
            let mut store = ParamStore::new();
            let mut init = Initializer::new(seed ^ 24);
            let layer = DeformAttentionLayer::init(
                &mut store,
                &mut init,
                "da",
                4,
                &AttentionConfig { heads: 2, ..Default::default() },
                true,
            )?;
            // nonzero offsets keep the check representative; small enough to
            // stay clear of floor discontinuities
            let n = store.get("da.offset.w")?.value.len();
            store.get_mut("da.offset.w")?.value = uniform_values(n, seed ^ 25, -0.05, 0.05);
            store.add("x", vec![1, 4, 4, 4], uniform_values(64, seed ^ 26, -1.0, 1.0), true)?;
            run("deformable_attention", store_check(&mut store, OP_TOL, None, |sess| {
                let x = sess.param("x")?;
                let out = layer.forward(sess, x)?;
                probe_loss(sess, out)
            }))?;
        }
        {
            let mut store = ParamStore::new();
            let mut init = Initializer::new(seed ^ 27);
            let module = crate::ugem::UgemModule::init(&mut store, &mut init, "ugem", 3, 2)?;
            store.add("f_cnn", vec![1, 3, 3, 3], uniform_values(27, seed ^ 28, -1.0, 1.0), true)?;
            store.add("f_trans", vec![1, 3, 3, 3], uniform_values(27, seed ^ 29, -1.0, 1.0), true)?;
            run("ugem_forward", store_check(&mut store, OP_TOL, None, |sess| {
                let fc = sess.param("f_cnn")?;
                let ft = sess.param("f_trans")?;
                let out = module.forward(sess, fc, ft, true)?;
                let enhanced = ops::concat_channels(&mut sess.tape, out.enhanced_cnn, out.enhanced_trans)?;
                let l1 = probe_loss(sess, enhanced)?;
                let l2 = probe_loss(sess, out.coarse_cnn)?;
                let l3 = probe_loss(sess, out.coarse_trans)?;
                ops::weighted_sum(&mut sess.tape, vec![(l1, 1.0), (l2, 0.5), (l3, 0.5)])
            }))?;
        }

        let y: Vec<f64> = uniform_values(16, seed ^ 30, 0.0, 1.0).iter().map(|v| (*v > 0.5) as u8 as f64).collect();
        let p = CheckTarget::new("p", vec![1, 1, 4, 4], uniform_values(16, seed ^ 31, 0.05, 0.95));
        let y_dice = y.clone();
        run("dice_loss", grad_check(std::slice::from_ref(&p), OP_TOL, move |t, ids| {
            ops::dice_loss_op(t, ids[0], y_dice.clone(), 1.0)
        }))?;
        let y_bdou = y;
        run("boundary_dou_loss", grad_check(std::slice::from_ref(&p), OP_TOL, move |t, ids| {
            ops::boundary_dou_loss_op(t, ids[0], y_bdou.clone(), 0.6, 1e-6)
        }))?;

        Ok(results)
    }

    /// Zero-initialized offset predictors sample at exactly integer
    /// coordinates, where bilinear interpolation has a one-sided derivative
    /// that central differences cannot match. Nudging the predictor biases
    /// moves every sampling point to a fractional position, off that
    /// measure-zero kink set (the same principle as drawing relu inputs away
    /// from zero).
    fn nudge_offset_biases(store: &mut ParamStore, seed: u64) {
        let names: Vec<String> = store
            .iter()
            .filter(|p| {
                // batch-norm shifts get the same treatment: a 1x1 stage with
                // batch 1 normalizes to exactly the shift, which at zero sits
                // on the relu kink
                (p.name.contains(".offset.") && p.name.ends_with(".b")) || p.name.ends_with("bn.shift")
            })
            .map(|p| p.name.clone())
            .collect();
        let mut rng = SplitMix64::new(seed ^ 0x0FF5E7);
        for name in names {
            let p = store.get_mut(&name).expect("name from iteration");
            for v in p.value.iter_mut() {
                let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
                *v = sign * rng.range_f64(0.08, 0.18);
            }
        }
    }

    /// Composed block checks at `OP_TOL`.
    pub fn check_blocks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
        let mut results = Vec::new();
        {
            let mut store = ParamStore::new();
            let mut init = Initializer::new(seed ^ 40);
            let block = CnnBlock::init(&mut store, &mut init, "cnn", 2, true, 1e-5)?;
            store.add("x", vec![2, 2, 5, 5], uniform_values(100, seed ^ 41, -1.0, 1.0), true)?;
            nudge_offset_biases(&mut store, seed);
            let report = store_check(&mut store, OP_TOL, None, |sess| {
                let x = sess.param("x")?;
                let out = block.forward(sess, x)?;
                probe_loss(sess, out)
            })?;
            results.push(("cnn_block".to_string(), report));
        }
        {
            let mut store = ParamStore::new();
            let mut init = Initializer::new(seed ^ 42);
            let cfg = AttentionConfig { heads: 2, window: 3, ..Default::default() };
            let block = TransformerBlock::init(&mut store, &mut init, "trans", 4, &cfg, true, 1e-6)?;
            store.add("x", vec![1, 4, 4, 4], uniform_values(64, seed ^ 43, -1.0, 1.0), true)?;
            nudge_offset_biases(&mut store, seed);
            let report = store_check(&mut store, OP_TOL, None, |sess| {
                let x = sess.param("x")?;
                let out = block.forward(sess, x)?;
                probe_loss(sess, out)
            })?;
            results.push(("transformer_block".to_string(), report));
        }
        Ok(results)
    }

    /// End-to-end check of the full training loss on a reduced network
    /// (16x16 input, 2-channel first stage) at `NETWORK_TOL`, probing a
    /// deterministic subset of elements per tensor.
    pub fn check_network(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
        let cfg = NetworkConfig {
            stage_channels: [2, 4, 8, 16],
            input_height: 16,
            input_width: 16,
            heads: [1, 1, 1, 1],
            ..Default::default()
        };
        let net = Network::new(cfg, seed)?;
        let image = crate::tensor::FeatureMap::new(
            [1, 1, 16, 16],
            uniform_values(256, seed ^ 50, 0.0, 1.0),
        )?;
        // deterministic blob target
        let mut mask = SegmentationMask::zeros(16, 16);
        for i in 5..11 {
            for j in 4..12 {
                if (i as i32 - 8).pow(2) + (j as i32 - 8).pow(2) <= 12 {
                    mask.data[i * 16 + j] = 1;
                }
            }
        }
        let masks = [mask];
        let loss_cfg = LossConfig::default();
        let mut store = net.store.clone();
        nudge_offset_biases(&mut store, seed);
        // Layer definitions come from `net`; values come from the (possibly
        // perturbed) store the session wraps.
        fn forward<'a>(
            net: &Network,
            image: &crate::tensor::FeatureMap,
            masks: &[SegmentationMask],
            loss_cfg: &LossConfig,
            s: &'a ParamStore,
        ) -> Result<(Session<'a>, BufId)> {
            let mut sess = Session::new(s, true);
            let out = net.forward(&mut sess, image)?;
            let lb = total_loss(&mut sess, &out, masks, loss_cfg, true)?;
            Ok((sess, lb.total_id))
        }
        // A deep composition crosses relu kinks more easily; the smaller
        // step keeps crossings rare while roundoff stays ~1e-10.
        let report = grad_check_store(
            &mut store,
            NETWORK_TOL,
            Some(6),
            1e-6,
            |s| {
                let (mut sess, loss) = forward(&net, &image, &masks, &loss_cfg, s)?;
                sess.tape.backward(loss)?;
                Ok(sess.finish().0)
            },
            |s| {
                let (sess, loss) = forward(&net, &image, &masks, &loss_cfg, s)?;
                Ok(sess.tape.scalar(loss))
            },
        )?;
        Ok(vec![("network_16x16".to_string(), report)])
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for item in &self.items {
            let status = if item.non_finite {
                "NON-FINITE"
            } else if item.max_rel_err < self.tolerance {
                "ok"
            } else {
                "FAIL"
            };
            writeln!(f, "{:40} max_rel_err {:10.3e}  {}", item.name, item.max_rel_err, status)?;
        }
        Ok(())
    }
}
