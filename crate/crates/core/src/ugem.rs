//! Uncertainty-gated enhancing module: per-branch coarse predictions,
//! normalized-entropy uncertainty maps, and bidirectional convex fusion.
//!
//! Each branch's own uncertainty gates how much of the *other* branch it
//! absorbs: `F'_cnn = (1 - U_cnn) * F_cnn + U_cnn * F_trans` and
//! symmetrically for the transformer branch.

use crate::blocks::Conv2dLayer;
use crate::ops;
use crate::params::{Initializer, ParamStore};
use crate::tape::{BufId, Session};
use crate::{Error, Result};

pub use crate::ops::elementwise::gated_fuse;
pub use crate::ops::norm::entropy_channel as entropy_uncertainty;

/// 1x1 classifier head followed by channel softmax.
pub fn coarse_predict(sess: &mut Session, features: BufId, head: &Conv2dLayer) -> Result<BufId> {
    let logits = head.forward(sess, features)?;
    ops::softmax_channel(&mut sess.tape, logits)
}

/// Create a per-stage classifier head projecting to `classes` channels.
pub fn init_head(
    store: &mut ParamStore,
    init: &mut Initializer,
    name: &str,
    channels: usize,
    classes: usize,
) -> Result<Conv2dLayer> {
    if classes < 2 {
        return Err(Error::config(format!("classifier head needs >= 2 classes, got {classes}")));
    }
    Conv2dLayer::init(store, init, name, channels, classes, 1, 1, 0, false)
}

/// Enhanced feature pair plus the coarse maps consumed by deep supervision.
#[derive(Debug, Clone, Copy)]
pub struct UgemOutput {
    pub enhanced_cnn: BufId,
    pub enhanced_trans: BufId,
    pub coarse_cnn: BufId,
    pub coarse_trans: BufId,
}

/// Per-stage module: one classifier head per branch.
#[derive(Debug, Clone)]
pub struct UgemModule {
    pub head_cnn: Conv2dLayer,
    pub head_trans: Conv2dLayer,
}

impl UgemModule {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        classes: usize,
    ) -> Result<Self> {
        Ok(UgemModule {
            head_cnn: init_head(store, init, &format!("{name}.head_cnn"), channels, classes)?,
            head_trans: init_head(store, init, &format!("{name}.head_trans"), channels, classes)?,
        })
    }

    /// Coarse-predict both branches and, when `gate` is set, exchange
    /// features through the entropy gates. With `gate` off the features pass
    /// through unchanged while the coarse maps are still emitted.
    pub fn forward(&self, sess: &mut Session, f_cnn: BufId, f_trans: BufId, gate: bool) -> Result<UgemOutput> {
        if sess.tape.shape(f_cnn) != sess.tape.shape(f_trans) {
            return Err(Error::input(format!(
                "ugem: branch shapes differ, {:?} vs {:?}",
                sess.tape.shape(f_cnn),
                sess.tape.shape(f_trans)
            )));
        }
        let coarse_cnn = coarse_predict(sess, f_cnn, &self.head_cnn)?;
        let coarse_trans = coarse_predict(sess, f_trans, &self.head_trans)?;
        if !gate {
            return Ok(UgemOutput { enhanced_cnn: f_cnn, enhanced_trans: f_trans, coarse_cnn, coarse_trans });
        }
        let u_cnn = ops::entropy_channel(&mut sess.tape, coarse_cnn)?;
        let u_trans = ops::entropy_channel(&mut sess.tape, coarse_trans)?;
        let enhanced_cnn = ops::gated_fuse(&mut sess.tape, f_cnn, f_trans, u_cnn)?;
        let enhanced_trans = ops::gated_fuse(&mut sess.tape, f_trans, f_cnn, u_trans)?;
        Ok(UgemOutput { enhanced_cnn, enhanced_trans, coarse_cnn, coarse_trans })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::tensor::FeatureMap;

    fn module(channels: usize) -> (ParamStore, UgemModule) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(17);
        let m = UgemModule::init(&mut store, &mut init, "ugem", channels, 2).unwrap();
        (store, m)
    }

    #[test]
    fn zero_head_gives_uniform_distribution() {
        let (mut store, m) = module(3);
        let wname = &m.head_cnn.w;
        store.get_mut(wname).unwrap().value.iter_mut().for_each(|v| *v = 0.0);
        let x = FeatureMap::from_fn([1, 3, 2, 2], |_, c, i, j| (c + i + j) as f64);
        let mut sess = Session::new(&store, false);
        let xid = sess.input(&x);
        let p = coarse_predict(&mut sess, xid, &m.head_cnn).unwrap();
        assert!(sess.tape.value(p).iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn head_needs_two_classes() {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(0);
        assert!(init_head(&mut store, &mut init, "h", 4, 1).is_err());
    }

    #[test]
    fn identical_branches_pass_through_exactly() {
        // Fusing a map with itself is the identity regardless of U.
        let (store, m) = module(2);
        let x = FeatureMap::from_fn([1, 2, 3, 3], |_, c, i, j| ((c * 5 + i * 3 + j) as f64).sin());
        let mut sess = Session::new(&store, false);
        let a = sess.input(&x);
        let b = sess.input(&x);
        let out = m.forward(&mut sess, a, b, true).unwrap();
        // (1-u)*a + u*a re-associates, so allow one ulp
        for (got, want) in sess.tape.value(out.enhanced_cnn).iter().zip(&x.data) {
            assert!((got - want).abs() <= f64::EPSILON, "{got} vs {want}");
        }
        for (got, want) in sess.tape.value(out.enhanced_trans).iter().zip(&x.data) {
            assert!((got - want).abs() <= f64::EPSILON, "{got} vs {want}");
        }
    }

    #[test]
    fn confident_head_keeps_own_features() {
        // Forcing the CNN head to huge logits makes U_cnn ~ 0, so the
        // enhanced CNN features equal the inputs.
        let (mut store, m) = module(2);
        {
            let w = store.get_mut(&m.head_cnn.w).unwrap();
            w.value.iter_mut().for_each(|v| *v = 0.0);
            let b = store.get_mut(&m.head_cnn.b).unwrap();
            b.value[0] = 60.0;
            b.value[1] = -60.0;
        }
        let fc = FeatureMap::from_fn([1, 2, 2, 2], |_, c, i, j| (c + 2 * i + j) as f64);
        let ft = FeatureMap::from_fn([1, 2, 2, 2], |_, c, i, j| -((c + i + 3 * j) as f64));
        let mut sess = Session::new(&store, false);
        let a = sess.input(&fc);
        let b = sess.input(&ft);
        let out = m.forward(&mut sess, a, b, true).unwrap();
        for (got, want) in sess.tape.value(out.enhanced_cnn).iter().zip(&fc.data) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn enhanced_values_stay_in_branch_interval() {
        let (store, m) = module(2);
        let mut rng = SplitMix64::new(123);
        for _ in 0..20 {
            let fc = FeatureMap::from_fn([1, 2, 3, 3], |_, _, _, _| rng.range_f64(-2.0, 2.0));
            let ft = FeatureMap::from_fn([1, 2, 3, 3], |_, _, _, _| rng.range_f64(-2.0, 2.0));
            let mut sess = Session::new(&store, false);
            let a = sess.input(&fc);
            let b = sess.input(&ft);
            let out = m.forward(&mut sess, a, b, true).unwrap();
            for (idx, e) in sess.tape.value(out.enhanced_cnn).iter().enumerate() {
                let lo = fc.data[idx].min(ft.data[idx]);
                let hi = fc.data[idx].max(ft.data[idx]);
                assert!(*e >= lo - 1e-12 && *e <= hi + 1e-12, "value {e} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn gate_disabled_passes_features_through() {
        let (store, m) = module(2);
        let fc = FeatureMap::from_fn([1, 2, 2, 2], |_, c, i, j| (c + i + j) as f64);
        let ft = FeatureMap::from_fn([1, 2, 2, 2], |_, c, i, j| (c * i * j) as f64);
        let mut sess = Session::new(&store, false);
        let a = sess.input(&fc);
        let b = sess.input(&ft);
        let out = m.forward(&mut sess, a, b, false).unwrap();
        assert_eq!(out.enhanced_cnn, a);
        assert_eq!(out.enhanced_trans, b);
        // coarse maps still emitted and valid distributions
        let p = sess.tape.value(out.coarse_trans);
        for pos in 0..4 {
            let s = p[pos] + p[4 + pos];
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
