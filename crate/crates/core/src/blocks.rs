//! Parameter-owning layers and the per-stage CNN / Transformer blocks.
//!
//! Layers hold parameter *names*; values live in the [`ParamStore`] and are
//! registered on the tape lazily through a [`Session`]. Construction order is
//! fixed so that a given seed always produces the same parameter values, and
//! zero-initialized offset predictors consume no RNG draws.

use crate::deform::{AttentionConfig, DeformAttentionLayer, LocalAttentionLayer};
use crate::ops;
use crate::params::{Initializer, ParamStore};
use crate::tape::{BnUpdate, BufId, Session};
use crate::Result;

// ── Basic layers ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: String,
    pub b: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        let n = cout * cin * k * k;
        let values = if zero_init { vec![0.0; n] } else { init.fan_in_uniform(n, cin * k * k) };
        store.add(&w, vec![cout, cin, k, k], values, true)?;
        store.add(&b, vec![cout], vec![0.0; cout], true)?;
        Ok(Conv2dLayer { w, b, stride, pad })
    }

    pub fn forward(&self, sess: &mut Session, x: BufId) -> Result<BufId> {
        let w = sess.param(&self.w)?;
        let b = sess.param(&self.b)?;
        ops::conv2d(&mut sess.tape, x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    scale: String,
    shift: String,
    running_mean: String,
    running_var: String,
    eps: f64,
}

impl BatchNormLayer {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize, eps: f64) -> Result<Self> {
        let scale = format!("{name}.scale");
        let shift = format!("{name}.shift");
        let running_mean = format!("{name}.running_mean");
        let running_var = format!("{name}.running_var");
        store.add(&scale, vec![channels], vec![1.0; channels], true)?;
        store.add(&shift, vec![channels], vec![0.0; channels], true)?;
        store.add(&running_mean, vec![channels], vec![0.0; channels], false)?;
        store.add(&running_var, vec![channels], vec![1.0; channels], false)?;
        Ok(BatchNormLayer { scale, shift, running_mean, running_var, eps })
    }

    pub fn forward(&self, sess: &mut Session, x: BufId) -> Result<BufId> {
        let scale = sess.param(&self.scale)?;
        let shift = sess.param(&self.shift)?;
        if sess.training {
            let (y, batch_mean, batch_var) = ops::batch_norm_train(&mut sess.tape, x, scale, shift, self.eps)?;
            sess.bn_updates.push(BnUpdate {
                mean_name: self.running_mean.clone(),
                var_name: self.running_var.clone(),
                batch_mean,
                batch_var,
            });
            Ok(y)
        } else {
            let rm = sess.param_value(&self.running_mean)?.to_vec();
            let rv = sess.param_value(&self.running_var)?.to_vec();
            ops::batch_norm_eval(&mut sess.tape, x, scale, shift, &rm, &rv, self.eps)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    scale: String,
    shift: String,
    eps: f64,
}

impl LayerNormLayer {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize, eps: f64) -> Result<Self> {
        let scale = format!("{name}.scale");
        let shift = format!("{name}.shift");
        store.add(&scale, vec![channels], vec![1.0; channels], true)?;
        store.add(&shift, vec![channels], vec![0.0; channels], true)?;
        Ok(LayerNormLayer { scale, shift, eps })
    }

    pub fn forward(&self, sess: &mut Session, x: BufId) -> Result<BufId> {
        let scale = sess.param(&self.scale)?;
        let shift = sess.param(&self.shift)?;
        ops::layer_norm(&mut sess.tape, x, scale, shift, self.eps)
    }
}

// ── CNN block: two DConv-BN-ReLU groups ──────────────────────────────

/// One deformable-convolution group. With `deformable` off the offset
/// predictor is omitted and a constant zero offset field feeds the same
/// sampling path, so the two variants are bit-identical at zero offsets.
#[derive(Debug, Clone)]
pub struct DeformConvUnit {
    offset_conv: Option<Conv2dLayer>,
    conv_w: String,
    conv_b: String,
    bn: BatchNormLayer,
    taps: usize,
}

impl DeformConvUnit {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        deformable: bool,
        bn_eps: f64,
    ) -> Result<Self> {
        let taps = 9; // 3x3 kernel
        let offset_conv = if deformable {
            Some(Conv2dLayer::init(store, init, &format!("{name}.offset"), cin, 2 * taps, 3, 1, 1, true)?)
        } else {
            None
        };
        let conv_w = format!("{name}.conv.w");
        let conv_b = format!("{name}.conv.b");
        store.add(&conv_w, vec![cout, cin, 3, 3], init.fan_in_uniform(cout * cin * 9, cin * 9), true)?;
        store.add(&conv_b, vec![cout], vec![0.0; cout], true)?;
        let bn = BatchNormLayer::init(store, &format!("{name}.bn"), cout, bn_eps)?;
        Ok(DeformConvUnit { offset_conv, conv_w, conv_b, bn, taps })
    }

    pub fn forward(&self, sess: &mut Session, x: BufId) -> Result<BufId> {
        let s = sess.tape.shape(x).to_vec();
        let offsets = match &self.offset_conv {
            Some(oc) => oc.forward(sess, x)?,
            None => {
                let n = s[0] * 2 * self.taps * s[2] * s[3];
                sess.tape.alloc(vec![s[0], 2 * self.taps, s[2], s[3]], vec![0.0; n])
            }
        };
        let w = sess.param(&self.conv_w)?;
        let b = sess.param(&self.conv_b)?;
        let y = ops::deform_conv2d(&mut sess.tape, x, w, b, offsets, 1)?;
        let y = self.bn.forward(sess, y)?;
        Ok(ops::relu(&mut sess.tape, y))
    }
}

/// CNN block: two consecutive DConv-BN-ReLU groups at constant width.
#[derive(Debug, Clone)]
pub struct CnnBlock {
    unit1: DeformConvUnit,
    unit2: DeformConvUnit,
}

impl CnnBlock {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        deformable: bool,
        bn_eps: f64,
    ) -> Result<Self> {
        Ok(CnnBlock {
            unit1: DeformConvUnit::init(store, init, &format!("{name}.u1"), channels, channels, deformable, bn_eps)?,
            unit2: DeformConvUnit::init(store, init, &format!("{name}.u2"), channels, channels, deformable, bn_eps)?,
        })
    }

    pub fn forward(&self, sess: &mut Session, x: BufId) -> Result<BufId> {
        let y = self.unit1.forward(sess, x)?;
        self.unit2.forward(sess, y)
    }
}

// ── Transformer block: local attention then deformable attention ─────

/// Pre-norm residual block: `x + LA(LN(x))`, then `x + DA(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNormLayer,
    local: LocalAttentionLayer,
    ln2: LayerNormLayer,
    deform: DeformAttentionLayer,
}

impl TransformerBlock {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        cfg: &AttentionConfig,
        deformable: bool,
        ln_eps: f64,
    ) -> Result<Self> {
        let ln1 = LayerNormLayer::init(store, &format!("{name}.ln1"), channels, ln_eps)?;
        let local = LocalAttentionLayer::init(store, init, &format!("{name}.la"), channels, cfg)?;
        let ln2 = LayerNormLayer::init(store, &format!("{name}.ln2"), channels, ln_eps)?;
        let deform = DeformAttentionLayer::init(store, init, &format!("{name}.da"), channels, cfg, deformable)?;
        Ok(TransformerBlock { ln1, local, ln2, deform })
    }

    pub fn forward(&self, sess: &mut Session, x: BufId) -> Result<BufId> {
        let h = self.ln1.forward(sess, x)?;
        let a = self.local.forward(sess, h)?;
        let x1 = ops::add(&mut sess.tape, x, a)?;
        let h2 = self.ln2.forward(sess, x1)?;
        let a2 = self.deform.forward(sess, h2)?;
        ops::add(&mut sess.tape, x1, a2)
    }
}
