//! The full encoder-decoder: four hierarchical encoding stages and four
//! decoding stages, each pairing a CNN block with a Transformer block,
//! decoder-side uncertainty-gated enhancement, dual branch outputs, and a
//! fused final prediction.
//!
//! Geometry: a stride-2 stem brings the input to half resolution, stride-2
//! convolutions connect encoder stages, so stage `s` runs at `1/2^(s+1)`
//! scale. Encoder stages merge their two branch outputs by summation; the
//! merged map is the skip connection added to both branch inputs of the
//! matching decoder stage. Decoder upsampling is bilinear x2 followed by a
//! 1x1 channel projection per branch.

use serde::{Deserialize, Serialize};

use crate::blocks::{CnnBlock, Conv2dLayer, TransformerBlock};
use crate::deform::AttentionConfig;
use crate::metrics::SegmentationMask;
use crate::ops;
use crate::params::{Initializer, ParamStore};
use crate::tape::{BufId, Session};
use crate::tensor::FeatureMap;
use crate::ugem::{coarse_predict, init_head, UgemModule};
use crate::{Error, Result};

// ── Configuration ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Channel width per stage, strictly increasing.
    pub stage_channels: [usize; 4],
    pub classes: usize,
    pub in_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Ablation toggles: hybrid CNN branch, deformable operators,
    /// uncertainty-gated enhancement, boundary-sensitive deep supervision.
    pub use_cnn_branch: bool,
    pub use_deformable: bool,
    pub use_ugem: bool,
    pub use_bds_loss: bool,
    pub heads: [usize; 4],
    pub window: usize,
    pub ref_downsample: usize,
    pub offset_range_divisor: f64,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub ln_epsilon: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            stage_channels: [16, 32, 64, 128],
            classes: 2,
            in_channels: 1,
            input_height: 64,
            input_width: 64,
            use_cnn_branch: true,
            use_deformable: true,
            use_ugem: true,
            use_bds_loss: true,
            heads: [1, 2, 4, 8],
            window: 7,
            ref_downsample: 2,
            offset_range_divisor: 4.0,
            bn_epsilon: 1e-5,
            bn_momentum: 0.1,
            ln_epsilon: 1e-6,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stage_channels[0] < self.stage_channels[1]
            && self.stage_channels[1] < self.stage_channels[2]
            && self.stage_channels[2] < self.stage_channels[3])
        {
            return Err(Error::config(format!(
                "stage channels must be strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        if self.classes < 2 {
            return Err(Error::config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.input_height % 16 != 0 || self.input_width % 16 != 0 {
            return Err(Error::config(format!(
                "input size {}x{} must be divisible by 16",
                self.input_height, self.input_width
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be >= 1"));
        }
        for s in 0..4 {
            if self.heads[s] == 0 || self.stage_channels[s] % self.heads[s] != 0 {
                return Err(Error::config(format!(
                    "stage {s}: channels {} not divisible by {} heads",
                    self.stage_channels[s], self.heads[s]
                )));
            }
        }
        if self.window % 2 == 0 {
            return Err(Error::config(format!("window must be odd, got {}", self.window)));
        }
        if self.ref_downsample == 0 {
            return Err(Error::config("ref_downsample must be >= 1"));
        }
        Ok(())
    }

    /// Spatial size of stage `s` (0-based): input over `2^(s+1)`.
    pub fn stage_size(&self, s: usize) -> (usize, usize) {
        (self.input_height >> (s + 1), self.input_width >> (s + 1))
    }

    /// Attention geometry for stage `s`, clamped to the stage's feature size.
    pub fn stage_attention(&self, s: usize) -> AttentionConfig {
        let (h, w) = self.stage_size(s);
        let mut window = self.window.min(h).min(w);
        if window % 2 == 0 {
            window -= 1;
        }
        let mut factor = self.ref_downsample.min(h).min(w);
        while factor > 1 && (h % factor != 0 || w % factor != 0) {
            factor -= 1;
        }
        AttentionConfig {
            heads: self.heads[s],
            window: window.max(1),
            ref_downsample: factor.max(1),
            offset_range_divisor: self.offset_range_divisor,
        }
    }
}

/// Table-row presets for the incremental ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationPreset {
    /// Single-branch local-attention network; no deformable ops, no gated
    /// enhancement, region losses only.
    Baseline,
    /// Add the CNN branch (plain convolution).
    Hybrid,
    /// Add deformable feature modeling.
    HybridDeform,
    /// Add uncertainty-gated enhancement.
    HybridDeformUgem,
    /// Add the boundary-sensitive deep supervision loss.
    Full,
}

impl AblationPreset {
    pub fn apply(self, cfg: &mut NetworkConfig) {
        let (h, d, u, b) = match self {
            AblationPreset::Baseline => (false, false, false, false),
            AblationPreset::Hybrid => (true, false, false, false),
            AblationPreset::HybridDeform => (true, true, false, false),
            AblationPreset::HybridDeformUgem => (true, true, true, false),
            AblationPreset::Full => (true, true, true, true),
        };
        cfg.use_cnn_branch = h;
        cfg.use_deformable = d;
        cfg.use_ugem = u;
        cfg.use_bds_loss = b;
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationPreset::Baseline => "baseline",
            AblationPreset::Hybrid => "H",
            AblationPreset::HybridDeform => "H+D",
            AblationPreset::HybridDeformUgem => "H+D+U",
            AblationPreset::Full => "H+D+U+B",
        }
    }

    pub fn all() -> [AblationPreset; 5] {
        [
            AblationPreset::Baseline,
            AblationPreset::Hybrid,
            AblationPreset::HybridDeform,
            AblationPreset::HybridDeformUgem,
            AblationPreset::Full,
        ]
    }
}

// ── Output ───────────────────────────────────────────────────────────

/// Buffers of one forward pass. `intermediates[0]` is the deepest decoding
/// stage (coarsest resolution); the CNN side is absent when the hybrid
/// branch is disabled.
#[derive(Debug, Clone)]
pub struct NetworkOutput {
    pub fused: BufId,
    pub branch_cnn: Option<BufId>,
    pub branch_trans: BufId,
    pub intermediates: Vec<(Option<BufId>, BufId)>,
}

// ── Stages ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct EncoderStage {
    cnn: Option<CnnBlock>,
    trans: TransformerBlock,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    cnn: Option<CnnBlock>,
    trans: TransformerBlock,
    /// Dual-branch enhancement (hybrid mode) ...
    ugem: Option<UgemModule>,
    /// ... or a single coarse head when only the transformer branch exists.
    solo_head: Option<Conv2dLayer>,
}

#[derive(Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub store: ParamStore,
    stem: Conv2dLayer,
    enc: Vec<EncoderStage>,
    down: Vec<Conv2dLayer>,
    dec: Vec<DecoderStage>,
    up_cnn: Vec<Conv2dLayer>,
    up_trans: Vec<Conv2dLayer>,
    final_up_cnn: Option<Conv2dLayer>,
    final_up_trans: Conv2dLayer,
    head_cnn: Option<Conv2dLayer>,
    head_trans: Conv2dLayer,
    fuse: Conv2dLayer,
}

impl Network {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        Self::build(config, &mut store, &mut init).map(|mut net| {
            net.store = store;
            net
        })
    }

    /// Construct layer definitions in a fixed order. `store` is filled as a
    /// side effect; the returned network carries an empty store that `new`
    /// replaces.
    fn build(config: NetworkConfig, store: &mut ParamStore, init: &mut Initializer) -> Result<Network> {
        let ch = config.stage_channels;
        let hybrid = config.use_cnn_branch;
        let deform = config.use_deformable;
        let stem = Conv2dLayer::init(store, init, "stem", config.in_channels, ch[0], 3, 2, 1, false)?;

        let mut enc = Vec::with_capacity(4);
        for s in 0..4 {
            let att = config.stage_attention(s);
            let cnn = if hybrid {
                Some(CnnBlock::init(store, init, &format!("enc{s}.cnn"), ch[s], deform, config.bn_epsilon)?)
            } else {
                None
            };
            let trans =
                TransformerBlock::init(store, init, &format!("enc{s}.trans"), ch[s], &att, deform, config.ln_epsilon)?;
            enc.push(EncoderStage { cnn, trans });
        }

        let mut down = Vec::with_capacity(3);
        for s in 0..3 {
            down.push(Conv2dLayer::init(store, init, &format!("down{s}"), ch[s], ch[s + 1], 3, 2, 1, false)?);
        }

        // Decoder stage 0 is the deepest; stage s runs at encoder stage
        // (3 - s) resolution.
        let mut dec = Vec::with_capacity(4);
        for s in 0..4 {
            let enc_stage = 3 - s;
            let att = config.stage_attention(enc_stage);
            let c = ch[enc_stage];
            let cnn = if hybrid {
                Some(CnnBlock::init(store, init, &format!("dec{s}.cnn"), c, deform, config.bn_epsilon)?)
            } else {
                None
            };
            let trans =
                TransformerBlock::init(store, init, &format!("dec{s}.trans"), c, &att, deform, config.ln_epsilon)?;
            let (ugem, solo_head) = if hybrid {
                (Some(UgemModule::init(store, init, &format!("dec{s}.ugem"), c, config.classes)?), None)
            } else {
                (None, Some(init_head(store, init, &format!("dec{s}.head"), c, config.classes)?))
            };
            dec.push(DecoderStage { cnn, trans, ugem, solo_head });
        }

        let mut up_cnn = Vec::new();
        let mut up_trans = Vec::new();
        for s in 0..3 {
            // between decoder stage s and s+1: channels ch[3-s] -> ch[2-s]
            if hybrid {
                up_cnn.push(Conv2dLayer::init(store, init, &format!("up{s}.cnn"), ch[3 - s], ch[2 - s], 1, 1, 0, false)?);
            }
            up_trans.push(Conv2dLayer::init(store, init, &format!("up{s}.trans"), ch[3 - s], ch[2 - s], 1, 1, 0, false)?);
        }
        let final_up_cnn = if hybrid {
            Some(Conv2dLayer::init(store, init, "final.up_cnn", ch[0], ch[0], 1, 1, 0, false)?)
        } else {
            None
        };
        let final_up_trans = Conv2dLayer::init(store, init, "final.up_trans", ch[0], ch[0], 1, 1, 0, false)?;
        let head_cnn = if hybrid { Some(init_head(store, init, "final.head_cnn", ch[0], config.classes)?) } else { None };
        let head_trans = init_head(store, init, "final.head_trans", ch[0], config.classes)?;
        let fuse_in = if hybrid { 2 * ch[0] } else { ch[0] };
        let fuse = init_head(store, init, "final.fuse", fuse_in, config.classes)?;

        Ok(Network {
            config,
            store: ParamStore::new(),
            stem,
            enc,
            down,
            dec,
            up_cnn,
            up_trans,
            final_up_cnn,
            final_up_trans,
            head_cnn,
            head_trans,
            fuse,
        })
    }

    fn check_input(&self, images: &FeatureMap) -> Result<()> {
        let [_, c, h, w] = images.shape;
        if c != self.config.in_channels || h != self.config.input_height || w != self.config.input_width {
            return Err(Error::config(format!(
                "input shape ({c}, {h}, {w}) does not match configured ({}, {}, {})",
                self.config.in_channels, self.config.input_height, self.config.input_width
            )));
        }
        if !images.all_finite() {
            return Err(Error::input("input contains non-finite values"));
        }
        Ok(())
    }

    /// Encoder: per-stage branch outputs are summed; returns the bottleneck
    /// and the three skip maps (stage 0..2).
    fn encode(&self, sess: &mut Session, x0: BufId) -> Result<(BufId, Vec<BufId>)> {
        let mut cur = self.stem.forward(sess, x0)?;
        let mut skips = Vec::with_capacity(3);
        for (s, stage) in self.enc.iter().enumerate() {
            let t = stage.trans.forward(sess, cur)?;
            let merged = match &stage.cnn {
                Some(cnn) => {
                    let c = cnn.forward(sess, cur)?;
                    ops::add(&mut sess.tape, c, t)?
                }
                None => t,
            };
            if s < 3 {
                skips.push(merged);
                cur = self.down[s].forward(sess, merged)?;
            } else {
                cur = merged;
            }
        }
        Ok((cur, skips))
    }

    fn decode(&self, sess: &mut Session, bottleneck: BufId, skips: &[BufId]) -> Result<NetworkOutput> {
        let hybrid = self.config.use_cnn_branch;
        let mut fc = bottleneck;
        let mut ft = bottleneck;
        let mut intermediates = Vec::with_capacity(4);
        for (s, stage) in self.dec.iter().enumerate() {
            if s > 0 {
                let skip = skips[3 - s];
                let t_up = ops::upsample_bilinear(&mut sess.tape, ft, 2)?;
                let t_proj = self.up_trans[s - 1].forward(sess, t_up)?;
                ft = ops::add(&mut sess.tape, t_proj, skip)?;
                if hybrid {
                    let c_up = ops::upsample_bilinear(&mut sess.tape, fc, 2)?;
                    let c_proj = self.up_cnn[s - 1].forward(sess, c_up)?;
                    fc = ops::add(&mut sess.tape, c_proj, skip)?;
                }
            }
            let gt = stage.trans.forward(sess, ft)?;
            match (&stage.cnn, &stage.ugem) {
                (Some(cnn), Some(ugem)) => {
                    let gc = cnn.forward(sess, fc)?;
                    let out = ugem.forward(sess, gc, gt, self.config.use_ugem)?;
                    fc = out.enhanced_cnn;
                    ft = out.enhanced_trans;
                    intermediates.push((Some(out.coarse_cnn), out.coarse_trans));
                }
                _ => {
                    let head = stage.solo_head.as_ref().expect("single-branch stage has a solo head");
                    let p = coarse_predict(sess, gt, head)?;
                    ft = gt;
                    intermediates.push((None, p));
                }
            }
        }
        // Final x2 to full resolution, per-branch heads, fused head.
        let t_up = ops::upsample_bilinear(&mut sess.tape, ft, 2)?;
        let t_full = self.final_up_trans.forward(sess, t_up)?;
        let branch_trans = coarse_predict(sess, t_full, &self.head_trans)?;
        let (branch_cnn, fuse_in) = if hybrid {
            let c_up = ops::upsample_bilinear(&mut sess.tape, fc, 2)?;
            let c_full = self.final_up_cnn.as_ref().unwrap().forward(sess, c_up)?;
            let p = coarse_predict(sess, c_full, self.head_cnn.as_ref().unwrap())?;
            (Some(p), ops::concat_channels(&mut sess.tape, c_full, t_full)?)
        } else {
            (None, t_full)
        };
        let fused = coarse_predict(sess, fuse_in, &self.fuse)?;
        Ok(NetworkOutput { fused, branch_cnn, branch_trans, intermediates })
    }

    /// Full forward pass over a batch of images.
    pub fn forward(&self, sess: &mut Session, images: &FeatureMap) -> Result<NetworkOutput> {
        self.check_input(images)?;
        let x0 = sess.input(images);
        let (bottleneck, skips) = self.encode(sess, x0)?;
        self.decode(sess, bottleneck, &skips)
    }

    /// Frozen inference: argmax over the fused probability map, ties going
    /// to the background class.
    pub fn predict(&self, images: &FeatureMap, spacing: (f64, f64)) -> Result<Vec<SegmentationMask>> {
        let mut sess = Session::new(&self.store, false);
        let out = self.forward(&mut sess, images)?;
        let fused = sess.tape.feature(out.fused)?;
        let [b, classes, h, w] = fused.shape;
        let mut masks = Vec::with_capacity(b);
        for bi in 0..b {
            let mut data = vec![0u8; h * w];
            for pos in 0..h * w {
                let mut best = 0usize;
                let mut best_v = fused.data[(bi * classes) * h * w + pos];
                for cls in 1..classes {
                    let v = fused.data[(bi * classes + cls) * h * w + pos];
                    if v > best_v {
                        best_v = v;
                        best = cls;
                    }
                }
                data[pos] = (best == 1) as u8;
            }
            masks.push(SegmentationMask::new(h, w, data, spacing)?);
        }
        Ok(masks)
    }

    /// Apply pending batch-norm running-statistic updates.
    pub fn apply_bn_updates(&mut self, updates: &[crate::tape::BnUpdate]) -> Result<()> {
        let m = self.config.bn_momentum;
        for u in updates {
            {
                let mean = self.store.get_mut(&u.mean_name)?;
                for (r, b) in mean.value.iter_mut().zip(&u.batch_mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
            }
            let var = self.store.get_mut(&u.var_name)?;
            for (r, b) in var.value.iter_mut().zip(&u.batch_var) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
        Ok(())
    }
}
