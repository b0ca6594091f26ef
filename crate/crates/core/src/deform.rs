//! Deformable feature modeling: bilinear point sampling, deformable
//! convolution, local (neighborhood) attention, and deformable attention.
//!
//! The low-level kernels live in [`crate::ops`]; this module adds the
//! attention configuration, reference grids, and the parameter-owning
//! attention layers that predict sampling offsets from content.

use crate::blocks::Conv2dLayer;
use crate::ops;
use crate::params::{Initializer, ParamStore};
use crate::tape::{BufId, Session, Tape};
use crate::tensor::FeatureMap;
use crate::{Error, Result};

pub use crate::ops::deform_ops::deform_conv2d as deformable_conv2d;
pub use crate::ops::resample::bilinear_sample;

/// Per-output-position 2D sampling displacements: `(batch, 2K, H, W)` with
/// channel pairs `(2k, 2k+1)` holding `(d_row, d_col)` in pixels for tap `k`.
#[derive(Debug, Clone)]
pub struct OffsetField(pub FeatureMap);

impl OffsetField {
    pub fn new(fm: FeatureMap) -> Result<Self> {
        if fm.shape[1] % 2 != 0 {
            return Err(Error::config(format!(
                "offset field needs 2 entries per sampling point, got {} channels",
                fm.shape[1]
            )));
        }
        if !fm.all_finite() {
            return Err(Error::input("offset field contains non-finite values"));
        }
        Ok(OffsetField(fm))
    }

    pub fn sampling_points(&self) -> usize {
        self.0.shape[1] / 2
    }
}

/// Attention geometry shared by the local and deformable attention layers.
#[derive(Debug, Clone)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Local window size; odd.
    pub window: usize,
    /// Reference-grid downsample factor for deformable attention.
    pub ref_downsample: usize,
    /// Offsets are tanh-bounded to `extent / offset_range_divisor`.
    pub offset_range_divisor: f64,
}

impl AttentionConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.heads == 0 || channels % self.heads != 0 {
            return Err(Error::config(format!(
                "attention: channels {channels} not divisible by head count {}",
                self.heads
            )));
        }
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::config(format!("attention: window {} must be odd and >= 1", self.window)));
        }
        if self.ref_downsample == 0 {
            return Err(Error::config("attention: reference downsample factor must be >= 1"));
        }
        if self.offset_range_divisor <= 0.0 {
            return Err(Error::config("attention: offset range divisor must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self, channels: usize) -> usize {
        channels / self.heads
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { heads: 1, window: 7, ref_downsample: 2, offset_range_divisor: 4.0 }
    }
}

/// Cell-center reference grid in input pixel coordinates, `(k=1, Hr, Wr, 2)`
/// flattened, for a map of `h x w` downsampled by `factor`.
pub fn reference_grid(h: usize, w: usize, factor: usize) -> Vec<f64> {
    let hr = h / factor;
    let wr = w / factor;
    let mut base = Vec::with_capacity(hr * wr * 2);
    for i in 0..hr {
        for j in 0..wr {
            base.push((i as f64 + 0.5) * factor as f64 - 0.5);
            base.push((j as f64 + 0.5) * factor as f64 - 0.5);
        }
    }
    base
}

// ── Local (neighborhood) attention ───────────────────────────────────

/// Window attention with per-position Q/K/V/output projections (1x1 convs).
/// Every query attends over the w x w neighborhood centered on it, clamped
/// at borders so each query sees exactly w x w keys.
#[derive(Debug, Clone)]
pub struct LocalAttentionLayer {
    q: Conv2dLayer,
    k: Conv2dLayer,
    v: Conv2dLayer,
    o: Conv2dLayer,
    heads: usize,
    window: usize,
}

impl LocalAttentionLayer {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        cfg: &AttentionConfig,
    ) -> Result<Self> {
        cfg.validate(channels)?;
        let mk = |store: &mut ParamStore, init: &mut Initializer, suffix: &str| {
            Conv2dLayer::init(store, init, &format!("{name}.{suffix}"), channels, channels, 1, 1, 0, false)
        };
        Ok(LocalAttentionLayer {
            q: mk(store, init, "q")?,
            k: mk(store, init, "k")?,
            v: mk(store, init, "v")?,
            o: mk(store, init, "o")?,
            heads: cfg.heads,
            window: cfg.window,
        })
    }

    pub fn forward(&self, sess: &mut Session, x: BufId) -> Result<BufId> {
        let q = self.q.forward(sess, x)?;
        let k = self.k.forward(sess, x)?;
        let v = self.v.forward(sess, x)?;
        let a = ops::local_attention(&mut sess.tape, q, k, v, self.heads, self.window)?;
        self.o.forward(sess, a)
    }
}

// ── Deformable attention ─────────────────────────────────────────────

/// Attention over keys/values bilinearly sampled at content-predicted
/// displacements of a uniform reference grid. With `deformable` off (or a
/// zero-initialized offset predictor) the sampled set is exactly the grid.
#[derive(Debug, Clone)]
pub struct DeformAttentionLayer {
    q: Conv2dLayer,
    k: Conv2dLayer,
    v: Conv2dLayer,
    o: Conv2dLayer,
    offset_conv: Option<Conv2dLayer>,
    heads: usize,
    ref_downsample: usize,
    offset_range_divisor: f64,
}

impl DeformAttentionLayer {
    pub fn init(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        channels: usize,
        cfg: &AttentionConfig,
        deformable: bool,
    ) -> Result<Self> {
        cfg.validate(channels)?;
        let mk = |store: &mut ParamStore, init: &mut Initializer, suffix: &str| {
            Conv2dLayer::init(store, init, &format!("{name}.{suffix}"), channels, channels, 1, 1, 0, false)
        };
        let q = mk(store, init, "q")?;
        let k = mk(store, init, "k")?;
        let v = mk(store, init, "v")?;
        let o = mk(store, init, "o")?;
        let offset_conv = if deformable {
            Some(Conv2dLayer::init(store, init, &format!("{name}.offset"), channels, 2, 3, 1, 1, true)?)
        } else {
            None
        };
        Ok(DeformAttentionLayer {
            q,
            k,
            v,
            o,
            offset_conv,
            heads: cfg.heads,
            ref_downsample: cfg.ref_downsample,
            offset_range_divisor: cfg.offset_range_divisor,
        })
    }

    pub fn forward(&self, sess: &mut Session, x: BufId) -> Result<BufId> {
        let s = sess.tape.shape(x).to_vec();
        let (b, h, w) = (s[0], s[2], s[3]);
        let factor = self.ref_downsample;
        if h / factor == 0 || w / factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::config(format!(
                "deformable attention: reference grid empty or misaligned for {h}x{w} at factor {factor}"
            )));
        }
        let base = reference_grid(h, w, factor);
        let q = self.q.forward(sess, x)?;
        let points = match &self.offset_conv {
            Some(oc) => {
                let q_ref = if factor > 1 { ops::downsample_avg(&mut sess.tape, q, factor)? } else { q };
                let raw = oc.forward(sess, q_ref)?;
                let bounded = ops::tanh(&mut sess.tape, raw);
                let scaled = ops::scale_channels(
                    &mut sess.tape,
                    bounded,
                    vec![h as f64 / self.offset_range_divisor, w as f64 / self.offset_range_divisor],
                )?;
                ops::offsets_to_points(&mut sess.tape, scaled, &base)?
            }
            None => constant_points(&mut sess.tape, b, &base),
        };
        let tokens = ops::bilinear_sample(&mut sess.tape, x, points)?;
        let k = self.k.forward(sess, tokens)?;
        let v = self.v.forward(sess, tokens)?;
        let a = ops::cross_attention(&mut sess.tape, q, k, v, self.heads)?;
        self.o.forward(sess, a)
    }
}

/// Constant (non-learned) sampling points: the reference grid replicated
/// across the batch.
fn constant_points(tape: &mut Tape, batch: usize, base: &[f64]) -> BufId {
    let r = base.len() / 2;
    let mut data = Vec::with_capacity(batch * base.len());
    for _ in 0..batch {
        data.extend_from_slice(base);
    }
    tape.alloc(vec![batch, r, 2], data)
}
