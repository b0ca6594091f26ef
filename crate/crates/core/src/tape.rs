//! Wengert tape: reverse-mode automatic differentiation over flat `f64`
//! buffers.
//!
//! Every operation records itself during the forward pass; `backward` replays
//! the list in reverse, moving each buffer's accumulated output gradient into
//! the hand-derived vector-Jacobian product of the op that produced it. Leaf
//! buffers (inputs and parameters) keep their gradients; intermediate
//! gradients are dropped as soon as they are consumed.

use std::collections::HashMap;

use crate::params::ParamStore;
use crate::tensor::FeatureMap;
use crate::{ops, Error, Result};

/// Index of a buffer in the tape arena.
pub type BufId = usize;

#[derive(Debug)]
pub(crate) struct Buf {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

/// A recorded operation. Saved fields hold whatever the backward pass needs
/// beyond the input/output buffers themselves.
#[derive(Debug)]
pub(crate) enum Op {
    Conv2d { x: BufId, w: BufId, b: BufId, out: BufId, stride: usize, pad: usize },
    DeformConv2d { x: BufId, w: BufId, b: BufId, offsets: BufId, out: BufId, pad: usize },
    BatchNormTrain { x: BufId, scale: BufId, shift: BufId, out: BufId, mean: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: BufId, scale: BufId, shift: BufId, out: BufId, mean_r: Vec<f64>, inv_std_r: Vec<f64> },
    LayerNorm { x: BufId, scale: BufId, shift: BufId, out: BufId, mean: Vec<f64>, inv_std: Vec<f64> },
    Relu { x: BufId, out: BufId },
    Tanh { x: BufId, out: BufId },
    SoftmaxChannel { x: BufId, out: BufId },
    EntropyChannel { p: BufId, out: BufId },
    Add { a: BufId, b: BufId, out: BufId },
    Scale { x: BufId, out: BufId, c: f64 },
    ScaleChannels { x: BufId, out: BufId, factors: Vec<f64> },
    GatedFuse { f_self: BufId, f_other: BufId, gate: BufId, out: BufId },
    Linear { x: BufId, w: BufId, b: BufId, out: BufId },
    MatMul { a: BufId, b: BufId, out: BufId },
    UpsampleBilinear { x: BufId, out: BufId, factor: usize },
    DownsampleAvg { x: BufId, out: BufId, factor: usize },
    BilinearSample { x: BufId, points: BufId, out: BufId },
    OffsetsToPoints { offsets: BufId, out: BufId },
    LocalAttention { q: BufId, k: BufId, v: BufId, out: BufId, heads: usize, window: usize, probs: Vec<f64> },
    CrossAttention { q: BufId, k: BufId, v: BufId, out: BufId, heads: usize, probs: Vec<f64> },
    SliceChannel { x: BufId, out: BufId, ch: usize },
    ConcatChannels { a: BufId, b: BufId, out: BufId },
    SumAll { x: BufId, out: BufId },
    DotConst { x: BufId, out: BufId, r: Vec<f64> },
    WeightedSum { terms: Vec<(BufId, f64)>, out: BufId },
    DiceLoss { p: BufId, out: BufId, y: Vec<f64>, eps: f64 },
    BoundaryDouLoss { p: BufId, out: BufId, y: Vec<f64>, alpha: f64, smooth: f64 },
}

#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) bufs: Vec<Buf>,
    pub(crate) ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    ran_backward: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a leaf buffer (input, parameter, or constant).
    pub fn alloc(&mut self, shape: Vec<usize>, data: Vec<f64>) -> BufId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.bufs.len();
        self.bufs.push(Buf { data, shape });
        self.grads.push(None);
        id
    }

    pub(crate) fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, make: impl FnOnce(BufId) -> Op) -> BufId {
        let out = self.alloc(shape, data);
        self.ops.push(make(out));
        out
    }

    pub fn value(&self, id: BufId) -> &[f64] {
        &self.bufs[id].data
    }

    pub fn shape(&self, id: BufId) -> &[usize] {
        &self.bufs[id].shape
    }

    pub fn numel(&self, id: BufId) -> usize {
        self.bufs[id].data.len()
    }

    /// Gradient of a leaf buffer after `backward`. Intermediates have already
    /// surrendered theirs.
    pub fn grad(&self, id: BufId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    pub fn scalar(&self, id: BufId) -> f64 {
        self.bufs[id].data[0]
    }

    /// Extract a buffer as a rank-4 feature map.
    pub fn feature(&self, id: BufId) -> Result<FeatureMap> {
        let shape = &self.bufs[id].shape;
        if shape.len() != 4 {
            return Err(Error::State(format!("buffer {id} has rank {} shape, expected 4", shape.len())));
        }
        FeatureMap::new([shape[0], shape[1], shape[2], shape[3]], self.bufs[id].data.clone())
    }

    fn accumulate(&mut self, id: BufId, contribution: Vec<f64>) {
        debug_assert_eq!(contribution.len(), self.bufs[id].data.len());
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution.iter()) {
                    *e += c;
                }
            }
            None => self.grads[id] = Some(contribution),
        }
    }

    /// Propagate `d loss / d buffer` from a scalar loss to every leaf.
    pub fn backward(&mut self, loss: BufId) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::State("backward called before any forward operation was recorded".into()));
        }
        if self.ran_backward {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if self.bufs[loss].data.len() != 1 {
            return Err(Error::State(format!(
                "backward seed must be a scalar, buffer {loss} has {} elements",
                self.bufs[loss].data.len()
            )));
        }
        self.ran_backward = true;
        self.grads[loss] = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            self.backward_op(i)?;
        }
        Ok(())
    }

    fn backward_op(&mut self, op_index: usize) -> Result<()> {
        // The output gradient is taken (moved out): once this op consumes it,
        // no earlier op can reference it again.
        macro_rules! need {
            ($out:expr) => {
                match self.grads[$out].take() {
                    Some(g) => g,
                    None => return Ok(()),
                }
            };
        }
        // `ops` is only ever appended to, so indexing stays valid; split the
        // borrow by reading ids out of the op first.
        match &self.ops[op_index] {
            &Op::Conv2d { x, w, b, out, stride, pad } => {
                let g = need!(out);
                let (dx, dw, db) = ops::linalg::conv2d_backward(
                    self.value4(x), self.value4(w), &g, self.shape4(x), self.shape4(w), stride, pad,
                );
                self.accumulate(x, dx);
                self.accumulate(w, dw);
                self.accumulate(b, db);
            }
            &Op::DeformConv2d { x, w, b, offsets, out, pad } => {
                let g = need!(out);
                let (dx, dw, db, doff) = ops::deform_ops::deform_conv2d_backward(
                    self.value4(x), self.value4(w), self.value4(offsets), &g,
                    self.shape4(x), self.shape4(w), pad,
                );
                self.accumulate(x, dx);
                self.accumulate(w, dw);
                self.accumulate(b, db);
                self.accumulate(offsets, doff);
            }
            Op::BatchNormTrain { x, scale, shift, out, mean, inv_std } => {
                let (x, scale, shift, out) = (*x, *scale, *shift, *out);
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let g = need!(out);
                let (dx, dscale, dshift) = ops::norm::batch_norm_train_backward(
                    self.value4(x), self.value4(scale), &g, self.shape4(x), &mean, &inv_std,
                );
                self.accumulate(x, dx);
                self.accumulate(scale, dscale);
                self.accumulate(shift, dshift);
            }
            Op::BatchNormEval { x, scale, shift, out, mean_r, inv_std_r } => {
                let (x, scale, shift, out) = (*x, *scale, *shift, *out);
                let (mean_r, inv_std_r) = (mean_r.clone(), inv_std_r.clone());
                let g = need!(out);
                let (dx, dscale, dshift) = ops::norm::batch_norm_eval_backward(
                    self.value4(x), self.value4(scale), &g, self.shape4(x), &mean_r, &inv_std_r,
                );
                self.accumulate(x, dx);
                self.accumulate(scale, dscale);
                self.accumulate(shift, dshift);
            }
            Op::LayerNorm { x, scale, shift, out, mean, inv_std } => {
                let (x, scale, shift, out) = (*x, *scale, *shift, *out);
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let g = need!(out);
                let (dx, dscale, dshift) = ops::norm::layer_norm_backward(
                    self.value4(x), self.value4(scale), &g, self.shape4(x), &mean, &inv_std,
                );
                self.accumulate(x, dx);
                self.accumulate(scale, dscale);
                self.accumulate(shift, dshift);
            }
            &Op::Relu { x, out } => {
                let g = need!(out);
                let dx = ops::elementwise::relu_backward(self.value4(x), &g);
                self.accumulate(x, dx);
            }
            &Op::Tanh { x, out } => {
                let g = need!(out);
                let dx = ops::elementwise::tanh_backward(self.value4(out), &g);
                self.accumulate(x, dx);
            }
            &Op::SoftmaxChannel { x, out } => {
                let g = need!(out);
                let dx = ops::norm::softmax_channel_backward(self.value4(out), &g, self.shape4(x));
                self.accumulate(x, dx);
            }
            &Op::EntropyChannel { p, out } => {
                let g = need!(out);
                let dp = ops::norm::entropy_channel_backward(self.value4(p), &g, self.shape4(p));
                self.accumulate(p, dp);
            }
            &Op::Add { a, b, out } => {
                let g = need!(out);
                self.accumulate(a, g.clone());
                self.accumulate(b, g);
            }
            &Op::Scale { x, out, c } => {
                let g = need!(out);
                self.accumulate(x, g.iter().map(|v| v * c).collect());
            }
            Op::ScaleChannels { x, out, factors } => {
                let (x, out) = (*x, *out);
                let factors = factors.clone();
                let g = need!(out);
                let dx = ops::elementwise::scale_channels_apply(&g, self.shape4(x), &factors);
                self.accumulate(x, dx);
            }
            &Op::GatedFuse { f_self, f_other, gate, out } => {
                let g = need!(out);
                let (da, db, du) = ops::elementwise::gated_fuse_backward(
                    self.value4(f_self), self.value4(f_other), self.value4(gate), &g, self.shape4(f_self),
                );
                self.accumulate(f_self, da);
                self.accumulate(f_other, db);
                self.accumulate(gate, du);
            }
            &Op::Linear { x, w, b, out } => {
                let g = need!(out);
                let (dx, dw, db) = ops::linalg::linear_backward(
                    self.value4(x), self.value4(w), &g, self.shape2(x), self.shape2(w),
                );
                self.accumulate(x, dx);
                self.accumulate(w, dw);
                self.accumulate(b, db);
            }
            &Op::MatMul { a, b, out } => {
                let g = need!(out);
                let (da, db) = ops::linalg::matmul_backward(
                    self.value4(a), self.value4(b), &g, self.shape2(a), self.shape2(b),
                );
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            &Op::UpsampleBilinear { x, out, factor } => {
                let g = need!(out);
                let dx = ops::resample::upsample_bilinear_backward(&g, self.shape4(x), factor);
                self.accumulate(x, dx);
            }
            &Op::DownsampleAvg { x, out, factor } => {
                let g = need!(out);
                let dx = ops::resample::downsample_avg_backward(&g, self.shape4(x), factor);
                self.accumulate(x, dx);
            }
            &Op::BilinearSample { x, points, out } => {
                let g = need!(out);
                let (dx, dpoints) = ops::resample::bilinear_sample_backward(
                    self.value4(x), self.value4(points), &g, self.shape4(x), self.shape4(points),
                );
                self.accumulate(x, dx);
                self.accumulate(points, dpoints);
            }
            &Op::OffsetsToPoints { offsets, out } => {
                let g = need!(out);
                let doff = ops::resample::offsets_to_points_backward(&g, self.shape4(offsets));
                self.accumulate(offsets, doff);
            }
            Op::LocalAttention { q, k, v, out, heads, window, probs } => {
                let (q, k, v, out, heads, window) = (*q, *k, *v, *out, *heads, *window);
                let probs = probs.clone();
                let g = need!(out);
                let (dq, dk, dv) = ops::attention::local_attention_backward(
                    self.value4(q), self.value4(k), self.value4(v), &probs, &g,
                    self.shape4(q), heads, window,
                );
                self.accumulate(q, dq);
                self.accumulate(k, dk);
                self.accumulate(v, dv);
            }
            Op::CrossAttention { q, k, v, out, heads, probs } => {
                let (q, k, v, out, heads) = (*q, *k, *v, *out, *heads);
                let probs = probs.clone();
                let g = need!(out);
                let (dq, dk, dv) = ops::attention::cross_attention_backward(
                    self.value4(q), self.value4(k), self.value4(v), &probs, &g,
                    self.shape4(q), self.shape4(k), heads,
                );
                self.accumulate(q, dq);
                self.accumulate(k, dk);
                self.accumulate(v, dv);
            }
            &Op::SliceChannel { x, out, ch } => {
                let g = need!(out);
                let dx = ops::elementwise::slice_channel_backward(&g, self.shape4(x), ch);
                self.accumulate(x, dx);
            }
            &Op::ConcatChannels { a, b, out } => {
                let g = need!(out);
                let (da, db) = ops::elementwise::concat_channels_backward(&g, self.shape4(a), self.shape4(b));
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            &Op::SumAll { x, out } => {
                let g = need!(out);
                self.accumulate(x, vec![g[0]; self.bufs[x].data.len()]);
            }
            Op::DotConst { x, out, r } => {
                let (x, out) = (*x, *out);
                let r = r.clone();
                let g = need!(out);
                self.accumulate(x, r.iter().map(|v| v * g[0]).collect());
            }
            Op::WeightedSum { terms, out } => {
                let out = *out;
                let terms = terms.clone();
                let g = need!(out);
                for (id, wgt) in terms {
                    self.accumulate(id, vec![g[0] * wgt]);
                }
            }
            Op::DiceLoss { p, out, y, eps } => {
                let (p, out, eps) = (*p, *out, *eps);
                let y = y.clone();
                let g = need!(out);
                let dp = ops::loss_ops::dice_loss_backward(self.value4(p), &y, eps, g[0]);
                self.accumulate(p, dp);
            }
            Op::BoundaryDouLoss { p, out, y, alpha, smooth } => {
                let (p, out, alpha, smooth) = (*p, *out, *alpha, *smooth);
                let y = y.clone();
                let g = need!(out);
                let dp = ops::loss_ops::boundary_dou_backward(self.value4(p), &y, alpha, smooth, g[0]);
                self.accumulate(p, dp);
            }
        }
        Ok(())
    }

    // Shape/value accessors shortening the dispatch arms. Naming refers to
    // intent, not rank: buffers of any rank pass through `value4`.
    fn value4(&self, id: BufId) -> &[f64] {
        &self.bufs[id].data
    }

    fn shape4(&self, id: BufId) -> [usize; 4] {
        let s = &self.bufs[id].shape;
        match s.len() {
            4 => [s[0], s[1], s[2], s[3]],
            3 => [s[0], s[1], s[2], 1],
            2 => [s[0], s[1], 1, 1],
            1 => [s[0], 1, 1, 1],
            _ => panic!("unsupported rank {}", s.len()),
        }
    }

    fn shape2(&self, id: BufId) -> [usize; 2] {
        let s = &self.bufs[id].shape;
        assert_eq!(s.len(), 2, "expected rank-2 buffer");
        [s[0], s[1]]
    }

    /// Attention probability rows recorded this pass, for debug inspection:
    /// `(rows, row_len, data)` per attention op in forward order.
    pub fn attention_probs(&self) -> Vec<(usize, usize, &[f64])> {
        self.ops
            .iter()
            .filter_map(|op| match op {
                Op::LocalAttention { probs, heads, window, q, .. } => {
                    let s = &self.bufs[*q].shape;
                    let rows = s[0] * heads * s[2] * s[3];
                    Some((rows, window * window, probs.as_slice()))
                }
                Op::CrossAttention { probs, heads, q, k, .. } => {
                    let qs = &self.bufs[*q].shape;
                    let ks = &self.bufs[*k].shape;
                    let rows = qs[0] * heads * qs[2] * qs[3];
                    Some((rows, ks[2] * ks[3], probs.as_slice()))
                }
                _ => None,
            })
            .collect()
    }
}

// ── Session: binding a parameter store to a tape ─────────────────────

/// Pending running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean_name: String,
    pub var_name: String,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// One forward (or forward+backward) pass over a network: owns the tape,
/// lazily registers parameters from the store, and collects per-parameter
/// gradients and batch-norm statistics updates at the end.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    ids: HashMap<String, BufId>,
    pub training: bool,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, training: bool) -> Self {
        Session { tape: Tape::new(), store, ids: HashMap::new(), training, bn_updates: Vec::new() }
    }

    /// Tape buffer for a named parameter, registered on first use.
    pub fn param(&mut self, name: &str) -> Result<BufId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let p = self.store.get(name)?;
        let id = self.tape.alloc(p.shape.clone(), p.value.clone());
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Direct value access for non-trainable state (running statistics).
    pub fn param_value(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.store.get(name)?.value)
    }

    pub fn input(&mut self, fm: &FeatureMap) -> BufId {
        self.tape.alloc(fm.shape.to_vec(), fm.data.clone())
    }

    /// Consume the session, returning `(name, gradient)` pairs for every
    /// trainable parameter the pass touched, plus pending BN updates.
    pub fn finish(self) -> (Vec<(String, Vec<f64>)>, Vec<BnUpdate>) {
        let mut grads = Vec::new();
        for (name, id) in &self.ids {
            if let Some(g) = self.tape.grad(*id) {
                if self.store.get(name).map(|p| p.trainable).unwrap_or(false) {
                    grads.push((name.clone(), g.to_vec()));
                }
            }
        }
        grads.sort_by(|a, b| a.0.cmp(&b.0));
        (grads, self.bn_updates)
    }
}
