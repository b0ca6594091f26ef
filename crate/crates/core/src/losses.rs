//! Boundary-sensitive deep supervision loss.
//!
//! The total objective is `L_ds + L_seg`: a deep-supervision sum of
//! boundary-DoU terms over the per-stage coarse predictions and the two
//! final branch outputs, plus Dice + boundary-DoU on the fused prediction.
//! Targets are matched to each stage by nearest-neighbor downsampling, and
//! the boundary coefficient of every term is computed from the target at
//! that term's own resolution.

use crate::metrics::SegmentationMask;
use crate::network::NetworkOutput;
use crate::ops;
use crate::tape::{BufId, Session, Tape};
use crate::{Error, Result};

/// Deep-supervision weights: four intermediate stages (deepest first) plus
/// the final output, per branch.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_cnn: [f64; 5],
    pub w_trans: [f64; 5],
}

impl Default for LossWeights {
    fn default() -> Self {
        let w = [0.1, 0.2, 0.5, 0.8, 1.0];
        LossWeights { w_cnn: w, w_trans: w }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.w_cnn.iter().chain(self.w_trans.iter()).any(|w| *w < 0.0) {
            return Err(Error::config("deep supervision weights must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub dice_smooth: f64,
    pub bdou_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { weights: LossWeights::default(), dice_smooth: 1.0, bdou_smooth: 1e-6 }
    }
}

/// Scalar values of one loss evaluation, plus the tape buffer of the total
/// for backward.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_ds: f64,
    pub l_seg: f64,
    pub dice: f64,
    pub bdou_final: f64,
    /// Each weighted deep-supervision term and the segmentation terms,
    /// labelled.
    pub terms: Vec<(String, f64)>,
    pub total_id: BufId,
}

// ── Boundary coefficient ─────────────────────────────────────────────

/// Boundary coefficient of the cited boundary-DoU formulation:
/// `alpha = 1 - 2C / (C + S)` with `C` the target boundary pixel count and
/// `S` the target area, clamped to `[0, 1)`. Large compact targets push
/// alpha toward 1 (boundary-dominated); tiny targets toward 0 (plain IoU).
pub fn bdou_alpha(targets: &[SegmentationMask]) -> f64 {
    let mut boundary = 0usize;
    let mut area = 0usize;
    for t in targets {
        boundary += t.boundary().len();
        area += t.foreground_count();
    }
    if boundary + area == 0 {
        return 0.0;
    }
    let alpha = 1.0 - (2.0 * boundary as f64) / (boundary + area) as f64;
    alpha.clamp(0.0, 1.0 - 1e-6)
}

/// Dice loss on the foreground channel of a probability map.
pub fn dice_loss(tape: &mut Tape, p_fg: BufId, y: Vec<f64>, smooth: f64) -> Result<BufId> {
    ops::dice_loss_op(tape, p_fg, y, smooth)
}

/// Boundary-DoU loss with alpha computed from the target masks.
pub fn boundary_dou_loss(tape: &mut Tape, p_fg: BufId, targets: &[SegmentationMask], smooth: f64) -> Result<BufId> {
    let alpha = bdou_alpha(targets);
    let y = flatten_masks(targets);
    ops::boundary_dou_loss_op(tape, p_fg, y, alpha, smooth)
}

fn flatten_masks(masks: &[SegmentationMask]) -> Vec<f64> {
    let mut y = Vec::with_capacity(masks.iter().map(|m| m.data.len()).sum());
    for m in masks {
        y.extend(m.data.iter().map(|&v| v as f64));
    }
    y
}

/// Nearest-neighbor downsample of a mask to `h2 x w2`.
pub fn downsample_mask(mask: &SegmentationMask, h2: usize, w2: usize) -> SegmentationMask {
    let mut data = vec![0u8; h2 * w2];
    for i in 0..h2 {
        let si = (((i as f64 + 0.5) * mask.h as f64 / h2 as f64) as usize).min(mask.h - 1);
        for j in 0..w2 {
            let sj = (((j as f64 + 0.5) * mask.w as f64 / w2 as f64) as usize).min(mask.w - 1);
            data[i * w2 + j] = mask.at(si, sj);
        }
    }
    SegmentationMask { data, h: h2, w: w2, spacing: mask.spacing }
}

// ── Composition ──────────────────────────────────────────────────────

struct Term {
    id: BufId,
    weight: f64,
    label: String,
}

/// One boundary-DoU term on the foreground channel of `prob` against the
/// targets downsampled to its resolution.
fn bdou_term(
    sess: &mut Session,
    prob: BufId,
    targets: &[SegmentationMask],
    smooth: f64,
    weight: f64,
    label: &str,
) -> Result<Term> {
    let shape = sess.tape.shape(prob).to_vec();
    let (h, w) = (shape[2], shape[3]);
    let scaled: Vec<SegmentationMask> = targets
        .iter()
        .map(|t| if t.h == h && t.w == w { t.clone() } else { downsample_mask(t, h, w) })
        .collect();
    let fg = ops::slice_channel(&mut sess.tape, prob, 1)?;
    let id = boundary_dou_loss(&mut sess.tape, fg, &scaled, smooth)?;
    Ok(Term { id, weight, label: label.to_string() })
}

/// The deep-supervision sum: weighted boundary-DoU over the four
/// intermediate prediction pairs (deepest first) and the final branch pair.
pub fn deep_supervision_loss(
    sess: &mut Session,
    out: &NetworkOutput,
    targets: &[SegmentationMask],
    cfg: &LossConfig,
) -> Result<(BufId, Vec<(String, f64)>)> {
    cfg.weights.validate()?;
    if out.intermediates.len() != 4 {
        return Err(Error::config(format!(
            "deep supervision needs 4 intermediate stages, got {}",
            out.intermediates.len()
        )));
    }
    let mut terms = Vec::new();
    for (i, (p_cnn, p_trans)) in out.intermediates.iter().enumerate() {
        if let Some(pc) = p_cnn {
            terms.push(bdou_term(sess, *pc, targets, cfg.bdou_smooth, cfg.weights.w_cnn[i], &format!("ds{}_cnn", i + 1))?);
        }
        terms.push(bdou_term(sess, *p_trans, targets, cfg.bdou_smooth, cfg.weights.w_trans[i], &format!("ds{}_trans", i + 1))?);
    }
    if let Some(pc) = out.branch_cnn {
        terms.push(bdou_term(sess, pc, targets, cfg.bdou_smooth, cfg.weights.w_cnn[4], "final_cnn")?);
    }
    terms.push(bdou_term(sess, out.branch_trans, targets, cfg.bdou_smooth, cfg.weights.w_trans[4], "final_trans")?);

    let labelled: Vec<(String, f64)> = terms
        .iter()
        .map(|t| (t.label.clone(), t.weight * sess.tape.scalar(t.id)))
        .collect();
    let sum = ops::weighted_sum(&mut sess.tape, terms.iter().map(|t| (t.id, t.weight)).collect())?;
    Ok((sum, labelled))
}

/// Total training objective for one batch.
///
/// With deep supervision on: `L_ds + L_seg`; off: `L_seg` alone, where
/// `L_seg = Dice(fused, Y) + BDoU(fused, Y)`.
pub fn total_loss(
    sess: &mut Session,
    out: &NetworkOutput,
    targets: &[SegmentationMask],
    cfg: &LossConfig,
    use_deep_supervision: bool,
) -> Result<LossBreakdown> {
    let fused_shape = sess.tape.shape(out.fused).to_vec();
    if fused_shape[0] != targets.len() {
        return Err(Error::input(format!(
            "batch size {} does not match {} target masks",
            fused_shape[0],
            targets.len()
        )));
    }
    for t in targets {
        if t.h != fused_shape[2] || t.w != fused_shape[3] {
            return Err(Error::input(format!(
                "target {}x{} does not match fused output {}x{}",
                t.h, t.w, fused_shape[2], fused_shape[3]
            )));
        }
    }
    let y = flatten_masks(targets);
    let fg = ops::slice_channel(&mut sess.tape, out.fused, 1)?;
    let dice_id = dice_loss(&mut sess.tape, fg, y, cfg.dice_smooth)?;
    let bdou_id = boundary_dou_loss(&mut sess.tape, fg, targets, cfg.bdou_smooth)?;
    let dice = sess.tape.scalar(dice_id);
    let bdou_final = sess.tape.scalar(bdou_id);
    let l_seg_id = ops::weighted_sum(&mut sess.tape, vec![(dice_id, 1.0), (bdou_id, 1.0)])?;
    let l_seg = sess.tape.scalar(l_seg_id);

    let mut terms = vec![("seg_dice".to_string(), dice), ("seg_bdou".to_string(), bdou_final)];
    let (total_id, l_ds) = if use_deep_supervision {
        let (ds_id, ds_terms) = deep_supervision_loss(sess, out, targets, cfg)?;
        let l_ds = sess.tape.scalar(ds_id);
        terms.extend(ds_terms);
        let total = ops::weighted_sum(&mut sess.tape, vec![(ds_id, 1.0), (l_seg_id, 1.0)])?;
        (total, l_ds)
    } else {
        (l_seg_id, 0.0)
    };
    Ok(LossBreakdown {
        total: sess.tape.scalar(total_id),
        l_ds,
        l_seg,
        dice,
        bdou_final,
        terms,
        total_id,
    })
}
