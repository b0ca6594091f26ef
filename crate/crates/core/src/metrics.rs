//! Evaluation suite: DSC, Hausdorff distance, average (symmetric) surface
//! distance, sensitivity, and precision.
//!
//! Boundary convention: a foreground pixel is a boundary pixel when at least
//! one 4-neighbor is background, with the image border counting as
//! background. Distances are Euclidean in millimetres using the mask's pixel
//! spacing. Directed distances come from an exact Euclidean distance
//! transform (per-axis parabola envelopes), so the brute-force all-pairs
//! oracle in the tests exercises an independent route.

use crate::{Error, Result};

/// Binary label grid with physical pixel spacing in millimetres
/// `(row spacing, col spacing)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMask {
    pub data: Vec<u8>,
    pub h: usize,
    pub w: usize,
    pub spacing: (f64, f64),
}

impl SegmentationMask {
    pub fn new(h: usize, w: usize, data: Vec<u8>, spacing: (f64, f64)) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::config(format!("mask {h}x{w} needs {} values, got {}", h * w, data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::input("mask values must be 0 or 1"));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 {
            return Err(Error::config(format!("pixel spacing must be positive, got {spacing:?}")));
        }
        Ok(SegmentationMask { data, h, w, spacing })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        SegmentationMask { data: vec![0; h * w], h, w, spacing: (1.0, 1.0) }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.w + j]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.foreground_count() == 0
    }

    /// Foreground pixels with at least one background 4-neighbor; the image
    /// border counts as background.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.h {
            for j in 0..self.w {
                if self.at(i, j) == 0 {
                    continue;
                }
                let edge = i == 0
                    || j == 0
                    || i == self.h - 1
                    || j == self.w - 1
                    || self.at(i - 1, j) == 0
                    || self.at(i + 1, j) == 0
                    || self.at(i, j - 1) == 0
                    || self.at(i, j + 1) == 0;
                if edge {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Worst-case distance inside the image: the diagonal in millimetres.
    pub fn diagonal_mm(&self) -> f64 {
        let dy = self.h as f64 * self.spacing.0;
        let dx = self.w as f64 * self.spacing.1;
        (dy * dy + dx * dx).sqrt()
    }
}

fn check_same_shape(a: &SegmentationMask, b: &SegmentationMask) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::input(format!("mask shapes differ: {}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    Ok(())
}

/// Dice similarity coefficient in percent. Both masks empty scores 100.
pub fn dsc(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<f64> {
    check_same_shape(pred, gt)?;
    let inter = pred.data.iter().zip(&gt.data).filter(|(a, b)| **a == 1 && **b == 1).count();
    let total = pred.foreground_count() + gt.foreground_count();
    if total == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / total as f64)
}

/// Sensitivity and precision in percent. Empty denominators follow the
/// both-empty convention: no positives anywhere scores 100.
pub fn sens_prec(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<(f64, f64)> {
    check_same_shape(pred, gt)?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (p, g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => {}
        }
    }
    let sens = if tp + fn_ == 0 { 100.0 } else { 100.0 * tp as f64 / (tp + fn_) as f64 };
    let prec = if tp + fp == 0 { 100.0 } else { 100.0 * tp as f64 / (tp + fp) as f64 };
    Ok((sens, prec))
}

/// Boundary distance metrics in millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    pub hd: f64,
    pub asd: f64,
    pub assd: f64,
    /// Set when either mask was empty and the image-diagonal sentinel was
    /// reported instead of measured distances.
    pub empty_flag: bool,
}

/// HD is the max of the two directed maxima; ASD averages distances from the
/// prediction boundary to the ground-truth boundary; ASSD averages over the
/// union of both directed distance sets.
pub fn surface_distances(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<SurfaceDistances> {
    check_same_shape(pred, gt)?;
    if pred.is_empty_mask() || gt.is_empty_mask() {
        let sentinel = pred.diagonal_mm().max(gt.diagonal_mm());
        return Ok(SurfaceDistances { hd: sentinel, asd: sentinel, assd: sentinel, empty_flag: true });
    }
    let pred_boundary = pred.boundary();
    let gt_boundary = gt.boundary();
    let spacing = pred.spacing;
    let dist_to_gt = edt_sqrt(&gt_boundary, pred.h, pred.w, spacing);
    let dist_to_pred = edt_sqrt(&pred_boundary, pred.h, pred.w, spacing);

    let forward: Vec<f64> = pred_boundary.iter().map(|&(i, j)| dist_to_gt[i * pred.w + j]).collect();
    let backward: Vec<f64> = gt_boundary.iter().map(|&(i, j)| dist_to_pred[i * pred.w + j]).collect();

    let max_f = forward.iter().cloned().fold(0.0, f64::max);
    let max_b = backward.iter().cloned().fold(0.0, f64::max);
    let sum_f: f64 = forward.iter().sum();
    let sum_b: f64 = backward.iter().sum();
    Ok(SurfaceDistances {
        hd: max_f.max(max_b),
        asd: sum_f / forward.len() as f64,
        assd: (sum_f + sum_b) / (forward.len() + backward.len()) as f64,
        empty_flag: false,
    })
}

/// Exact Euclidean distances (mm) from every grid cell to the nearest seed.
fn edt_sqrt(seeds: &[(usize, usize)], h: usize, w: usize, spacing: (f64, f64)) -> Vec<f64> {
    let mut sq = vec![f64::INFINITY; h * w];
    for &(i, j) in seeds {
        sq[i * w + j] = 0.0;
    }
    // columns first (row spacing), then rows (col spacing)
    let mut column = vec![0.0; h.max(w)];
    for j in 0..w {
        for i in 0..h {
            column[i] = sq[i * w + j];
        }
        dt_1d(&mut column[..h], spacing.0);
        for i in 0..h {
            sq[i * w + j] = column[i];
        }
    }
    for i in 0..h {
        dt_1d(&mut sq[i * w..(i + 1) * w], spacing.1);
    }
    sq.iter_mut().for_each(|v| *v = v.sqrt());
    sq
}

/// One-dimensional squared distance transform by lower-envelope of
/// parabolas, with sample positions `p * step`.
fn dt_1d(f: &mut [f64], step: f64) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let x = |p: usize| p as f64 * step;
    let mut v = vec![0usize; n]; // abscissas of parabolas in the envelope
    let mut z = vec![0.0f64; n + 1]; // boundaries between parabolas
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * x(q) - 2.0 * x(p));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if !started {
        return; // no finite entries in this line
    }
    let mut k2 = 0usize;
    let snapshot: Vec<f64> = f.to_vec();
    for (q, fq) in f.iter_mut().enumerate() {
        while z[k2 + 1] < x(q) {
            k2 += 1;
        }
        let p = v[k2];
        let d = x(q) - x(p);
        *fq = d * d + snapshot[p];
    }
}

/// Per-case metric row.
#[derive(Debug, Clone, Copy)]
pub struct CaseMetrics {
    pub dsc: f64,
    pub hd: f64,
    pub asd: f64,
    pub assd: f64,
    pub sens: f64,
    pub prec: f64,
    pub empty_flag: bool,
}

pub fn evaluate_case(pred: &SegmentationMask, gt: &SegmentationMask) -> Result<CaseMetrics> {
    let dsc_v = dsc(pred, gt)?;
    let sd = surface_distances(pred, gt)?;
    let (sens, prec) = sens_prec(pred, gt)?;
    Ok(CaseMetrics { dsc: dsc_v, hd: sd.hd, asd: sd.asd, assd: sd.assd, sens, prec, empty_flag: sd.empty_flag })
}

/// Per-case results plus their mean.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub cases: Vec<(String, CaseMetrics)>,
    pub aggregate: CaseMetrics,
}

pub fn aggregate(cases: &[(String, CaseMetrics)]) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::input("cannot aggregate zero cases"));
    }
    let n = cases.len() as f64;
    let mut agg = CaseMetrics { dsc: 0.0, hd: 0.0, asd: 0.0, assd: 0.0, sens: 0.0, prec: 0.0, empty_flag: false };
    for (_, c) in cases {
        agg.dsc += c.dsc / n;
        agg.hd += c.hd / n;
        agg.asd += c.asd / n;
        agg.assd += c.assd / n;
        agg.sens += c.sens / n;
        agg.prec += c.prec / n;
        agg.empty_flag |= c.empty_flag;
    }
    Ok(MetricsReport { cases: cases.to_vec(), aggregate: agg })
}
