//! Scalar reductions and region-overlap loss terms recorded on the tape.

use crate::tape::{BufId, Op, Tape};
use crate::{Error, Result};

pub fn sum_all(tape: &mut Tape, x: BufId) -> BufId {
    let s: f64 = tape.value(x).iter().sum();
    tape.push_op(vec![1], vec![s], |out| Op::SumAll { x, out })
}

/// Dot product with a fixed vector; used to scalarize arbitrary outputs for
/// gradient checking.
pub fn dot_const(tape: &mut Tape, x: BufId, r: Vec<f64>) -> Result<BufId> {
    if r.len() != tape.numel(x) {
        return Err(Error::config(format!(
            "dot_const: vector length {} does not match buffer {}",
            r.len(),
            tape.numel(x)
        )));
    }
    let s: f64 = tape.value(x).iter().zip(&r).map(|(a, b)| a * b).sum();
    Ok(tape.push_op(vec![1], vec![s], |out| Op::DotConst { x, out, r }))
}

/// Weighted sum of scalar buffers.
pub fn weighted_sum(tape: &mut Tape, terms: Vec<(BufId, f64)>) -> Result<BufId> {
    for (id, _) in &terms {
        if tape.numel(*id) != 1 {
            return Err(Error::config("weighted_sum: every term must be a scalar"));
        }
    }
    let s: f64 = terms.iter().map(|(id, w)| tape.scalar(*id) * w).sum();
    Ok(tape.push_op(vec![1], vec![s], |out| Op::WeightedSum { terms, out }))
}

fn check_loss_operands(tape: &Tape, p: BufId, y: &[f64], what: &str) -> Result<()> {
    if tape.numel(p) != y.len() {
        return Err(Error::input(format!(
            "{what}: prediction has {} elements, target has {}",
            tape.numel(p),
            y.len()
        )));
    }
    Ok(())
}

/// Smooth Dice loss on foreground probabilities:
/// `1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps)`.
pub fn dice_loss_op(tape: &mut Tape, p: BufId, y: Vec<f64>, eps: f64) -> Result<BufId> {
    check_loss_operands(tape, p, &y, "dice_loss")?;
    let pv = tape.value(p);
    let inter: f64 = pv.iter().zip(&y).map(|(a, b)| a * b).sum();
    let psum: f64 = pv.iter().sum();
    let ysum: f64 = y.iter().sum();
    let num = 2.0 * inter + eps;
    let den = psum + ysum + eps;
    let loss = if den == 0.0 { 0.0 } else { 1.0 - num / den };
    Ok(tape.push_op(vec![1], vec![loss], |out| Op::DiceLoss { p, out, y, eps }))
}

pub(crate) fn dice_loss_backward(pv: &[f64], y: &[f64], eps: f64, g: f64) -> Vec<f64> {
    let inter: f64 = pv.iter().zip(y).map(|(a, b)| a * b).sum();
    let psum: f64 = pv.iter().sum();
    let ysum: f64 = y.iter().sum();
    let num = 2.0 * inter + eps;
    let den = psum + ysum + eps;
    if den == 0.0 {
        return vec![0.0; pv.len()];
    }
    let den2 = den * den;
    y.iter().map(|&yi| -g * (2.0 * yi * den - num) / den2).collect()
}

/// Boundary Difference-over-Union loss with a fixed boundary coefficient:
/// `(union - inter) / (union - alpha*inter + smooth)` on soft regions,
/// `inter = sum(p*y)`, `union = sum(p) + sum(y) - inter`.
///
/// At `alpha = 0` this is exactly `1 - (inter + smooth)/(union + smooth)`,
/// the smoothed complement of soft IoU.
pub fn boundary_dou_loss_op(tape: &mut Tape, p: BufId, y: Vec<f64>, alpha: f64, smooth: f64) -> Result<BufId> {
    check_loss_operands(tape, p, &y, "boundary_dou_loss")?;
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::config(format!("boundary_dou_loss: alpha {alpha} outside [0, 1)")));
    }
    let pv = tape.value(p);
    let inter: f64 = pv.iter().zip(&y).map(|(a, b)| a * b).sum();
    let psum: f64 = pv.iter().sum();
    let ysum: f64 = y.iter().sum();
    let union = psum + ysum - inter;
    let loss = (union - inter) / (union - alpha * inter + smooth);
    Ok(tape.push_op(vec![1], vec![loss], |out| Op::BoundaryDouLoss { p, out, y, alpha, smooth }))
}

pub(crate) fn boundary_dou_backward(pv: &[f64], y: &[f64], alpha: f64, smooth: f64, g: f64) -> Vec<f64> {
    let inter: f64 = pv.iter().zip(y).map(|(a, b)| a * b).sum();
    let psum: f64 = pv.iter().sum();
    let ysum: f64 = y.iter().sum();
    let union = psum + ysum - inter;
    let num = union - inter;
    let den = union - alpha * inter + smooth;
    let den2 = den * den;
    y.iter()
        .map(|&yi| {
            // d union / d p_i = 1 - y_i ; d inter / d p_i = y_i
            let dnum = 1.0 - 2.0 * yi;
            let dden = (1.0 - yi) - alpha * yi;
            g * (dnum * den - num * dden) / den2
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_perfect_overlap_is_near_zero() {
        let mut tape = Tape::new();
        let y = vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let p = tape.alloc(vec![6], y.clone());
        let l = dice_loss_op(&mut tape, p, y, 1.0).unwrap();
        // <= eps / (2|Y| + eps) = 1/7
        let v = tape.scalar(l);
        assert!(v >= 0.0 && v <= 1.0 / 7.0 + 1e-12, "{v}");
    }

    #[test]
    fn dice_disjoint_is_near_one() {
        let mut tape = Tape::new();
        let p = tape.alloc(vec![4], vec![1.0, 1.0, 0.0, 0.0]);
        let y = vec![0.0, 0.0, 1.0, 1.0];
        let l = dice_loss_op(&mut tape, p, y, 1.0).unwrap();
        let v = tape.scalar(l);
        // 1 - eps/(|P|+|Y|+eps) = 1 - 1/5
        assert!((v - 0.8).abs() < 1e-12, "{v}");
    }

    #[test]
    fn dice_arithmetic_case() {
        // |P| = |Y| = 2, intersection 1, eps = 0 -> 0.5.
        let mut tape = Tape::new();
        let p = tape.alloc(vec![4], vec![1.0, 1.0, 0.0, 0.0]);
        let y = vec![0.0, 1.0, 1.0, 0.0];
        let l = dice_loss_op(&mut tape, p, y, 0.0).unwrap();
        assert!((tape.scalar(l) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bdou_perfect_match_is_exactly_zero() {
        let mut tape = Tape::new();
        let y = vec![1.0, 0.0, 1.0, 1.0];
        let p = tape.alloc(vec![4], y.clone());
        let l = boundary_dou_loss_op(&mut tape, p, y, 0.5, 1e-6).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn bdou_alpha_zero_is_one_minus_iou() {
        // |P| = |Y| = 2, intersection 1, alpha 0: (3-1)/3 = 2/3.
        let mut tape = Tape::new();
        let p = tape.alloc(vec![4], vec![1.0, 1.0, 0.0, 0.0]);
        let y = vec![0.0, 1.0, 1.0, 0.0];
        let l = boundary_dou_loss_op(&mut tape, p, y, 0.0, 1e-6).unwrap();
        assert!((tape.scalar(l) - 2.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn bdou_empty_target_is_defined() {
        let mut tape = Tape::new();
        let p = tape.alloc(vec![4], vec![0.6, 0.2, 0.0, 0.0]);
        let l = boundary_dou_loss_op(&mut tape, p, vec![0.0; 4], 0.0, 1e-6).unwrap();
        assert!(tape.scalar(l).is_finite());
    }

    #[test]
    fn weighted_sum_combines_scalars() {
        let mut tape = Tape::new();
        let a = tape.alloc(vec![1], vec![2.0]);
        let b = tape.alloc(vec![1], vec![3.0]);
        let s = weighted_sum(&mut tape, vec![(a, 0.5), (b, 2.0)]).unwrap();
        assert_eq!(tape.scalar(s), 7.0);
    }
}
