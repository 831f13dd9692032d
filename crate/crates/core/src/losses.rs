//! Dice and focal losses on probability maps, shared by mask-proposal
//! training and the segmentation loss.

use crate::error::Result;
use crate::numcore::{Tape, Var};

/// Loss weights and shape parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub dice_weight: f64,
    pub focal_weight: f64,
    /// Dice smoothing ε.
    pub dice_eps: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            dice_weight: 1.0,
            focal_weight: 20.0,
            dice_eps: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

const LOG_FLOOR: f64 = 1e-12;

/// Per-row dice loss `1 - (2Σpt + ε)/(Σp + Σt + ε)`, `[R×P] -> [R]`.
pub fn dice_rows(tape: &mut Tape, p: Var, t: Var, eps: f64) -> Result<Var> {
    let pt = tape.mul(p, t)?;
    let inter = tape.row_sums(pt)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, eps)?;
    let sp = tape.row_sums(p)?;
    let st = tape.row_sums(t)?;
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, eps)?;
    let ratio = tape.div(num, den)?;
    tape.one_minus(ratio)
}

fn pow_gamma(tape: &mut Tape, x: Var, gamma: f64) -> Result<Var> {
    if gamma == 2.0 {
        return tape.mul(x, x);
    }
    // x^γ = exp(γ ln x) is not needed at the configured γ; support integer γ.
    let mut acc = x;
    let mut k = gamma as i32;
    while k > 1 {
        acc = tape.mul(acc, x)?;
        k -= 1;
    }
    Ok(acc)
}

/// Per-row binary focal loss averaged over pixels, `[R×P] -> [R]`:
/// `-α t (1-p)^γ ln p - (1-α)(1-t) p^γ ln(1-p)`.
pub fn focal_rows(tape: &mut Tape, p: Var, t: Var, gamma: f64, alpha: f64) -> Result<Var> {
    let q = tape.one_minus(p)?;
    let one_minus_t = tape.one_minus(t)?;
    let lp = tape.add_scalar(p, LOG_FLOOR)?;
    let lp = tape.ln(lp)?;
    let lq = tape.add_scalar(q, LOG_FLOOR)?;
    let lq = tape.ln(lq)?;
    let qg = pow_gamma(tape, q, gamma)?;
    let pg = pow_gamma(tape, p, gamma)?;
    let pos = tape.mul(t, qg)?;
    let pos = tape.mul(pos, lp)?;
    let pos = tape.scale(pos, -alpha)?;
    let neg = tape.mul(one_minus_t, pg)?;
    let neg = tape.mul(neg, lq)?;
    let neg = tape.scale(neg, -(1.0 - alpha))?;
    let total = tape.add(pos, neg)?;
    let sums = tape.row_sums(total)?;
    let cols = tape.value(p).shape()[1] as f64;
    tape.scale(sums, 1.0 / cols)
}

/// `Σ_rows λ_dice·dice + λ_focal·focal` as a scalar.
pub fn dice_focal(tape: &mut Tape, p: Var, t: Var, cfg: &LossConfig) -> Result<Var> {
    let d = dice_rows(tape, p, t, cfg.dice_eps)?;
    let f = focal_rows(tape, p, t, cfg.focal_gamma, cfg.focal_alpha)?;
    let d = tape.scale(d, cfg.dice_weight)?;
    let f = tape.scale(f, cfg.focal_weight)?;
    let both = tape.add(d, f)?;
    tape.sum(both)
}

/// Plain-value dice cost between two maps.
pub fn dice_value(p: &[f64], t: &[f64], eps: f64) -> f64 {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let st: f64 = t.iter().sum();
    1.0 - (2.0 * inter + eps) / (sp + st + eps)
}

/// Plain-value focal cost between two maps (mean over pixels).
pub fn focal_value(p: &[f64], t: &[f64], gamma: f64, alpha: f64) -> f64 {
    let n = p.len() as f64;
    p.iter()
        .zip(t)
        .map(|(&p, &t)| {
            let q = 1.0 - p;
            -alpha * t * libm::pow(q, gamma) * libm::log(p + LOG_FLOOR)
                - (1.0 - alpha) * (1.0 - t) * libm::pow(p, gamma) * libm::log(q + LOG_FLOOR)
        })
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use alloc::vec;

    use super::*;
    use crate::numcore::{grad_check_many, Tensor};

    fn eval(p: &[f64], t: &[f64], rows: usize) -> (f64, f64) {
        let cols = p.len() / rows;
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::new([rows, cols], p.to_vec()).unwrap());
        let tv = tape.constant(Tensor::new([rows, cols], t.to_vec()).unwrap());
        let d = dice_rows(&mut tape, pv, tv, 1.0).unwrap();
        let f = focal_rows(&mut tape, pv, tv, 2.0, 0.25).unwrap();
        (tape.value(d).sum(), tape.value(f).sum())
    }

    #[test]
    fn perfect_saturated_prediction_has_zero_loss() {
        let t = [1.0, 0.0, 1.0, 0.0];
        let (d, f) = eval(&t, &t, 1);
        assert!(d.abs() < 1e-12);
        assert!(f.abs() < 1e-6);
    }

    #[test]
    fn complete_mismatch_on_half_filled_mask() {
        let t: vec::Vec<f64> = (0..4096)
            .map(|i| if i < 2048 { 1.0 } else { 0.0 })
            .collect();
        let p: vec::Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        let (d, _) = eval(&p, &t, 1);
        assert!(d >= 0.99, "{d}");
    }

    #[test]
    fn two_by_two_hand_values() {
        let p = [0.8, 0.2, 0.6, 0.4];
        let t = [1.0, 0.0, 1.0, 0.0];
        let (d, f) = eval(&p, &t, 1);
        // dice: 1 - (2·1.4 + 1)/(2.0 + 2.0 + 1) = 1 - 3.8/5
        assert!((d - (1.0 - 3.8 / 5.0)).abs() < 1e-12);
        // focal, term by term
        let terms = [
            -0.25 * 0.2f64 * 0.2 * libm::log(0.8),
            -0.75 * 0.2f64 * 0.2 * libm::log(0.8),
            -0.25 * 0.4f64 * 0.4 * libm::log(0.6),
            -0.75 * 0.4f64 * 0.4 * libm::log(0.6),
        ];
        let expected = terms.iter().sum::<f64>() / 4.0;
        assert!((f - expected).abs() < 1e-11, "{f} vs {expected}");
        assert!((dice_value(&p, &t, 1.0) - d).abs() < 1e-15);
        assert!((focal_value(&p, &t, 2.0, 0.25) - f).abs() < 1e-12);
    }

    #[test]
    fn losses_have_correct_gradients() {
        let p = Tensor::new([2, 3], vec![0.3, 0.7, 0.55, 0.1, 0.9, 0.45]).unwrap();
        let t = Tensor::new([2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let err = grad_check_many(
            |tape, v| {
                let tv = tape.constant(t.clone());
                dice_focal(tape, v[0], tv, &LossConfig::default())
            },
            &[p],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
