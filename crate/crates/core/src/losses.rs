//! The three training losses and their sum: the conditional-GAN pair, the
//! channel-weighted L1 with its 1/(4HW) prefactor, and the attention-map
//! supervision.

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Sigmoid outputs are clamped to [EPS, 1-EPS] before any log.
pub const SIGMA_EPS: f32 = 1e-7;

/// How the squared attention error is reduced. Mean keeps the magnitude
/// resolution-independent; Sum is the literal norm reading.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum AttentionLossMode {
    #[default]
    Mean,
    Sum,
}

/// Generator adversarial objective: the non-saturating -log sigma(fake)
/// (default) or the literal +log(1 - sigma(fake)).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum GeneratorGanLoss {
    #[default]
    NonSaturating,
    Literal,
}

/// Divisor of the weighted L1: the printed 1/(4HW) form, or 1/(CHW).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum L1Denominator {
    #[default]
    FourHw,
    Chw,
}

/// Per-term weights of the total generator objective; the printed objective
/// is the unweighted sum, so everything defaults to 1.
#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub l1: f32,
    pub cgan: f32,
    pub attention: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            l1: 1.0,
            cgan: 1.0,
            attention: 1.0,
        }
    }
}

/// Scalar values of one step's losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_cgan_g: f32,
    pub l_cgan_d: f32,
    pub l1: f32,
    pub l_attention: f32,
    pub total: f32,
}

fn clamped_sigma(tape: &Tape, scores: Var) -> Var {
    tape.clamp_const(tape.sigmoid(scores), SIGMA_EPS, 1.0 - SIGMA_EPS)
}

/// Discriminator loss -E[log sigma(real)] - E[log(1 - sigma(fake))], means
/// taken over all patches and batch items.
pub fn cgan_d_loss(tape: &Tape, real_scores: Var, fake_scores: Var) -> Result<Var> {
    if tape.shape(real_scores) != tape.shape(fake_scores) {
        return Err(Error::ShapeMismatch {
            context: "cgan score grids",
            lhs: tape.shape(real_scores).to_string(),
            rhs: tape.shape(fake_scores).to_string(),
        });
    }
    let real_term = tape.neg(tape.mean_all(tape.log(clamped_sigma(tape, real_scores))));
    let fake_sigma = clamped_sigma(tape, fake_scores);
    let one_minus = tape.add_const(tape.neg(fake_sigma), 1.0);
    let fake_term = tape.neg(tape.mean_all(tape.log(one_minus)));
    tape.add(real_term, fake_term)
}

/// Generator adversarial loss on the fake score grid.
pub fn cgan_g_loss(tape: &Tape, fake_scores: Var, mode: GeneratorGanLoss) -> Var {
    let sigma = clamped_sigma(tape, fake_scores);
    match mode {
        GeneratorGanLoss::NonSaturating => tape.neg(tape.mean_all(tape.log(sigma))),
        GeneratorGanLoss::Literal => {
            tape.mean_all(tape.log(tape.add_const(tape.neg(sigma), 1.0)))
        }
    }
}

/// Channel-weighted L1 with the printed prefactor, averaged over the batch.
pub fn l1_weighted(
    tape: &Tape,
    output: Var,
    target: Var,
    channel_weights: &[f32],
    denom: L1Denominator,
) -> Result<Var> {
    let s = tape.shape(output);
    if s != tape.shape(target) {
        return Err(Error::ShapeMismatch {
            context: "l1_weighted",
            lhs: s.to_string(),
            rhs: tape.shape(target).to_string(),
        });
    }
    if channel_weights.len() != s.c {
        return Err(Error::contract(format!(
            "l1_weighted got {} channel weights for {} channels",
            channel_weights.len(),
            s.c
        )));
    }
    let diff = tape.abs(tape.sub(output, target)?);
    let weighted = tape.scale_channels(diff, channel_weights)?;
    let sum = tape.sum_all(weighted);
    let denom = match denom {
        L1Denominator::FourHw => 4.0 * (s.h * s.w) as f32,
        L1Denominator::Chw => (s.c * s.h * s.w) as f32,
    };
    Ok(tape.scale(sum, 1.0 / (denom * s.n as f32)))
}

fn check_binary_mask(mask: &Tensor) -> Result<()> {
    for v in mask.data() {
        if v.abs() > 1e-6 && (v - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "attention mask must be binary, found value {v}"
            )));
        }
    }
    Ok(())
}

/// Squared error between one attention map and the binary mask.
pub fn attention_loss(
    tape: &Tape,
    map: Var,
    mask: &Tensor,
    mode: AttentionLossMode,
) -> Result<Var> {
    if tape.shape(map) != mask.shape() {
        return Err(Error::ShapeMismatch {
            context: "attention_loss",
            lhs: tape.shape(map).to_string(),
            rhs: mask.shape().to_string(),
        });
    }
    check_binary_mask(mask)?;
    let m = tape.constant(mask.clone());
    let d = tape.sub(map, m)?;
    let sq = tape.mul(d, d)?;
    Ok(match mode {
        AttentionLossMode::Mean => tape.mean_all(sq),
        AttentionLossMode::Sum => tape.sum_all(sq),
    })
}

/// Supervises every progressive step against the same mask; the per-step
/// losses are summed.
pub fn attention_steps_loss(
    tape: &Tape,
    steps: &[Var],
    mask: &Tensor,
    mode: AttentionLossMode,
) -> Result<Var> {
    if steps.is_empty() {
        return Err(Error::contract("attention_steps_loss needs at least one map"));
    }
    let mut total = attention_loss(tape, steps[0], mask, mode)?;
    for map in &steps[1..] {
        let term = attention_loss(tape, *map, mask, mode)?;
        total = tape.add(total, term)?;
    }
    Ok(total)
}

/// Weighted sum of the generator objective terms.
pub fn total_loss(tape: &Tape, l1: Var, cgan_g: Var, attention: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(l1, w.l1);
    let b = tape.scale(cgan_g, w.cgan);
    let c = tape.scale(attention, w.attention);
    tape.add(tape.add(a, b)?, c)
}

// -- plain-tensor conveniences (forward only) --------------------------------

/// (d_loss, g_loss) on pre-sigmoid score grids.
pub fn cgan_losses(real_scores: &Tensor, fake_scores: &Tensor) -> Result<(f32, f32)> {
    let tape = Tape::new();
    let (r, f) = (tape.constant(real_scores.clone()), tape.constant(fake_scores.clone()));
    let d = cgan_d_loss(&tape, r, f)?;
    let g = cgan_g_loss(&tape, f, GeneratorGanLoss::NonSaturating);
    Ok((tape.item(d)?, tape.item(g)?))
}

pub fn l1_weighted_value(
    output: &Tensor,
    target: &Tensor,
    channel_weights: &[f32],
    denom: L1Denominator,
) -> Result<f32> {
    let tape = Tape::new();
    let (o, t) = (tape.constant(output.clone()), tape.constant(target.clone()));
    let v = l1_weighted(&tape, o, t, channel_weights, denom)?;
    tape.item(v)
}

pub fn attention_loss_value(map: &Tensor, mask: &Tensor, mode: AttentionLossMode) -> Result<f32> {
    let tape = Tape::new();
    let m = tape.constant(map.clone());
    let v = attention_loss(&tape, m, mask, mode)?;
    tape.item(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn zero_scores_hit_the_log2_values() {
        let scores = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let (d, g) = cgan_losses(&scores, &scores).unwrap();
        assert!((d - 2.0 * std::f32::consts::LN_2).abs() < 1e-6);
        assert!((g - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn perfect_discriminator_limit() {
        let real = Tensor::full(Shape::new(1, 1, 2, 2), 40.0);
        let fake = Tensor::full(Shape::new(1, 1, 2, 2), -40.0);
        let (d, _) = cgan_losses(&real, &fake).unwrap();
        assert!(d.abs() < 1e-5, "{d}");
    }

    #[test]
    fn mismatched_grids_rejected() {
        let a = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert!(cgan_losses(&a, &b).is_err());
    }

    #[test]
    fn l1_identity_and_constant_offset() {
        let a = Tensor::full(Shape::new(1, 3, 4, 5), 0.25);
        assert_eq!(
            l1_weighted_value(&a, &a, &[1.0; 3], L1Denominator::FourHw).unwrap(),
            0.0
        );
        let b = Tensor::full(Shape::new(1, 3, 4, 5), 0.25 - 0.4);
        let v = l1_weighted_value(&a, &b, &[1.0; 3], L1Denominator::FourHw).unwrap();
        assert!((v - 0.75 * 0.4).abs() < 1e-6, "{v}");
    }

    #[test]
    fn l1_rejects_wrong_weight_count() {
        let a = Tensor::zeros(Shape::new(1, 3, 2, 2));
        assert!(l1_weighted_value(&a, &a, &[1.0; 2], L1Denominator::FourHw).is_err());
    }

    #[test]
    fn attention_identity_and_saturated() {
        let m = Tensor::zeros(Shape::new(1, 1, 3, 3));
        assert_eq!(attention_loss_value(&m, &m, AttentionLossMode::Mean).unwrap(), 0.0);
        let a = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        assert_eq!(attention_loss_value(&a, &m, AttentionLossMode::Mean).unwrap(), 1.0);
        assert_eq!(attention_loss_value(&a, &m, AttentionLossMode::Sum).unwrap(), 9.0);
    }

    #[test]
    fn attention_rejects_non_binary_mask() {
        let a = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let m = Tensor::full(Shape::new(1, 1, 2, 2), 0.3);
        assert!(attention_loss_value(&a, &m, AttentionLossMode::Mean).is_err());
    }

    #[test]
    fn total_is_plain_sum_at_default_weights() {
        let tape = Tape::new();
        let (a, b, c) = (
            tape.constant(Tensor::scalar(1.0)),
            tape.constant(Tensor::scalar(2.0)),
            tape.constant(Tensor::scalar(3.0)),
        );
        let t = total_loss(&tape, a, b, c, &LossWeights::default()).unwrap();
        assert_eq!(tape.item(t).unwrap(), 6.0);
        let zero = tape.constant(Tensor::scalar(0.0));
        let z = total_loss(&tape, zero, zero, zero, &LossWeights::default()).unwrap();
        assert_eq!(tape.item(z).unwrap(), 0.0);
    }
}
