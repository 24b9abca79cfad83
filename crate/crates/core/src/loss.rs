//! Mask objective: smoothness, area, and label-gated preservation/destruction terms.
//!
//! `total = λ1·tv + λ2·area − λ3·mean(y·preserve) + λ4·mean(y·destroy)`, each
//! term averaged over the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::PositiveProbability;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Added inside the logarithm of the preservation term.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f32,
    pub lambda2: f32,
    pub lambda3: f32,
    pub lambda4: f32,
    pub enable_tv: bool,
    pub enable_area: bool,
    pub enable_preserve: bool,
    pub enable_destroy: bool,
    /// Use `log(P + eps)` for the destruction term instead of the raw probability.
    #[serde(default)]
    pub destroy_log: bool,
}

impl LossWeights {
    pub fn new(lambda1: f32, lambda2: f32, lambda3: f32, lambda4: f32) -> Self {
        Self {
            lambda1,
            lambda2,
            lambda3,
            lambda4,
            enable_tv: true,
            enable_area: true,
            enable_preserve: true,
            enable_destroy: true,
            destroy_log: false,
        }
    }

    pub fn lesion() -> Self {
        Self::new(0.1, 2.0, 0.3, 2.0)
    }

    pub fn malignant() -> Self {
        Self::new(0.1, 3.0, 1.0, 2.5)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn all_disabled(&self) -> bool {
        !(self.enable_tv || self.enable_area || self.enable_preserve || self.enable_destroy)
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::lesion()
    }
}

/// Batch-mean values of each term. `preserve` and `destroy` are ungated;
/// the `gated_*` fields are `mean(y_i · term_i)` and enter `total`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub tv: f32,
    pub area: f32,
    pub preserve: f32,
    pub destroy: f32,
    pub gated_preserve: f32,
    pub gated_destroy: f32,
    pub total: f32,
}

impl LossBreakdown {
    /// Recomputes the total from the parts, accumulating in f64.
    pub fn recombine(&self, w: &LossWeights) -> f32 {
        let on = |enabled: bool, lambda: f32, v: f32| if enabled { lambda as f64 * v as f64 } else { 0.0 };
        (on(w.enable_tv, w.lambda1, self.tv) + on(w.enable_area, w.lambda2, self.area)
            - on(w.enable_preserve, w.lambda3, self.gated_preserve)
            + on(w.enable_destroy, w.lambda4, self.gated_destroy)) as f32
    }
}

fn mask_dims<T: Real>(tape: &Tape<T>, m: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match tape.shape(m) {
        &[n, 1, h, w] => Ok((n, h, w)),
        s => Err(Error::shape(op, format!("mask must be [N, 1, H, W], got {s:?}"))),
    }
}

/// `m ⊙ x`, broadcasting the single mask channel over every input channel.
pub fn mask_apply<T: Real>(tape: &mut Tape<T>, m: Var, x: Var) -> Result<Var> {
    tape.mask_apply(m, x)
}

/// Per-sample anisotropic total variation normalized by `H·W`; `[N]`.
pub fn tv_per_sample<T: Real>(tape: &mut Tape<T>, m: Var) -> Result<Var> {
    let (_, h, w) = mask_dims(tape, m, "tv_loss")?;
    if h < 2 && w < 2 {
        return Err(Error::DegenerateBatch {
            op: "tv_loss",
            detail: format!("{h}x{w} mask has no neighbouring pixels"),
        });
    }
    let mut parts = Vec::new();
    for (axis, extent) in [(2, h), (3, w)] {
        if extent >= 2 {
            let d = tape.shift_diff(m, axis)?;
            let d = tape.abs(d)?;
            parts.push(tape.reduce_sum(d, &[1, 2, 3])?);
        }
    }
    let mut sum = parts[0];
    if let Some(&other) = parts.get(1) {
        sum = tape.add(sum, other)?;
    }
    tape.affine(sum, T::from_f64_lossy(1.0 / (h * w) as f64), T::zero())
}

pub fn tv_loss<T: Real>(tape: &mut Tape<T>, m: Var) -> Result<Var> {
    let v = tv_per_sample(tape, m)?;
    tape.mean_all(v)
}

/// Per-sample mask mean; `[N]`.
pub fn area_per_sample<T: Real>(tape: &mut Tape<T>, m: Var) -> Result<Var> {
    mask_dims(tape, m, "area_loss")?;
    tape.reduce_mean(m, &[1, 2, 3])
}

pub fn area_loss<T: Real>(tape: &mut Tape<T>, m: Var) -> Result<Var> {
    let v = area_per_sample(tape, m)?;
    tape.mean_all(v)
}

/// `log(P(y = 1 | m ⊙ x) + eps)` per sample; `[N]`.
pub fn preserve_per_sample<T: Real, E: PositiveProbability<T> + ?Sized>(
    tape: &mut Tape<T>,
    m: Var,
    x: Var,
    encoder: &E,
) -> Result<Var> {
    let kept = tape.mask_apply(m, x)?;
    let p = encoder.positive_probability(tape, kept)?;
    tape.log(p, T::from_f64_lossy(LOG_EPS))
}

pub fn preserve_loss<T: Real, E: PositiveProbability<T> + ?Sized>(
    tape: &mut Tape<T>,
    m: Var,
    x: Var,
    encoder: &E,
) -> Result<Var> {
    let v = preserve_per_sample(tape, m, x, encoder)?;
    tape.mean_all(v)
}

/// `P(y = 1 | (1 − m) ⊙ x)` per sample, or its log when `log` is set; `[N]`.
pub fn destroy_per_sample<T: Real, E: PositiveProbability<T> + ?Sized>(
    tape: &mut Tape<T>,
    m: Var,
    x: Var,
    encoder: &E,
    log: bool,
) -> Result<Var> {
    let inverse = tape.affine(m, -T::one(), T::one())?;
    let removed = tape.mask_apply(inverse, x)?;
    let p = encoder.positive_probability(tape, removed)?;
    if log {
        tape.log(p, T::from_f64_lossy(LOG_EPS))
    } else {
        Ok(p)
    }
}

pub fn destroy_loss<T: Real, E: PositiveProbability<T> + ?Sized>(
    tape: &mut Tape<T>,
    m: Var,
    x: Var,
    encoder: &E,
    log: bool,
) -> Result<Var> {
    let v = destroy_per_sample(tape, m, x, encoder, log)?;
    tape.mean_all(v)
}

/// Combined objective for a batch. `y` holds binarized labels, one per sample.
pub fn total_loss<T: Real, E: PositiveProbability<T> + ?Sized>(
    tape: &mut Tape<T>,
    m: Var,
    x: Var,
    y: &[u8],
    weights: &LossWeights,
    encoder: &E,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let (n, _, _) = mask_dims(tape, m, "total_loss")?;
    if y.len() != n {
        return Err(Error::shape("total_loss", format!("{} labels for a batch of {n}", y.len())));
    }
    if let Some(bad) = y.iter().find(|&&v| v > 1) {
        return Err(Error::Contract(format!("label {bad} is not binarized to {{0, 1}}")));
    }
    let scalar = |tape: &Tape<T>, v: Var| tape.value(v).data()[0].to_f32_lossy();
    let lam = |v: f32| T::from_f32_lossy(v);

    let tv = tv_loss(tape, m)?;
    let area = area_loss(tape, m)?;
    let yt = tape.constant(Tensor::from_fn(&[n], |i| T::from_u8(y[i]).expect("0 or 1")));
    let p = preserve_per_sample(tape, m, x, encoder)?;
    let d = destroy_per_sample(tape, m, x, encoder, weights.destroy_log)?;
    let preserve = tape.mean_all(p)?;
    let destroy = tape.mean_all(d)?;
    let gp = tape.mul(yt, p)?;
    let gated_preserve = tape.mean_all(gp)?;
    let gd = tape.mul(yt, d)?;
    let gated_destroy = tape.mean_all(gd)?;
    let any_positive = y.contains(&1);

    let mut terms = Vec::new();
    if weights.enable_tv {
        terms.push(tape.affine(tv, lam(weights.lambda1), T::zero())?);
    }
    if weights.enable_area {
        terms.push(tape.affine(area, lam(weights.lambda2), T::zero())?);
    }
    // With no positive sample the gated terms are identically zero and are left
    // out, so the total does not depend on the input or the encoder.
    if any_positive && weights.enable_preserve {
        terms.push(tape.affine(gated_preserve, -lam(weights.lambda3), T::zero())?);
    }
    if any_positive && weights.enable_destroy {
        terms.push(tape.affine(gated_destroy, lam(weights.lambda4), T::zero())?);
    }
    let total = match terms.split_first() {
        None => tape.constant(Tensor::new(vec![1], vec![T::zero()])?),
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = tape.add(acc, t)?;
            }
            acc
        }
    };
    let breakdown = LossBreakdown {
        tv: scalar(tape, tv),
        area: scalar(tape, area),
        preserve: scalar(tape, preserve),
        destroy: scalar(tape, destroy),
        gated_preserve: scalar(tape, gated_preserve),
        gated_destroy: scalar(tape, gated_destroy),
        total: scalar(tape, total),
    };
    Ok((total, breakdown))
}
