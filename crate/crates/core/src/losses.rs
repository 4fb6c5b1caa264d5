//! Least-squares adversarial, cycle, identity and style objectives.
//!
//! L1 terms are element means, so their magnitude does not depend on image
//! or style-vector size. Each term comes in two forms: a plain function over
//! values and a `*_graph` builder used during training.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::discriminator::StyleVector;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Cycle-consistency weight (lambda).
    pub cycle: f64,
    /// Identity weight; half of `cycle` by default.
    pub identity: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cycle: 10.0,
            identity: 5.0,
            style: 1.0,
        }
    }
}

/// Components of one network's objective. `total` is the weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan: f64,
    pub cycle: f64,
    pub identity: f64,
    pub style: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.gan, self.cycle, self.identity, self.style, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn nonempty(xs: &[f64], what: &str) -> Result<()> {
    if xs.is_empty() {
        Err(Error::invalid(format!("{what}: empty batch")))
    } else {
        Ok(())
    }
}

fn mean(xs: impl Iterator<Item = f64>, n: usize) -> f64 {
    xs.sum::<f64>() / n as f64
}

/// `mean((d - 1)^2)` over fake-sample decisions.
pub fn gan_loss_generator(decisions: &[f64]) -> Result<f64> {
    nonempty(decisions, "gan_loss_generator")?;
    Ok(mean(decisions.iter().map(|d| (d - 1.0).powi(2)), decisions.len()))
}

/// `mean((d_real - 1)^2) + mean(d_fake^2)`.
pub fn gan_loss_discriminator(real: &[f64], fake: &[f64]) -> Result<f64> {
    nonempty(real, "gan_loss_discriminator (real)")?;
    nonempty(fake, "gan_loss_discriminator (fake)")?;
    Ok(mean(real.iter().map(|d| (d - 1.0).powi(2)), real.len())
        + mean(fake.iter().map(|d| d * d), fake.len()))
}

/// Element-mean absolute difference of two equally shaped tensors.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.numel() == 0 {
        return Err(Error::invalid("L1 distance of empty tensors"));
    }
    Ok(mean(
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()),
        a.numel(),
    ))
}

/// Reconstruction error of `x` after a round trip through both generators.
pub fn cycle_loss(x: &Tensor, x_rec: &Tensor) -> Result<f64> {
    mean_abs_diff(x, x_rec)
}

/// Deviation of a generator from identity on target-domain input.
pub fn identity_loss(y: &Tensor, y_id: &Tensor) -> Result<f64> {
    mean_abs_diff(y, y_id)
}

/// Element-mean L1 distance over the full `C * C` vectors.
pub fn style_loss(fake: &StyleVector, real: &StyleVector) -> Result<f64> {
    if fake.len() != real.len() {
        return Err(Error::shape(format!(
            "style vectors of length {} and {}",
            fake.len(),
            real.len()
        )));
    }
    if fake.is_empty() {
        return Err(Error::invalid("style loss of empty vectors"));
    }
    Ok(mean(
        fake.as_slice()
            .iter()
            .zip(real.as_slice())
            .map(|(a, b)| (a - b).abs()),
        fake.len(),
    ))
}

/// One generator's objective: `gan + cycle_w * cycle + identity_w * identity`.
/// `style` is carried for reporting and added with its weight (zero unless
/// style feedback to the generator is enabled).
pub fn generator_objective(
    gan: f64,
    cycle: f64,
    identity: f64,
    style: f64,
    weights: &LossWeights,
) -> LossReport {
    LossReport {
        gan,
        cycle,
        identity,
        style,
        total: gan + weights.cycle * cycle + weights.identity * identity + weights.style * style,
    }
}

/// One discriminator's objective: least-squares term plus style distance.
pub fn discriminator_objective(gan: f64, style: f64, weights: &LossWeights) -> LossReport {
    LossReport {
        gan,
        style,
        total: gan + weights.style * style,
        ..LossReport::default()
    }
}

/// Terms of the full two-direction system objective.
#[derive(Clone, Copy, Debug, Default)]
pub struct SystemTerms {
    pub gan_xy: f64,
    pub style_xy: f64,
    pub gan_yx: f64,
    pub style_yx: f64,
    /// Sum of both directions' cycle errors.
    pub cycle: f64,
}

/// `gan_xy + style_xy + gan_yx + style_yx + lambda * cycle`.
pub fn system_objective(t: &SystemTerms, lambda: f64) -> f64 {
    t.gan_xy + t.style_xy + t.gan_yx + t.style_yx + lambda * t.cycle
}

pub fn gan_generator_graph(g: &mut Graph, decisions: Var) -> Result<Var> {
    let shifted = g.add_scalar(decisions, -1.0);
    let sq = g.square(shifted);
    g.mean(sq)
}

pub fn gan_discriminator_graph(g: &mut Graph, real: Var, fake: Var) -> Result<Var> {
    let shifted = g.add_scalar(real, -1.0);
    let real_sq = g.square(shifted);
    let real_term = g.mean(real_sq)?;
    let fake_sq = g.square(fake);
    let fake_term = g.mean(fake_sq)?;
    g.add(real_term, fake_term)
}

pub fn l1_graph(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let abs = g.abs(d);
    g.mean(abs)
}
