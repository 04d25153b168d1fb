//! Soft Dice, reconstruction and KL losses and their weighted sum.

use crate::error::{Error, Result};
use crate::model::ForwardVars;
use crate::tensor::{Element, Tape, Tensor, Var};

pub const DICE_EPS: f64 = 1e-5;
pub const VAE_WEIGHT: f64 = 0.1;

/// Scalar loss components of one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub dice: f64,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub epsilon: f64,
    pub vae_weight: f64,
}

/// `total = dice + 0.1 * (recon + kl)`.
pub fn total_loss(dice: f64, recon: f64, kl: f64) -> Result<LossBreakdown> {
    for (name, v) in [("dice", dice), ("recon", recon), ("kl", kl)] {
        if !v.is_finite() {
            return Err(Error::Divergence(format!("{name} loss is {v}")));
        }
    }
    Ok(LossBreakdown { dice, recon, kl, total: dice + VAE_WEIGHT * (recon + kl), epsilon: DICE_EPS, vae_weight: VAE_WEIGHT })
}

fn check_same<T: Element>(t: &Tape<T>, a: Var, b: &Tensor<T>, what: &str) -> Result<()> {
    if t.shape(a) != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", t.shape(a), b.shape())));
    }
    Ok(())
}

/// Soft Dice loss over `[N, C, ...]`: per (sample, channel)
/// `1 - (2 Σ p·y + ε) / (Σ p + Σ y + ε)`, averaged over samples and channels.
pub fn dice_loss<T: Element>(t: &mut Tape<T>, pred: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
    check_same(t, pred, target, "dice prediction and target differ")?;
    if target.rank() < 3 {
        return Err(Error::Shape(format!("dice expects [N, C, ...], got {:?}", target.shape())));
    }
    if let Some(v) = target.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Domain(format!("dice target must be binary, found {v}")));
    }
    let axes: Vec<usize> = (2..target.rank()).collect();
    let y = t.constant(target.clone());
    let py = t.mul(pred, y)?;
    let inter = t.sum(py, &axes)?;
    let sp = t.sum(pred, &axes)?;
    let sy = t.sum(y, &axes)?;
    let num = t.scale(inter, 2.0);
    let num = t.add_scalar(num, eps);
    let den = t.add(sp, sy)?;
    let den = t.add_scalar(den, eps);
    let ratio = t.div(num, den)?;
    let m = t.mean_all(ratio);
    let neg = t.neg(m);
    Ok(t.add_scalar(neg, 1.0))
}

/// Mean squared error over all elements.
pub fn recon_loss<T: Element>(t: &mut Tape<T>, reconstruction: Var, input: &Tensor<T>) -> Result<Var> {
    check_same(t, reconstruction, input, "reconstruction and input differ")?;
    let x = t.constant(input.clone());
    let d = t.sub(reconstruction, x)?;
    let sq = t.square(d);
    Ok(t.mean_all(sq))
}

/// `Σ (μ² + σ² − log σ² − 1) / n_total_voxels`, averaged over the batch,
/// with `σ² = exp(logvar)`. No ½ factor.
pub fn kl_loss<T: Element>(t: &mut Tape<T>, mu: Var, logvar: Var, n_total_voxels: usize) -> Result<Var> {
    if t.shape(mu) != t.shape(logvar) || t.shape(mu).len() != 2 {
        return Err(Error::Shape(format!("kl expects equal [N, M] inputs, got {:?} and {:?}", t.shape(mu), t.shape(logvar))));
    }
    if n_total_voxels == 0 {
        return Err(Error::Contract("kl normalization needs at least one voxel".into()));
    }
    let n = t.shape(mu)[0];
    let m2 = t.square(mu);
    let var = t.exp(logvar)?;
    let a = t.add(m2, var)?;
    let b = t.sub(a, logvar)?;
    let c = t.add_scalar(b, -1.0);
    let s = t.sum_all(c);
    Ok(t.scale(s, 1.0 / (n_total_voxels as f64 * n as f64)))
}

/// Tape handles of the loss components and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub dice: Var,
    pub recon: Var,
    pub kl: Var,
    pub total: Var,
}

impl LossVars {
    /// Component values, checked for finiteness.
    pub fn breakdown<T: Element>(&self, t: &Tape<T>) -> Result<LossBreakdown> {
        let v = |x: Var| t.value(x).item().map(|v| v.to_f64().unwrap_or(f64::NAN));
        total_loss(v(self.dice)?, v(self.recon)?, v(self.kl)?)
    }
}

/// Combined objective for one forward pass over `input` with multi-label `target`.
pub fn model_loss<T: Element>(t: &mut Tape<T>, out: &ForwardVars, input: &Tensor<T>, target: &Tensor<T>) -> Result<LossVars> {
    let dice = dice_loss(t, out.segmentation, target, DICE_EPS)?;
    let recon = recon_loss(t, out.reconstruction, input)?;
    let per_sample: usize = input.shape()[1..].iter().product();
    let kl = kl_loss(t, out.mu, out.logvar, per_sample)?;
    let vae = t.add(recon, kl)?;
    let vae = t.scale(vae, VAE_WEIGHT);
    let total = t.add(dice, vae)?;
    Ok(LossVars { dice, recon, kl, total })
}
