use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Smoothing term added to both sides of the Dice ratio.
pub const DICE_EPS: f64 = 1e-6;

/// Diagonal Gaussian posterior parameters of one encoded image.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// `KL(N(mu, exp(logvar)) || N(0, I))` in closed form.
pub fn kl_standard_normal(code: &LatentCode) -> Result<f64> {
    if code.mu.len() != code.logvar.len() {
        return Err(Error::dim("mu and logvar differ in length"));
    }
    if code.mu.iter().chain(&code.logvar).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("latent code is not finite".into()));
    }
    let kl = code
        .mu
        .iter()
        .zip(&code.logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
        * 0.5;
    // each term is >= 0 analytically; clamp the rounding residue
    Ok(kl.max(0.0))
}

/// Negative soft Dice overlap, `-(2 Σ ŷy + ε) / (Σ ŷ + Σ y + ε)`.
pub fn dice_loss(y_hat: &Tensor, y: &Tensor) -> Result<f64> {
    validate_dice(y_hat, y)?;
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&p, &t) in y_hat.data().iter().zip(y.data()) {
        inter += p * t;
        sp += p;
        sy += t;
    }
    Ok(-(2.0 * inter + DICE_EPS) / (sp + sy + DICE_EPS))
}

fn validate_dice(y_hat: &Tensor, y: &Tensor) -> Result<()> {
    if y_hat.shape() != y.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} and mask {:?} differ in shape",
            y_hat.shape(),
            y.shape()
        )));
    }
    if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract("mask must be binary"));
    }
    if y_hat.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::contract("prediction must lie in [0, 1]"));
    }
    Ok(())
}

/// Differentiable Dice loss; `y` is a constant mask on the same tape.
pub fn dice_loss_on_tape(tape: &mut Tape, y_hat: Var, y: Var) -> Result<Var> {
    validate_dice(tape.value(y_hat)?, tape.value(y)?)?;
    let overlap = tape.mul(y_hat, y)?;
    let inter = tape.sum(overlap)?;
    let twice = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(twice, DICE_EPS)?;
    let sp = tape.sum(y_hat)?;
    let sy = tape.sum(y)?;
    let total = tape.add(sp, sy)?;
    let den = tape.add_scalar(total, DICE_EPS)?;
    let ratio = tape.div(num, den)?;
    tape.scale(ratio, -1.0)
}

/// Batch KL averaged over rows of `[N, D]` `mu` and `logvar`.
pub(crate) fn kl_on_tape(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var> {
    let shape = tape.value(mu)?.shape().to_vec();
    let (n, d) = (shape[0], shape[1]);
    let mu2 = tape.square(mu)?;
    let s_mu = tape.sum(mu2)?;
    let var = tape.exp(logvar)?;
    let s_var = tape.sum(var)?;
    let s_lv = tape.sum(logvar)?;
    let a = tape.add(s_mu, s_var)?;
    let b = tape.sub(a, s_lv)?;
    let half = tape.scale(b, 0.5 / n as f64)?;
    tape.add_scalar(half, -0.5 * d as f64)
}

/// Mean squared error between two same-shape tensors.
pub(crate) fn mse_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff)?;
    tape.mean(sq)
}
