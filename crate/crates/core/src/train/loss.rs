use crate::error::{Error, Result};
use crate::layers::{Tape, Tensor, Var};

/// Keeps `acos` away from ±1 where its derivative is unbounded.
pub const ACOS_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AAMConfig {
    /// Additive angular margin in radians.
    pub margin: f64,
    pub scale: f64,
}

impl Default for AAMConfig {
    fn default() -> Self {
        Self { margin: 0.2, scale: 30.0 }
    }
}

impl AAMConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!("margin {} outside [0, π/2)", self.margin)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("scale {} must be positive", self.scale)));
        }
        Ok(())
    }
}

/// Per-row margin-adjusted logits and the derivative of the target logit
/// with respect to its cosine.
fn target_logit(c: f64, cfg: &AAMConfig) -> (f64, f64) {
    let lo = -1.0 + ACOS_CLAMP;
    let hi = 1.0 - ACOS_CLAMP;
    let clamped = c.clamp(lo, hi);
    let theta = clamped.acos();
    let value = cfg.scale * (theta + cfg.margin).cos();
    let slope = if c < lo || c > hi {
        0.0
    } else {
        cfg.scale * (theta + cfg.margin).sin() / theta.sin()
    };
    (value, slope)
}

/// Additive angular margin softmax loss, averaged over the batch.
///
/// `cos_logits: [B, n]` are cosines between embeddings and class weights.
/// The target logit becomes `s·cos(θ + m)`, the rest `s·cos θ`.
pub fn aam_loss(tape: &mut Tape<'_>, cos_logits: Var, labels: &[usize], cfg: &AAMConfig) -> Result<Var> {
    cfg.validate()?;
    let (rows, n) = match *tape.shape(cos_logits) {
        [r, n] => (r, n),
        ref s => return Err(Error::Shape(format!("AAM loss expects [batch, classes], got {s:?}"))),
    };
    if labels.len() != rows {
        return Err(Error::Shape(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::Label { label: bad, classes: n });
    }
    let cos = tape.value(cos_logits);
    let mut total = 0.0;
    let mut grad = vec![0.0; rows * n];
    for (r, &y) in labels.iter().enumerate() {
        let row = &cos[r * n..(r + 1) * n];
        let (zy, slope) = target_logit(row[y], cfg);
        let z: Vec<f64> = (0..n).map(|j| if j == y { zy } else { cfg.scale * row[j] }).collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
        total += max + denom.ln() - zy;
        for j in 0..n {
            let p = (z[j] - max).exp() / denom;
            let dz = (p - if j == y { 1.0 } else { 0.0 }) / rows as f64;
            grad[r * n + j] = dz * if j == y { slope } else { cfg.scale };
        }
    }
    let loss = total / rows as f64;
    let value = Tensor::new([1], vec![loss])?;
    Ok(tape.custom(
        &[cos_logits],
        value,
        Box::new(move |g: &[f64]| vec![grad.iter().map(|d| d * g[0]).collect()]),
    ))
}
