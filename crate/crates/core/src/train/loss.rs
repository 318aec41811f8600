use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

/// Classification loss of one batch.
#[derive(Debug, Clone, Copy)]
pub struct ClsLoss {
    pub loss: Var,
    pub bce: f64,
    /// Σ_{y=1} p / Σ_{y=0} p, when it was applied.
    pub ratio: Option<f64>,
    /// λ > 0 but the batch had no negatives.
    pub regularizer_skipped: bool,
}

/// Mean BCE on probabilities clamped to `[ε, 1 − ε]`, plus
/// `λ·Σ_{y=1} p / Σ_{y=0} p`.
pub fn classification_loss(g: &mut Graph, probs: Var, labels: &[u8], lambda: f64) -> Result<ClsLoss> {
    let b = labels.len();
    if b == 0 {
        return Err(Error::contract("classification loss on an empty batch"));
    }
    if g.value(probs).len() != b {
        return Err(Error::dim(format!(
            "{} probabilities for {b} labels",
            g.value(probs).len()
        )));
    }
    if lambda < 0.0 {
        return Err(Error::contract("lambda must be non-negative"));
    }
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l != 0)).collect();
    let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let log_p = g.log(p);
    let q = g.affine(p, -1.0, 1.0);
    let log_q = g.log(q);
    let pos = g.dot_const(log_p, &y)?;
    let neg = g.dot_const(log_q, &not_y)?;
    let ll = g.add(pos, neg)?;
    let bce = g.scale(ll, -1.0 / b as f64);
    let bce_value = g.scalar(bce);
    let n_neg = not_y.iter().sum::<f64>();
    if lambda == 0.0 {
        return Ok(ClsLoss {
            loss: bce,
            bce: bce_value,
            ratio: None,
            regularizer_skipped: false,
        });
    }
    if n_neg == 0.0 {
        return Ok(ClsLoss {
            loss: bce,
            bce: bce_value,
            ratio: None,
            regularizer_skipped: true,
        });
    }
    let sp = g.dot_const(p, &y)?;
    let sn = g.dot_const(p, &not_y)?;
    let ratio = g.div(sp, sn)?;
    let ratio_value = g.scalar(ratio);
    let reg = g.scale(ratio, lambda);
    let loss = g.add(bce, reg)?;
    Ok(ClsLoss {
        loss,
        bce: bce_value,
        ratio: Some(ratio_value),
        regularizer_skipped: false,
    })
}

/// L = L_diff + β·L_cls
pub fn combined_loss(l_diff: f64, l_cls: f64, beta_mix: f64) -> f64 {
    l_diff + beta_mix * l_cls
}
