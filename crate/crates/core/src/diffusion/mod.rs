//! Denoising diffusion over per-visit feature vectors.
//!
//! Timesteps are 1-based throughout: `t = 1` is the least noisy step and
//! `t = T` the most. Internally `alpha[t - 1]` holds α_t.

mod denoiser;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cohort::{Label, Profile, Sex, Visit};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub use denoiser::{
    load_denoiser, save_denoiser, train_denoiser, train_denoiser_on, Denoiser, DenoiserConfig, DenoiserTrainConfig,
};

/// Linear β ramp parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub beta_sched: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Spec("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Spec(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            alpha,
            alpha_bar,
            beta_sched: betas,
        })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index {
                index: t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// β̃_t = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar_at(t - 1)) / (1.0 - self.alpha_bar_at(t)) * self.beta_sched[t - 1]
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::Spec("T must be at least 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Spec(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// z_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·ε
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check(t)?;
    if x0.len() != eps.len() {
        return Err(Error::dim(format!(
            "x0 has {} features, eps has {}",
            x0.len(),
            eps.len()
        )));
    }
    let ab = schedule.alpha_bar[t - 1];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// What a synthesized visit is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub label: Label,
    pub visit_index: u32,
}

impl Condition {
    pub fn new(label: Label, visit_index: u32) -> Self {
        Self { label, visit_index }
    }
}

pub fn standard_normal(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// (1/B)·Σ_b ‖ε_b − ε̂_b‖² with t_b ~ U{1..T} and ε_b ~ N(0, I).
///
/// `predict` receives the noised batch `[B, p]`, the sampled timesteps and
/// the conditions, and returns ε̂ with the same shape.
pub fn diffusion_loss<F>(
    g: &mut Graph,
    batch_x0: &[Vec<f64>],
    conditions: &[Condition],
    schedule: &NoiseSchedule,
    mut predict: F,
    rng: &mut Rng,
) -> Result<Var>
where
    F: FnMut(&mut Graph, Var, &[usize], &[Condition]) -> Result<Var>,
{
    let b = batch_x0.len();
    if b == 0 {
        return Err(Error::contract("diffusion loss on an empty batch"));
    }
    if conditions.len() != b {
        return Err(Error::dim(format!("{b} samples but {} conditions", conditions.len())));
    }
    let p = batch_x0[0].len();
    let mut ts = Vec::with_capacity(b);
    let mut eps = Vec::with_capacity(b * p);
    let mut z = Vec::with_capacity(b * p);
    for x0 in batch_x0 {
        if x0.len() != p {
            return Err(Error::dim(format!("ragged batch: {} vs {p} features", x0.len())));
        }
        let t = rng.random_range(1..=schedule.steps());
        let e = standard_normal(rng, p);
        z.extend(forward_noise(x0, t, &e, schedule)?);
        eps.extend(e);
        ts.push(t);
    }
    let z = g.constant(vec![b, p], z)?;
    let eps = g.constant(vec![b, p], eps)?;
    let pred = predict(g, z, &ts, conditions)?;
    if g.shape(pred) != [b, p] {
        return Err(Error::dim(format!(
            "denoiser returned {:?}, expected [{b}, {p}]",
            g.shape(pred)
        )));
    }
    let d = g.sub(eps, pred)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / b as f64))
}

/// Ancestral sampling for a batch of conditions.
///
/// Starts from z_T ~ N(0, I) and applies the posterior-mean step
/// z_{t−1} = (z_t − β_t/√(1 − ᾱ_t)·ε̂) / √α_t + √β̃_t·ξ, with ξ = 0 at t = 1.
/// `predict` maps a flat `[B, p]` batch to ε̂ of the same shape.
pub fn sample_with<F>(
    mut predict: F,
    n_features: usize,
    schedule: &NoiseSchedule,
    conditions: &[Condition],
    rng: &mut Rng,
) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&[f64], &[usize], &[Condition]) -> Result<Vec<f64>>,
{
    let b = conditions.len();
    let p = n_features;
    let mut z = standard_normal(rng, b * p);
    for t in (1..=schedule.steps()).rev() {
        let eps = predict(&z, &vec![t; b], conditions)?;
        if eps.len() != z.len() {
            return Err(Error::dim(format!(
                "predictor returned {} values for {} inputs",
                eps.len(),
                z.len()
            )));
        }
        let alpha = schedule.alpha[t - 1];
        let coef = schedule.beta_sched[t - 1] / (1.0 - schedule.alpha_bar[t - 1]).sqrt();
        let inv = 1.0 / alpha.sqrt();
        let sigma = if t > 1 {
            schedule.posterior_variance(t).sqrt()
        } else {
            0.0
        };
        for (zi, ei) in z.iter_mut().zip(&eps) {
            *zi = inv * (*zi - coef * ei);
        }
        if t > 1 {
            for zi in z.iter_mut() {
                *zi += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        if let Some(bad) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at step {t}, element {bad}")));
        }
    }
    Ok(z.chunks(p.max(1)).map(<[f64]>::to_vec).take(b).collect())
}

/// One synthetic profile whose visits follow `condition_seq`. Visit `k`
/// gets index `k` and a nominal yearly age offset.
pub fn sample_profile(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    condition_seq: &[Condition],
    rng: &mut Rng,
) -> Result<Profile> {
    let first = condition_seq
        .first()
        .ok_or_else(|| Error::contract("condition sequence is empty"))?;
    if condition_seq.iter().any(|c| c.label != first.label) {
        return Err(Error::contract("all visits of a profile must share one label"));
    }
    let rows = denoiser.sample(schedule, condition_seq, rng)?;
    Ok(Profile {
        subject_id: "synthetic".into(),
        label: first.label,
        sex: Sex::Unknown,
        visits: rows
            .into_iter()
            .enumerate()
            .map(|(k, features)| Visit {
                visit_index: k as u32 + 1,
                age_offset_months: 12.0 * k as f64,
                features,
            })
            .collect(),
    })
}
