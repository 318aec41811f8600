//! Sliding-window subsequences over profiles and per-feature z-scoring.

use serde::{Deserialize, Serialize};

use crate::cohort::{Label, Profile};
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// `L` consecutive visits of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub subject_id: String,
    pub label: Label,
    /// `L` rows of `p` features.
    pub features: Vec<Vec<f64>>,
    /// 1-based position of the first visit within the profile.
    pub window_start: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn id(&self) -> String {
        format!("{}#{}", self.subject_id, self.window_start)
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.features.iter().flatten().copied()
    }
}

/// Stride-1 windows of `len` visits: `n_i - len + 1` of them, in visit order.
pub fn extract_subsequences(profile: &Profile, len: usize) -> Result<Vec<Window>> {
    if len == 0 {
        return Err(Error::contract("window length must be at least 1"));
    }
    let n = profile.n_visits();
    if n < len {
        return Err(Error::InsufficientVisits {
            subject_id: profile.subject_id.clone(),
            visits: n,
            window: len,
        });
    }
    Ok(profile
        .visits
        .windows(len)
        .enumerate()
        .map(|(i, vs)| Window {
            subject_id: profile.subject_id.clone(),
            label: profile.label,
            features: vs.iter().map(|v| v.features.clone()).collect(),
            window_start: i + 1,
        })
        .collect())
}

/// Windows of every profile that has at least `len` visits.
pub fn extract_all<'a>(profiles: impl IntoIterator<Item = &'a Profile>, len: usize) -> Vec<Window> {
    profiles
        .into_iter()
        .filter(|p| p.n_visits() >= len)
        .flat_map(|p| extract_subsequences(p, len).expect("length checked"))
        .collect()
}

/// Per-feature mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits on arbitrary feature rows. Population std, floored at
    /// [`STD_FLOOR`].
    pub fn fit_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut all: Vec<&[f64]> = Vec::new();
        for r in rows {
            if sum.is_empty() {
                sum = vec![0.0; r.len()];
            } else if r.len() != sum.len() {
                return Err(Error::dim(format!(
                    "row of {} features, expected {}",
                    r.len(),
                    sum.len()
                )));
            }
            sum.iter_mut().zip(r).for_each(|(s, v)| *s += v);
            all.push(r);
            n += 1;
        }
        if n == 0 {
            return Err(Error::contract("cannot fit a normalizer on no data"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; mean.len()];
        for r in &all {
            for ((v, x), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .enumerate()
            .map(|(f, v)| {
                let s = (v / n as f64).sqrt();
                if s < STD_FLOOR {
                    log::warn!("feature {f} is constant over the fitting data; std floored at {STD_FLOOR}");
                    STD_FLOOR
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn invert_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }

    pub fn apply(&self, windows: &[Window]) -> Result<Vec<Window>> {
        windows
            .iter()
            .map(|w| {
                if let Some(r) = w.features.iter().find(|r| r.len() != self.n_features()) {
                    return Err(Error::dim(format!(
                        "window {} has {} features, normalizer has {}",
                        w.id(),
                        r.len(),
                        self.n_features()
                    )));
                }
                Ok(Window {
                    features: w.features.iter().map(|r| self.apply_row(r)).collect(),
                    ..w.clone()
                })
            })
            .collect()
    }
}

/// z-score statistics over every visit row of every training window.
pub fn fit_normalizer(training_windows: &[Window]) -> Result<Normalizer> {
    Normalizer::fit_rows(
        training_windows
            .iter()
            .flat_map(|w| w.features.iter().map(Vec::as_slice)),
    )
}

pub fn apply_normalizer(normalizer: &Normalizer, windows: &[Window]) -> Result<Vec<Window>> {
    normalizer.apply(windows)
}
