//! Subject-level classification metrics, ROC/PR curves and real-vs-synthetic
//! fidelity statistics.

mod fidelity;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sacnet::SubjectDecision;

pub use fidelity::{fidelity_report, wasserstein_1d, FeatureFidelity, FidelityReport, Moments, Pca, PcaPoint};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let mut c = Confusion::default();
        for (pred, truth) in pairs {
            match (pred != 0, truth != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    /// 0 when nothing is predicted positive; see [`Confusion::precision_degenerate`].
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn precision_degenerate(&self) -> bool {
        self.tp + self.fp == 0
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.sensitivity());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            accuracy: self.accuracy(),
            sensitivity: self.sensitivity(),
            specificity: self.specificity(),
            precision: self.precision(),
            precision_degenerate: self.precision_degenerate(),
            f1: self.f1(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    pub precision_degenerate: bool,
    pub f1: f64,
}

/// Confusion counts of subject decisions against ground truth keyed by
/// subject id.
pub fn confusion_metrics(decisions: &[SubjectDecision], truth: &HashMap<String, u8>) -> Result<Confusion> {
    let pairs = decisions
        .iter()
        .map(|d| {
            truth
                .get(&d.subject_id)
                .map(|&t| (d.predicted, t))
                .ok_or_else(|| Error::Alignment(d.subject_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Confusion::from_pairs(pairs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub recall: f64,
    pub precision: f64,
}

type Sweep = (Vec<(f64, usize, usize)>, usize, usize);

/// Cumulative (threshold, tp, fp) after admitting every score ≥ threshold,
/// one entry per distinct score, highest first, plus the class counts.
fn sweep(scores: &[f64], labels: &[u8]) -> Result<Sweep> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&y| y != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuc("labels contain a single class"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((s, tp, fp));
    }
    Ok((out, pos, neg))
}

/// ROC over all distinct thresholds, starting at (0, 0), and its trapezoid
/// area. Tied scores contribute half a concordant pair.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<(f64, Vec<RocPoint>)> {
    let (steps, pos, neg) = sweep(scores, labels)?;
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut auc = 0.0;
    let (mut ptp, mut pfp) = (0usize, 0usize);
    for (s, tp, fp) in steps {
        // Trapezoid in count units, normalized once at the end.
        auc += (fp - pfp) as f64 * (tp + ptp) as f64 / 2.0;
        points.push(RocPoint {
            threshold: s,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
        (ptp, pfp) = (tp, fp);
    }
    Ok((auc / (pos as f64 * neg as f64), points))
}

/// (recall, precision) at every distinct threshold of the ROC sweep.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<PrPoint>> {
    let (steps, pos, _) = sweep(scores, labels)?;
    Ok(steps
        .into_iter()
        .map(|(s, tp, fp)| PrPoint {
            threshold: s,
            recall: tp as f64 / pos as f64,
            precision: tp as f64 / (tp + fp) as f64,
        })
        .collect())
}
