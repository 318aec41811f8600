use serde::{Deserialize, Serialize};

use super::SacNetwork;
use crate::error::{Error, Result};
use crate::sequence::Window;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectDecision {
    pub subject_id: String,
    pub window_probs: Vec<f64>,
    pub p_i: f64,
    pub predicted: u8,
    pub threshold: f64,
}

/// p_i = max over window probabilities.
pub fn subject_probability(window_probs: &[f64]) -> Result<f64> {
    if window_probs.is_empty() {
        return Err(Error::contract("subject has no windows"));
    }
    if let Some(p) = window_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::contract(format!("window probability {p} outside [0, 1]")));
    }
    Ok(window_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Positive iff `p_i >= threshold`.
pub fn classify_subject(p_i: f64, threshold: f64) -> u8 {
    u8::from(p_i >= threshold)
}

/// Groups windows by subject (first-appearance order) and max-pools their
/// probabilities.
pub fn decide_subjects(net: &SacNetwork, windows: &[Window], threshold: f64) -> Result<Vec<SubjectDecision>> {
    let probs = net.predict_windows(windows)?;
    decisions_from_probs(windows, &probs, threshold)
}

pub fn decisions_from_probs(windows: &[Window], probs: &[f64], threshold: f64) -> Result<Vec<SubjectDecision>> {
    if windows.len() != probs.len() {
        return Err(Error::dim(format!(
            "{} windows but {} probabilities",
            windows.len(),
            probs.len()
        )));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: std::collections::HashMap<&str, Vec<f64>> = std::collections::HashMap::new();
    for (w, &p) in windows.iter().zip(probs) {
        groups
            .entry(w.subject_id.as_str())
            .or_insert_with(|| {
                order.push(w.subject_id.as_str());
                Vec::new()
            })
            .push(p);
    }
    order
        .into_iter()
        .map(|id| {
            let window_probs = groups.remove(id).expect("grouped");
            let p_i = subject_probability(&window_probs)?;
            Ok(SubjectDecision {
                subject_id: id.to_string(),
                predicted: classify_subject(p_i, threshold),
                window_probs,
                p_i,
                threshold,
            })
        })
        .collect()
}
