//! Longitudinal subjects: data model, file formats, synthetic generation and
//! subject-level splitting.

mod io;
mod split;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_cohort, write_cohort, CohortFormat};
pub use split::split_stratified;
pub use synth::{generate_synthetic_cohort, ClassSpec, CohortSpec, VisitCountWeight, DEFAULT_FEATURES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    NO,
    SCD,
    MCI,
    AD,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::NO, Label::SCD, Label::MCI, Label::AD];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::NO => "NO",
            Label::SCD => "SCD",
            Label::MCI => "MCI",
            Label::AD => "AD",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "NO" | "CN" => Ok(Label::NO),
            "SCD" => Ok(Label::SCD),
            "MCI" => Ok(Label::MCI),
            "AD" => Ok(Label::AD),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
    #[serde(rename = "unknown")]
    Unknown,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::M => "M",
            Sex::F => "F",
            Sex::Unknown => "unknown",
        }
    }
}

impl FromStr for Sex {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "M" | "m" | "male" => Ok(Sex::M),
            "F" | "f" | "female" => Ok(Sex::F),
            "" | "unknown" | "U" | "NA" => Ok(Sex::Unknown),
            other => Err(format!("unknown sex {other:?}")),
        }
    }
}

/// Binary classification task over two diagnostic groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "no-vs-mci")]
    NoVsMci,
    #[serde(rename = "no-vs-ad")]
    NoVsAd,
}

impl Task {
    pub fn negative(self) -> Label {
        Label::NO
    }

    pub fn positive(self) -> Label {
        match self {
            Task::NoVsMci => Label::MCI,
            Task::NoVsAd => Label::AD,
        }
    }

    /// 1 for the impaired class, 0 for NO, `None` for labels outside the task.
    pub fn target(self, label: Label) -> Option<u8> {
        if label == self.positive() {
            Some(1)
        } else if label == self.negative() {
            Some(0)
        } else {
            None
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "no-vs-mci" => Ok(Task::NoVsMci),
            "no-vs-ad" => Ok(Task::NoVsAd),
            other => Err(format!("unknown task {other:?} (expected no-vs-mci or no-vs-ad)")),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::NoVsMci => "no-vs-mci",
            Task::NoVsAd => "no-vs-ad",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub visit_index: u32,
    pub age_offset_months: f64,
    pub features: Vec<f64>,
}

/// One subject's ordered visit sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub subject_id: String,
    pub label: Label,
    pub sex: Sex,
    pub visits: Vec<Visit>,
}

impl Profile {
    pub fn n_visits(&self) -> usize {
        self.visits.len()
    }

    pub fn n_features(&self) -> usize {
        self.visits.first().map_or(0, |v| v.features.len())
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.visits.is_empty() {
            return Err(Error::contract(format!("subject {} has no visits", self.subject_id)));
        }
        if self.visits.windows(2).any(|w| w[0].visit_index >= w[1].visit_index) {
            return Err(Error::contract(format!(
                "subject {} visit indices are not strictly increasing",
                self.subject_id
            )));
        }
        if let Some(v) = self.visits.iter().find(|v| v.features.len() != p) {
            return Err(Error::dim(format!(
                "subject {} visit {} has {} features, expected {p}",
                self.subject_id,
                v.visit_index,
                v.features.len()
            )));
        }
        Ok(())
    }

    /// The first `n` visits.
    pub fn truncated(&self, n: usize) -> Profile {
        Profile {
            visits: self.visits.iter().take(n).cloned().collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Ingested,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub profiles: Vec<Profile>,
    pub feature_names: Vec<String>,
    pub provenance: Provenance,
}

impl Cohort {
    pub fn new(profiles: Vec<Profile>, feature_names: Vec<String>, provenance: Provenance) -> Result<Self> {
        let p = feature_names.len();
        let mut seen = HashSet::new();
        for prof in &profiles {
            prof.validate(p)?;
            if !seen.insert(prof.subject_id.as_str()) {
                return Err(Error::contract(format!("duplicate subject id {}", prof.subject_id)));
            }
        }
        Ok(Self {
            profiles,
            feature_names,
            provenance,
        })
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.profiles.iter().filter(|p| p.label == label).count()
    }

    pub fn filtered(&self, keep: impl Fn(&Profile) -> bool) -> Cohort {
        Cohort {
            profiles: self.profiles.iter().filter(|p| keep(p)).cloned().collect(),
            feature_names: self.feature_names.clone(),
            provenance: self.provenance,
        }
    }

    /// Subjects belonging to either class of `task`.
    pub fn for_task(&self, task: Task) -> Cohort {
        self.filtered(|p| task.target(p.label).is_some())
    }

    pub fn total_visits(&self) -> usize {
        self.profiles.iter().map(Profile::n_visits).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn visit(i: u32, f: Vec<f64>) -> Visit {
        Visit {
            visit_index: i,
            age_offset_months: 12.0 * f64::from(i - 1),
            features: f,
        }
    }

    #[test]
    fn profile_invariants() {
        let mut p = Profile {
            subject_id: "s".into(),
            label: Label::AD,
            sex: Sex::F,
            visits: vec![visit(1, vec![0.0; 2]), visit(2, vec![0.0; 2])],
        };
        assert!(p.validate(2).is_ok());
        assert!(p.validate(3).is_err());
        p.visits[1].visit_index = 1;
        assert!(p.validate(2).is_err());
        p.visits.clear();
        assert!(p.validate(2).is_err());
    }

    #[test]
    fn cohort_rejects_duplicate_ids() {
        let p = Profile {
            subject_id: "s".into(),
            label: Label::NO,
            sex: Sex::M,
            visits: vec![visit(1, vec![1.0])],
        };
        let err = Cohort::new(vec![p.clone(), p], vec!["a".into()], Provenance::Ingested);
        assert!(err.is_err());
    }

    #[test]
    fn task_targets() {
        assert_eq!(Task::NoVsAd.target(Label::AD), Some(1));
        assert_eq!(Task::NoVsAd.target(Label::NO), Some(0));
        assert_eq!(Task::NoVsAd.target(Label::MCI), None);
        assert_eq!("no-vs-mci".parse::<Task>().unwrap(), Task::NoVsMci);
        assert_eq!(Task::NoVsMci.to_string(), "no-vs-mci");
    }
}
