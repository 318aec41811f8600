use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::{StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::{Cohort, Label, Profile, Provenance, Sex, Visit};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};

/// Default biomarker columns: medial-temporal and cortical volumes, white
/// matter hyperintensities, perivascular spaces and three generic volumetrics.
pub const DEFAULT_FEATURES: [&str; 12] = [
    "entorhinal_cortex",
    "parahippocampal_gyrus",
    "precuneus",
    "posterior_cingulate",
    "temporal_lobe",
    "wmh_frontal",
    "wmh_parietal",
    "pvs_basal_ganglia",
    "pvs_centrum_semiovale",
    "hippocampus",
    "lateral_ventricles",
    "total_gray_matter",
];

/// Healthy mean, healthy std, disease direction (+1 grows with disease),
/// disease sensitivity.
const FEATURE_PRIORS: [(f64, f64, f64, f64); 12] = [
    (3600.0, 550.0, -1.0, 1.0),
    (2700.0, 400.0, -1.0, 1.0),
    (10500.0, 1300.0, -1.0, 0.6),
    (3200.0, 450.0, -1.0, 0.6),
    (40000.0, 4500.0, -1.0, 0.6),
    (2.5, 1.5, 1.0, 0.4),
    (1.8, 1.2, 1.0, 0.4),
    (0.9, 0.3, 1.0, 0.4),
    (2.4, 0.8, 1.0, 0.4),
    (7200.0, 800.0, -1.0, 1.0),
    (30000.0, 12000.0, 1.0, 0.8),
    (620000.0, 55000.0, -1.0, 0.6),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub label: Label,
    pub male: usize,
    pub female: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Added once per visit after the first.
    pub drift: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitCountWeight {
    pub visits: usize,
    pub weight: f64,
}

/// Recipe for a synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub seed: u64,
    pub feature_names: Vec<String>,
    pub classes: Vec<ClassSpec>,
    pub visit_counts: Vec<VisitCountWeight>,
    /// Inter-feature correlation of subject baselines.
    pub correlation: Vec<Vec<f64>>,
    /// Per-visit measurement noise, as a fraction of each class std.
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    #[serde(default = "default_interval")]
    pub visit_interval_months: f64,
    #[serde(default = "default_jitter")]
    pub visit_jitter_months: f64,
}

fn default_noise() -> f64 {
    0.25
}
fn default_interval() -> f64 {
    12.0
}
fn default_jitter() -> f64 {
    3.0
}

impl CohortSpec {
    /// Diagnostic groups sized like the ADNI cohort (NO 97/158, MCI 36/60,
    /// AD 186/150 male/female). AD sits far from NO with steep progression;
    /// MCI differs from NO mostly through a modest per-visit drift.
    pub fn table1(seed: u64) -> Self {
        Self::with_severity(
            seed,
            &[
                (Label::NO, 97, 158, 0.0, 0.05),
                (Label::MCI, 36, 60, 0.5, 0.35),
                (Label::AD, 186, 150, 2.2, 0.5),
            ],
        )
    }

    /// `groups` holds (label, male, female, baseline shift, per-visit drift),
    /// both in units of healthy std scaled by each feature's sensitivity.
    pub fn with_severity(seed: u64, groups: &[(Label, usize, usize, f64, f64)]) -> Self {
        let classes = groups
            .iter()
            .map(|&(label, male, female, shift, drift)| ClassSpec {
                label,
                male,
                female,
                mean: FEATURE_PRIORS
                    .iter()
                    .map(|&(m, s, dir, w)| m + dir * w * shift * s)
                    .collect(),
                std: FEATURE_PRIORS.iter().map(|&(_, s, _, _)| s).collect(),
                drift: FEATURE_PRIORS
                    .iter()
                    .map(|&(_, s, dir, w)| dir * w * drift * s)
                    .collect(),
            })
            .collect();
        Self {
            seed,
            feature_names: DEFAULT_FEATURES.iter().map(|s| s.to_string()).collect(),
            classes,
            visit_counts: (2..=4).map(|visits| VisitCountWeight { visits, weight: 1.0 }).collect(),
            correlation: default_correlation(),
            noise_scale: default_noise(),
            visit_interval_months: default_interval(),
            visit_jitter_months: default_jitter(),
        }
    }

    pub fn total_subjects(&self) -> usize {
        self.classes.iter().map(|c| c.male + c.female).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.feature_names.len();
        if p == 0 {
            return Err(Error::Spec("no features".into()));
        }
        for c in &self.classes {
            if c.mean.len() != p || c.std.len() != p || c.drift.len() != p {
                return Err(Error::Spec(format!("class {} vectors must have length {p}", c.label)));
            }
            if c.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::Spec(format!("class {} has a non-positive std", c.label)));
            }
            if c.mean.iter().chain(&c.drift).any(|v| !v.is_finite()) {
                return Err(Error::Spec(format!("class {} has non-finite values", c.label)));
            }
        }
        if self.visit_counts.is_empty()
            || self.visit_counts.iter().any(|w| w.visits == 0 || !(w.weight >= 0.0))
            || self.visit_counts.iter().all(|w| w.weight == 0.0)
        {
            return Err(Error::Spec(
                "visit_counts needs positive visit numbers and a positive total weight".into(),
            ));
        }
        if !(self.noise_scale >= 0.0) || !(self.visit_jitter_months >= 0.0) {
            return Err(Error::Spec(
                "noise_scale and visit_jitter_months must be non-negative".into(),
            ));
        }
        let r = &self.correlation;
        if r.len() != p || r.iter().any(|row| row.len() != p) {
            return Err(Error::Spec(format!("correlation must be {p}×{p}")));
        }
        for i in 0..p {
            if (r[i][i] - 1.0).abs() > 1e-12 {
                return Err(Error::Spec("correlation diagonal must be 1".into()));
            }
            for j in 0..i {
                if (r[i][j] - r[j][i]).abs() > 1e-12 {
                    return Err(Error::Spec("correlation must be symmetric".into()));
                }
            }
        }
        Ok(())
    }

    /// Lower-triangular factor `F` with `F·Fᵀ = correlation`.
    fn correlation_factor(&self) -> Result<DMatrix<f64>> {
        let p = self.feature_names.len();
        let m = DMatrix::from_fn(p, p, |i, j| self.correlation[i][j]);
        if let Some(ch) = m.clone().cholesky() {
            return Ok(ch.l());
        }
        // singular but PSD: fall back to V·√Λ
        let eig = m.symmetric_eigen();
        let min = eig.eigenvalues.min();
        if min < -1e-9 {
            return Err(Error::Spec(format!(
                "correlation matrix is not positive semidefinite (eigenvalue {min:.3e})"
            )));
        }
        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
    }
}

/// Medial-temporal and cortical volumes correlate with each other, the two
/// WMH regions with each other, and likewise the two PVS regions.
fn default_correlation() -> Vec<Vec<f64>> {
    let blocks: [&[usize]; 4] = [&[0, 1, 2, 3, 4, 9, 11], &[5, 6], &[7, 8], &[10]];
    let rho = [0.3, 0.5, 0.4, 0.0];
    let mut r = vec![vec![0.0; 12]; 12];
    for (b, &members) in blocks.iter().enumerate() {
        for &i in members {
            for &j in members {
                r[i][j] = if i == j { 1.0 } else { rho[b] };
            }
        }
    }
    r
}

/// Draws subjects class by class (males then females). Each subject gets a
/// correlated Gaussian baseline; visit `t` adds `(t-1)·drift` plus
/// independent noise.
pub fn generate_synthetic_cohort(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let p = spec.feature_names.len();
    let factor = spec.correlation_factor()?;
    let mut rng: Rng = SeedStream::new(spec.seed).stream("cohort");
    let weights = WeightedIndex::new(spec.visit_counts.iter().map(|w| w.weight))
        .map_err(|e| Error::Spec(format!("visit_counts: {e}")))?;
    let jitter = Uniform::new_inclusive(-spec.visit_jitter_months, spec.visit_jitter_months)
        .map_err(|e| Error::Spec(format!("visit jitter: {e}")))?;
    let mut profiles = Vec::with_capacity(spec.total_subjects());
    for class in &spec.classes {
        for (sex, count) in [(Sex::M, class.male), (Sex::F, class.female)] {
            for k in 0..count {
                let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
                let corr = &factor * z;
                let baseline: Vec<f64> = (0..p).map(|f| class.mean[f] + class.std[f] * corr[f]).collect();
                let n = spec.visit_counts[weights.sample(&mut rng)].visits;
                let visits = (1..=n)
                    .map(|t| {
                        let step = (t - 1) as f64;
                        let features = (0..p)
                            .map(|f| {
                                let e: f64 = rng.sample(StandardNormal);
                                baseline[f] + step * class.drift[f] + spec.noise_scale * class.std[f] * e
                            })
                            .collect();
                        let age_offset_months = if t == 1 {
                            0.0
                        } else {
                            (spec.visit_interval_months * step + jitter.sample(&mut rng)).max(0.0)
                        };
                        Visit {
                            visit_index: t as u32,
                            age_offset_months,
                            features,
                        }
                    })
                    .collect();
                profiles.push(Profile {
                    subject_id: format!("{}-{}-{k:04}", class.label, sex.as_str()),
                    label: class.label,
                    sex,
                    visits,
                });
            }
        }
    }
    Cohort::new(profiles, spec.feature_names.clone(), Provenance::Synthetic)
}
