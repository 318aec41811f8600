use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::pipeline::{normalized_visits, synthesize, task_cohort, train_pipeline, PipelineConfig, PipelineOutput};
use crate::cohort::{split_stratified, Cohort, Sex, Task};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::metrics::{
    confusion_metrics, fidelity_report, pr_curve, roc_auc, Confusion, FidelityReport, MetricSummary, PrPoint, RocPoint,
};
use crate::rng::SeedStream;
use crate::sacnet::{decisions_from_probs, SacNetwork, SubjectDecision};
use crate::sequence::{extract_all, Normalizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// `sex=M`, `visits=3`, ...
    pub group: String,
    pub n_subjects: usize,
    pub confusion: Confusion,
    pub metrics: MetricSummary,
    /// Absent when the group holds a single class.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub threshold: f64,
    pub n_subjects: usize,
    /// Test subjects with fewer visits than the window length.
    pub skipped_subjects: Vec<String>,
    pub confusion: Confusion,
    #[serde(flatten)]
    pub metrics: MetricSummary,
    pub auc: f64,
    pub roc_points: Vec<RocPoint>,
    pub pr_points: Vec<PrPoint>,
    pub groups: Vec<GroupMetrics>,
    pub decisions: Vec<SubjectDecision>,
}

fn group_metrics(name: String, decisions: &[&SubjectDecision], truth: &HashMap<String, u8>) -> Result<GroupMetrics> {
    let owned: Vec<SubjectDecision> = decisions.iter().map(|d| (*d).clone()).collect();
    let confusion = confusion_metrics(&owned, truth)?;
    let scores: Vec<f64> = owned.iter().map(|d| d.p_i).collect();
    let labels: Vec<u8> = owned.iter().map(|d| truth[&d.subject_id]).collect();
    Ok(GroupMetrics {
        group: name,
        n_subjects: owned.len(),
        metrics: confusion.summary(),
        confusion,
        auc: roc_auc(&scores, &labels).ok().map(|r| r.0),
    })
}

/// Subject-level evaluation of a trained classifier on a held-out cohort.
pub fn evaluate(
    net: &SacNetwork,
    window_normalizer: &Normalizer,
    test: &Cohort,
    task: Task,
    threshold: f64,
) -> Result<EvalReport> {
    let test = task_cohort(test, task)?;
    let l = net.config.n_time;
    let skipped_subjects: Vec<String> = test
        .profiles
        .iter()
        .filter(|p| p.n_visits() < l)
        .map(|p| p.subject_id.clone())
        .collect();
    if !skipped_subjects.is_empty() {
        log::warn!(
            "{} test subject(s) have fewer than {l} visits and are not scored",
            skipped_subjects.len()
        );
    }
    let windows = window_normalizer.apply(&extract_all(&test.profiles, l))?;
    if windows.is_empty() {
        return Err(Error::contract(format!("no test subject has {l} visits")));
    }
    let probs = net.predict_windows(&windows)?;
    let decisions = decisions_from_probs(&windows, &probs, threshold)?;
    let truth: HashMap<String, u8> = test
        .profiles
        .iter()
        .map(|p| (p.subject_id.clone(), task.target(p.label).expect("task cohort")))
        .collect();
    let confusion = confusion_metrics(&decisions, &truth)?;
    let scores: Vec<f64> = decisions.iter().map(|d| d.p_i).collect();
    let labels: Vec<u8> = decisions.iter().map(|d| truth[&d.subject_id]).collect();
    let (auc, roc_points) = roc_auc(&scores, &labels)?;
    let pr_points = pr_curve(&scores, &labels)?;

    let profile_of: HashMap<&str, &crate::cohort::Profile> =
        test.profiles.iter().map(|p| (p.subject_id.as_str(), p)).collect();
    let mut groups = Vec::new();
    for sex in [Sex::M, Sex::F, Sex::Unknown] {
        let members: Vec<&SubjectDecision> = decisions
            .iter()
            .filter(|d| profile_of[d.subject_id.as_str()].sex == sex)
            .collect();
        if !members.is_empty() {
            groups.push(group_metrics(format!("sex={}", sex.as_str()), &members, &truth)?);
        }
    }
    let mut counts: Vec<usize> = test.profiles.iter().map(|p| p.n_visits()).filter(|&n| n >= l).collect();
    counts.sort_unstable();
    counts.dedup();
    for n in counts {
        let members: Vec<&SubjectDecision> = decisions
            .iter()
            .filter(|d| profile_of[d.subject_id.as_str()].n_visits() == n)
            .collect();
        groups.push(group_metrics(format!("visits={n}"), &members, &truth)?);
    }

    Ok(EvalReport {
        task,
        threshold,
        n_subjects: decisions.len(),
        skipped_subjects,
        metrics: confusion.summary(),
        confusion,
        auc,
        roc_points,
        pr_points,
        groups,
        decisions,
    })
}

/// Keeps subjects with at least `n` visits, truncated to their first `n`.
pub fn filter_visits(cohort: &Cohort, n: usize) -> Cohort {
    let mut c = cohort.filtered(|p| p.n_visits() >= n);
    c.profiles = c.profiles.iter().map(|p| p.truncated(n)).collect();
    c
}

pub struct ExperimentResult {
    pub train: Cohort,
    pub test: Cohort,
    pub output: PipelineOutput,
    pub report: EvalReport,
}

/// Task filter, optional visit-count filter and the seeded stratified
/// subject split used by [`run_experiment`].
pub fn experiment_split(
    cohort: &Cohort,
    visits: Option<usize>,
    train_frac: f64,
    config: &PipelineConfig,
) -> Result<(Cohort, Cohort)> {
    let mut c = task_cohort(cohort, config.task)?;
    if let Some(n) = visits {
        if n == 0 {
            return Err(Error::contract("visit filter must be at least 1"));
        }
        c = task_cohort(&filter_visits(&c, n), config.task)?;
    }
    let split_seed = SeedStream::new(config.seed).fork("split", 0).seed();
    let (train, test) = split_stratified(&c, train_frac, split_seed)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::contract("split left an empty train or test set"));
    }
    Ok((train, test))
}

/// Split, train on the training subjects, evaluate on the held-out ones.
pub fn run_experiment(
    cohort: &Cohort,
    visits: Option<usize>,
    train_frac: f64,
    config: &PipelineConfig,
) -> Result<ExperimentResult> {
    let (train, test) = experiment_split(cohort, visits, train_frac, config)?;
    let output = train_pipeline(&train, config)?;
    let report = evaluate(
        &output.sacnet,
        &output.window_normalizer,
        &test,
        config.task,
        config.classifier.threshold,
    )?;
    Ok(ExperimentResult {
        train,
        test,
        output,
        report,
    })
}

/// Real training visits against `n_visits` freshly synthesized visits (same
/// label and visit-count mix), both z-scored with the visit normalizer.
pub fn synthesis_fidelity(
    train: &Cohort,
    denoiser: &Denoiser,
    visit_normalizer: &Normalizer,
    config: &PipelineConfig,
    n_visits: usize,
) -> Result<FidelityReport> {
    let train = task_cohort(train, config.task)?;
    let sample = synthesize(
        denoiser,
        &config.diffusion.schedule,
        visit_normalizer,
        &train,
        n_visits,
        1,
        SeedStream::new(config.seed).fork("fidelity", 0).seed(),
    )?;
    let real = normalized_visits(&train, visit_normalizer);
    let synth = normalized_visits(&sample, visit_normalizer);
    fidelity_report(&real, &synth)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seeds: Vec<u64>,
    pub accuracy: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
    pub precision: MeanStd,
    pub f1: MeanStd,
    pub auc: MeanStd,
}

/// Mean ± std of each metric across repeated runs.
pub fn summarize(seeds: &[u64], reports: &[EvalReport]) -> Result<SeedSummary> {
    if reports.is_empty() || seeds.len() != reports.len() {
        return Err(Error::contract("one report per seed is required"));
    }
    let col = |f: fn(&EvalReport) -> f64| MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>());
    Ok(SeedSummary {
        seeds: seeds.to_vec(),
        accuracy: col(|r| r.metrics.accuracy),
        sensitivity: col(|r| r.metrics.sensitivity),
        specificity: col(|r| r.metrics.specificity),
        precision: col(|r| r.metrics.precision),
        f1: col(|r| r.metrics.f1),
        auc: col(|r| r.auc),
    })
}
