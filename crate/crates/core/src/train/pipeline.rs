use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::loss::{classification_loss, combined_loss};
use crate::autodiff::{AdamConfig, AdamState, Graph};
use crate::cohort::{Cohort, Profile, Provenance, Task, Visit};
use crate::diffusion::{
    sample_with, train_denoiser, Condition, Denoiser, DenoiserConfig, DenoiserTrainConfig, ScheduleConfig,
};
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::sacnet::{Mode, SacConfig, SacNetwork};
use crate::sequence::{extract_all, fit_normalizer, Normalizer, Window};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the positive/negative probability-ratio term.
    pub lambda: f64,
    /// Weight of the classifier loss in the reported combined objective.
    pub beta_mix: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Synthetic windows per real training window.
    pub augmentation_ratio: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            beta_mix: 1.0,
            batch_size: 32,
            epochs: 20,
            lr: 1e-3,
            augmentation_ratio: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub schedule: ScheduleConfig,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub max_visit: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig {
                steps: 100,
                beta_start: 1e-4,
                beta_end: 0.1,
            },
            hidden: vec![128, 128],
            time_dim: 16,
            max_visit: 4,
            epochs: 150,
            batch_size: 128,
            lr: 2e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Window length L.
    pub window: usize,
    pub channels: Vec<usize>,
    pub d_a: usize,
    pub kernel: usize,
    /// Subject decision threshold F_thres.
    pub threshold: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            window: 2,
            channels: vec![8, 16, 32, 64],
            d_a: 16,
            kernel: 3,
            threshold: 0.5,
        }
    }
}

impl ClassifierConfig {
    pub fn sac_config(&self, n_features: usize) -> SacConfig {
        SacConfig {
            channels: self.channels.clone(),
            d_a: self.d_a,
            kernel: self.kernel,
            ..SacConfig::new(self.window, n_features)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub task: Task,
    pub seed: u64,
    pub diffusion: DiffusionConfig,
    pub classifier: ClassifierConfig,
    pub loss: LossConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            task: Task::NoVsAd,
            seed: 0,
            diffusion: DiffusionConfig::default(),
            classifier: ClassifierConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.loss;
        if !(l.lambda >= 0.0 && l.beta_mix >= 0.0 && l.augmentation_ratio >= 0.0) {
            return Err(Error::Spec(
                "lambda, beta_mix and augmentation_ratio must be non-negative".into(),
            ));
        }
        if l.batch_size == 0 || self.diffusion.batch_size == 0 {
            return Err(Error::Spec("batch sizes must be positive".into()));
        }
        if !(l.lr > 0.0 && self.diffusion.lr > 0.0) {
            return Err(Error::Spec("learning rates must be positive".into()));
        }
        if self.classifier.window == 0 {
            return Err(Error::Spec("window length must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.classifier.threshold) {
            return Err(Error::Spec("threshold must lie in [0, 1]".into()));
        }
        self.diffusion.schedule.build()?;
        Ok(())
    }

    fn seeds(&self) -> SeedStream {
        SeedStream::new(self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub bce: f64,
    pub cls_loss: f64,
    pub combined: f64,
    pub regularizer_skips: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub seed: u64,
    pub task: Task,
    pub n_train_subjects: usize,
    pub n_real_windows: usize,
    pub n_synthetic_windows: usize,
    pub denoiser_loss: Vec<f64>,
    pub classifier: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub denoiser: Denoiser,
    pub visit_normalizer: Normalizer,
    pub synthetic: Cohort,
    pub sacnet: SacNetwork,
    pub window_normalizer: Normalizer,
    pub log: TrainingLog,
}

/// Restricts to the task's two labels and checks both are present.
pub fn task_cohort(cohort: &Cohort, task: Task) -> Result<Cohort> {
    let c = cohort.for_task(task);
    if c.count(task.negative()) == 0 || c.count(task.positive()) == 0 {
        return Err(Error::contract(format!(
            "{task} needs both classes; have {} {} and {} {}",
            c.count(task.negative()),
            task.negative(),
            c.count(task.positive()),
            task.positive()
        )));
    }
    Ok(c)
}

fn visit_rows(cohort: &Cohort) -> impl Iterator<Item = &[f64]> {
    cohort
        .profiles
        .iter()
        .flat_map(|p| p.visits.iter().map(|v| v.features.as_slice()))
}

fn map_features(cohort: &Cohort, f: impl Fn(&[f64]) -> Vec<f64>) -> Cohort {
    Cohort {
        profiles: cohort
            .profiles
            .iter()
            .map(|p| Profile {
                visits: p
                    .visits
                    .iter()
                    .map(|v| Visit {
                        features: f(&v.features),
                        ..v.clone()
                    })
                    .collect(),
                ..p.clone()
            })
            .collect(),
        feature_names: cohort.feature_names.clone(),
        provenance: cohort.provenance,
    }
}

/// Stage 1: z-scores visits and fits the conditional denoiser on them.
pub fn stage_diffusion(train: &Cohort, config: &PipelineConfig) -> Result<(Denoiser, Normalizer)> {
    let norm = Normalizer::fit_rows(visit_rows(train))?;
    let normalized = map_features(train, |r| norm.apply_row(r));
    let d = &config.diffusion;
    let schedule = d.schedule.build()?;
    let dcfg = DenoiserConfig {
        n_features: train.n_features(),
        hidden: d.hidden.clone(),
        time_dim: d.time_dim,
        max_visit: d.max_visit,
    };
    let tcfg = DenoiserTrainConfig {
        epochs: d.epochs,
        batch_size: d.batch_size,
        lr: d.lr,
        seed: config.seeds().fork("denoiser", 0).seed(),
    };
    let model = train_denoiser(&normalized, &schedule, dcfg, &tcfg)?;
    log::info!(
        "denoiser trained on {} visits; final L_diff {:.4}",
        train.total_visits(),
        model.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok((model, norm))
}

/// Synthesizes profiles until they yield at least `target_windows` windows
/// of length `window`. Each profile copies the label and visit count of a
/// training profile drawn uniformly; features are returned in raw units.
pub fn synthesize(
    denoiser: &Denoiser,
    schedule: &ScheduleConfig,
    visit_normalizer: &Normalizer,
    templates: &Cohort,
    target_windows: usize,
    window: usize,
    seed: u64,
) -> Result<Cohort> {
    let seeds = SeedStream::new(seed);
    let mut pick = seeds.stream("synth-templates");
    let eligible: Vec<&Profile> = templates.profiles.iter().filter(|p| p.n_visits() >= window).collect();
    if target_windows > 0 && eligible.is_empty() {
        return Err(Error::contract(format!("no template profile has {window} visits")));
    }
    let mut plan: Vec<&Profile> = Vec::new();
    let mut windows = 0;
    while windows < target_windows {
        let t = *eligible.choose(&mut pick).expect("nonempty");
        windows += t.n_visits() - window + 1;
        plan.push(t);
    }
    let conds: Vec<Condition> = plan
        .iter()
        .flat_map(|t| (1..=t.n_visits() as u32).map(|v| Condition::new(t.label, v)))
        .collect();
    let sched = schedule.build()?;
    if !denoiser.is_finite() {
        return Err(Error::Numeric("denoiser parameters contain NaN or infinity".into()));
    }
    let mut rows = Vec::with_capacity(conds.len());
    let mut noise = seeds.stream("synth-noise");
    for chunk in conds.chunks(512) {
        let out = sample_with(
            |z, t, c| denoiser.predict(z, t, c),
            denoiser.config.n_features,
            &sched,
            chunk,
            &mut noise,
        )?;
        rows.extend(out);
    }
    let mut rows = rows.into_iter();
    let profiles = plan
        .iter()
        .enumerate()
        .map(|(i, t)| Profile {
            subject_id: format!("syn-{i:05}"),
            label: t.label,
            sex: t.sex,
            visits: (0..t.n_visits())
                .map(|k| Visit {
                    visit_index: k as u32 + 1,
                    age_offset_months: 12.0 * k as f64,
                    features: visit_normalizer.invert_row(&rows.next().expect("one row per condition")),
                })
                .collect(),
        })
        .collect();
    Cohort::new(profiles, templates.feature_names.clone(), Provenance::Synthetic)
}

pub struct ClassifierOutput {
    pub net: SacNetwork,
    pub normalizer: Normalizer,
    pub epochs: Vec<EpochLog>,
    pub n_real_windows: usize,
    pub n_synthetic_windows: usize,
}

/// Stage 2: fits the window normalizer on real training windows and trains
/// the classifier on real plus synthetic windows.
pub fn stage_classifier(
    real: &Cohort,
    synthetic: Option<&Cohort>,
    config: &PipelineConfig,
    l_diff: f64,
) -> Result<ClassifierOutput> {
    let task = config.task;
    let l = config.classifier.window;
    let real_windows = extract_all(&real.profiles, l);
    if real_windows.is_empty() {
        return Err(Error::contract(format!("no training subject has {l} visits")));
    }
    let normalizer = fit_normalizer(&real_windows)?;
    let synth_windows = synthetic.map_or_else(Vec::new, |s| extract_all(&s.profiles, l));
    let windows: Vec<Window> = normalizer
        .apply(&real_windows)?
        .into_iter()
        .chain(normalizer.apply(&synth_windows)?)
        .collect();
    let labels: Vec<u8> = windows
        .iter()
        .map(|w| {
            task.target(w.label)
                .ok_or_else(|| Error::contract(format!("label {} is not part of {task}", w.label)))
        })
        .collect::<Result<_>>()?;
    let seeds = config.seeds();
    let mut net = SacNetwork::init(
        config.classifier.sac_config(real.n_features()),
        seeds.fork("sacnet", 0).seed(),
    )?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.loss.lr), net.params());
    let mut rng = seeds.stream("classifier-batches");
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut epochs = Vec::with_capacity(config.loss.epochs);
    for epoch in 0..config.loss.epochs {
        order.shuffle(&mut rng);
        let (mut bce_sum, mut cls_sum, mut n, mut skips) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(config.loss.batch_size) {
            let batch: Vec<&Window> = chunk.iter().map(|&i| &windows[i]).collect();
            let y: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let vars = net.bind(&mut g);
            let x = net.input_for(&mut g, &batch)?;
            let fwd = net.forward(&mut g, &vars, x, Mode::Train)?;
            let cls = classification_loss(&mut g, fwd.probs, &y, config.loss.lambda)?;
            let value = g.scalar(cls.loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("classifier loss diverged at epoch {epoch}")));
            }
            if cls.regularizer_skipped {
                skips += 1;
            }
            g.backward(cls.loss)?;
            let mut params = net.params_mut();
            for (p, v) in params.iter_mut().zip(&vars.0) {
                p.zero_grad();
                g.accumulate_grad(*v, p)?;
            }
            adam.step(&mut params)?;
            net.update_running(&g, &fwd)?;
            let k = chunk.len() as f64;
            bce_sum += cls.bce * k;
            cls_sum += value * k;
            n += chunk.len();
        }
        let (bce, cls_loss) = (bce_sum / n as f64, cls_sum / n as f64);
        if skips > 0 {
            log::warn!("epoch {epoch}: ratio regularizer skipped in {skips} batch(es) without negatives");
        }
        let entry = EpochLog {
            epoch,
            bce,
            cls_loss,
            combined: combined_loss(l_diff, cls_loss, config.loss.beta_mix),
            regularizer_skips: skips,
        };
        log::info!(
            "classifier epoch {epoch}: BCE {:.4} L_cls {:.4} L {:.4}",
            entry.bce,
            entry.cls_loss,
            entry.combined
        );
        net.loss_trace.push(cls_loss);
        epochs.push(entry);
    }
    Ok(ClassifierOutput {
        net,
        normalizer,
        epochs,
        n_real_windows: real_windows.len(),
        n_synthetic_windows: synth_windows.len(),
    })
}

/// Both stages on a training cohort.
pub fn train_pipeline(train_cohort: &Cohort, config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    let train = task_cohort(train_cohort, config.task)?;
    let (denoiser, visit_normalizer) = stage_diffusion(&train, config)?;
    let l = config.classifier.window;
    let n_real = extract_all(&train.profiles, l).len();
    let target = (config.loss.augmentation_ratio * n_real as f64).round() as usize;
    let synthetic = synthesize(
        &denoiser,
        &config.diffusion.schedule,
        &visit_normalizer,
        &train,
        target,
        l,
        config.seeds().fork("synthesis", 0).seed(),
    )?;
    let l_diff = denoiser.loss_trace.last().copied().unwrap_or(0.0);
    let cls = stage_classifier(&train, (target > 0).then_some(&synthetic), config, l_diff)?;
    let log = TrainingLog {
        seed: config.seed,
        task: config.task,
        n_train_subjects: train.len(),
        n_real_windows: cls.n_real_windows,
        n_synthetic_windows: cls.n_synthetic_windows,
        denoiser_loss: denoiser.loss_trace.clone(),
        classifier: cls.epochs,
    };
    Ok(PipelineOutput {
        denoiser,
        visit_normalizer,
        synthetic,
        sacnet: cls.net,
        window_normalizer: cls.normalizer,
        log,
    })
}

/// Visit rows of a cohort in z-scored units.
pub fn normalized_visits(cohort: &Cohort, norm: &Normalizer) -> Vec<Vec<f64>> {
    visit_rows(cohort).map(|r| norm.apply_row(r)).collect()
}
