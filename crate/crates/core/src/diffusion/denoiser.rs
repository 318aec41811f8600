use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{diffusion_loss, sample_with, Condition, NoiseSchedule, ScheduleConfig};
use crate::autodiff::{AdamConfig, AdamState, Graph, Tensor, Var};
use crate::checkpoint;
use crate::cohort::{Cohort, Label};
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};

const KIND: &str = "denoiser";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub n_features: usize,
    pub hidden: Vec<usize>,
    /// Width of the sinusoidal timestep embedding (even).
    pub time_dim: usize,
    /// Visit indices above this share the last one-hot slot.
    pub max_visit: u32,
}

impl DenoiserConfig {
    pub fn new(n_features: usize) -> Self {
        Self {
            n_features,
            hidden: vec![128, 128],
            time_dim: 16,
            max_visit: 4,
        }
    }

    /// Width of the constant conditioning input: time embedding, label
    /// one-hot, visit one-hot.
    pub fn cond_dim(&self) -> usize {
        self.time_dim + Label::ALL.len() + self.max_visit as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Spec(format!("bad denoiser shape {self:?}")));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) || self.max_visit == 0 {
            return Err(Error::Spec(
                "time_dim must be even and positive, max_visit positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// MLP noise predictor ε̂ = D(z_t, t, condition).
///
/// First layer: `z·W_z + c·W_c + b`, where `c` is the constant
/// conditioning row. Hidden layers use SiLU; the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: Vec<Tensor>,
    pub seed: u64,
    pub loss_trace: Vec<f64>,
}

fn init_matrix(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data)
        .expect("shape matches")
        .requiring_grad()
}

impl Denoiser {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedStream::new(seed).stream("denoiser-init");
        let p = config.n_features;
        let h0 = config.hidden[0];
        let fan0 = p + config.cond_dim();
        let mut params = vec![
            init_matrix(&mut rng, p, h0, fan0),
            init_matrix(&mut rng, config.cond_dim(), h0, fan0),
            Tensor::zeros(&[h0]).requiring_grad(),
        ];
        for w in config.hidden.windows(2) {
            params.push(init_matrix(&mut rng, w[0], w[1], w[0]));
            params.push(Tensor::zeros(&[w[1]]).requiring_grad());
        }
        let last = *config.hidden.last().expect("validated");
        params.push(init_matrix(&mut rng, last, p, last));
        params.push(Tensor::zeros(&[p]).requiring_grad());
        Ok(Self {
            config,
            params,
            seed,
            loss_trace: Vec::new(),
        })
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names = vec!["in.w_z".to_string(), "in.w_c".into(), "in.b".into()];
        for i in 1..self.config.hidden.len() {
            names.push(format!("hidden{i}.w"));
            names.push(format!("hidden{i}.b"));
        }
        names.push("out.w".into());
        names.push("out.b".into());
        names
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Sinusoidal embedding of `t` followed by the label and visit one-hots.
    pub fn condition_row(&self, t: usize, c: &Condition) -> Result<Vec<f64>> {
        if c.visit_index == 0 {
            return Err(Error::contract("visit_index is 1-based"));
        }
        let half = self.config.time_dim / 2;
        let mut row = Vec::with_capacity(self.config.cond_dim());
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp() * t as f64)
            .collect();
        row.extend(freqs.iter().map(|a| a.sin()));
        row.extend(freqs.iter().map(|a| a.cos()));
        let mut label = [0.0; 4];
        label[c.label.index()] = 1.0;
        row.extend(label);
        let slot = c.visit_index.min(self.config.max_visit) as usize - 1;
        row.extend((0..self.config.max_visit as usize).map(|i| if i == slot { 1.0 } else { 0.0 }));
        Ok(row)
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p)).collect()
    }

    pub fn forward(&self, g: &mut Graph, vars: &[Var], z: Var, t: &[usize], cond: &[Condition]) -> Result<Var> {
        let b = t.len();
        let p = self.config.n_features;
        if g.shape(z) != [b, p] {
            return Err(Error::dim(format!(
                "denoiser input {:?}, expected [{b}, {p}]",
                g.shape(z)
            )));
        }
        if cond.len() != b {
            return Err(Error::dim(format!("{b} timesteps but {} conditions", cond.len())));
        }
        let mut c = Vec::with_capacity(b * self.config.cond_dim());
        for (t, cd) in t.iter().zip(cond) {
            c.extend(self.condition_row(*t, cd)?);
        }
        let c = g.constant(vec![b, self.config.cond_dim()], c)?;
        let hz = g.matmul(z, vars[0])?;
        let hc = g.matmul(c, vars[1])?;
        let h = g.add(hz, hc)?;
        let h = g.add_bias(h, vars[2])?;
        let mut h = g.silu(h);
        let n_hidden = self.config.hidden.len();
        for i in 1..n_hidden {
            let y = g.matmul(h, vars[1 + 2 * i])?;
            let y = g.add_bias(y, vars[2 + 2 * i])?;
            h = g.silu(y);
        }
        let out = g.matmul(h, vars[1 + 2 * n_hidden])?;
        g.add_bias(out, vars[2 + 2 * n_hidden])
    }

    /// ε̂ for a flat `[B, p]` batch, without recording gradients.
    pub fn predict(&self, z: &[f64], t: &[usize], cond: &[Condition]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.constant(p.shape().to_vec(), p.data().to_vec()))
            .collect::<Result<_>>()?;
        let zv = g.constant(vec![t.len(), self.config.n_features], z.to_vec())?;
        let out = self.forward(&mut g, &vars, zv, t, cond)?;
        Ok(g.value(out).to_vec())
    }

    /// Ancestral samples, one row per condition.
    pub fn sample(&self, schedule: &NoiseSchedule, conditions: &[Condition], rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        if !self.is_finite() {
            return Err(Error::Numeric("denoiser parameters contain NaN or infinity".into()));
        }
        sample_with(
            |z, t, c| self.predict(z, t, c),
            self.config.n_features,
            schedule,
            conditions,
            rng,
        )
    }
}

/// Cosine decay from `base` at step 0 towards 0 at `total`.
pub(crate) fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos())
}

/// Trains a fresh denoiser on feature rows paired with their conditions.
/// Records the mean batch loss of every epoch.
pub fn train_denoiser_on(
    rows: &[Vec<f64>],
    conditions: &[Condition],
    schedule: &NoiseSchedule,
    config: DenoiserConfig,
    train: &DenoiserTrainConfig,
) -> Result<Denoiser> {
    if rows.len() != conditions.len() {
        return Err(Error::dim(format!(
            "{} rows but {} conditions",
            rows.len(),
            conditions.len()
        )));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != config.n_features) {
        return Err(Error::dim(format!(
            "training row has {} features, denoiser expects {}",
            r.len(),
            config.n_features
        )));
    }
    if train.batch_size == 0 {
        return Err(Error::Spec("batch_size must be positive".into()));
    }
    let mut model = Denoiser::init(config, train.seed)?;
    if train.epochs == 0 {
        return Ok(model);
    }
    if rows.is_empty() {
        return Err(Error::contract("no training rows for the denoiser"));
    }
    let mut rng = SeedStream::new(train.seed).stream("denoiser-train");
    let mut adam = AdamState::new(AdamConfig::with_lr(train.lr), &model.params);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let total_steps = train.epochs * rows.len().div_ceil(train.batch_size);
    let mut step = 0usize;
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train.batch_size) {
            let xs: Vec<Vec<f64>> = chunk.iter().map(|&i| rows[i].clone()).collect();
            let cs: Vec<Condition> = chunk.iter().map(|&i| conditions[i]).collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g);
            let loss = diffusion_loss(
                &mut g,
                &xs,
                &cs,
                schedule,
                |g, z, t, c| model.forward(g, &vars, z, t, c),
                &mut rng,
            )?;
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("denoiser loss diverged at epoch {epoch}")));
            }
            g.backward(loss)?;
            for (p, v) in model.params.iter_mut().zip(&vars) {
                p.zero_grad();
                g.accumulate_grad(*v, p)?;
            }
            adam.config.lr = cosine_lr(train.lr, step, total_steps);
            let mut refs: Vec<&mut Tensor> = model.params.iter_mut().collect();
            adam.step(&mut refs)?;
            step += 1;
            total += value;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::debug!("denoiser epoch {epoch}: L_diff {mean:.5}");
        model.loss_trace.push(mean);
    }
    Ok(model)
}

/// Trains on every visit of a (normalized) cohort, conditioned on the
/// subject's label and the visit's position.
pub fn train_denoiser(
    cohort: &Cohort,
    schedule: &NoiseSchedule,
    config: DenoiserConfig,
    train: &DenoiserTrainConfig,
) -> Result<Denoiser> {
    if cohort.n_features() != config.n_features {
        return Err(Error::dim(format!(
            "cohort has {} features, denoiser expects {}",
            cohort.n_features(),
            config.n_features
        )));
    }
    let mut rows = Vec::new();
    let mut conds = Vec::new();
    for p in &cohort.profiles {
        for (k, v) in p.visits.iter().enumerate() {
            rows.push(v.features.clone());
            conds.push(Condition::new(p.label, k as u32 + 1));
        }
    }
    train_denoiser_on(&rows, &conds, schedule, config, train)
}

#[derive(Serialize, Deserialize)]
struct Hyper {
    denoiser: DenoiserConfig,
    schedule: ScheduleConfig,
}

pub fn save_denoiser(dir: &Path, denoiser: &Denoiser, schedule: &ScheduleConfig) -> Result<()> {
    let names = denoiser.layer_names();
    let layers: Vec<(String, &Tensor)> = names.into_iter().zip(&denoiser.params).collect();
    let hyper = serde_json::to_value(Hyper {
        denoiser: denoiser.config.clone(),
        schedule: *schedule,
    })?;
    checkpoint::save(dir, KIND, KIND, hyper, denoiser.seed, &denoiser.loss_trace, &layers)
}

pub fn load_denoiser(dir: &Path) -> Result<(Denoiser, ScheduleConfig)> {
    let (manifest, tensors) = checkpoint::load(dir, KIND, KIND)?;
    let hyper: Hyper = serde_json::from_value(manifest.hyperparameters)?;
    let mut model = Denoiser::init(hyper.denoiser, manifest.seed)?;
    if tensors.len() != model.params.len() || tensors.iter().zip(&model.params).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Compatibility(
            "denoiser layer shapes disagree with its hyperparameters".into(),
        ));
    }
    model.params = tensors.into_iter().map(Tensor::requiring_grad).collect();
    model.loss_trace = manifest.loss_trace;
    Ok((model, hyper.schedule))
}
