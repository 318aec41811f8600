//! Attention-convolution window classifier and subject-level aggregation.
//!
//! Tensor layout: a batch of windows enters as `[B, 1, L, p]`. Unit `j`
//! takes `[B, C, L, F]`, applies attention independently to each of the
//! `B·C` slices `[L, F]` (time as sequence axis, features as embedding) with
//! projections shared across channels, giving `[B, C, L, d_a]`. A same-padded
//! conv maps `C → C_j` over the `(L, d_a)` plane, then ReLU and batch norm.
//! The head flattens `[B, C_m, L, d_a]` row-major.

mod aggregate;

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NormStats, RunningStats, Tensor, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::rng::{Rng, SeedStream};
use crate::sequence::Window;

pub use aggregate::{classify_subject, decide_subjects, decisions_from_probs, subject_probability, SubjectDecision};

const KIND: &str = "sacnet";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacConfig {
    /// Window length L.
    pub n_time: usize,
    pub n_features: usize,
    /// Output channels of each unit; its length is m.
    pub channels: Vec<usize>,
    pub d_a: usize,
    pub kernel: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl SacConfig {
    pub fn new(n_time: usize, n_features: usize) -> Self {
        Self {
            n_time,
            n_features,
            channels: vec![8, 16, 32, 64],
            d_a: 16,
            kernel: 3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn units(&self) -> usize {
        self.channels.len()
    }

    pub fn flat_len(&self) -> usize {
        self.channels.last().copied().unwrap_or(1) * self.n_time * self.d_a
    }

    fn validate(&self) -> Result<()> {
        if self.n_time == 0 || self.n_features == 0 || self.d_a == 0 || self.kernel == 0 {
            return Err(Error::Spec(format!("SAC dimensions must be positive: {self:?}")));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Spec(
                "SAC network needs at least one unit with positive width".into(),
            ));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Spec("bn_eps must be positive and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacUnit {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `[C_out, C_in, k, k]`
    pub kernel: Tensor,
    pub bias: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RunningStats,
}

impl SacUnit {
    fn params(&self) -> [&Tensor; 7] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.kernel,
            &self.bias,
            &self.gamma,
            &self.beta,
        ]
    }

    fn params_mut(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.kernel,
            &mut self.bias,
            &mut self.gamma,
            &mut self.beta,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacNetwork {
    pub config: SacConfig,
    pub units: Vec<SacUnit>,
    /// `[flat_len, 1]`
    pub head_w: Tensor,
    /// `[1]`
    pub head_b: Tensor,
    pub seed: u64,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running estimates are refreshed by
    /// [`SacNetwork::update_running`].
    Train,
    /// Running statistics, no state change.
    Infer,
}

/// Parameter handles of one network on one tape, in [`SacNetwork::params`]
/// order.
#[derive(Debug, Clone)]
pub struct NetVars(pub Vec<Var>);

/// Nodes recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[B, 1]` window probabilities.
    pub probs: Var,
    pub logits: Var,
    /// Output of each unit, `[B, C_j, L, d_a]`.
    pub unit_outputs: Vec<Var>,
    pub attention: Vec<Var>,
}

fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches")
        .requiring_grad()
}

fn tag(unit: usize, e: Error) -> Error {
    match e {
        Error::Dimension(m) => Error::Dimension(format!("SAC unit {unit}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("SAC unit {unit}: {m}")),
        other => other,
    }
}

/// Single-head scaled dot-product attention over the middle axis of
/// `h: [N, L, F]` (or `[L, F]`). Returns `(A, A·V)`.
pub fn attention_forward(g: &mut Graph, h: Var, w_q: Var, w_k: Var, w_v: Var) -> Result<(Var, Var)> {
    let shape = g.shape(h).to_vec();
    let (n, l, f) = match *shape.as_slice() {
        [l, f] => (1, l, f),
        [n, l, f] => (n, l, f),
        _ => {
            return Err(Error::dim(format!(
                "attention input must be [L, F] or [N, L, F], got {shape:?}"
            )))
        }
    };
    let wshape = g.shape(w_q).to_vec();
    if wshape.len() != 2 || wshape[0] != f || g.shape(w_k) != wshape.as_slice() || g.shape(w_v) != wshape.as_slice() {
        return Err(Error::dim(format!(
            "attention projections {:?}/{:?}/{:?} do not fit input width {f}",
            wshape,
            g.shape(w_k),
            g.shape(w_v)
        )));
    }
    let d_a = wshape[1];
    let rows = g.reshape(h, vec![n * l, f])?;
    let mut project = |w| -> Result<Var> {
        let y = g.matmul(rows, w)?;
        g.reshape(y, vec![n, l, d_a])
    };
    let q = project(w_q)?;
    let k = project(w_k)?;
    let v = project(w_v)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / (d_a as f64).sqrt());
    let a = g.softmax_rows(scores)?;
    let out = g.bmm(a, v, false)?;
    if shape.len() == 2 {
        let a2 = g.reshape(a, vec![l, l])?;
        let o2 = g.reshape(out, vec![l, d_a])?;
        return Ok((a2, o2));
    }
    Ok((a, out))
}

impl SacNetwork {
    pub fn init(config: SacConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeedStream::new(seed).stream("sacnet-init");
        let mut units = Vec::with_capacity(config.units());
        let (mut c_in, mut f_in) = (1usize, config.n_features);
        for &c_out in &config.channels {
            let proj = 1.0 / (f_in as f64).sqrt();
            let k = config.kernel;
            units.push(SacUnit {
                w_q: normal_tensor(&mut rng, &[f_in, config.d_a], proj),
                w_k: normal_tensor(&mut rng, &[f_in, config.d_a], proj),
                w_v: normal_tensor(&mut rng, &[f_in, config.d_a], proj),
                kernel: normal_tensor(&mut rng, &[c_out, c_in, k, k], (2.0 / (c_in * k * k) as f64).sqrt()),
                bias: Tensor::zeros(&[c_out]).requiring_grad(),
                gamma: Tensor::filled(&[c_out], 1.0).requiring_grad(),
                beta: Tensor::zeros(&[c_out]).requiring_grad(),
                running: RunningStats::new(c_out),
            });
            c_in = c_out;
            f_in = config.d_a;
        }
        let flat = config.flat_len();
        Ok(Self {
            head_w: normal_tensor(&mut rng, &[flat, 1], (1.0 / flat as f64).sqrt()),
            head_b: Tensor::zeros(&[1]).requiring_grad(),
            config,
            units,
            seed,
            loss_trace: Vec::new(),
        })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.units.iter().flat_map(SacUnit::params).collect();
        v.push(&self.head_w);
        v.push(&self.head_b);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.units.iter_mut().flat_map(SacUnit::params_mut).collect();
        v.push(&mut self.head_w);
        v.push(&mut self.head_b);
        v
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for j in 0..self.units.len() {
            for p in ["w_q", "w_k", "w_v", "kernel", "bias", "gamma", "beta"] {
                names.push(format!("unit{}.{p}", j + 1));
            }
        }
        names.push("head.w".into());
        names.push("head.b".into());
        names
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
            && self
                .units
                .iter()
                .all(|u| u.running.mean.iter().chain(&u.running.var).all(|v| v.is_finite()))
    }

    pub fn bind(&self, g: &mut Graph) -> NetVars {
        NetVars(self.params().into_iter().map(|p| g.leaf(p)).collect())
    }

    /// Binds parameters as constants, for inference.
    pub fn bind_frozen(&self, g: &mut Graph) -> NetVars {
        NetVars(
            self.params()
                .into_iter()
                .map(|p| {
                    g.constant(p.shape().to_vec(), p.data().to_vec())
                        .expect("shape matches")
                })
                .collect(),
        )
    }

    /// Runs unit `j` (0-based) on `x: [B, C, L, F]`.
    pub fn unit_forward(&self, g: &mut Graph, vars: &NetVars, j: usize, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let unit = &self.units[j];
        let v = &vars.0[7 * j..7 * j + 7];
        let shape = g.shape(x).to_vec();
        let [b, c, l, f] = *shape.as_slice() else {
            return Err(tag(j + 1, Error::dim(format!("unit input must be 4-D, got {shape:?}"))));
        };
        let d_a = self.config.d_a;
        let run = |g: &mut Graph| -> Result<(Var, Var)> {
            let slices = g.reshape(x, vec![b * c, l, f])?;
            let (a, h) = attention_forward(g, slices, v[0], v[1], v[2])?;
            let h = g.reshape(h, vec![b, c, l, d_a])?;
            let h = g.conv2d(h, v[3], v[4])?;
            let h = g.relu(h);
            let stats = match mode {
                Mode::Train => NormStats::Batch,
                Mode::Infer => NormStats::Fixed {
                    mean: &unit.running.mean,
                    var: &unit.running.var,
                },
            };
            let out = g.batch_norm_with(h, v[5], v[6], self.config.bn_eps, stats)?;
            Ok((a, out))
        };
        let (a, out) = run(g).map_err(|e| tag(j + 1, e))?;
        if g.value(out).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("SAC unit {}: non-finite activation", j + 1)));
        }
        Ok((a, out))
    }

    /// Full chain for `x: [B, 1, L, p]`.
    pub fn forward(&self, g: &mut Graph, vars: &NetVars, x: Var, mode: Mode) -> Result<Forward> {
        let shape = g.shape(x).to_vec();
        let want = [
            shape.first().copied().unwrap_or(0),
            1,
            self.config.n_time,
            self.config.n_features,
        ];
        if shape != want {
            return Err(Error::dim(format!("network input {shape:?}, expected {want:?}")));
        }
        let b = shape[0];
        let mut h = x;
        let mut unit_outputs = Vec::with_capacity(self.units.len());
        let mut attention = Vec::with_capacity(self.units.len());
        for j in 0..self.units.len() {
            let (a, out) = self.unit_forward(g, vars, j, h, mode)?;
            attention.push(a);
            unit_outputs.push(out);
            h = out;
        }
        let n = vars.0.len();
        let flat = g.reshape(h, vec![b, self.config.flat_len()])?;
        let logits = g.matmul(flat, vars.0[n - 2])?;
        let logits = g.add_bias(logits, vars.0[n - 1])?;
        if g.value(logits).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("head: non-finite logit".into()));
        }
        let probs = g.sigmoid(logits);
        Ok(Forward {
            probs,
            logits,
            unit_outputs,
            attention,
        })
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates.
    pub fn update_running(&mut self, g: &Graph, fwd: &Forward) -> Result<()> {
        let momentum = self.config.bn_momentum;
        for (unit, &out) in self.units.iter_mut().zip(&fwd.unit_outputs) {
            let (m, v) = g
                .batch_stats(out)
                .ok_or_else(|| Error::contract("update_running needs a train-mode forward pass"))?;
            let shape = g.shape(out);
            let n = shape[0] * shape[2..].iter().product::<usize>();
            unit.running.update(m, v, n, momentum);
        }
        Ok(())
    }

    fn input(&self, g: &mut Graph, windows: &[&[Vec<f64>]]) -> Result<Var> {
        let (l, p) = (self.config.n_time, self.config.n_features);
        let mut data = Vec::with_capacity(windows.len() * l * p);
        for w in windows {
            if w.len() != l || w.iter().any(|r| r.len() != p) {
                return Err(Error::dim(format!(
                    "window of {} rows × {} features, network expects {l} × {p}",
                    w.len(),
                    w.first().map_or(0, Vec::len)
                )));
            }
            data.extend(w.iter().flatten());
        }
        g.constant(vec![windows.len(), 1, l, p], data)
    }

    /// Builds the `[B, 1, L, p]` input node for a batch of windows.
    pub fn input_for(&self, g: &mut Graph, windows: &[&Window]) -> Result<Var> {
        let rows: Vec<&[Vec<f64>]> = windows.iter().map(|w| w.features.as_slice()).collect();
        self.input(g, &rows)
    }

    /// p_e for one normalized window, in infer mode.
    pub fn window_probability(&self, window: &[Vec<f64>]) -> Result<f64> {
        Ok(self.window_probabilities_raw(&[window])?[0])
    }

    fn window_probabilities_raw(&self, windows: &[&[Vec<f64>]]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let x = self.input(&mut g, windows)?;
        let fwd = self.forward(&mut g, &vars, x, Mode::Infer)?;
        Ok(g.value(fwd.probs).to_vec())
    }

    /// Infer-mode probabilities for many windows, evaluated in chunks.
    pub fn predict_windows(&self, windows: &[Window]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(256) {
            let rows: Vec<&[Vec<f64>]> = chunk.iter().map(|w| w.features.as_slice()).collect();
            out.extend(self.window_probabilities_raw(&rows)?);
        }
        Ok(out)
    }

    /// Mean |activation| over channels for each `(time, feature)` cell of
    /// every unit's output, one row per cell.
    pub fn embedding_maps(&self, windows: &[Window]) -> Result<Vec<EmbeddingCell>> {
        let mut rows = Vec::new();
        for chunk in windows.chunks(256) {
            let mut g = Graph::new();
            let vars = self.bind_frozen(&mut g);
            let refs: Vec<&Window> = chunk.iter().collect();
            let x = self.input_for(&mut g, &refs)?;
            let fwd = self.forward(&mut g, &vars, x, Mode::Infer)?;
            for (j, &out) in fwd.unit_outputs.iter().enumerate() {
                let [_, c, l, f] = *g.shape(out) else {
                    unreachable!("unit output is 4-D")
                };
                let v = g.value(out);
                for (bi, w) in chunk.iter().enumerate() {
                    for t in 0..l {
                        for k in 0..f {
                            let s: f64 = (0..c).map(|ch| v[((bi * c + ch) * l + t) * f + k].abs()).sum();
                            rows.push(EmbeddingCell {
                                unit: j + 1,
                                window_id: w.id(),
                                time_idx: t,
                                feature_idx: k,
                                activation: s / c as f64,
                            });
                        }
                    }
                }
            }
        }
        rows.sort_by_key(|r| r.unit);
        Ok(rows)
    }

    fn layers(&self) -> (Vec<String>, Vec<Tensor>) {
        let mut names = self.param_names();
        let mut tensors: Vec<Tensor> = self.params().into_iter().cloned().collect();
        for (j, u) in self.units.iter().enumerate() {
            let c = u.running.mean.len();
            names.push(format!("unit{}.running_mean", j + 1));
            tensors.push(Tensor::new(vec![c], u.running.mean.clone()).expect("length c"));
            names.push(format!("unit{}.running_var", j + 1));
            tensors.push(Tensor::new(vec![c], u.running.var.clone()).expect("length c"));
        }
        (names, tensors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingCell {
    pub unit: usize,
    pub window_id: String,
    pub time_idx: usize,
    pub feature_idx: usize,
    pub activation: f64,
}

pub fn write_embedding_csv(path: &Path, cells: &[EmbeddingCell]) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for c in cells {
            w.serialize(c)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    if cells.is_empty() {
        writeln!(buf, "unit,window_id,time_idx,feature_idx,activation").map_err(|e| Error::io(path, e))?;
    }
    checkpoint::write_atomic(path, &buf)
}

pub fn save_sacnet(dir: &Path, net: &SacNetwork) -> Result<()> {
    let (names, tensors) = net.layers();
    let layers: Vec<(String, &Tensor)> = names.into_iter().zip(tensors.iter()).collect();
    checkpoint::save(
        dir,
        KIND,
        KIND,
        serde_json::to_value(&net.config)?,
        net.seed,
        &net.loss_trace,
        &layers,
    )
}

pub fn load_sacnet(dir: &Path) -> Result<SacNetwork> {
    let (manifest, tensors) = checkpoint::load(dir, KIND, KIND)?;
    let config: SacConfig = serde_json::from_value(manifest.hyperparameters)?;
    let mut net = SacNetwork::init(config, manifest.seed)?;
    let (_, want) = net.layers();
    if tensors.len() != want.len() || tensors.iter().zip(&want).any(|(a, b)| a.shape() != b.shape()) {
        return Err(Error::Compatibility(
            "sacnet layer shapes disagree with its hyperparameters".into(),
        ));
    }
    let n_params = net.params().len();
    let mut it = tensors.into_iter();
    for p in net.params_mut() {
        *p = it.next().expect("counted").requiring_grad();
    }
    debug_assert_eq!(n_params + 2 * net.units.len(), want.len());
    for u in &mut net.units {
        u.running.mean = it.next().expect("counted").into_data();
        u.running.var = it.next().expect("counted").into_data();
    }
    net.loss_trace = manifest.loss_trace;
    Ok(net)
}

#[cfg(test)]
mod tests;
