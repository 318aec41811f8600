use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where batch normalization takes its statistics from.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a> {
    /// Per-channel mean and biased variance of the current batch.
    Batch,
    /// Externally supplied statistics, e.g. running estimates at inference.
    Fixed { mean: &'a [f64], var: &'a [f64] },
}

/// Exponential running estimates of per-channel mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Blends in batch statistics; `batch_var` is the biased estimate over `n`
    /// values per channel and is stored unbiased.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], n: usize, momentum: f64) {
        let correction = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch_mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch_var[c] * correction;
        }
    }
}

pub enum BatchNormMode<'a> {
    Train {
        running: &'a mut RunningStats,
        momentum: f64,
    },
    Infer(&'a RunningStats),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddBias(usize, usize),
    Affine {
        x: usize,
        scale: f64,
    },
    Relu(usize),
    Silu(usize),
    Sigmoid(usize),
    Log(usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    Softmax(usize),
    Conv2d {
        x: usize,
        kernel: usize,
        bias: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Dot {
        x: usize,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Tape of executed operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, which is a topological order, so
/// [`backward`](Graph::backward) walks the tape once from the root down.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims3(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [n, r, c] => Some((n, r, c)),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].requires_grad)
    }

    /// Copies a tensor onto the tape, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Copies a tensor onto the tape as a differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(Error::dim(format!(
                "constant of shape {shape:?} given {} values",
                value.len()
            )));
        }
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient held for `v` into `target.grad`.
    pub fn accumulate_grad(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![0.0; self.nodes[v.0].value.len()]),
        }
    }

    /// Batch mean and biased variance recorded by a `NormStats::Batch` node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                batch_stats: Some((m, s)),
                ..
            } => Some((m, s)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let (r, k, c) = match (sa.as_slice(), sb.as_slice()) {
            ([r, k], [k2, c]) if k == k2 => (*r, *k, *c),
            _ => {
                return Err(Error::dim(format!(
                    "matmul of {sa:?} and {sb:?}: inner dimensions disagree"
                )))
            }
        };
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; r * c];
        gemm(av, bv, &mut out, r, k, c);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![r, c], out, Op::MatMul(a.0, b.0), rg))
    }

    /// Batched product over the leading axis: `[n,r,k]·[n,k,c]`, or
    /// `[n,r,k]·[n,c,k]ᵀ` when `transpose_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        let err = || Error::dim(format!("bmm of {sa:?} and {sb:?} (transpose_b={transpose_b})"));
        let (n, r, k) = dims3(sa).ok_or_else(err)?;
        let (n2, b1, b2) = dims3(sb).ok_or_else(err)?;
        let (k2, c) = if transpose_b { (b2, b1) } else { (b1, b2) };
        if n != n2 || k != k2 {
            return Err(err());
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = vec![0.0; n * r * c];
        for i in 0..n {
            let ab = &av[i * r * k..(i + 1) * r * k];
            let bb = &bv[i * k * c..(i + 1) * k * c];
            let ob = &mut out[i * r * c..(i + 1) * r * c];
            if transpose_b {
                gemm_nt(ab, bb, ob, r, k, c);
            } else {
                gemm(ab, bb, ob, r, k, c);
            }
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(
            vec![n, r, c],
            out,
            Op::Bmm {
                a: a.0,
                b: b.0,
                transpose_b,
            },
            rg,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::dim(format!("{what} of {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(self.nodes[a.0].shape.clone(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a.0, b.0))
    }

    /// Adds a `[c]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = &self.nodes[x.0].shape;
        let sb = &self.nodes[bias.0].shape;
        let c = *sx.last().unwrap_or(&1);
        if sb.as_slice() != [c] {
            return Err(Error::dim(format!("bias {sb:?} for input {sx:?}")));
        }
        let bv = &self.nodes[bias.0].value;
        let out = self.nodes[x.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % c])
            .collect();
        let rg = self.rg(&[x.0, bias.0]);
        Ok(self.push(sx.clone(), out, Op::AddBias(x.0, bias.0), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let rg = self.rg(&[x.0]);
        self.push(self.nodes[x.0].shape.clone(), out, op, rg)
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x: x.0, scale })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 || v.is_nan() { v } else { 0.0 }, Op::Relu(x.0))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x.0))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x: x.0, lo, hi })
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let node = &self.nodes[x.0];
        if node.value.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let c = *node.shape.last().unwrap_or(&1);
        let mut out = node.value.clone();
        if c > 0 {
            for row in out.chunks_mut(c) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    s += *v;
                }
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(node.shape.clone(), out, Op::Softmax(x.0), rg))
    }

    /// Same-padded 2-D cross-correlation.
    ///
    /// `x` is `[B, C_in, H, W]` (or `[C_in, H, W]`, treated as `B = 1` and
    /// returned without the batch axis); `kernel` is `[C_out, C_in, kh, kw]`;
    /// `bias` is `[C_out]`. Zero padding of `(k-1)/2` before and the remainder
    /// after keeps the spatial extents unchanged.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        let sk = &self.nodes[kernel.0].shape;
        let (b, ci, h, w) = match *sx.as_slice() {
            [b, c, h, w] => (b, c, h, w),
            [c, h, w] => (1, c, h, w),
            _ => return Err(Error::dim(format!("conv2d input must be 3-D or 4-D, got {sx:?}"))),
        };
        let (co, kci, kh, kw) = match *sk.as_slice() {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => return Err(Error::dim(format!("conv2d kernel must be 4-D, got {sk:?}"))),
        };
        if kci != ci {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {sx:?} has {ci} channels, kernel {sk:?} expects {kci}"
            )));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::dim("conv2d kernel has zero extent"));
        }
        if self.nodes[bias.0].shape.as_slice() != [co] {
            return Err(Error::dim(format!(
                "conv2d bias {:?} for {co} output channels",
                self.nodes[bias.0].shape
            )));
        }
        let geom = ConvGeom {
            b,
            ci,
            co,
            h,
            w,
            kh,
            kw,
        };
        let mut out = vec![0.0; b * co * h * w];
        conv_forward(
            &geom,
            &self.nodes[x.0].value,
            &self.nodes[kernel.0].value,
            &self.nodes[bias.0].value,
            &mut out,
        );
        let shape = if sx.len() == 4 {
            vec![b, co, h, w]
        } else {
            vec![co, h, w]
        };
        let rg = self.rg(&[x.0, kernel.0, bias.0]);
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                x: x.0,
                kernel: kernel.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    /// Channel-wise normalization of `x: [B, C, ...]`:
    /// `((x − μ) / √(σ² + eps))·γ + β` with statistics per channel over the
    /// batch and all trailing axes.
    pub fn batch_norm_with(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, stats: NormStats<'_>) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() < 2 {
            return Err(Error::dim(format!("batch_norm needs [B, C, ...], got {shape:?}")));
        }
        let (bsz, c) = (shape[0], shape[1]);
        if bsz == 0 {
            return Err(Error::contract("batch_norm on an empty batch"));
        }
        if eps <= 0.0 {
            return Err(Error::contract("batch_norm eps must be positive"));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.nodes[v.0].shape.as_slice() != [c] {
                return Err(Error::dim(format!(
                    "batch_norm {name} {:?} for {c} channels",
                    self.nodes[v.0].shape
                )));
            }
        }
        let inner: usize = shape[2..].iter().product();
        let n = bsz * inner;
        let xv = &self.nodes[x.0].value;
        let (mean, var, batch_stats) = match stats {
            NormStats::Batch => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let vals = channel_iter(xv, bsz, c, inner, ch);
                    let m = vals.clone().sum::<f64>() / n as f64;
                    let s = vals.map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                    mean[ch] = m;
                    var[ch] = s;
                }
                (mean.clone(), var.clone(), Some((mean, var)))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("batch_norm running stats length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (&v, (xh, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let ch = (i / inner) % c;
            *xh = (v - mean[ch]) * inv_std[ch];
            *o = *xh * gv[ch] + bv[ch];
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Batch normalization that also maintains running statistics in train
    /// mode and reads them in infer mode.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, mode: BatchNormMode<'_>) -> Result<Var> {
        match mode {
            BatchNormMode::Train { running, momentum } => {
                let out = self.batch_norm_with(x, gamma, beta, eps, NormStats::Batch)?;
                let shape = &self.nodes[x.0].shape;
                let n = shape[0] * shape[2..].iter().product::<usize>();
                let (m, s) = self.batch_stats(out).expect("batch mode records stats");
                running.update(m, s, n, momentum);
                Ok(out)
            }
            BatchNormMode::Infer(running) => self.batch_norm_with(
                x,
                gamma,
                beta,
                eps,
                NormStats::Fixed {
                    mean: &running.mean,
                    var: &running.var,
                },
            ),
        }
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[x.0].value.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.nodes[x.0].shape
            )));
        }
        let value = self.nodes[x.0].value.clone();
        let rg = self.rg(&[x.0]);
        Ok(self.push(shape, value, Op::Reshape(x.0), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(vec![], vec![s], Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x.0]);
        self.push(vec![], vec![s], Op::Mean(x.0), rg)
    }

    /// `Σ weights[i]·x[i]` with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.len() != weights.len() {
            return Err(Error::dim(format!(
                "dot of {} values with {} weights",
                v.len(),
                weights.len()
            )));
        }
        let s = v.iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            vec![],
            vec![s],
            Op::Dot {
                x: x.0,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root. Gradients from any previous pass are
    /// discarded; use [`accumulate_grad`](Graph::accumulate_grad) to sum them
    /// into parameters.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rn = &self.nodes[root.0];
        if rn.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rn.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // Adds into the gradient slot of `j` when `j` participates.
        let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[j].requires_grad {
                let slot = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (r, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                let c = nodes[b].shape[1];
                acc(a, &mut |da| gemm_nt(g, &nodes[b].value, da, r, c, k));
                acc(b, &mut |db| gemm_tn(&nodes[a].value, g, db, k, r, c));
            }
            &Op::Bmm { a, b, transpose_b } => {
                let (n, r, k) = dims3(&nodes[a].shape).unwrap();
                let c = node.shape[2];
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                acc(a, &mut |da| {
                    for t in 0..n {
                        let gb = &g[t * r * c..(t + 1) * r * c];
                        let bb = &bv[t * k * c..(t + 1) * k * c];
                        let db = &mut da[t * r * k..(t + 1) * r * k];
                        if transpose_b {
                            gemm(gb, bb, db, r, c, k);
                        } else {
                            gemm_nt(gb, bb, db, r, c, k);
                        }
                    }
                });
                acc(b, &mut |dbt| {
                    for t in 0..n {
                        let gb = &g[t * r * c..(t + 1) * r * c];
                        let ab = &av[t * r * k..(t + 1) * r * k];
                        let out = &mut dbt[t * k * c..(t + 1) * k * c];
                        if transpose_b {
                            // d(B) where B is [c,k]: gᵀ·A
                            gemm_tn(gb, ab, out, c, r, k);
                        } else {
                            gemm_tn(ab, gb, out, k, r, c);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                acc(a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * y;
                    }
                });
                acc(b, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                        *d += g * x;
                    }
                });
            }
            &Op::Div(a, b) => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                acc(a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                        *d += g / y;
                    }
                });
                acc(b, &mut |d| {
                    for (((d, g), x), y) in d.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= g * x / (y * y);
                    }
                });
            }
            &Op::AddBias(x, bias) => {
                let c = nodes[bias].value.len();
                acc(x, &mut |d| add_into(d, g));
                acc(bias, &mut |d| {
                    for (idx, gv) in g.iter().enumerate() {
                        d[idx % c] += gv;
                    }
                });
            }
            &Op::Affine { x, scale } => {
                acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += scale * g));
            }
            &Op::Relu(x) => {
                let xv = &nodes[x].value;
                acc(x, &mut |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            &Op::Silu(x) => {
                let xv = &nodes[x].value;
                acc(x, &mut |d| {
                    for ((d, g), &v) in d.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(v);
                        *d += g * s * (1.0 + v * (1.0 - s));
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let yv = &node.value;
                acc(x, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(yv) {
                        *d += g * y * (1.0 - y);
                    }
                });
            }
            &Op::Log(x) => {
                let xv = &nodes[x].value;
                acc(x, &mut |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        *d += g / v;
                    }
                });
            }
            &Op::Clamp { x, lo, hi } => {
                let xv = &nodes[x].value;
                acc(x, &mut |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(xv) {
                        if *v >= lo && *v <= hi {
                            *d += g;
                        }
                    }
                });
            }
            &Op::Softmax(x) => {
                let c = *node.shape.last().unwrap_or(&1);
                let yv = &node.value;
                acc(x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(yv.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dv, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
            &Op::Conv2d { x, kernel, bias } => {
                let sx = &nodes[x].shape;
                let sk = &nodes[kernel].shape;
                let (b, ci, h, w) = match *sx.as_slice() {
                    [b, c, h, w] => (b, c, h, w),
                    [c, h, w] => (1, c, h, w),
                    _ => unreachable!(),
                };
                let geom = ConvGeom {
                    b,
                    ci,
                    co: sk[0],
                    h,
                    w,
                    kh: sk[2],
                    kw: sk[3],
                };
                acc(x, &mut |d| conv_grad_input(&geom, g, &nodes[kernel].value, d));
                acc(kernel, &mut |d| conv_grad_kernel(&geom, g, &nodes[x].value, d));
                acc(bias, &mut |d| {
                    let hw = h * w;
                    for bi in 0..b {
                        for o in 0..geom.co {
                            let base = (bi * geom.co + o) * hw;
                            d[o] += g[base..base + hw].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = &nodes[*x].shape;
                let (bsz, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let n = (bsz * inner) as f64;
                let gv = &nodes[*gamma].value;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (idx, (gi, xh)) in g.iter().zip(xhat).enumerate() {
                    let ch = (idx / inner) % c;
                    sum_g[ch] += gi;
                    sum_gx[ch] += gi * xh;
                }
                acc(*gamma, &mut |d| add_into(d, &sum_gx));
                acc(*beta, &mut |d| add_into(d, &sum_g));
                let train = batch_stats.is_some();
                acc(*x, &mut |d| {
                    for (idx, (dv, (gi, xh))) in d.iter_mut().zip(g.iter().zip(xhat)).enumerate() {
                        let ch = (idx / inner) % c;
                        let k = gv[ch] * inv_std[ch];
                        if train {
                            *dv += k / n * (n * gi - sum_g[ch] - xh * sum_gx[ch]);
                        } else {
                            *dv += k * gi;
                        }
                    }
                });
            }
            &Op::Reshape(x) => acc(x, &mut |d| add_into(d, g)),
            &Op::Sum(x) => acc(x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean(x) => {
                let n = nodes[x].value.len() as f64;
                acc(x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Dot { x, weights } => {
                acc(*x, &mut |d| {
                    for (d, w) in d.iter_mut().zip(weights) {
                        *d += g[0] * w;
                    }
                });
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

fn channel_iter(xv: &[f64], bsz: usize, c: usize, inner: usize, ch: usize) -> impl Iterator<Item = f64> + Clone + '_ {
    (0..bsz).flat_map(move |b| {
        let base = (b * c + ch) * inner;
        xv[base..base + inner].iter().copied()
    })
}

/// `out += a[r×k]·b[k×c]`
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a[r×k]·b[c×k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &b[j * k..(j + 1) * k];
            out[i * c + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×c] += a[r×k]ᵀ·b[r×c]`
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, r: usize, c: usize) {
    for i in 0..r {
        let brow = &b[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

struct ConvGeom {
    b: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn pad(&self) -> (usize, usize) {
        ((self.kh - 1) / 2, (self.kw - 1) / 2)
    }

    /// Output rows `i` for which input row `i + u - pad` is in range.
    fn span(u: usize, pad: usize, len: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(u);
        let hi = (len + pad).saturating_sub(u).min(len);
        (lo, hi.max(lo))
    }
}

fn conv_forward(geom: &ConvGeom, x: &[f64], k: &[f64], bias: &[f64], out: &mut [f64]) {
    let &ConvGeom {
        b,
        ci,
        co,
        h,
        w,
        kh,
        kw,
    } = geom;
    let (pt, pl) = geom.pad();
    let hw = h * w;
    for bi in 0..b {
        for o in 0..co {
            let obase = (bi * co + o) * hw;
            out[obase..obase + hw].iter_mut().for_each(|v| *v = bias[o]);
            for c in 0..ci {
                let xbase = (bi * ci + c) * hw;
                for u in 0..kh {
                    let (i0, i1) = ConvGeom::span(u, pt, h);
                    for v in 0..kw {
                        let kv = k[((o * ci + c) * kh + u) * kw + v];
                        if kv == 0.0 {
                            continue;
                        }
                        let (j0, j1) = ConvGeom::span(v, pl, w);
                        if j0 >= j1 {
                            continue;
                        }
                        for i in i0..i1 {
                            let xi = i + u - pt;
                            let orow = &mut out[obase + i * w + j0..obase + i * w + j1];
                            let xrow = &x[xbase + xi * w + j0 + v - pl..xbase + xi * w + j1 + v - pl];
                            for (ov, xv) in orow.iter_mut().zip(xrow) {
                                *ov += kv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_grad_input(geom: &ConvGeom, g: &[f64], k: &[f64], dx: &mut [f64]) {
    let &ConvGeom {
        b,
        ci,
        co,
        h,
        w,
        kh,
        kw,
    } = geom;
    let (pt, pl) = geom.pad();
    let hw = h * w;
    for bi in 0..b {
        for o in 0..co {
            let gbase = (bi * co + o) * hw;
            for c in 0..ci {
                let xbase = (bi * ci + c) * hw;
                for u in 0..kh {
                    let (i0, i1) = ConvGeom::span(u, pt, h);
                    for v in 0..kw {
                        let kv = k[((o * ci + c) * kh + u) * kw + v];
                        let (j0, j1) = ConvGeom::span(v, pl, w);
                        if j0 >= j1 {
                            continue;
                        }
                        for i in i0..i1 {
                            let xi = i + u - pt;
                            let grow = &g[gbase + i * w + j0..gbase + i * w + j1];
                            let drow = &mut dx[xbase + xi * w + j0 + v - pl..xbase + xi * w + j1 + v - pl];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += kv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_grad_kernel(geom: &ConvGeom, g: &[f64], x: &[f64], dk: &mut [f64]) {
    let &ConvGeom {
        b,
        ci,
        co,
        h,
        w,
        kh,
        kw,
    } = geom;
    let (pt, pl) = geom.pad();
    let hw = h * w;
    for bi in 0..b {
        for o in 0..co {
            let gbase = (bi * co + o) * hw;
            for c in 0..ci {
                let xbase = (bi * ci + c) * hw;
                for u in 0..kh {
                    let (i0, i1) = ConvGeom::span(u, pt, h);
                    for v in 0..kw {
                        let (j0, j1) = ConvGeom::span(v, pl, w);
                        if j0 >= j1 {
                            continue;
                        }
                        let mut s = 0.0;
                        for i in i0..i1 {
                            let xi = i + u - pt;
                            let grow = &g[gbase + i * w + j0..gbase + i * w + j1];
                            let xrow = &x[xbase + xi * w + j0 + v - pl..xbase + xi * w + j1 + v - pl];
                            s += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        dk[((o * ci + c) * kh + u) * kw + v] += s;
                    }
                }
            }
        }
    }
}
