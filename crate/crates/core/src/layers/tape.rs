//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward sweep. Parameters are referenced, not copied: the
//! tape borrows the [`ParamStore`] for its lifetime and `backward` returns a
//! [`Gradients`] that the caller folds back with [`ParamStore::accumulate`].

use std::collections::HashMap;

use rand::Rng;

use super::gemm::gemm;
use super::tensor::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Maps the output gradient of a custom node to one gradient per input.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

enum Op {
    Input,
    Param(ParamId),
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Depthwise {
        x: Var,
        w: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Add(Var, Var),
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    MeanTime(Var),
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    Softmax(Var),
    AttentiveStats {
        h: Var,
        alpha: Var,
        eps: f64,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn dims3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c, t] => Ok((b, c, t)),
        _ => Err(Error::Shape(format!("{what} expects [batch, channels, time], got {shape:?}"))),
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape(format!("{what} expects a matrix, got {shape:?}"))),
    }
}

/// `[B,C,T]` or `[B,C]` (treated as `T = 1`).
fn dims_channels(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c, t] => Ok((b, c, t)),
        [b, c] => Ok((b, c, 1)),
        _ => Err(Error::Shape(format!("{what} expects [batch, channels(, time)], got {shape:?}"))),
    }
}

fn im2col(x: &[f64], channels: usize, t: usize, k: usize, cols: &mut [f64]) {
    let pad = k / 2;
    for c in 0..channels {
        let row = &x[c * t..(c + 1) * t];
        for j in 0..k {
            let dst = &mut cols[(c * k + j) * t..(c * k + j + 1) * t];
            for (tt, d) in dst.iter_mut().enumerate() {
                let src = tt + j;
                *d = if src >= pad && src - pad < t { row[src - pad] } else { 0.0 };
            }
        }
    }
}

fn col2im_add(cols: &[f64], channels: usize, t: usize, k: usize, dx: &mut [f64]) {
    let pad = k / 2;
    for c in 0..channels {
        let row = &mut dx[c * t..(c + 1) * t];
        for j in 0..k {
            let src = &cols[(c * k + j) * t..(c * k + j + 1) * t];
            for (tt, s) in src.iter().enumerate() {
                let p = tt + j;
                if p >= pad && p - pad < t {
                    row[p - pad] += s;
                }
            }
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id).tensor.values(),
            _ => &self.nodes[v.0].value,
        }
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let shape = self.params.get(id).tensor.shape().to_vec();
        self.push(shape, Vec::new(), Op::Param(id))
    }

    /// Full 1-D convolution, stride 1, zero "same" padding, cross-correlation
    /// convention. `x: [B, C_in, T]`, `w: [C_out, C_in, k]` with `k` odd.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (b, cin, t) = dims3(self.shape(x), "conv1d input")?;
        let (cout, k) = match *self.shape(w) {
            [co, ci, k] if ci == cin => (co, k),
            ref s => {
                return Err(Error::Shape(format!(
                    "conv1d weight {s:?} does not match input channels {cin}"
                )))
            }
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::Shape(format!(
                    "conv1d bias {:?} does not match output channels {cout}",
                    self.shape(bv)
                )));
            }
        }
        let mut out = vec![0.0; b * cout * t];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            let mut cols = vec![0.0; if k > 1 { cin * k * t } else { 0 }];
            for bi in 0..b {
                let xb = &xv[bi * cin * t..(bi + 1) * cin * t];
                let ob = &mut out[bi * cout * t..(bi + 1) * cout * t];
                if k == 1 {
                    gemm(cout, cin, t, wv, false, xb, false, 0.0, ob);
                } else {
                    im2col(xb, cin, t, k, &mut cols);
                    gemm(cout, cin * k, t, wv, false, &cols, false, 0.0, ob);
                }
                if let Some(bv) = bias {
                    let bias = self.value(bv);
                    for (co, row) in ob.chunks_mut(t).enumerate() {
                        row.iter_mut().for_each(|v| *v += bias[co]);
                    }
                }
            }
        }
        Ok(self.push(vec![b, cout, t], out, Op::Conv1d { x, w, bias }))
    }

    /// Point-wise (1×1) convolution: a per-frame linear map across channels.
    pub fn conv1d_pointwise(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        match *self.shape(w) {
            [_, _, 1] => self.conv1d(x, w, bias),
            ref s => Err(Error::Shape(format!("pointwise weight must be [C_out, C_in, 1], got {s:?}"))),
        }
    }

    /// Depth-wise convolution: one `k`-tap filter per channel, `w: [C, 1, k]`.
    pub fn conv1d_depthwise(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, c, t) = dims3(self.shape(x), "depthwise input")?;
        let k = match *self.shape(w) {
            [wc, 1, k] if wc == c => k,
            ref s => {
                return Err(Error::Shape(format!(
                    "depthwise weight {s:?} does not match [{c}, 1, k]"
                )))
            }
        };
        if k % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel size must be odd, got {k}")));
        }
        let pad = k / 2;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; b * c * t];
        for bc in 0..b * c {
            let ch = bc % c;
            let taps = &wv[ch * k..(ch + 1) * k];
            let row = &xv[bc * t..(bc + 1) * t];
            let o = &mut out[bc * t..(bc + 1) * t];
            for (j, &wj) in taps.iter().enumerate() {
                // o[tt] += wj * row[tt + j - pad]
                let lo = pad.saturating_sub(j);
                let hi = (t + pad).saturating_sub(j).min(t);
                for tt in lo..hi {
                    o[tt] += wj * row[tt + j - pad];
                }
            }
        }
        Ok(self.push(vec![b, c, t], out, Op::Depthwise { x, w }))
    }

    /// Training-mode batch normalization over batch and time, per channel.
    /// Returns the output together with the batch mean and (biased) variance.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let shape = self.shape(x).to_vec();
        let (b, c, t) = dims_channels(&shape, "batchnorm input")?;
        self.check_affine(gamma, beta, c)?;
        let n = (b * t) as f64;
        let xv = self.value(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ch in 0..c {
                let row = &xv[(bi * c + ch) * t..(bi * c + ch + 1) * t];
                mean[ch] += row.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..b {
            for ch in 0..c {
                let row = &xv[(bi * c + ch) * t..(bi * c + ch + 1) * t];
                var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize_affine(x, gamma, beta, (b, c, t), &mean, &inv_std);
        let var_node = self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
        );
        Ok((var_node, mean, var))
    }

    /// Inference-mode batch normalization using fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (b, c, t) = dims_channels(&shape, "batchnorm input")?;
        self.check_affine(gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::Shape(format!("batchnorm statistics do not match {c} channels")));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize_affine(x, gamma, beta, (b, c, t), mean, &inv_std);
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
        ))
    }

    fn check_affine(&self, gamma: Var, beta: Var, c: usize) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batchnorm scale {:?} / shift {:?} do not match {c} channels",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(())
    }

    fn normalize_affine(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        (b, c, t): (usize, usize, usize),
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let g = self.value(gamma);
        let be = self.value(beta);
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let r = (bi * c + ch) * t..(bi * c + ch + 1) * t;
                for i in r {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + be[ch];
                }
            }
        }
        (xhat, out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    /// `x: [B,C,T]` scaled per `(b, c)` by `gate: [B,C]`, broadcast over time.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (b, c, t) = dims3(self.shape(x), "scale_channels input")?;
        if self.shape(gate) != [b, c] {
            return Err(Error::Shape(format!(
                "channel gate {:?} does not match [{b}, {c}]",
                self.shape(gate)
            )));
        }
        let g = self.value(gate);
        let out = self
            .value(x)
            .chunks(t)
            .zip(g)
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        Ok(self.push(vec![b, c, t], out, Op::ScaleChannels { x, gate }))
    }

    /// Global average pooling over time: `[B,C,T] -> [B,C]`.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let (b, c, t) = dims3(self.shape(x), "mean_time input")?;
        let out = self.value(x).chunks(t).map(|row| row.iter().sum::<f64>() / t as f64).collect();
        Ok(self.push(vec![b, c], out, Op::MeanTime(x)))
    }

    /// `x: [B, In]`, `w: [Out, In]` → `x·wᵀ + bias`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (rows, fin) = dims2(self.shape(x), "linear input")?;
        let (fout, win) = dims2(self.shape(w), "linear weight")?;
        if win != fin {
            return Err(Error::Shape(format!(
                "linear weight [{fout}, {win}] does not accept input width {fin}"
            )));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [fout] {
                return Err(Error::Shape(format!(
                    "linear bias {:?} does not match {fout} outputs",
                    self.shape(bv)
                )));
            }
        }
        let mut out = vec![0.0; rows * fout];
        gemm(rows, fin, fout, self.value(x), false, self.value(w), true, 0.0, &mut out);
        if let Some(bv) = bias {
            let bias = self.value(bv);
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        Ok(self.push(vec![rows, fout], out, Op::Linear { x, w, bias }))
    }

    /// `a: [B, D]`, `b: [N, D]` → `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, None)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let last = *shape.last().unwrap_or(&1);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(last.max(1)) {
            softmax_in_place(row);
        }
        self.push(shape, out, Op::Softmax(x))
    }

    /// Attention-weighted mean and standard deviation per channel.
    ///
    /// `h, alpha: [B,C,T]` with `alpha` summing to one over time; the output
    /// `[B, 2C]` holds the means followed by `sqrt(max(E[h²] - μ², eps))`.
    pub fn attentive_stats(&mut self, h: Var, alpha: Var, eps: f64) -> Result<Var> {
        let (b, c, t) = dims3(self.shape(h), "attentive_stats input")?;
        if self.shape(alpha) != self.shape(h) {
            return Err(Error::Shape(format!(
                "attention weights {:?} do not match features {:?}",
                self.shape(alpha),
                self.shape(h)
            )));
        }
        let hv = self.value(h);
        let av = self.value(alpha);
        let mut out = vec![0.0; b * 2 * c];
        for bi in 0..b {
            for ch in 0..c {
                let r = (bi * c + ch) * t..(bi * c + ch + 1) * t;
                let (mut mu, mut sq) = (0.0, 0.0);
                for (hv, av) in hv[r.clone()].iter().zip(&av[r]) {
                    mu += av * hv;
                    sq += av * hv * hv;
                }
                out[bi * 2 * c + ch] = mu;
                out[bi * 2 * c + c + ch] = (sq - mu * mu).max(eps).sqrt();
            }
        }
        Ok(self.push(vec![b, 2 * c], out, Op::AttentiveStats { h, alpha, eps }))
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let last = (*shape.last().unwrap_or(&1)).max(1);
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(out.len() / last);
        for row in out.chunks_mut(last) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(shape, out, Op::L2Normalize { x, norms })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    /// `Σ x ⊙ weights`, a scalar probe used for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Shape("weighted_sum weights do not match input".into()));
        }
        let s = self.value(x).iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(vec![1], vec![s], Op::WeightedSum { x, weights }))
    }

    /// Appends a node whose value and backward rule are supplied by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: BackwardFn) -> Var {
        let shape = value.shape().to_vec();
        self.push(
            shape,
            value.into_values(),
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            params: vec![None; self.params.len()],
            inputs: HashMap::new(),
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Input => {
                    out.inputs.insert(i, g);
                }
                Op::Param(id) => match &mut out.params[id.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    slot => *slot = Some(g),
                },
                Op::Conv1d { x, w, bias } => {
                    let (b, cin, t) = dims3(self.shape(*x), "conv1d")?;
                    let (cout, k) = (self.shape(*w)[0], self.shape(*w)[2]);
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut dw = vec![0.0; cout * cin * k];
                    let mut dx = vec![0.0; b * cin * t];
                    let mut cols = vec![0.0; if k > 1 { cin * k * t } else { 0 }];
                    let mut dcols = vec![0.0; cin * k * t];
                    for bi in 0..b {
                        let xb = &xv[bi * cin * t..(bi + 1) * cin * t];
                        let gb = &g[bi * cout * t..(bi + 1) * cout * t];
                        let dxb = &mut dx[bi * cin * t..(bi + 1) * cin * t];
                        if k == 1 {
                            gemm(cout, t, cin, gb, false, xb, true, 1.0, &mut dw);
                            gemm(cin, cout, t, wv, true, gb, false, 0.0, dxb);
                        } else {
                            im2col(xb, cin, t, k, &mut cols);
                            gemm(cout, t, cin * k, gb, false, &cols, true, 1.0, &mut dw);
                            gemm(cin * k, cout, t, wv, true, gb, false, 0.0, &mut dcols);
                            col2im_add(&dcols, cin, t, k, dxb);
                        }
                    }
                    add_into(&mut grads, &self.nodes, *x, &dx);
                    add_into(&mut grads, &self.nodes, *w, &dw);
                    if let Some(bv) = bias {
                        let db: Vec<f64> = (0..cout)
                            .map(|co| (0..b).map(|bi| g[(bi * cout + co) * t..(bi * cout + co + 1) * t].iter().sum::<f64>()).sum())
                            .collect();
                        add_into(&mut grads, &self.nodes, *bv, &db);
                    }
                }
                Op::Depthwise { x, w } => {
                    let (b, c, t) = dims3(self.shape(*x), "depthwise")?;
                    let k = self.shape(*w)[2];
                    let pad = k / 2;
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let mut dx = vec![0.0; b * c * t];
                    let mut dw = vec![0.0; c * k];
                    for bc in 0..b * c {
                        let ch = bc % c;
                        let row = &xv[bc * t..(bc + 1) * t];
                        let gr = &g[bc * t..(bc + 1) * t];
                        let dxr = &mut dx[bc * t..(bc + 1) * t];
                        for j in 0..k {
                            let wj = wv[ch * k + j];
                            let lo = pad.saturating_sub(j);
                            let hi = (t + pad).saturating_sub(j).min(t);
                            let mut acc = 0.0;
                            for tt in lo..hi {
                                acc += gr[tt] * row[tt + j - pad];
                                dxr[tt + j - pad] += wj * gr[tt];
                            }
                            dw[ch * k + j] += acc;
                        }
                    }
                    add_into(&mut grads, &self.nodes, *x, &dx);
                    add_into(&mut grads, &self.nodes, *w, &dw);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let (b, c, t) = dims_channels(self.shape(*x), "batchnorm")?;
                    let gv = self.value(*gamma);
                    let n = (b * t) as f64;
                    let mut sum_g = vec![0.0; c];
                    let mut sum_gx = vec![0.0; c];
                    for bi in 0..b {
                        for ch in 0..c {
                            for i in (bi * c + ch) * t..(bi * c + ch + 1) * t {
                                sum_g[ch] += g[i];
                                sum_gx[ch] += g[i] * xhat[i];
                            }
                        }
                    }
                    let mut dx = vec![0.0; g.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let s = gv[ch] * inv_std[ch];
                            for i in (bi * c + ch) * t..(bi * c + ch + 1) * t {
                                dx[i] = if *batch_stats {
                                    s / n * (n * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                                } else {
                                    s * g[i]
                                };
                            }
                        }
                    }
                    add_into(&mut grads, &self.nodes, *x, &dx);
                    add_into(&mut grads, &self.nodes, *gamma, &sum_gx);
                    add_into(&mut grads, &self.nodes, *beta, &sum_g);
                }
                Op::Relu(x) => {
                    let dx: Vec<f64> = g.iter().zip(y).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect();
                    add_into(&mut grads, &self.nodes, *x, &dx);
                }
                Op::Tanh(x) => {
                    let dx: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    add_into(&mut grads, &self.nodes, *x, &dx);
                }
                Op::Sigmoid(x) => {
                    let dx: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    add_into(&mut grads, &self.nodes, *x, &dx);
                }
                Op::Dropout { x, mask } => {
                    let dx: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                    add_into(&mut grads, &self.nodes, *x, &dx);
                }
                Op::Add(a, b) => {
                    add_into(&mut grads, &self.nodes, *a, &g);
                    add_into(&mut grads, &self.nodes, *b, &g);
                }
                Op::ScaleChannels { x, gate } => {
                    let t = self.shape(*x)[2];
                    let xv = self.value(*x);
                    let gate_v = self.value(*gate);
                    let mut dx = vec![0.0; g.len()];
                    let mut dg = vec![0.0; gate_v.len()];
                    for (bc, s) in gate_v.iter().enumerate() {
                        for i in bc * t..(bc + 1) * t {
                            dx[i] = g[i] * s;
                            dg[bc] += g[i] * xv[i];
                        }
                    }
                    add_into(&mut grads, &self.nodes, *x, &dx);
                    add_into(&mut grads, &self.nodes, *gate, &dg);
                }
                Op::MeanTime(x) => {
                    let t = self.shape(*x)[2];
                    let dx: Vec<f64> = g.iter().flat_map(|v| std::iter::repeat_n(v / t as f64, t)).collect();
                    add_into(&mut grads, &self.nodes, *x, &dx);
                }
                Op::Linear { x, w, bias } => {
                    let (rows, fin) = dims2(self.shape(*x), "linear")?;
                    let fout = self.shape(*w)[0];
                    let mut dx = vec![0.0; rows * fin];
                    let mut dw = vec![0.0; fout * fin];
                    gemm(rows, fout, fin, &g, false, self.value(*w), false, 0.0, &mut dx);
                    gemm(fout, rows, fin, &g, true, self.value(*x), false, 0.0, &mut dw);
                    add_into(&mut grads, &self.nodes, *x, &dx);
                    add_into(&mut grads, &self.nodes, *w, &dw);
                    if let Some(bv) = bias {
                        let mut db = vec![0.0; fout];
                        for row in g.chunks(fout) {
                            db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                        }
                        add_into(&mut grads, &self.nodes, *bv, &db);
                    }
                }
                Op::Softmax(x) => {
                    let last = (*node.shape.last().unwrap_or(&1)).max(1);
                    let mut dx = vec![0.0; g.len()];
                    for ((dxr, gr), yr) in dx.chunks_mut(last).zip(g.chunks(last)).zip(y.chunks(last)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, gv), yv) in dxr.iter_mut().zip(gr).zip(yr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    add_into(&mut grads, &self.nodes, *x, &dx);
                }
                Op::AttentiveStats { h, alpha, eps } => {
                    let (b, c, t) = dims3(self.shape(*h), "attentive_stats")?;
                    let hv = self.value(*h);
                    let av = self.value(*alpha);
                    let mut dh = vec![0.0; hv.len()];
                    let mut da = vec![0.0; hv.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let r = (bi * c + ch) * t..(bi * c + ch + 1) * t;
                            let mu = y[bi * 2 * c + ch];
                            let sigma = y[bi * 2 * c + c + ch];
                            let g_mu = g[bi * 2 * c + ch];
                            let g_sigma = g[bi * 2 * c + c + ch];
                            let sq: f64 = hv[r.clone()].iter().zip(&av[r.clone()]).map(|(h, a)| a * h * h).sum();
                            // σ is clamped at sqrt(eps): no gradient through the variance there.
                            let g_var = if sq - mu * mu > *eps { g_sigma / (2.0 * sigma) } else { 0.0 };
                            for i in r {
                                dh[i] = av[i] * (g_mu + 2.0 * g_var * (hv[i] - mu));
                                da[i] = g_mu * hv[i] + g_var * (hv[i] * hv[i] - 2.0 * mu * hv[i]);
                            }
                        }
                    }
                    add_into(&mut grads, &self.nodes, *h, &dh);
                    add_into(&mut grads, &self.nodes, *alpha, &da);
                }
                Op::L2Normalize { x, norms } => {
                    let last = (*node.shape.last().unwrap_or(&1)).max(1);
                    let mut dx = vec![0.0; g.len()];
                    for (r, n) in norms.iter().enumerate() {
                        let gr = &g[r * last..(r + 1) * last];
                        let yr = &y[r * last..(r + 1) * last];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..last {
                            dx[r * last + j] = (gr[j] - yr[j] * dot) / n;
                        }
                    }
                    add_into(&mut grads, &self.nodes, *x, &dx);
                }
                Op::Sum(x) => {
                    let dx = vec![g[0]; self.value(*x).len()];
                    add_into(&mut grads, &self.nodes, *x, &dx);
                }
                Op::WeightedSum { x, weights } => {
                    let dx: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                    add_into(&mut grads, &self.nodes, *x, &dx);
                }
                Op::Custom { inputs, backward } => {
                    let dins = backward(&g);
                    if dins.len() != inputs.len() {
                        return Err(Error::Shape("custom backward returned the wrong number of gradients".into()));
                    }
                    for (v, d) in inputs.iter().zip(&dins) {
                        add_into(&mut grads, &self.nodes, *v, d);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, delta: &[f64]) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].shape.iter().product()]);
    debug_assert_eq!(slot.len(), delta.len());
    slot.iter_mut().zip(delta).for_each(|(s, d)| *s += d);
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
