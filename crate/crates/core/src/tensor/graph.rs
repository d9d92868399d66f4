use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::exec::ExecMode;

/// Lower/upper clamp applied to scores inside [`Graph::bce_loss`].
pub const BCE_CLAMP: f32 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    SoftmaxLastDim,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    MaxWindow { kernel: usize, stride: usize },
    GlobalMax,
    GlobalAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMode {
    Sum,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec {
            stride,
            padding,
            groups,
        }
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        let padded = len + 2 * self.padding;
        if kernel > padded {
            return Err(Error::DegenerateLength(format!(
                "kernel {kernel} exceeds padded length {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    /// False until the first train-mode update.
    pub initialized: bool,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            initialized: false,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    Act {
        x: NodeId,
        kind: Activation,
    },
    Pool {
        x: NodeId,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Dropout {
        x: NodeId,
        scale: Vec<f32>,
    },
    Sum {
        inputs: Vec<NodeId>,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    ChannelScale {
        x: NodeId,
        gate: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<f32>,
    },
    Bce {
        s: NodeId,
        labels: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Recorded forward computation. Nodes are appended in execution order, so
/// every input id is smaller than its consumer's id.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    exec: ExecMode,
    warnings: Vec<String>,
}

impl Graph {
    pub fn new(exec: ExecMode) -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
            exec,
            warnings: Vec::new(),
        }
    }

    pub fn exec(&self) -> ExecMode {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Leaf holding data that does not need a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, Op::Leaf)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, true, Op::Leaf)
    }

    /// Leaf tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad();
        self.push(t, rg, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        let value = Tensor {
            grad: None,
            requires_grad,
            ..value
        };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    fn ncl(&self, id: NodeId, what: &str) -> Result<(usize, usize, usize)> {
        match *self.shape(id) {
            [n, c, l] => Ok((n, c, l)),
            ref s => Err(Error::dim(what, format!("expected [N,C,L], got {s:?}"))),
        }
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, spec: ConvSpec) -> Result<NodeId> {
        let (n, cin, len) = self.ncl(x, "input")?;
        let (cout, cin_g, k) = match *self.shape(w) {
            [a, b, c] => (a, b, c),
            ref s => return Err(Error::dim("weight", format!("expected [Cout,Cin/g,K], got {s:?}"))),
        };
        if spec.groups == 0 || cin % spec.groups != 0 {
            return Err(Error::dim("channels", format!("Cin {cin} not divisible by groups {}", spec.groups)));
        }
        if cout % spec.groups != 0 {
            return Err(Error::dim("channels", format!("Cout {cout} not divisible by groups {}", spec.groups)));
        }
        if cin / spec.groups != cin_g {
            return Err(Error::dim(
                "weight",
                format!("weight has {cin_g} input channels per group, input gives {}", cin / spec.groups),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim("bias", format!("expected [{cout}], got {:?}", self.shape(b))));
            }
        }
        let lout = spec.out_len(len, k)?;
        let geom = ConvGeom {
            cin,
            len,
            cout,
            k,
            stride: spec.stride,
            pad: spec.padding,
            groups: spec.groups,
            lout,
        };
        let mut out = vec![0.0f32; n * cout * lout];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = b.map(|b| self.value(b).data());
            self.exec.for_each_chunk(&mut out, cout * lout, |i, o| {
                kernels::conv_forward(&xd[i * cin * len..(i + 1) * cin * len], wd, bd, &geom, o)
            });
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::new(&[n, cout, lout], out)?, rg, Op::Conv { x, w, b, geom }))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm1d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState,
        mode: Mode,
        momentum: f32,
        eps: f32,
    ) -> Result<NodeId> {
        let (n, c, l) = self.ncl(x, "input")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim("channels", format!("gamma/beta must be [{c}]")));
        }
        if state.running_mean.len() != c {
            return Err(Error::dim("channels", "running stats length".to_string()));
        }
        if eps <= 0.0 {
            return Err(Error::Config("batch-norm eps must be > 0".into()));
        }
        let m = n * l;
        let train = mode == Mode::Train;
        if !train && !state.initialized {
            self.warnings
                .push("batch_norm1d: eval with uninitialized running stats, using (0, 1)".into());
        }
        let xd = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        if train {
            for ch in 0..c {
                let mut s = 0.0f64;
                for i in 0..n {
                    s += xd[(i * c + ch) * l..(i * c + ch + 1) * l].iter().map(|&v| v as f64).sum::<f64>();
                }
                let mu = s / m as f64;
                let mut sq = 0.0f64;
                for i in 0..n {
                    sq += xd[(i * c + ch) * l..(i * c + ch + 1) * l]
                        .iter()
                        .map(|&v| (v as f64 - mu).powi(2))
                        .sum::<f64>();
                }
                mean[ch] = mu as f32;
                var[ch] = (sq / m as f64) as f32;
            }
        } else {
            mean.copy_from_slice(&state.running_mean);
            var.copy_from_slice(&state.running_var);
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let o = (i * c + ch) * l;
                for t in o..o + l {
                    xhat[t] = (xd[t] - mean[ch]) * inv_std[ch];
                    out[t] = g[ch] * xhat[t] + bt[ch];
                }
            }
        }
        if train {
            let unbias = if m > 1 { m as f32 / (m as f32 - 1.0) } else { 1.0 };
            for ch in 0..c {
                state.running_mean[ch] = (1.0 - momentum) * state.running_mean[ch] + momentum * mean[ch];
                state.running_var[ch] = (1.0 - momentum) * state.running_var[ch] + momentum * var[ch] * unbias;
            }
            state.initialized = true;
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&[n, c, l], out)?,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let out: Vec<f32> = match kind {
            Activation::Relu => v.data().iter().map(|&a| a.max(0.0)).collect(),
            Activation::Sigmoid => v.data().iter().map(|&a| sigmoid(a)).collect(),
            Activation::SoftmaxLastDim => {
                let d = *shape.last().expect("non-empty shape");
                let mut out = v.data().to_vec();
                for row in out.chunks_mut(d) {
                    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let mut s = 0.0;
                    for e in row.iter_mut() {
                        *e = (*e - mx).exp();
                        s += *e;
                    }
                    row.iter_mut().for_each(|e| *e /= s);
                }
                out
            }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, rg, Op::Act { x, kind }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn pool(&mut self, x: NodeId, kind: PoolKind) -> Result<NodeId> {
        let (n, c, l) = self.ncl(x, "input")?;
        let xd = self.value(x).data();
        let (lout, out, argmax) = match kind {
            PoolKind::MaxWindow { kernel, stride } => {
                if kernel == 0 || stride == 0 {
                    return Err(Error::DegenerateLength("empty pooling window".into()));
                }
                let lout = ConvSpec::new(stride, 0, 1).out_len(l, kernel)?;
                let mut out = Vec::with_capacity(n * c * lout);
                let mut arg = Vec::with_capacity(n * c * lout);
                for row in 0..n * c {
                    let r = &xd[row * l..(row + 1) * l];
                    for t in 0..lout {
                        let (mut bi, mut bv) = (t * stride, r[t * stride]);
                        for (j, &v) in r.iter().enumerate().skip(t * stride + 1).take(kernel - 1) {
                            if v > bv {
                                bi = j;
                                bv = v;
                            }
                        }
                        out.push(bv);
                        arg.push(row * l + bi);
                    }
                }
                (lout, out, arg)
            }
            PoolKind::GlobalMax => {
                let mut out = Vec::with_capacity(n * c);
                let mut arg = Vec::with_capacity(n * c);
                for row in 0..n * c {
                    let r = &xd[row * l..(row + 1) * l];
                    let (mut bi, mut bv) = (0, r[0]);
                    for (j, &v) in r.iter().enumerate().skip(1) {
                        if v > bv {
                            bi = j;
                            bv = v;
                        }
                    }
                    out.push(bv);
                    arg.push(row * l + bi);
                }
                (1, out, arg)
            }
            PoolKind::GlobalAvg => {
                let out = xd.chunks(l).map(|r| r.iter().sum::<f32>() / l as f32).collect();
                (1, out, Vec::new())
            }
        };
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c, lout], out)?, rg, Op::Pool { x, kind, argmax }))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, f) = match *self.shape(x) {
            [n, f] => (n, f),
            ref s => return Err(Error::dim("input", format!("expected [N,F], got {s:?}"))),
        };
        let (o, wf) = match *self.shape(w) {
            [o, wf] => (o, wf),
            ref s => return Err(Error::dim("weight", format!("expected [O,F], got {s:?}"))),
        };
        if wf != f {
            return Err(Error::dim("features", format!("input has {f}, weight expects {wf}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::dim("bias", format!("expected [{o}], got {:?}", self.shape(b))));
            }
        }
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let bd = b.map(|b| self.value(b).data());
        let mut out = vec![0.0f32; n * o];
        for i in 0..n {
            for j in 0..o {
                let mut acc = 0.0f32;
                for k in 0..f {
                    acc += xd[i * f + k] * wd[j * f + k];
                }
                out[i * o + j] = acc + bd.map_or(0.0, |b| b[j]);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::new(&[n, o], out)?, rg, Op::Linear { x, w, b }))
    }

    /// Drops whole channels. Identity in eval mode or at rate 0.
    pub fn spatial_dropout<R: Rng + ?Sized>(&mut self, x: NodeId, rate: f32, mode: Mode, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("spatial dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let (n, c, l) = self.ncl(x, "input")?;
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f32> = (0..n * c)
            .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; xd.len()];
        for (row, s) in scale.iter().enumerate() {
            for t in row * l..(row + 1) * l {
                out[t] = xd[t] * s;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c, l], out)?, rg, Op::Dropout { x, scale }))
    }

    /// Elementwise sum or channel concatenation of `[N,C,L]` tensors.
    pub fn merge(&mut self, inputs: &[NodeId], mode: MergeMode) -> Result<NodeId> {
        match mode {
            MergeMode::Sum => self.sum(inputs),
            MergeMode::Concat => {
                for &i in inputs {
                    self.ncl(i, "input")?;
                }
                self.concat(inputs, 1)
            }
        }
    }

    pub fn sum(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = *inputs.first().ok_or_else(|| Error::Usage("sum of zero tensors".into()))?;
        let shape = self.shape(first).to_vec();
        for &i in &inputs[1..] {
            if self.shape(i) != shape.as_slice() {
                return Err(Error::dim("shape", format!("sum operands {shape:?} vs {:?}", self.shape(i))));
            }
        }
        let mut out = self.value(first).data().to_vec();
        for &i in &inputs[1..] {
            out.iter_mut().zip(self.value(i).data()).for_each(|(a, b)| *a += b);
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            rg,
            Op::Sum {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = *inputs.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("axis", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &i in inputs {
            let s = self.shape(i);
            if s.len() != base.len() || s.iter().enumerate().any(|(a, &d)| a != axis && d != base[a]) {
                return Err(Error::dim(
                    format!("{axis}"),
                    format!("concat operands {base:?} vs {s:?} differ off the concat axis"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in inputs {
                let a = self.shape(i)[axis];
                out.extend_from_slice(&self.value(i).data()[o * a * inner..(o + 1) * a * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// `x[N,C,L] * gate[N,C]` broadcast over L.
    pub fn channel_scale(&mut self, x: NodeId, gate: NodeId) -> Result<NodeId> {
        let (n, c, l) = self.ncl(x, "input")?;
        if self.shape(gate) != [n, c] {
            return Err(Error::dim("gate", format!("expected [{n},{c}], got {:?}", self.shape(gate))));
        }
        let (xd, gd) = (self.value(x).data(), self.value(gate).data());
        let mut out = vec![0.0f32; xd.len()];
        for row in 0..n * c {
            for t in row * l..(row + 1) * l {
                out[t] = xd[t] * gd[row];
            }
        }
        let rg = self.rg(&[x, gate]);
        Ok(self.push(Tensor::new(&[n, c, l], out)?, rg, Op::ChannelScale { x, gate }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Reshape { x }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let w = vec![1.0; self.value(x).numel()];
        self.weighted_sum(x, w)
    }

    /// Scalar `sum(x * weights)` with constant weights.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f32>) -> Result<NodeId> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::dim("weights", "length differs from input".to_string()));
        }
        let s = self.value(x).data().iter().zip(&weights).map(|(a, b)| a * b).sum::<f32>();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), rg, Op::WeightedSum { x, weights }))
    }

    /// Mean binary cross-entropy over `scores[N]` against 0/1 labels.
    pub fn bce_loss(&mut self, scores: NodeId, labels: &[f32]) -> Result<NodeId> {
        let s = self.value(scores);
        if s.shape().len() != 1 || s.numel() != labels.len() {
            return Err(Error::dim(
                "scores",
                format!("scores {:?} vs {} labels", s.shape(), labels.len()),
            ));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Data(format!("label {bad} outside {{0, 1}}")));
        }
        let n = labels.len() as f32;
        let loss = s
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f32>()
            / n;
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::Bce {
                s: scores,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar. Gradients are added into every tracked
    /// node's buffer; the graph cannot be differentiated twice.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Usage("backward called twice on the same graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0].grad, &[1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else { continue };
            let contributions = self.input_grads(i, &gout)?;
            for (id, g) in contributions {
                if self.nodes[id.0].requires_grad {
                    accumulate(&mut self.nodes[id.0].grad, &g);
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, gout: &[f32]) -> Result<Vec<(NodeId, Vec<f32>)>> {
        let node = &self.nodes[i];
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let g = *geom;
                let n = self.shape(*x)[0];
                let (xd, wd) = (val(*x), val(*w));
                let (in_sz, out_sz) = (g.cin * g.len, g.cout * g.lout);
                let parts = self.exec.map(n, |s| {
                    kernels::conv_backward(
                        &xd[s * in_sz..(s + 1) * in_sz],
                        wd,
                        &gout[s * out_sz..(s + 1) * out_sz],
                        &g,
                    )
                });
                let mut dx = Vec::with_capacity(n * in_sz);
                let mut dw = vec![0.0f32; wd.len()];
                for (pdx, pdw) in parts {
                    dx.extend_from_slice(&pdx);
                    dw.iter_mut().zip(&pdw).for_each(|(a, b)| *a += b);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0f32; g.cout];
                    for s in 0..n {
                        for (co, d) in db.iter_mut().enumerate() {
                            let o = s * out_sz + co * g.lout;
                            *d += gout[o..o + g.lout].iter().sum::<f32>();
                        }
                    }
                    out.push((*b, db));
                }
                out.push((*x, dx));
                out.push((*w, dw));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, l) = self.ncl(*x, "input")?;
                let g = val(*gamma);
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for s in 0..n {
                    for ch in 0..c {
                        let o = (s * c + ch) * l;
                        for t in o..o + l {
                            dgamma[ch] += gout[t] * xhat[t];
                            dbeta[ch] += gout[t];
                        }
                    }
                }
                if needs(*x) {
                    let mut dx = vec![0.0f32; gout.len()];
                    let m = (n * l) as f32;
                    for ch in 0..c {
                        let k = g[ch] * inv_std[ch];
                        for s in 0..n {
                            let o = (s * c + ch) * l;
                            for t in o..o + l {
                                dx[t] = if *train {
                                    k / m * (m * gout[t] - dbeta[ch] - xhat[t] * dgamma[ch])
                                } else {
                                    k * gout[t]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Act { x, kind } => {
                let y = node.value.data();
                let dx = match kind {
                    Activation::Relu => val(*x)
                        .iter()
                        .zip(gout)
                        .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => y.iter().zip(gout).map(|(&s, &g)| g * s * (1.0 - s)).collect(),
                    Activation::SoftmaxLastDim => {
                        let d = *node.value.shape().last().expect("shape");
                        let mut dx = vec![0.0f32; y.len()];
                        for ((yr, gr), dr) in y.chunks(d).zip(gout.chunks(d)).zip(dx.chunks_mut(d)) {
                            let dotp: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                dr[j] = yr[j] * (gr[j] - dotp);
                            }
                        }
                        dx
                    }
                };
                out.push((*x, dx));
            }
            Op::Pool { x, kind, argmax } => {
                let xs = self.value(*x);
                let mut dx = vec![0.0f32; xs.numel()];
                match kind {
                    PoolKind::MaxWindow { .. } | PoolKind::GlobalMax => {
                        for (&a, &g) in argmax.iter().zip(gout) {
                            dx[a] += g;
                        }
                    }
                    PoolKind::GlobalAvg => {
                        let l = xs.shape()[2];
                        for (row, &g) in gout.iter().enumerate() {
                            dx[row * l..(row + 1) * l].iter_mut().for_each(|d| *d = g / l as f32);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (n, f) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                let (xd, wd) = (val(*x), val(*w));
                if needs(*x) {
                    let mut dx = vec![0.0f32; n * f];
                    for i in 0..n {
                        for j in 0..o {
                            let g = gout[i * o + j];
                            for k in 0..f {
                                dx[i * f + k] += g * wd[j * f + k];
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                let mut dw = vec![0.0f32; o * f];
                for i in 0..n {
                    for j in 0..o {
                        let g = gout[i * o + j];
                        for k in 0..f {
                            dw[j * f + k] += g * xd[i * f + k];
                        }
                    }
                }
                out.push((*w, dw));
                if let Some(b) = b {
                    let mut db = vec![0.0f32; o];
                    for i in 0..n {
                        for j in 0..o {
                            db[j] += gout[i * o + j];
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Dropout { x, scale } => {
                let l = node.value.shape()[2];
                let dx = gout.iter().enumerate().map(|(t, &g)| g * scale[t / l]).collect();
                out.push((*x, dx));
            }
            Op::Sum { inputs } => {
                for &i in inputs {
                    out.push((i, gout.to_vec()));
                }
            }
            Op::Concat { inputs, axis } => {
                let base = node.value.shape();
                let outer: usize = base[..*axis].iter().product();
                let inner: usize = base[axis + 1..].iter().product();
                let total = base[*axis];
                let mut offset = 0;
                for &i in inputs {
                    let a = self.shape(i)[*axis];
                    let mut d = Vec::with_capacity(outer * a * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        d.extend_from_slice(&gout[start..start + a * inner]);
                    }
                    offset += a;
                    out.push((i, d));
                }
            }
            Op::ChannelScale { x, gate } => {
                let l = node.value.shape()[2];
                let (xd, gd) = (val(*x), val(*gate));
                let dx = gout.iter().enumerate().map(|(t, &g)| g * gd[t / l]).collect();
                let dg = (0..gd.len())
                    .map(|row| {
                        (row * l..(row + 1) * l).map(|t| gout[t] * xd[t]).sum::<f32>()
                    })
                    .collect();
                out.push((*x, dx));
                out.push((*gate, dg));
            }
            Op::Reshape { x } => out.push((*x, gout.to_vec())),
            Op::WeightedSum { x, weights } => {
                out.push((*x, weights.iter().map(|w| w * gout[0]).collect()));
            }
            Op::Bce { s, labels } => {
                let n = labels.len() as f32;
                // Gradient of the clamped loss, passed straight through the clamp.
                let dx = val(*s)
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        gout[0] * (-y / p + (1.0 - y) / (1.0 - p)) / n
                    })
                    .collect();
                out.push((*s, dx));
            }
        }
        Ok(out)
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, g: &[f32]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_and_difference_kernels() {
        let mut g = Graph::new(ExecMode::Sequential);
        let x = g.constant(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let w = g.constant(t(&[1, 1, 1], &[1.0]));
        let y = g.conv1d(x, w, None, ConvSpec::new(1, 0, 1)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

        let w = g.constant(t(&[1, 1, 3], &[1.0, 0.0, -1.0]));
        let y = g.conv1d(x, w, None, ConvSpec::new(1, 0, 1)).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert_eq!(g.value(y).data(), &[-2.0]);
    }

    #[test]
    fn depthwise_unit_kernels_are_identity() {
        let mut g = Graph::new(ExecMode::Sequential);
        let data = [1.0, -2.0, 3.0, 4.0, 5.0, -6.0];
        let x = g.constant(t(&[1, 2, 3], &data));
        let w = g.constant(t(&[2, 1, 1], &[1.0, 1.0]));
        let y = g.conv1d(x, w, None, ConvSpec::new(1, 0, 2)).unwrap();
        assert_eq!(g.value(y).data(), &data);
    }

    #[test]
    fn conv_errors() {
        let mut g = Graph::new(ExecMode::Sequential);
        let x = g.constant(Tensor::zeros(&[1, 3, 4]));
        let w = g.constant(Tensor::zeros(&[2, 3, 2]));
        match g.conv1d(x, w, None, ConvSpec::new(1, 0, 2)) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, "channels"),
            other => panic!("{other:?}"),
        }
        let w = g.constant(Tensor::zeros(&[2, 3, 9]));
        assert!(matches!(
            g.conv1d(x, w, None, ConvSpec::new(1, 0, 1)),
            Err(Error::DegenerateLength(_))
        ));
        let w = g.constant(Tensor::zeros(&[2, 2, 1]));
        assert!(matches!(g.conv1d(x, w, None, ConvSpec::new(1, 0, 1)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_output_length_formula() {
        let mut g = Graph::new(ExecMode::Sequential);
        let x = g.constant(Tensor::full(&[2, 1, 101], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 7], 1.0));
        let y = g.conv1d(x, w, None, ConvSpec::new(3, 2, 1)).unwrap();
        assert_eq!(g.shape(y), &[2, 1, (101 + 4 - 7) / 3 + 1]);
    }

    #[test]
    fn batch_norm_cases() {
        let mut g = Graph::new(ExecMode::Sequential);
        let x = g.constant(t(&[1, 1, 4], &[-1.0, 1.0, -1.0, 1.0]));
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let mut st = BatchNormState::new(1);
        let y = g.batch_norm1d(x, gamma, beta, &mut st, Mode::Train, 0.1, 1e-5).unwrap();
        for (a, b) in g.value(y).data().iter().zip([-1.0, 1.0, -1.0, 1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(st.initialized);

        let gamma0 = g.constant(Tensor::zeros(&[1]));
        let beta3 = g.constant(Tensor::full(&[1], 3.0));
        let y = g.batch_norm1d(x, gamma0, beta3, &mut st, Mode::Train, 0.1, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[3.0; 4]);
    }

    #[test]
    fn batch_norm_eval_without_stats_warns() {
        let mut g = Graph::new(ExecMode::Sequential);
        let x = g.constant(t(&[1, 1, 2], &[2.0, 4.0]));
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let mut st = BatchNormState::new(1);
        let y = g.batch_norm1d(x, gamma, beta, &mut st, Mode::Eval, 0.1, 1e-5).unwrap();
        assert_eq!(g.warnings().len(), 1);
        assert!((g.value(y).data()[1] - 4.0).abs() < 1e-3);
        assert!(!st.initialized);
    }

    #[test]
    fn activations() {
        let mut g = Graph::new(ExecMode::Sequential);
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.constant(t(&[1], &[0.0]));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        let a = g.constant(t(&[1, 3], &[0.7, 0.7, 0.7]));
        let sm = g.activation(a, Activation::SoftmaxLastDim).unwrap();
        for v in g.value(sm).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let nan = g.constant(t(&[1], &[f32::NAN]));
        let s = g.sigmoid(nan).unwrap();
        assert!(g.value(s).data()[0].is_nan());
    }

    #[test]
    fn pools() {
        let mut g = Graph::new(ExecMode::Sequential);
        let x = g.constant(t(&[1, 1, 3], &[1.0, 5.0, 3.0]));
        let m = g.pool(x, PoolKind::GlobalMax).unwrap();
        assert_eq!(g.value(m).data(), &[5.0]);
        assert_eq!(g.shape(m), &[1, 1, 1]);
        let a = g.pool(x, PoolKind::GlobalAvg).unwrap();
        assert_eq!(g.value(a).data(), &[3.0]);
        let x = g.constant(t(&[1, 1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.pool(x, PoolKind::MaxWindow { kernel: 2, stride: 2 }).unwrap();
        assert_eq!(g.value(w).data(), &[2.0, 4.0]);
        assert!(matches!(
            g.pool(x, PoolKind::MaxWindow { kernel: 0, stride: 1 }),
            Err(Error::DegenerateLength(_))
        ));
        assert!(matches!(
            g.pool(x, PoolKind::MaxWindow { kernel: 5, stride: 1 }),
            Err(Error::DegenerateLength(_))
        ));
    }

    #[test]
    fn max_pool_ties_route_to_first_index() {
        let mut g = Graph::new(ExecMode::Sequential);
        let x = g.param(t(&[1, 1, 4], &[2.0, 2.0, 1.0, 1.0]));
        let p = g.pool(x, PoolKind::MaxWindow { kernel: 2, stride: 2 }).unwrap();
        let s = g.sum_all(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn linear_cases() {
        let mut g = Graph::new(ExecMode::Sequential);
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[1, 2], &[3.0, 4.0]));
        let b = g.constant(t(&[1], &[5.0]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[16.0]);
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = g.constant(Tensor::zeros(&[2]));
        let y = g.linear(x, eye, Some(zb)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
        let zw = g.constant(Tensor::zeros(&[3, 2]));
        let y = g.linear(x, zw, None).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 3]);
        let bad = g.constant(Tensor::zeros(&[3, 3]));
        assert!(g.linear(x, bad, None).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::new(ExecMode::Sequential);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = g.constant(Tensor::full(&[2, 3, 4], 1.5));
        assert_eq!(g.spatial_dropout(x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(g.spatial_dropout(x, 0.9, Mode::Eval, &mut rng).unwrap(), x);
        assert!(matches!(g.spatial_dropout(x, 1.0, Mode::Train, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn merge_cases() {
        let mut g = Graph::new(ExecMode::Sequential);
        let a = g.constant(t(&[1, 1, 2], &[1.0, 2.0]));
        let z = g.constant(Tensor::zeros(&[1, 1, 2]));
        let s = g.merge(&[a, z], MergeMode::Sum).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 2.0]);
        let p = g.constant(Tensor::full(&[2, 2, 5], 1.0));
        let q = g.constant(Tensor::full(&[2, 3, 5], 2.0));
        let c = g.merge(&[p, q], MergeMode::Concat).unwrap();
        assert_eq!(g.shape(c), &[2, 5, 5]);
        assert_eq!(g.value(c).data()[..10], [1.0; 10]);
        assert_eq!(g.value(c).data()[10..25], [2.0; 15]);
        assert!(g.merge(&[p, q], MergeMode::Sum).is_err());
        let r = g.constant(Tensor::full(&[2, 3, 4], 2.0));
        assert!(g.merge(&[p, r], MergeMode::Concat).is_err());
    }

    #[test]
    fn bce_cases() {
        let mut g = Graph::new(ExecMode::Sequential);
        let s = g.constant(t(&[1], &[0.5]));
        let l = g.bce_loss(s, &[1.0]).unwrap();
        assert!((g.value(l).data()[0] - std::f32::consts::LN_2).abs() < 1e-6);
        let s = g.constant(t(&[1], &[1.0]));
        let l = g.bce_loss(s, &[1.0]).unwrap();
        let v = g.value(l).data()[0];
        assert!(v.is_finite() && v > 0.0 && v < 2e-7);
        assert!(matches!(g.bce_loss(s, &[0.5]), Err(Error::Data(_))));
    }

    #[test]
    fn backward_basics() {
        let mut g = Graph::new(ExecMode::Sequential);
        let x = g.param(t(&[3], &[1.0, -2.0, 0.5]));
        let y = g.sum_all(x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));

        let mut g = Graph::new(ExecMode::Sequential);
        let x = g.param(t(&[1], &[0.0]));
        let s = g.sigmoid(x).unwrap();
        let y = g.sum_all(s).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn sum_backward_distributes_unchanged() {
        let mut g = Graph::new(ExecMode::Sequential);
        let xs: Vec<NodeId> = (0..3).map(|i| g.param(Tensor::full(&[1, 2, 2], i as f32))).collect();
        let s = g.merge(&xs, MergeMode::Sum).unwrap();
        let w = vec![0.5, -1.0, 2.0, 3.0];
        let y = g.weighted_sum(s, w.clone()).unwrap();
        g.backward(y).unwrap();
        for x in xs {
            assert_eq!(g.grad(x).unwrap(), w.as_slice());
        }
    }

    #[test]
    fn shared_input_gradients_accumulate() {
        let mut g = Graph::new(ExecMode::Sequential);
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let s = g.sum(&[x, x]).unwrap();
        let y = g.sum_all(s).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }
}
