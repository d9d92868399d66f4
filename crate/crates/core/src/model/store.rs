use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::tensor::init::kaiming_init;
use crate::tensor::{BatchNormState, Graph, Mode, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Affine parameters plus running statistics of one batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnId {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub state: usize,
}

/// Named trainable tensors and batch-norm buffers, in creation order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    bn_names: Vec<String>,
    bn: Vec<BatchNormState>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(t.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Kaiming-initialized weight.
    pub fn add_kaiming<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<ParamId> {
        let t = kaiming_init(Tensor::zeros(shape), fan_in, rng)?;
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    /// Batch norm with gamma = 1, beta = 0 and fresh running statistics.
    pub fn add_bn(&mut self, prefix: &str, channels: usize) -> Result<BnId> {
        let gamma = self.add(&format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0))?;
        let beta = self.add(&format!("{prefix}.beta"), Tensor::zeros(&[channels]))?;
        self.bn_names.push(prefix.to_string());
        self.bn.push(BatchNormState::new(channels));
        Ok(BnId {
            gamma,
            beta,
            state: self.bn.len() - 1,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tensors.iter().map(Tensor::numel).collect()
    }

    pub fn bn_states(&self) -> &[BatchNormState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BatchNormState] {
        &mut self.bn
    }

    pub fn bn_names(&self) -> &[String] {
        &self.bn_names
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Sum of element counts of all trainable tensors.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Adds the gradients and, after a train-mode pass, the updated running
    /// statistics recorded by a finished session.
    pub fn absorb(&mut self, done: SessionOutput) -> Result<()> {
        for (i, g) in done.grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.tensors[i].accumulate_grad(&g)?;
            }
        }
        if let Some(states) = done.states {
            self.bn = states;
        }
        Ok(())
    }
}

/// One forward (and optional backward) pass over a [`ParamStore`]. Batch-norm
/// statistics are updated on a private copy so eval passes never mutate the
/// store.
pub struct Session<'a> {
    store: &'a ParamStore,
    pub graph: Graph,
    nodes: Vec<Option<NodeId>>,
    states: Vec<BatchNormState>,
    mode: Mode,
    track: bool,
    rng: ChaCha8Rng,
    momentum: f32,
    eps: f32,
}

/// What a session hands back to the store.
#[derive(Debug)]
pub struct SessionOutput {
    grads: Vec<Option<Vec<f32>>>,
    states: Option<Vec<BatchNormState>>,
}

impl<'a> Session<'a> {
    /// `track` controls whether parameters enter the graph as differentiable
    /// leaves; `seed` drives spatial dropout.
    pub fn new(store: &'a ParamStore, exec: ExecMode, mode: Mode, track: bool, seed: u64) -> Self {
        Session {
            store,
            graph: Graph::new(exec),
            nodes: vec![None; store.len()],
            states: store.bn.clone(),
            mode,
            track,
            rng: ChaCha8Rng::seed_from_u64(seed),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn with_norm(mut self, momentum: f32, eps: f32) -> Self {
        self.momentum = momentum;
        self.eps = eps;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph node of a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.nodes[id.0] {
            return n;
        }
        let t = self.store.get(id).clone();
        let n = if self.track {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.nodes[id.0] = Some(n);
        n
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.graph.constant(t)
    }

    pub fn batch_norm(&mut self, x: NodeId, bn: BnId) -> Result<NodeId> {
        let (g, b) = (self.param(bn.gamma), self.param(bn.beta));
        self.graph
            .batch_norm1d(x, g, b, &mut self.states[bn.state], self.mode, self.momentum, self.eps)
    }

    /// Batch norm over several layers at once by concatenating their
    /// channels. Equivalent to applying each layer to its channel slice.
    pub fn batch_norm_concat(&mut self, x: NodeId, bns: &[BnId]) -> Result<NodeId> {
        if bns.len() == 1 {
            return self.batch_norm(x, bns[0]);
        }
        let gs: Vec<NodeId> = bns.iter().map(|b| self.param(b.gamma)).collect();
        let bs: Vec<NodeId> = bns.iter().map(|b| self.param(b.beta)).collect();
        let g = self.graph.concat(&gs, 0)?;
        let b = self.graph.concat(&bs, 0)?;
        let mut joint = BatchNormState {
            running_mean: Vec::new(),
            running_var: Vec::new(),
            initialized: bns.iter().all(|b| self.states[b.state].initialized),
        };
        for bn in bns {
            let s = &self.states[bn.state];
            joint.running_mean.extend_from_slice(&s.running_mean);
            joint.running_var.extend_from_slice(&s.running_var);
        }
        let y = self
            .graph
            .batch_norm1d(x, g, b, &mut joint, self.mode, self.momentum, self.eps)?;
        let mut off = 0;
        for bn in bns {
            let s = &mut self.states[bn.state];
            let c = s.running_mean.len();
            s.running_mean.copy_from_slice(&joint.running_mean[off..off + c]);
            s.running_var.copy_from_slice(&joint.running_var[off..off + c]);
            s.initialized = joint.initialized;
            off += c;
        }
        Ok(y)
    }

    /// Channel dropout driven by the session's generator.
    pub fn spatial_dropout(&mut self, x: NodeId, rate: f32) -> Result<NodeId> {
        self.graph.spatial_dropout(x, rate, self.mode, &mut self.rng)
    }

    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.graph.backward(loss)
    }

    /// Gradients of every parameter that entered the graph, and the updated
    /// running statistics when the pass ran in train mode.
    pub fn finish(self) -> SessionOutput {
        let grads = self
            .nodes
            .iter()
            .map(|n| n.and_then(|n| self.graph.grad(n).map(<[f32]>::to_vec)))
            .collect();
        SessionOutput {
            grads,
            states: (self.mode == Mode::Train).then_some(self.states),
        }
    }
}
