use rand::Rng;

use super::store::{BnId, ParamId, ParamStore, Session};
use super::{BlockForm, BlockPlan, Plan, PsaConfig, StemActivation};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::tensor::{Activation, ConvSpec, MergeMode, Mode, NodeId, PoolKind, Tensor};

/// Everything a block needs to know about its shape and behaviour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec {
    pub cin: usize,
    pub width: usize,
    pub bottleneck: usize,
    pub cardinality: usize,
    pub stride: usize,
    pub aggregation: MergeMode,
    pub form: BlockForm,
    pub se_reduction: Option<usize>,
    pub use_skip: bool,
    pub dropout: f32,
}

impl BlockSpec {
    pub fn from_plan(p: &BlockPlan, c: &PsaConfig) -> Self {
        BlockSpec {
            cin: p.cin,
            width: p.width,
            bottleneck: p.bottleneck,
            cardinality: c.cardinality,
            stride: p.stride,
            aggregation: c.aggregation,
            form: c.form,
            se_reduction: c.use_se.then_some(c.se_reduction),
            use_skip: c.use_skip,
            dropout: c.dropout,
        }
    }

    fn branch_out(&self) -> Result<usize> {
        match self.aggregation {
            MergeMode::Sum => Ok(self.width),
            MergeMode::Concat if self.width % self.cardinality == 0 => Ok(self.width / self.cardinality),
            MergeMode::Concat => Err(Error::Config(format!(
                "concat aggregation: width {} not divisible by cardinality {}",
                self.width, self.cardinality
            ))),
        }
    }

    fn has_projection(&self) -> bool {
        self.use_skip && (self.cin != self.width || self.stride != 1)
    }
}

/// Reduce, transform and expand weights of one branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Branch {
    pub reduce: ParamId,
    pub bn1: BnId,
    pub transform: ParamId,
    pub bn2: BnId,
    pub expand: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeWeights {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

/// Aggregated residual block with optional SE gate and shortcut.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub spec: BlockSpec,
    pub bn: BnId,
    pub branches: Vec<Branch>,
    pub se: Option<SeWeights>,
    pub proj: Option<ParamId>,
}

impl Block {
    pub fn build<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, spec: BlockSpec, rng: &mut R) -> Result<Block> {
        if spec.cardinality == 0 || spec.bottleneck == 0 || spec.width == 0 || spec.stride == 0 {
            return Err(Error::Config(format!("{prefix}: block extents must be >= 1")));
        }
        let out = spec.branch_out()?;
        let (b, cin) = (spec.bottleneck, spec.cin);
        let bn = store.add_bn(&format!("{prefix}.bn"), cin)?;
        let mut branches = Vec::with_capacity(spec.cardinality);
        for j in 0..spec.cardinality {
            let p = format!("{prefix}.branch{j}");
            branches.push(Branch {
                reduce: store.add_kaiming(&format!("{p}.reduce.weight"), &[b, cin, 1], cin, rng)?,
                bn1: store.add_bn(&format!("{p}.bn1"), b)?,
                transform: store.add_kaiming(&format!("{p}.transform.weight"), &[b, b, 3], 3 * b, rng)?,
                bn2: store.add_bn(&format!("{p}.bn2"), b)?,
                expand: store.add_kaiming(&format!("{p}.expand.weight"), &[out, b, 1], b, rng)?,
            });
        }
        let se = match spec.se_reduction {
            Some(r) => {
                if r == 0 || spec.width % r != 0 {
                    return Err(Error::Config(format!(
                        "{prefix}: width {} not divisible by se_reduction {r}",
                        spec.width
                    )));
                }
                let (w, h) = (spec.width, spec.width / r);
                Some(SeWeights {
                    fc1_w: store.add_kaiming(&format!("{prefix}.se.fc1.weight"), &[h, w], w, rng)?,
                    fc1_b: store.add_zeros(&format!("{prefix}.se.fc1.bias"), &[h])?,
                    fc2_w: store.add_kaiming(&format!("{prefix}.se.fc2.weight"), &[w, h], h, rng)?,
                    fc2_b: store.add_zeros(&format!("{prefix}.se.fc2.bias"), &[w])?,
                })
            }
            None => None,
        };
        let proj = if spec.has_projection() {
            Some(store.add_kaiming(&format!("{prefix}.proj.weight"), &[spec.width, cin, 1], cin, rng)?)
        } else {
            None
        };
        Ok(Block {
            spec,
            bn,
            branches,
            se,
            proj,
        })
    }

    /// Weights inside the residual transform (everything but the shortcut
    /// and the norm layers).
    pub fn transform_params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self
            .branches
            .iter()
            .flat_map(|b| [b.reduce, b.transform, b.expand])
            .collect();
        if let Some(se) = &self.se {
            v.extend([se.fc1_w, se.fc2_w]);
        }
        v
    }

    /// Pre-activation, branches, aggregation, spatial dropout, SE gate, then
    /// the shortcut sum.
    pub fn forward(&self, s: &mut Session, x: NodeId) -> Result<NodeId> {
        let spec = &self.spec;
        let cin = s.graph.shape(x).get(1).copied();
        if cin != Some(spec.cin) {
            return Err(Error::dim(
                "channels",
                format!("block expects {} input channels, got {:?}", spec.cin, s.graph.shape(x)),
            ));
        }
        let xn = s.batch_norm(x, self.bn)?;
        let a = s.graph.relu(xn)?;
        let t = match spec.form {
            BlockForm::Branches => self.branches_explicit(s, a)?,
            BlockForm::Grouped => self.branches_grouped(s, a)?,
        };
        let t = s.spatial_dropout(t, spec.dropout)?;
        let t = match &self.se {
            Some(se) => se_gate(s, t, se)?,
            None => t,
        };
        if !spec.use_skip {
            return Ok(t);
        }
        let shortcut = match self.proj {
            Some(p) => {
                let w = s.param(p);
                s.graph.conv1d(a, w, None, ConvSpec::new(spec.stride, 0, 1))?
            }
            None => x,
        };
        s.graph.sum(&[t, shortcut])
    }

    fn branches_explicit(&self, s: &mut Session, a: NodeId) -> Result<NodeId> {
        let stride = self.spec.stride;
        let mut outs = Vec::with_capacity(self.branches.len());
        for br in &self.branches {
            let w = s.param(br.reduce);
            let h = s.graph.conv1d(a, w, None, ConvSpec::new(1, 0, 1))?;
            let h = s.batch_norm(h, br.bn1)?;
            let h = s.graph.relu(h)?;
            let w = s.param(br.transform);
            let h = s.graph.conv1d(h, w, None, ConvSpec::new(stride, 1, 1))?;
            let h = s.batch_norm(h, br.bn2)?;
            let h = s.graph.relu(h)?;
            let w = s.param(br.expand);
            outs.push(s.graph.conv1d(h, w, None, ConvSpec::new(1, 0, 1))?);
        }
        s.graph.merge(&outs, self.spec.aggregation)
    }

    /// Same function as [`Block::branches_explicit`] via grouped convolutions
    /// over channel-concatenated branch weights.
    fn branches_grouped(&self, s: &mut Session, a: NodeId) -> Result<NodeId> {
        let c = self.branches.len();
        let cat = |s: &mut Session, ids: Vec<ParamId>, axis: usize| -> Result<NodeId> {
            let nodes: Vec<NodeId> = ids.into_iter().map(|p| s.param(p)).collect();
            if nodes.len() == 1 {
                Ok(nodes[0])
            } else {
                s.graph.concat(&nodes, axis)
            }
        };
        let w = cat(s, self.branches.iter().map(|b| b.reduce).collect(), 0)?;
        let h = s.graph.conv1d(a, w, None, ConvSpec::new(1, 0, 1))?;
        let bn1: Vec<BnId> = self.branches.iter().map(|b| b.bn1).collect();
        let h = s.batch_norm_concat(h, &bn1)?;
        let h = s.graph.relu(h)?;
        let w = cat(s, self.branches.iter().map(|b| b.transform).collect(), 0)?;
        let h = s.graph.conv1d(h, w, None, ConvSpec::new(self.spec.stride, 1, c))?;
        let bn2: Vec<BnId> = self.branches.iter().map(|b| b.bn2).collect();
        let h = s.batch_norm_concat(h, &bn2)?;
        let h = s.graph.relu(h)?;
        let expands: Vec<ParamId> = self.branches.iter().map(|b| b.expand).collect();
        match self.spec.aggregation {
            MergeMode::Sum => {
                let w = cat(s, expands, 1)?;
                s.graph.conv1d(h, w, None, ConvSpec::new(1, 0, 1))
            }
            MergeMode::Concat => {
                let w = cat(s, expands, 0)?;
                s.graph.conv1d(h, w, None, ConvSpec::new(1, 0, c))
            }
        }
    }
}

/// Squeeze (global average) and excite (fc, ReLU, fc, sigmoid), then scale
/// each channel of `x` by its gate.
pub fn se_gate(s: &mut Session, x: NodeId, se: &SeWeights) -> Result<NodeId> {
    let (n, c) = match *s.graph.shape(x) {
        [n, c, _] => (n, c),
        ref sh => return Err(Error::dim("input", format!("se_gate expects [N,C,L], got {sh:?}"))),
    };
    let q = s.graph.pool(x, PoolKind::GlobalAvg)?;
    let q = s.graph.reshape(q, &[n, c])?;
    let (w1, b1, w2, b2) = (s.param(se.fc1_w), s.param(se.fc1_b), s.param(se.fc2_w), s.param(se.fc2_b));
    let h = s.graph.linear(q, w1, Some(b1))?;
    let h = s.graph.relu(h)?;
    let e = s.graph.linear(h, w2, Some(b2))?;
    let gate = s.graph.sigmoid(e)?;
    s.graph.channel_scale(x, gate)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct StemLayer {
    bn: BnId,
    conv: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Head {
    bn: BnId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

/// A built network: config, resolved plan, parameters and layer wiring.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: PsaConfig,
    plan: Plan,
    store: ParamStore,
    stem: Vec<StemLayer>,
    stages: Vec<Vec<Block>>,
    head: Head,
    exec: ExecMode,
}

/// `score > 0.5` is bonafide; a score of exactly 0.5 is classified spoof.
pub fn predict(score: f32) -> bool {
    score > 0.5
}

impl Model {
    /// Builds every layer with Kaiming-initialized weights, zero biases and
    /// unit/zero batch-norm affine parameters.
    pub fn build<R: Rng + ?Sized>(config: &PsaConfig, rng: &mut R) -> Result<Model> {
        let plan = config.plan()?;
        let mut store = ParamStore::new();
        let mut stem = Vec::with_capacity(3);
        for (i, l) in plan.stem.iter().enumerate() {
            stem.push(StemLayer {
                bn: store.add_bn(&format!("stem.{i}.bn"), l.cin)?,
                conv: store.add_kaiming(
                    &format!("stem.{i}.conv.weight"),
                    &[l.cout, l.cin, l.kernel],
                    l.cin * l.kernel,
                    rng,
                )?,
            });
        }
        let mut stages = Vec::with_capacity(plan.stages.len());
        for (k, stage) in plan.stages.iter().enumerate() {
            let mut blocks = Vec::with_capacity(stage.len());
            for (b, bp) in stage.iter().enumerate() {
                let spec = BlockSpec::from_plan(bp, config);
                blocks.push(Block::build(&mut store, &format!("stage{k}.block{b}"), spec, rng)?);
            }
            stages.push(blocks);
        }
        let (w, h) = (plan.head_channels, plan.head_hidden);
        let head = Head {
            bn: store.add_bn("head.bn", w)?,
            fc1_w: store.add_kaiming("head.fc1.weight", &[h, w], w, rng)?,
            fc1_b: store.add_zeros("head.fc1.bias", &[h])?,
            fc2_w: store.add_kaiming("head.fc2.weight", &[1, h], h, rng)?,
            fc2_b: store.add_zeros("head.fc2.bias", &[1])?,
        };
        Ok(Model {
            config: config.clone(),
            plan,
            store,
            stem,
            stages,
            head,
            exec: ExecMode::default(),
        })
    }

    /// Builds with a ChaCha8 generator seeded by `seed`.
    pub fn from_seed(config: &PsaConfig, seed: u64) -> Result<Model> {
        use rand::SeedableRng;
        Model::build(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn config(&self) -> &PsaConfig {
        &self.config
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn stages(&self) -> &[Vec<Block>] {
        &self.stages
    }

    pub fn exec(&self) -> ExecMode {
        self.exec
    }

    pub fn set_exec(&mut self, exec: ExecMode) {
        self.exec = exec;
    }

    /// Name of the first stem convolution weight.
    pub fn stem_conv_weight(&self, i: usize) -> ParamId {
        self.stem[i].conv
    }

    pub fn head_output_weight(&self) -> ParamId {
        self.head.fc2_w
    }

    pub fn session(&self, mode: Mode, track: bool, seed: u64) -> Session<'_> {
        Session::new(&self.store, self.exec, mode, track, seed).with_norm(self.config.bn_momentum, self.config.bn_eps)
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        match *batch.shape() {
            [_, 1, l] if l == self.plan.input_len => {}
            ref s => {
                return Err(Error::dim(
                    "length",
                    format!("expected [N, 1, {}], got {s:?}", self.plan.input_len),
                ))
            }
        }
        if !batch.is_finite() {
            return Err(Error::NonFinite("input".into()));
        }
        Ok(())
    }

    fn finite(s: &Session, x: NodeId, layer: &str) -> Result<()> {
        if s.graph.value(x).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(layer.to_string()))
        }
    }

    /// Three pre-activation conv layers followed by max pooling.
    pub fn stem_forward(&self, s: &mut Session, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, (layer, p)) in self.stem.iter().zip(&self.plan.stem).enumerate() {
            h = s.batch_norm(h, layer.bn)?;
            h = match self.config.stem.activation {
                StemActivation::Relu => s.graph.relu(h)?,
                StemActivation::Softmax => s.graph.activation(h, Activation::SoftmaxLastDim)?,
            };
            let w = s.param(layer.conv);
            h = s.graph.conv1d(h, w, None, ConvSpec::new(p.stride, p.padding, 1))?;
            Self::finite(s, h, &format!("stem.{i}"))?;
        }
        s.graph.pool(
            h,
            PoolKind::MaxWindow {
                kernel: self.plan.pool_kernel,
                stride: self.plan.pool_stride,
            },
        )
    }

    /// Records the whole forward pass and returns the `[N]` score node.
    pub fn forward(&self, s: &mut Session, batch: &Tensor) -> Result<NodeId> {
        self.check_input(batch)?;
        let x = s.input(batch.clone());
        let mut h = self.stem_forward(s, x)?;
        for (k, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                h = block.forward(s, h)?;
                Self::finite(s, h, &format!("stage{k}.block{b}"))?;
            }
        }
        let n = batch.shape()[0];
        let h = s.batch_norm(h, self.head.bn)?;
        let h = s.graph.relu(h)?;
        let h = s.graph.pool(h, PoolKind::GlobalMax)?;
        let h = s.graph.reshape(h, &[n, self.plan.head_channels])?;
        let (w1, b1, w2, b2) = (
            s.param(self.head.fc1_w),
            s.param(self.head.fc1_b),
            s.param(self.head.fc2_w),
            s.param(self.head.fc2_b),
        );
        let h = s.graph.linear(h, w1, Some(b1))?;
        let h = s.graph.relu(h)?;
        Self::finite(s, h, "head.fc1")?;
        let logit = s.graph.linear(h, w2, Some(b2))?;
        let p = s.graph.sigmoid(logit)?;
        let p = s.graph.reshape(p, &[n])?;
        Self::finite(s, p, "head.fc2")?;
        Ok(p)
    }

    /// Scores in (0, 1), higher meaning bonafide. Never mutates the model;
    /// in train mode batch statistics and dropout (seeded by `seed`) apply.
    pub fn forward_scores(&self, batch: &Tensor, mode: Mode, seed: u64) -> Result<Vec<f32>> {
        let mut s = self.session(mode, false, seed);
        let p = self.forward(&mut s, batch)?;
        Ok(s.graph.value(p).data().to_vec())
    }

    /// Train-mode forward, mean BCE, backward. Gradients are added to the
    /// parameters and running statistics are updated. Returns the loss and
    /// the scores.
    pub fn train_step(&mut self, batch: &Tensor, labels: &[f32], seed: u64) -> Result<(f32, Vec<f32>)> {
        let (loss, scores, out) = {
            let mut s = self.session(Mode::Train, true, seed);
            let p = self.forward(&mut s, batch)?;
            let loss = s.graph.bce_loss(p, labels)?;
            s.backward(loss)?;
            let l = s.graph.value(loss).data()[0];
            let scores = s.graph.value(p).data().to_vec();
            (l, scores, s.finish())
        };
        self.store.absorb(out)?;
        Ok((loss, scores))
    }

    /// Mean BCE in eval mode without touching gradients.
    pub fn eval_loss(&self, batch: &Tensor, labels: &[f32]) -> Result<(f32, Vec<f32>)> {
        let mut s = self.session(Mode::Eval, false, 0);
        let p = self.forward(&mut s, batch)?;
        let loss = s.graph.bce_loss(p, labels)?;
        Ok((s.graph.value(loss).data()[0], s.graph.value(p).data().to_vec()))
    }
}
