//! The anti-spoofing network: convolutional stem, five stages of aggregated
//! residual blocks with squeeze-and-excitation, and a sigmoid head.
//!
//! Parameter names are stable and used by checkpoints:
//!
//! | prefix | tensors |
//! |---|---|
//! | `stem.{i}.bn` | `gamma`, `beta` (pre-activation norm of layer `i`) |
//! | `stem.{i}.conv` | `weight` `[c_i, c_{i-1}, k_i]` |
//! | `stage{s}.block{b}.bn` | `gamma`, `beta` |
//! | `stage{s}.block{b}.branch{j}` | `reduce.weight`, `bn1.*`, `transform.weight`, `bn2.*`, `expand.weight` |
//! | `stage{s}.block{b}.se` | `fc1.weight`, `fc1.bias`, `fc2.weight`, `fc2.bias` |
//! | `stage{s}.block{b}.proj` | `weight` (only when the shape changes) |
//! | `head` | `bn.*`, `fc1.weight`, `fc1.bias`, `fc2.weight`, `fc2.bias` |

mod checkpoint;
mod net;
mod store;

pub use checkpoint::{
    checkpoint_len, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CheckpointMeta, FORMAT_VERSION,
};
pub use net::{predict, se_gate, Block, BlockSpec, Branch, Model, SeWeights};
pub use store::{BnId, ParamId, ParamStore, Session};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, MergeMode};

/// How a block's branches are executed. Both forms compute the same function
/// from the same per-branch parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockForm {
    /// One convolution chain per branch, merged afterwards.
    #[default]
    Branches,
    /// Branch weights concatenated into grouped convolutions.
    Grouped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemActivation {
    #[default]
    Relu,
    /// Softmax over the time axis in place of ReLU.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StemConfig {
    pub filters: [usize; 3],
    pub kernels: [usize; 3],
    pub strides: [usize; 3],
    pub activation: StemActivation,
    pub pool_kernel: usize,
    pub pool_stride: usize,
}

impl Default for StemConfig {
    fn default() -> Self {
        StemConfig {
            filters: [64, 128, 256],
            kernels: [196, 144, 100],
            strides: [16, 8, 2],
            activation: StemActivation::Relu,
            pool_kernel: 2,
            pool_stride: 2,
        }
    }
}

/// Full architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsaConfig {
    pub cardinality: usize,
    pub bottleneck_width: usize,
    /// 18, 34, 50 or 101; selects blocks per stage unless overridden.
    pub depth: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks_per_stage: Option<[usize; 5]>,
    /// Per-branch base widths; stage width is `cardinality * stage_base[k]`.
    pub stage_base: [usize; 5],
    /// Divides the stem filters and stage bases (reduced models).
    pub width_divisor: usize,
    pub use_se: bool,
    pub se_reduction: usize,
    pub use_skip: bool,
    pub dropout: f32,
    pub aggregation: MergeMode,
    pub form: BlockForm,
    pub head_hidden: usize,
    pub input_len: usize,
    pub bn_momentum: f32,
    pub bn_eps: f32,
    pub stem: StemConfig,
}

impl Default for PsaConfig {
    fn default() -> Self {
        PsaConfig {
            cardinality: 4,
            bottleneck_width: 64,
            depth: 18,
            blocks_per_stage: None,
            stage_base: [32, 64, 128, 256, 512],
            width_divisor: 1,
            use_se: true,
            se_reduction: 16,
            use_skip: true,
            dropout: 0.2,
            aggregation: MergeMode::Sum,
            form: BlockForm::Branches,
            head_hidden: 1000,
            input_len: 64_000,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            stem: StemConfig::default(),
        }
    }
}

/// Blocks per stage for a depth preset (3 stem convs + 2 per block + 1 fc;
/// 101 keeps the customary 48-block split).
pub fn depth_blocks(depth: usize) -> Result<[usize; 5]> {
    match depth {
        18 => Ok([1, 1, 2, 2, 1]),
        34 => Ok([2, 3, 4, 4, 2]),
        50 => Ok([2, 4, 8, 6, 3]),
        101 => Ok([3, 6, 24, 12, 3]),
        d => Err(Error::Config(format!("depth preset {d} not in {{18, 34, 50, 101}}"))),
    }
}

impl PsaConfig {
    /// Preset `C x d` at the default depth.
    pub fn preset(cardinality: usize, bottleneck_width: usize) -> Self {
        PsaConfig {
            cardinality,
            bottleneck_width,
            ..Default::default()
        }
    }

    /// `C=4, d=8`, all widths divided by 4.
    pub fn reduced() -> Self {
        PsaConfig {
            cardinality: 4,
            bottleneck_width: 8,
            width_divisor: 4,
            ..Default::default()
        }
    }

    pub fn label(&self) -> String {
        format!("{}x{}", self.cardinality, self.bottleneck_width)
    }

    pub fn blocks(&self) -> Result<[usize; 5]> {
        match self.blocks_per_stage {
            Some(b) => Ok(b),
            None => depth_blocks(self.depth),
        }
    }

    pub fn stem_filters(&self) -> Result<[usize; 3]> {
        let mut f = [0; 3];
        for (i, &c) in self.stem.filters.iter().enumerate() {
            if c % self.width_divisor != 0 || c < self.width_divisor {
                return Err(Error::Config(format!(
                    "stem filter {c} not divisible by width_divisor {}",
                    self.width_divisor
                )));
            }
            f[i] = c / self.width_divisor;
        }
        Ok(f)
    }

    /// Output channels of stage `k`.
    pub fn stage_width(&self, k: usize) -> Result<usize> {
        let b = self.stage_base[k];
        if b % self.width_divisor != 0 || b < self.width_divisor {
            return Err(Error::Config(format!(
                "stage base {b} not divisible by width_divisor {}",
                self.width_divisor
            )));
        }
        Ok(self.cardinality * b / self.width_divisor)
    }

    /// Internal width of each branch in stage `k`: `d * 2^k / 2`.
    pub fn branch_width(&self, k: usize) -> Result<usize> {
        let b = self.bottleneck_width * (1 << k) / 2;
        if b == 0 {
            return Err(Error::Config(format!(
                "bottleneck width {} gives an empty branch in stage {k}",
                self.bottleneck_width
            )));
        }
        Ok(b)
    }

    /// Checks every constraint and returns the resolved shape plan.
    pub fn plan(&self) -> Result<Plan> {
        Plan::new(self)
    }
}

/// One pre-activation stem layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StemLayerPlan {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub len_in: usize,
    pub len_out: usize,
}

/// Resolved shapes of one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockPlan {
    pub cin: usize,
    pub width: usize,
    pub bottleneck: usize,
    /// Output channels of one branch's expand conv (`width`, or
    /// `width / C` under concatenation).
    pub branch_out: usize,
    pub stride: usize,
    pub len_in: usize,
    pub len_out: usize,
    pub projection: bool,
    pub se_hidden: Option<usize>,
}

/// Shapes of every layer, derived once from a config. The builder and the
/// cost counters both read this.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub input_len: usize,
    pub stem: Vec<StemLayerPlan>,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub pool_len: usize,
    pub stages: Vec<Vec<BlockPlan>>,
    pub head_channels: usize,
    pub head_len: usize,
    pub head_hidden: usize,
}

impl Plan {
    fn new(c: &PsaConfig) -> Result<Plan> {
        if c.cardinality == 0 || c.bottleneck_width == 0 || c.width_divisor == 0 {
            return Err(Error::Config("cardinality, bottleneck width and width_divisor must be >= 1".into()));
        }
        if c.use_se && c.se_reduction == 0 {
            return Err(Error::Config("se_reduction must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&c.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", c.dropout)));
        }
        if c.head_hidden == 0 || c.input_len == 0 {
            return Err(Error::Config("head_hidden and input_len must be >= 1".into()));
        }
        let blocks = c.blocks()?;
        if blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        let filters = c.stem_filters()?;
        let mut len = c.input_len;
        let mut cin = 1;
        let mut stem = Vec::with_capacity(3);
        for i in 0..3 {
            let (k, s) = (c.stem.kernels[i], c.stem.strides[i]);
            let padding = k.saturating_sub(1) / 2;
            let out = ConvSpec::new(s, padding, 1)
                .out_len(len, k)
                .map_err(|e| Error::Config(format!("stem layer {i}: {e}")))?;
            stem.push(StemLayerPlan {
                cin,
                cout: filters[i],
                kernel: k,
                stride: s,
                padding,
                len_in: len,
                len_out: out,
            });
            cin = filters[i];
            len = out;
        }
        let pool_len = ConvSpec::new(c.stem.pool_stride, 0, 1)
            .out_len(len, c.stem.pool_kernel)
            .map_err(|e| Error::Config(format!("stem pool: {e}")))?;
        len = pool_len;
        let mut stages = Vec::with_capacity(5);
        for (k, &nb) in blocks.iter().enumerate() {
            let width = c.stage_width(k)?;
            let bottleneck = c.branch_width(k)?;
            let branch_out = match c.aggregation {
                MergeMode::Sum => width,
                MergeMode::Concat => {
                    if width % c.cardinality != 0 {
                        return Err(Error::Config(format!(
                            "concat aggregation needs width {width} divisible by cardinality {}",
                            c.cardinality
                        )));
                    }
                    width / c.cardinality
                }
            };
            let se_hidden = if c.use_se {
                if width % c.se_reduction != 0 {
                    return Err(Error::Config(format!(
                        "stage {k} width {width} not divisible by se_reduction {}",
                        c.se_reduction
                    )));
                }
                Some(width / c.se_reduction)
            } else {
                None
            };
            let mut stage = Vec::with_capacity(nb);
            for b in 0..nb {
                let stride = if b == 0 { 2 } else { 1 };
                let len_out = (len - 1) / stride + 1;
                stage.push(BlockPlan {
                    cin,
                    width,
                    bottleneck,
                    branch_out,
                    stride,
                    len_in: len,
                    len_out,
                    projection: c.use_skip && (cin != width || stride != 1),
                    se_hidden,
                });
                cin = width;
                len = len_out;
            }
            stages.push(stage);
        }
        Ok(Plan {
            input_len: c.input_len,
            stem,
            pool_kernel: c.stem.pool_kernel,
            pool_stride: c.stem.pool_stride,
            pool_len,
            stages,
            head_channels: cin,
            head_len: len,
            head_hidden: c.head_hidden,
        })
    }

    pub fn stem_channels(&self) -> usize {
        self.stem[2].cout
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockPlan> {
        self.stages.iter().flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_len(l: usize, k: usize, s: usize, p: usize) -> usize {
        (l + 2 * p - k) / s + 1
    }

    #[test]
    fn default_plan_lengths() {
        let p = PsaConfig::default().plan().unwrap();
        let mut l = 64000;
        for (k, s) in [(196, 16), (144, 8), (100, 2)] {
            l = conv_len(l, k, s, (k - 1) / 2);
        }
        assert_eq!(p.stem[2].len_out, l);
        assert_eq!(p.pool_len, l / 2);
        let lens: Vec<usize> = p.stages.iter().map(|s| s.last().unwrap().len_out).collect();
        assert_eq!(lens, vec![63, 32, 16, 8, 4]);
        let widths: Vec<usize> = p.stages.iter().map(|s| s[0].width).collect();
        assert_eq!(widths, vec![128, 256, 512, 1024, 2048]);
    }

    #[test]
    fn every_stage_halves_length_once() {
        let p = PsaConfig::preset(8, 32).plan().unwrap();
        for stage in &p.stages {
            assert_eq!(stage[0].len_out, (stage[0].len_in + 1) / 2);
            assert!(stage[1..].iter().all(|b| b.len_in == b.len_out));
        }
    }

    #[test]
    fn depth_presets() {
        for d in [18, 34, 50, 101] {
            let b = depth_blocks(d).unwrap();
            assert!(b.iter().all(|&n| n >= 1));
        }
        assert_eq!(depth_blocks(18).unwrap().iter().sum::<usize>() * 2 + 4, 18);
        assert!(depth_blocks(20).is_err());
    }

    #[test]
    fn reduced_widths() {
        let c = PsaConfig::reduced();
        assert_eq!(c.stem_filters().unwrap(), [16, 32, 64]);
        assert_eq!(c.stage_width(0).unwrap(), 32);
        assert_eq!(c.branch_width(0).unwrap(), 4);
        assert!(c.plan().is_ok());
    }

    #[test]
    fn constraint_violations_are_named() {
        let c = PsaConfig {
            cardinality: 1,
            width_divisor: 8,
            ..Default::default()
        };
        let e = c.plan().unwrap_err().to_string();
        assert!(e.contains("se_reduction"), "{e}");
        let c = PsaConfig {
            bottleneck_width: 1,
            ..Default::default()
        };
        assert!(c.plan().unwrap_err().to_string().contains("bottleneck"));
        let c = PsaConfig {
            width_divisor: 3,
            ..Default::default()
        };
        assert!(matches!(c.plan(), Err(Error::Config(_))));
    }
}
