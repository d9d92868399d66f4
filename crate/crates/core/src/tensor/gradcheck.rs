//! Central finite-difference gradient checking for every differentiable op.
//!
//! Each registered op is wrapped as `loss = sum(op(inputs) * r)` with a fixed
//! random projection `r`. Analytic input gradients from [`Graph::backward`]
//! are compared element by element to `(L(x + eps) - L(x - eps)) / (2 eps)`,
//! where `L` is accumulated in `f64` from the op's `f32` output.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Activation, BatchNormState, ConvSpec, Graph, MergeMode, Mode, NodeId, PoolKind, Tensor};
use crate::error::{Error, Result};
use crate::exec::ExecMode;

pub const FD_EPS: f64 = 1e-3;

/// Ops accepted by [`grad_check`].
pub const OPS: &[&str] = &[
    "conv1d",
    "conv1d_grouped",
    "batch_norm1d",
    "batch_norm1d_eval",
    "relu",
    "sigmoid",
    "softmax",
    "max_pool",
    "global_max",
    "global_avg",
    "linear",
    "spatial_dropout",
    "spatial_dropout_eval",
    "merge_sum",
    "merge_concat",
    "channel_scale",
    "reshape",
    "bce_loss",
];

/// `|a - n| / max(|a|, |n|, 1)`: relative error with a unit floor so that
/// near-zero gradients are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

struct Case {
    inputs: Vec<Tensor>,
    /// Inputs that are differentiated (others are held as constants).
    diff: Vec<bool>,
    labels: Vec<f32>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).expect("shape")
}

/// Values away from the relu kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = uniform(rng, shape);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 } else { 0.05 } + *v;
        }
    }
    t
}

/// Distinct values on a grid of spacing 2/n so max selections never flip.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n).map(|i| -1.0 + 2.0 * i as f32 / n as f32).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("shape")
}

fn ncl(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c, l] => Ok((n, c, l)),
        _ => Err(Error::dim("input", format!("op expects [N,C,L], got {shape:?}"))),
    }
}

fn make_case(op: &str, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Case> {
    let case = |inputs: Vec<Tensor>| Case {
        diff: vec![true; inputs.len()],
        inputs,
        labels: Vec::new(),
    };
    Ok(match op {
        "conv1d" => {
            let (_, c, _) = ncl(shape)?;
            case(vec![uniform(rng, shape), uniform(rng, &[3, c, 3]), uniform(rng, &[3])])
        }
        "conv1d_grouped" => {
            let (_, c, _) = ncl(shape)?;
            if c % 2 != 0 {
                return Err(Error::dim("channels", "grouped check needs an even channel count"));
            }
            case(vec![uniform(rng, shape), uniform(rng, &[4, c / 2, 3])])
        }
        "batch_norm1d" | "batch_norm1d_eval" => {
            let (_, c, _) = ncl(shape)?;
            case(vec![uniform(rng, shape), uniform(rng, &[c]), uniform(rng, &[c])])
        }
        "relu" => case(vec![away_from_zero(rng, shape)]),
        "sigmoid" | "softmax" | "global_avg" | "spatial_dropout" | "spatial_dropout_eval" | "reshape" => {
            case(vec![uniform(rng, shape)])
        }
        "max_pool" | "global_max" => case(vec![distinct(rng, shape)]),
        "linear" => {
            let f = *shape.last().ok_or_else(|| Error::dim("input", "empty shape"))?;
            case(vec![uniform(rng, shape), uniform(rng, &[3, f]), uniform(rng, &[3])])
        }
        "merge_sum" => case(vec![uniform(rng, shape), uniform(rng, shape), uniform(rng, shape)]),
        "merge_concat" => {
            let (n, c, l) = ncl(shape)?;
            case(vec![uniform(rng, shape), uniform(rng, &[n, c + 1, l])])
        }
        "channel_scale" => {
            let (n, c, _) = ncl(shape)?;
            case(vec![uniform(rng, shape), uniform(rng, &[n, c])])
        }
        "bce_loss" => {
            let n: usize = shape.iter().product();
            let s = Tensor::new(&[n], (0..n).map(|_| rng.gen_range(0.1f32..0.9)).collect())?;
            let labels = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
            Case {
                inputs: vec![s],
                diff: vec![true],
                labels,
            }
        }
        other => return Err(Error::Usage(format!("grad_check: unknown op '{other}'"))),
    })
}

fn apply(op: &str, g: &mut Graph, ids: &[NodeId], case: &Case, seed: u64) -> Result<NodeId> {
    match op {
        "conv1d" => g.conv1d(ids[0], ids[1], Some(ids[2]), ConvSpec::new(2, 1, 1)),
        "conv1d_grouped" => g.conv1d(ids[0], ids[1], None, ConvSpec::new(1, 1, 2)),
        "batch_norm1d" | "batch_norm1d_eval" => {
            let c = g.shape(ids[0])[1];
            let mut st = BatchNormState::new(c);
            let mode = if op == "batch_norm1d" {
                Mode::Train
            } else {
                st.running_mean = (0..c).map(|i| 0.1 * i as f32).collect();
                st.running_var = (0..c).map(|i| 0.5 + 0.25 * i as f32).collect();
                st.initialized = true;
                Mode::Eval
            };
            g.batch_norm1d(ids[0], ids[1], ids[2], &mut st, mode, 0.1, 1e-5)
        }
        "relu" => g.activation(ids[0], Activation::Relu),
        "sigmoid" => g.activation(ids[0], Activation::Sigmoid),
        "softmax" => g.activation(ids[0], Activation::SoftmaxLastDim),
        "max_pool" => g.pool(ids[0], PoolKind::MaxWindow { kernel: 2, stride: 2 }),
        "global_max" => g.pool(ids[0], PoolKind::GlobalMax),
        "global_avg" => g.pool(ids[0], PoolKind::GlobalAvg),
        "linear" => g.linear(ids[0], ids[1], Some(ids[2])),
        "spatial_dropout" | "spatial_dropout_eval" => {
            let mode = if op == "spatial_dropout" { Mode::Train } else { Mode::Eval };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd20f);
            g.spatial_dropout(ids[0], 0.3, mode, &mut rng)
        }
        "merge_sum" => g.merge(ids, MergeMode::Sum),
        "merge_concat" => g.merge(ids, MergeMode::Concat),
        "channel_scale" => g.channel_scale(ids[0], ids[1]),
        "reshape" => {
            let n = g.value(ids[0]).numel();
            g.reshape(ids[0], &[n])
        }
        "bce_loss" => g.bce_loss(ids[0], &case.labels),
        other => Err(Error::Usage(format!("grad_check: unknown op '{other}'"))),
    }
}

fn build(op: &str, inputs: &[Tensor], case: &Case, seed: u64) -> Result<(Graph, Vec<NodeId>, NodeId)> {
    let mut g = Graph::new(ExecMode::Sequential);
    let ids: Vec<NodeId> = inputs
        .iter()
        .zip(&case.diff)
        .map(|(t, &d)| if d { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = apply(op, &mut g, &ids, case, seed)?;
    Ok((g, ids, out))
}

fn projection(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

fn loss_f64(g: &Graph, out: NodeId, r: &[f32]) -> f64 {
    g.value(out).data().iter().zip(r).map(|(&y, &w)| y as f64 * w as f64).sum()
}

/// Maximum relative error between analytic and finite-difference gradients
/// of `op` over every differentiated input element. Deterministic in `seed`.
pub fn grad_check(op: &str, input_shape: &[usize], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = make_case(op, input_shape, &mut rng)?;
    let (mut g, ids, out) = build(op, &case.inputs, &case, seed)?;
    let r = projection(g.value(out).numel(), seed);
    let loss = g.weighted_sum(out, r.clone())?;
    g.backward(loss)?;

    let mut worst = 0.0f64;
    for (k, input) in case.inputs.iter().enumerate() {
        if !case.diff[k] {
            continue;
        }
        let analytic = g.grad(ids[k]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            // Differences are taken over the step actually representable in f32.
            let eval = |delta: f64| -> Result<(f64, f64)> {
                let mut inputs = case.inputs.clone();
                let v = &mut inputs[k].data_mut()[j];
                *v = (*v as f64 + delta) as f32;
                let x = *v as f64;
                let (g2, _, o2) = build(op, &inputs, &case, seed)?;
                Ok((x, loss_f64(&g2, o2, &r)))
            };
            let (xp, lp) = eval(FD_EPS)?;
            let (xm, lm) = eval(-FD_EPS)?;
            let numeric = (lp - lm) / (xp - xm);
            worst = worst.max(relative_error(analytic[j] as f64, numeric));
        }
    }
    Ok(worst)
}

/// Input shape used for each op by the exhaustive gradient suite.
pub fn default_shape(op: &str) -> &'static [usize] {
    match op {
        "linear" => &[2, 4],
        "bce_loss" => &[6],
        "conv1d_grouped" | "merge_concat" => &[2, 2, 6],
        _ => &[2, 3, 8],
    }
}
