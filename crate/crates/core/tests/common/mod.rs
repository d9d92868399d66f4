//! Reference implementations shared by the integration and acceptance tests.
//! Everything here is written directly from the definitions, in f64, without
//! going through the library's graph.
#![allow(dead_code)]

use psanet::exec::ExecMode;
use psanet::model::{Block, BlockForm, BlockSpec, ParamStore, PsaConfig, Session};
use psanet::tensor::{MergeMode, Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_vec(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::new(shape, rand_vec(shape.iter().product(), seed)).unwrap()
}

/// Direct cross-correlation with zero padding, groups = 1.
#[allow(clippy::too_many_arguments)]
pub fn conv_ref(
    x: &[f64],
    n: usize,
    cin: usize,
    len: usize,
    w: &[f32],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize) {
    let lout = (len + 2 * pad - k) / stride + 1;
    let mut y = vec![0.0; n * cout * lout];
    for b in 0..n {
        for o in 0..cout {
            for t in 0..lout {
                let mut acc = 0.0;
                for c in 0..cin {
                    for j in 0..k {
                        let pos = (t * stride + j) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < len {
                            acc += w[(o * cin + c) * k + j] as f64 * x[(b * cin + c) * len + pos as usize];
                        }
                    }
                }
                y[(b * cout + o) * lout + t] = acc;
            }
        }
    }
    (y, lout)
}

/// Eval-mode batch norm followed by ReLU.
#[allow(clippy::too_many_arguments)]
pub fn bn_relu_ref(x: &[f64], n: usize, c: usize, len: usize, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    for b in 0..n {
        for ch in 0..c {
            let s = (var[ch] as f64 + eps).sqrt();
            for t in 0..len {
                let i = (b * c + ch) * len + t;
                let v = (x[i] - mean[ch] as f64) / s * gamma[ch] as f64 + beta[ch] as f64;
                y[i] = v.max(0.0);
            }
        }
    }
    y
}

/// Random affine parameters and running statistics for every norm layer.
pub fn randomize_norms(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.bn_names().to_vec();
    for (i, name) in names.iter().enumerate() {
        for (suffix, lo, hi) in [("gamma", 0.5f32, 1.5f32), ("beta", -0.2, 0.2)] {
            let id = store.find(&format!("{name}.{suffix}")).unwrap();
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
        }
        let st = &mut store.bn_states_mut()[i];
        st.running_mean.iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        st.running_var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
        st.initialized = true;
    }
}

/// A plain pre-activation bottleneck residual block evaluated from the
/// weights of a single-branch, SE-free block.
pub fn resnet_block_ref(store: &ParamStore, block: &Block, x: &Tensor, eps: f64) -> Vec<f64> {
    let spec = block.spec;
    assert_eq!(spec.cardinality, 1);
    assert!(block.se.is_none());
    let (n, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let norm = |inp: &[f64], c: usize, l: usize, bn: psanet::model::BnId| {
        let st = &store.bn_states()[bn.state];
        bn_relu_ref(
            inp,
            n,
            c,
            l,
            store.get(bn.gamma).data(),
            store.get(bn.beta).data(),
            &st.running_mean,
            &st.running_var,
            eps,
        )
    };
    let br = block.branches[0];
    let b = spec.bottleneck;
    let a = norm(&xd, cin, len, block.bn);
    let (h, _) = conv_ref(&a, n, cin, len, store.get(br.reduce).data(), b, 1, 1, 0);
    let h = norm(&h, b, len, br.bn1);
    let (h, lout) = conv_ref(&h, n, b, len, store.get(br.transform).data(), b, 3, spec.stride, 1);
    let h = norm(&h, b, lout, br.bn2);
    let (t, _) = conv_ref(&h, n, b, lout, store.get(br.expand).data(), spec.width, 1, 1, 0);
    let shortcut = match block.proj {
        Some(p) => conv_ref(&a, n, cin, len, store.get(p).data(), spec.width, 1, spec.stride, 0).0,
        None => xd,
    };
    t.iter().zip(&shortcut).map(|(u, v)| u + v).collect()
}

pub fn block_forward(store: &ParamStore, block: &Block, x: &Tensor, mode: Mode, seed: u64) -> Tensor {
    let mut s = Session::new(store, ExecMode::Sequential, mode, false, seed);
    let xn = s.input(x.clone());
    let y = block.forward(&mut s, xn).unwrap();
    s.graph.value(y).clone()
}

/// Largest deviation between a single-branch SE-free block and the plain
/// residual reference, over identity and projection shortcuts.
pub fn resnet_reduction_max_diff(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for (cin, width, stride) in [(16, 16, 1), (8, 16, 2)] {
        let spec = BlockSpec {
            cin,
            width,
            bottleneck: 4,
            cardinality: 1,
            stride,
            aggregation: MergeMode::Sum,
            form: BlockForm::Branches,
            se_reduction: None,
            use_skip: true,
            dropout: 0.2,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = Block::build(&mut store, "b", spec, &mut rng).unwrap();
        randomize_norms(&mut store, seed + 1);
        let x = rand_tensor(&[2, cin, 20], seed + 2);
        let got = block_forward(&store, &block, &x, Mode::Eval, 0);
        let want = resnet_block_ref(&store, &block, &x, 1e-5);
        assert_eq!(got.numel(), want.len());
        for (g, w) in got.data().iter().zip(&want) {
            worst = worst.max((*g as f64 - w).abs());
        }
    }
    worst
}

/// Largest deviation between explicit-branch and grouped execution of the
/// first block of every stage of the reduced config, in train and eval mode.
pub fn branch_group_max_diff(seed: u64, aggregation: MergeMode) -> f64 {
    let cfg = PsaConfig {
        aggregation,
        ..PsaConfig::reduced()
    };
    let plan = cfg.plan().unwrap();
    let mut worst = 0.0f64;
    for (k, stage) in plan.stages.iter().enumerate() {
        let spec = BlockSpec::from_plan(&stage[0], &cfg);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + k as u64);
        let block = Block::build(&mut store, "b", spec, &mut rng).unwrap();
        randomize_norms(&mut store, seed + 100);
        let mut grouped = block.clone();
        grouped.spec.form = BlockForm::Grouped;
        let x = rand_tensor(&[2, spec.cin, 24], seed + 7);
        for mode in [Mode::Train, Mode::Eval] {
            let a = block_forward(&store, &block, &x, mode, seed);
            let b = block_forward(&store, &grouped, &x, mode, seed);
            for (u, v) in a.data().iter().zip(b.data()) {
                worst = worst.max((u - v).abs() as f64);
            }
        }
    }
    worst
}

/// Norm of d(sum(y * r))/dx through a chain of eight blocks whose transform
/// weights are scaled by 0.1, with `r` a fixed unit vector.
pub fn skip_chain_grad_norm(use_skip: bool, seed: u64) -> f64 {
    let spec = BlockSpec {
        cin: 16,
        width: 16,
        bottleneck: 4,
        cardinality: 2,
        stride: 1,
        aggregation: MergeMode::Sum,
        form: BlockForm::Branches,
        se_reduction: Some(4),
        use_skip,
        dropout: 0.2,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks: Vec<Block> = (0..8)
        .map(|i| Block::build(&mut store, &format!("b{i}"), spec, &mut rng).unwrap())
        .collect();
    for b in &blocks {
        for id in b.transform_params() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
    }
    let shape = [2, 16, 32];
    let x = rand_tensor(&shape, seed + 1).with_requires_grad(true);
    let r = rand_vec(x.numel(), seed + 2);
    let rn = r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    let r: Vec<f32> = r.iter().map(|v| (*v as f64 / rn) as f32).collect();

    let mut s = Session::new(&store, ExecMode::Sequential, Mode::Eval, false, 0);
    let xn = s.graph.leaf(x);
    let mut h = xn;
    for b in &blocks {
        h = b.forward(&mut s, h).unwrap();
    }
    let loss = s.graph.weighted_sum(h, r).unwrap();
    s.backward(loss).unwrap();
    s.graph
        .grad(xn)
        .map(|g| g.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt())
        .unwrap_or(0.0)
}

/// Records with scores drawn from a small grid so ties are common; both
/// classes present.
pub fn random_records(n: usize, seed: u64) -> Vec<psanet::metrics::ScoreRecord> {
    use psanet::metrics::{Key, ScoreRecord};
    assert!(n >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = rng.gen_range(2..=12);
    (0..n)
        .map(|i| {
            let key = match i {
                0 => Key::Bonafide,
                1 => Key::Spoof,
                _ if rng.gen_bool(0.5) => Key::Bonafide,
                _ => Key::Spoof,
            };
            let score = rng.gen_range(0..levels) as f64 / levels as f64 - 0.3;
            ScoreRecord::new(format!("u{i}"), score, key)
        })
        .collect()
}

fn rates_at(records: &[psanet::metrics::ScoreRecord], t: f64) -> (f64, f64) {
    use psanet::metrics::Key;
    let (mut nb, mut ns, mut miss, mut fa) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        match r.key {
            Key::Bonafide => {
                nb += 1;
                if !(r.score >= t) {
                    miss += 1;
                }
            }
            Key::Spoof => {
                ns += 1;
                if r.score >= t {
                    fa += 1;
                }
            }
        }
    }
    (fa as f64 / ns as f64, miss as f64 / nb as f64)
}

fn sweep(records: &[psanet::metrics::ScoreRecord]) -> Vec<(f64, f64, f64)> {
    let mut ts: Vec<f64> = records.iter().map(|r| r.score).collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    ts.push(f64::INFINITY);
    ts.into_iter()
        .map(|t| {
            let (far, frr) = rates_at(records, t);
            (t, far, frr)
        })
        .collect()
}

/// EER by brute-force sweep: first adjacent pair of thresholds where
/// FAR - FRR goes from positive to non-positive, linearly interpolated.
pub fn eer_oracle(records: &[psanet::metrics::ScoreRecord]) -> f64 {
    let pts = sweep(records);
    for i in 0..pts.len() - 1 {
        let (_, fa0, fr0) = pts[i];
        let (_, fa1, fr1) = pts[i + 1];
        let d0 = fa0 - fr0;
        let d1 = fa1 - fr1;
        if d0 == 0.0 {
            return fa0;
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let alpha = d0 / (d0 - d1);
            return fa0 + alpha * (fa1 - fa0);
        }
    }
    unreachable!("sweep ends at FAR 0, FRR 1")
}

/// Normalized tandem cost minimized over every threshold of the sweep, with
/// the weights written out from the cost model.
pub fn min_tdcf_oracle(records: &[psanet::metrics::ScoreRecord], p: &psanet::metrics::TdcfParams) -> f64 {
    let p_tar = (1.0 - p.p_spoof) * p.p_target_given_genuine;
    let p_non = (1.0 - p.p_spoof) * (1.0 - p.p_target_given_genuine);
    let w_miss = p_tar * (p.c_miss_cm - p.c_miss_asv * p.p_miss_asv) - p_non * p.c_fa_asv * p.p_fa_asv;
    let w_fa = p.c_fa_cm * p.p_spoof * p.p_fa_spoof_asv;
    let floor = w_miss.min(w_fa);
    sweep(records)
        .into_iter()
        .map(|(_, far, frr)| (w_miss * frr + w_fa * far) / floor)
        .fold(f64::INFINITY, f64::min)
}

/// Fraction of (bonafide, spoof) pairs ordered correctly, ties counted half.
pub fn auc_oracle(records: &[psanet::metrics::ScoreRecord]) -> f64 {
    use psanet::metrics::Key;
    let bona: Vec<f64> = records.iter().filter(|r| r.key == Key::Bonafide).map(|r| r.score).collect();
    let spoof: Vec<f64> = records.iter().filter(|r| r.key == Key::Spoof).map(|r| r.score).collect();
    let mut wins = 0.0;
    for b in &bona {
        for s in &spoof {
            if b > s {
                wins += 1.0;
            } else if b == s {
                wins += 0.5;
            }
        }
    }
    wins / (bona.len() * spoof.len()) as f64
}

/// Datasets of every size 2..=20 from one seed, each checked against the
/// three oracles. Returns descriptions of any mismatch.
pub fn metric_oracle_mismatches(seed: u64) -> Vec<String> {
    use psanet::metrics::{compute_auc, compute_eer, compute_min_tdcf, TdcfParams};
    let params = TdcfParams::default();
    let mut bad = Vec::new();
    for n in 2..=20 {
        let recs = random_records(n, seed * 1000 + n as u64);
        let eer = compute_eer(&recs).unwrap().0;
        let tdcf = compute_min_tdcf(&recs, &params).unwrap().0;
        let auc = compute_auc(&recs).unwrap();
        let (e, t, a) = (eer_oracle(&recs), min_tdcf_oracle(&recs, &params), auc_oracle(&recs));
        if eer != e || tdcf != t || auc != a {
            bad.push(format!("seed {seed} n {n}: eer {eer}/{e} tdcf {tdcf}/{t} auc {auc}/{a}"));
        }
    }
    bad
}
