//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any fails.

#[path = "../../core/tests/common/mod.rs"]
#[allow(dead_code)]
mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use psanet::audio::{fix_length, zscore_normalize, AudioClip, AugmentKind, AugmentPolicy, DEFAULT_SAMPLES, SAMPLE_RATE};
use psanet::exec::ExecMode;
use psanet::metrics::compute_eer;
use psanet::model::{Model, PsaConfig};
use psanet::profile::{count_flops, count_params, measure_latency, FlopConvention};
use psanet::tensor::gradcheck::{default_shape, grad_check, OPS};
use psanet::tensor::MergeMode;
use psanet::train::{evaluate, synth_dataset, train, Split, TrainConfig, TrainRun, PROTOCOL_DIR};

type Outcome = Result<String, String>;

fn check(cond: bool, ok: String, bad: String) -> Outcome {
    if cond {
        Ok(ok)
    } else {
        Err(bad)
    }
}

fn within(t: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let e = t.elapsed();
    if e <= limit {
        Ok(())
    } else {
        Err(format!("{what} took {:.1}s, limit {}s", e.as_secs_f64(), limit.as_secs()))
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0f64, "");
    for op in OPS {
        for seed in 0..10 {
            let e = grad_check(op, default_shape(op), seed).map_err(|e| format!("{op}: {e}"))?;
            if e > worst.0 {
                worst = (e, op);
            }
        }
    }
    within(t, Duration::from_secs(60), "gradient suite")?;
    check(
        worst.0 < 1e-3,
        format!("{} ops x 10 seeds, worst rel err {:.2e} ({})", OPS.len(), worst.0, worst.1),
        format!("{} rel err {:.2e}", worst.1, worst.0),
    )
}

fn equivalence() -> Outcome {
    let mut grouped = 0.0f64;
    for seed in 0..10 {
        for agg in [MergeMode::Sum, MergeMode::Concat] {
            grouped = grouped.max(common::branch_group_max_diff(seed, agg));
        }
    }
    let mut plain = 0.0f64;
    for seed in 0..10 {
        plain = plain.max(common::resnet_reduction_max_diff(seed));
    }
    check(
        grouped < 1e-4 && plain < 1e-5,
        format!("grouped vs branches {grouped:.2e}, C=1 vs residual reference {plain:.2e}"),
        format!("grouped {grouped:.2e} (< 1e-4), plain {plain:.2e} (< 1e-5)"),
    )
}

fn skip_gradient() -> Outcome {
    let t = Instant::now();
    let with = common::skip_chain_grad_norm(true, 5);
    let without = common::skip_chain_grad_norm(false, 5);
    within(t, Duration::from_secs(30), "skip chain")?;
    check(
        with >= 0.5 && without < 1e-4,
        format!("input grad norm {with:.3} with skips, {without:.2e} without"),
        format!("with {with:.3} (>= 0.5), without {without:.2e} (< 1e-4)"),
    )
}

fn metric_oracles() -> Outcome {
    let mut bad = Vec::new();
    for seed in 0..100 {
        bad.extend(common::metric_oracle_mismatches(seed));
    }
    check(
        bad.is_empty(),
        "EER, min t-DCF and AUC equal the oracles on 100 seeds x sizes 2..=20".into(),
        format!("{} mismatches, first: {}", bad.len(), bad.first().cloned().unwrap_or_default()),
    )
}

fn learnability() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = synth_dataset(128, 7, dir.path()).map_err(|e| e.to_string())?;
    let run = TrainRun {
        model: PsaConfig::reduced(),
        train: TrainConfig {
            epochs: 200,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_steps: 50,
            exec: ExecMode::Sequential,
            target_train_accuracy: Some(0.95),
            ..Default::default()
        },
        augment: AugmentPolicy::disabled(),
    };
    let out = train(&run, &m, &mut |_| {}).map_err(|e| e.to_string())?;
    let acc = out.history.iter().map(|r| r.train_accuracy).fold(0.0, f64::max);
    let recs = evaluate(&out.best.model, &m, Split::Eval, &run.loader(32)).map_err(|e| e.to_string())?;
    let (eer, _) = compute_eer(&recs).map_err(|e| e.to_string())?;
    within(t, Duration::from_secs(15 * 60), "training")?;
    let summary = format!(
        "{} epochs, best train acc {acc:.3}, held-out EER {:.1}%",
        out.history.len(),
        100.0 * eer
    );
    check(acc >= 0.95 && eer < 0.05, summary.clone(), summary)
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_psanet"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("psanet {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("data");
    cli(&["synth-data", "--out", p(&data), "--per-class", "6", "--seed", "3"])?;
    let mut files = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let flags = ["--reduced", "--sequential", "--input-len", "16000"];
        let mut a = vec!["train", "--data", p(&data), "--out", p(&out), "--epochs", "2", "--batch-size", "4", "--seed", "11"];
        a.extend(flags);
        cli(&a)?;
        let scores = out.join("eval.scores");
        let ck = out.join("best.ckpt");
        let mut e = vec!["evaluate", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&scores)];
        e.extend(flags);
        cli(&e)?;
        let read = |f: &Path| std::fs::read(f).map_err(|e| format!("{}: {e}", f.display()));
        files.push((read(&ck)?, read(&scores)?));
    }
    check(
        files[0] == files[1],
        format!("checkpoints ({} bytes) and score files bit-identical", files[0].0.len()),
        "two runs with the same seed differ".into(),
    )
}

fn cost_trends() -> Outcome {
    let t = Instant::now();
    let conv = FlopConvention::default();
    let grid = [(4, 32), (4, 64), (8, 32), (8, 64)];
    let mut flops = Vec::new();
    for (c, d) in grid {
        flops.push(count_flops(&PsaConfig::preset(c, d), conv).map_err(|e| e.to_string())?.total() as f64 / 1e9);
    }
    let params = count_params(&Model::from_seed(&PsaConfig::preset(4, 64), 0).map_err(|e| e.to_string())?) as f64 / 1e6;
    within(t, Duration::from_secs(60), "cost analysis")?;
    let ordered = flops.windows(2).all(|w| w[0] < w[1]);
    let summary = format!(
        "GFLOPs {:.2} < {:.2} < {:.2} < {:.2}; 4x64 params {params:.2} M; convention: {conv}",
        flops[0], flops[1], flops[2], flops[3]
    );
    check(
        ordered && (params / 30.50 - 1.0).abs() <= 0.20 && (flops[1] / 3.82 - 1.0).abs() <= 0.25,
        summary.clone(),
        summary,
    )
}

fn preprocessing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut worst_mean, mut worst_sd) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(1_000..120_000);
        let scale = rng.gen_range(0.01f32..10.0);
        let offset = rng.gen_range(-1.0f32..1.0);
        let x: Vec<f32> = (0..n).map(|_| offset + scale * rng.gen_range(-1.0f32..1.0)).collect();
        let clip = AudioClip::new(x, SAMPLE_RATE).map_err(|e| e.to_string())?;
        let fixed = fix_length(&clip, DEFAULT_SAMPLES).map_err(|e| e.to_string())?;
        if fixed.len() != DEFAULT_SAMPLES {
            return Err(format!("fix_length gave {} samples", fixed.len()));
        }
        let z = zscore_normalize(&fixed).map_err(|e| e.to_string())?;
        let s = z.samples();
        let mean = s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
        let sd = (s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
        worst_mean = worst_mean.max(mean.abs());
        worst_sd = worst_sd.max((sd - 1.0).abs());
    }
    if worst_mean >= 1e-4 || worst_sd >= 1e-4 {
        return Err(format!("zscore |mean| {worst_mean:.2e}, |sd-1| {worst_sd:.2e}"));
    }
    let policy = AugmentPolicy::default();
    let tone: Vec<f32> = (0..DEFAULT_SAMPLES)
        .map(|i| {
            let gate = if (i / 4000) % 2 == 0 { 1.0 } else { 1e-4 };
            gate * (i as f32 * 0.07).sin()
        })
        .collect();
    let clip = AudioClip::new(tone, SAMPLE_RATE).map_err(|e| e.to_string())?;
    for kind in AugmentKind::ALL {
        let aug = policy.spec(kind);
        let a = aug.apply(&clip, 5).map_err(|e| e.to_string())?;
        let b = aug.apply(&clip, 5).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{} not reproducible for a fixed seed", kind.name()));
        }
        if a.sample_rate() != SAMPLE_RATE {
            return Err(format!("{} changed the sample rate", kind.name()));
        }
        if kind.preserves_length() && a.len() != clip.len() {
            return Err(format!("{} changed the length", kind.name()));
        }
    }
    Ok(format!(
        "1000 clips: length {DEFAULT_SAMPLES}, |mean| {worst_mean:.1e}, |sd-1| {worst_sd:.1e}; {} augmentations checked",
        AugmentKind::ALL.len()
    ))
}

fn latency_shape() -> Outcome {
    let cfg = PsaConfig { input_len: 16_000, ..PsaConfig::reduced() };
    let model = Model::from_seed(&cfg, 0).map_err(|e| e.to_string())?;
    let l = measure_latency(&model, 25, 3, false, 0).map_err(|e| e.to_string())?;
    let text = l.to_string();
    check(
        l.runs == 25 && l.mean_s > 0.0 && l.std_s >= 0.0 && !l.env.is_empty() && text.contains('±'),
        format!("{text} (not asserted)"),
        format!("unexpected report: {text}"),
    )
}

fn integration_path() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = dir.path().join("LA");
    cli(&["synth-data", "--out", p(&data), "--per-class", "25", "--seed", "4"])?;
    let wavs = walk_count(&data, "wav");
    if wavs != 50 {
        return Err(format!("expected 50 audio files, found {wavs}"));
    }
    let flags = ["--reduced", "--input-len", "16000"];
    let run = dir.path().join("run");
    let mut a = vec!["train", "--data", p(&data), "--out", p(&run), "--epochs", "1", "--batch-size", "4"];
    a.extend(flags);
    cli(&a)?;
    let scores = run.join("eval.scores");
    let ck = run.join("best.ckpt");
    let mut e = vec!["evaluate", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&scores)];
    e.extend(flags);
    cli(&e)?;
    let keys = data.join(PROTOCOL_DIR).join(Split::Eval.protocol_file());
    let report = cli(&["metrics", "--scores", p(&scores), "--keys", p(&keys)])?;
    check(
        report.contains("EER"),
        format!("train/evaluate/metrics over a 50-file protocol tree: {}", report.trim().replace('\n', "; ")),
        format!("metrics output lacks EER: {report}"),
    )
}

fn walk_count(dir: &Path, ext: &str) -> usize {
    let Ok(rd) = std::fs::read_dir(dir) else { return 0 };
    rd.flatten()
        .map(|e| {
            let p = e.path();
            if p.is_dir() {
                walk_count(&p, ext)
            } else {
                usize::from(p.extension().is_some_and(|x| x == ext))
            }
        })
        .sum()
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("block equivalence", equivalence),
        ("skip-gradient property", skip_gradient),
        ("metric oracles", metric_oracles),
        ("end-to-end learnability", learnability),
        ("determinism", determinism),
        ("cost trends", cost_trends),
        ("preprocessing contract", preprocessing),
        ("latency report shape", latency_shape),
        ("integration path", integration_path),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        match r {
            Ok(msg) => println!("PASS {:>2} {name}: {msg} [{secs:.1}s]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {msg} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
