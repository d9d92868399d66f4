//! Cost accounting: parameter counts, analytic FLOPs, serialized size and
//! wall-clock inference latency.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::audio::{fix_length, zscore_normalize, AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::{checkpoint_len, Model, PsaConfig, Session};
use crate::tensor::{MergeMode, Mode, Tensor};

/// Which operations are counted besides multiply-accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopConvention {
    /// Count norm, activation, pooling, gating and addition at one op per
    /// element.
    pub elementwise: bool,
}

impl Default for FlopConvention {
    fn default() -> Self {
        FlopConvention { elementwise: true }
    }
}

impl fmt::Display for FlopConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MAC=2 FLOPs, bias=1/output")?;
        if self.elementwise {
            write!(f, ", norm/act/pool/add=1/element")
        } else {
            write!(f, ", elementwise ops omitted")
        }
    }
}

/// FLOPs of a 1D convolution over one example.
pub fn conv1d_flops(cin: usize, cout: usize, lout: usize, kernel: usize, groups: usize, bias: bool) -> u64 {
    let mac = 2 * cout as u64 * lout as u64 * (cin / groups) as u64 * kernel as u64;
    mac + if bias { (cout * lout) as u64 } else { 0 }
}

pub fn linear_flops(inputs: usize, outputs: usize, bias: bool) -> u64 {
    2 * (inputs * outputs) as u64 + if bias { outputs as u64 } else { 0 }
}

/// FLOPs split by kind for one forward pass of one clip.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopCount {
    pub conv: u64,
    pub linear: u64,
    pub elementwise: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.conv + self.linear + self.elementwise
    }
}

/// Analytic eval-mode FLOPs for one clip of `config.input_len` samples.
/// Dropout is the identity at inference and costs nothing.
pub fn count_flops(config: &PsaConfig, conv: FlopConvention) -> Result<FlopCount> {
    let plan = config.plan()?;
    let mut f = FlopCount::default();
    let ew = |n: usize| if conv.elementwise { n as u64 } else { 0 };
    for l in &plan.stem {
        // norm + activation on the input, then the convolution
        f.elementwise += ew(2 * l.cin * l.len_in);
        f.conv += conv1d_flops(l.cin, l.cout, l.len_out, l.kernel, 1, false);
    }
    f.elementwise += ew(plan.stem_channels() * plan.pool_len * plan.pool_kernel);
    let c = config.cardinality;
    for b in plan.blocks() {
        f.elementwise += ew(2 * b.cin * b.len_in);
        let branch = conv1d_flops(b.cin, b.bottleneck, b.len_in, 1, 1, false)
            + conv1d_flops(b.bottleneck, b.bottleneck, b.len_out, 3, 1, false)
            + conv1d_flops(b.bottleneck, b.branch_out, b.len_out, 1, 1, false);
        f.conv += c as u64 * branch;
        f.elementwise += ew(c * 2 * b.bottleneck * (b.len_in + b.len_out));
        if config.aggregation == MergeMode::Sum {
            f.elementwise += ew((c - 1) * b.width * b.len_out);
        }
        let out = b.width * b.len_out;
        if let Some(h) = b.se_hidden {
            f.elementwise += ew(out); // squeeze
            f.linear += linear_flops(b.width, h, true) + linear_flops(h, b.width, true);
            f.elementwise += ew(h + b.width); // ReLU, sigmoid
            f.elementwise += ew(out); // channel scaling
        }
        if config.use_skip {
            if b.projection {
                f.conv += conv1d_flops(b.cin, b.width, b.len_out, 1, 1, false);
            }
            f.elementwise += ew(out);
        }
    }
    let (w, l, h) = (plan.head_channels, plan.head_len, plan.head_hidden);
    f.elementwise += ew(3 * w * l); // norm, ReLU, global max
    f.linear += linear_flops(w, h, true) + linear_flops(h, 1, true);
    f.elementwise += ew(h + 1);
    Ok(f)
}

/// Total element count of every trainable tensor.
pub fn count_params(model: &Model) -> usize {
    model.store().iter().map(|(_, t)| t.numel()).sum()
}

/// Exact size in bytes of the file at `path`.
pub fn checkpoint_size(path: &Path) -> Result<u64> {
    std::fs::metadata(path).map(|m| m.len()).map_err(|e| Error::io(path, e))
}

/// Short description of the machine the timings came from.
pub fn environment_label() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let build = if cfg!(debug_assertions) { "debug" } else { "release" };
    format!(
        "{}-{}, {cpu}, {threads} hw threads, 1 lane, {build}",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub mean_s: f64,
    /// Sample standard deviation.
    pub std_s: f64,
    pub runs: usize,
    pub warmup: usize,
    pub include_pipeline: bool,
    pub env: String,
}

impl fmt::Display for LatencyStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.4} ± {:.4} s over {} runs ({} warmup, {}) [{}]",
            self.mean_s,
            self.std_s,
            self.runs,
            self.warmup,
            if self.include_pipeline { "with preprocessing" } else { "model only" },
            self.env
        )
    }
}

/// Times eval-mode forward passes of single synthetic clips on one lane.
/// The first `warmup` runs are discarded.
pub fn measure_latency(model: &Model, runs: usize, warmup: usize, include_pipeline: bool, seed: u64) -> Result<LatencyStats> {
    if runs < 2 {
        return Err(Error::Config(format!("latency needs at least 2 runs, got {runs}")));
    }
    let len = model.config().input_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut times = Vec::with_capacity(runs);
    for i in 0..warmup + runs {
        let raw: Vec<f32> = (0..len).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); 0.1 * z as f32 }).collect();
        let start = Instant::now();
        let samples = if include_pipeline {
            let clip = AudioClip::new(raw, SAMPLE_RATE)?;
            zscore_normalize(&fix_length(&clip, len)?)?.into_samples()
        } else {
            raw
        };
        let x = Tensor::new(&[1, 1, len], samples)?;
        let mut s = Session::new(model.store(), ExecMode::Sequential, Mode::Eval, false, 0)
            .with_norm(model.config().bn_momentum, model.config().bn_eps);
        let p = model.forward(&mut s, &x)?;
        std::hint::black_box(s.graph.value(p));
        let dt = start.elapsed().as_secs_f64();
        if i >= warmup {
            times.push(dt);
        }
    }
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(LatencyStats {
        mean_s: mean,
        std_s: var.sqrt(),
        runs,
        warmup,
        include_pipeline,
        env: environment_label(),
    })
}

/// Costs of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub label: String,
    pub params: usize,
    pub checkpoint_bytes: u64,
    pub flops: u64,
    pub convention: FlopConvention,
    pub latency: Option<LatencyStats>,
}

impl CostReport {
    /// Counts and serialized size; latency is attached separately.
    pub fn analyze(model: &Model, convention: FlopConvention) -> Result<CostReport> {
        Ok(CostReport {
            label: model.config().label(),
            params: count_params(model),
            checkpoint_bytes: checkpoint_len(model, false)? as u64,
            flops: count_flops(model.config(), convention)?.total(),
            convention,
            latency: None,
        })
    }

    pub fn tsv_header() -> &'static str {
        "config\tparams_m\tsize_mb\tgflops\tlatency_mean_s\tlatency_std_s\truns"
    }

    pub fn tsv_row(&self) -> String {
        let (mean, std, runs) = match &self.latency {
            Some(l) => (format!("{:.4}", l.mean_s), format!("{:.4}", l.std_s), l.runs.to_string()),
            None => ("-".into(), "-".into(), "0".into()),
        };
        format!(
            "{}\t{:.2}\t{:.2}\t{:.2}\t{mean}\t{std}\t{runs}",
            self.label,
            self.params as f64 / 1e6,
            self.checkpoint_bytes as f64 / (1024.0 * 1024.0),
            self.flops as f64 / 1e9,
        )
    }

    /// `key=value` line for machine consumption.
    pub fn record(&self) -> String {
        let mut s = format!(
            "config={} params={} checkpoint_bytes={} flops={}",
            self.label, self.params, self.checkpoint_bytes, self.flops
        );
        if let Some(l) = &self.latency {
            s.push_str(&format!(
                " latency_mean_s={:.6} latency_std_s={:.6} runs={}",
                l.mean_s, l.std_s, l.runs
            ));
        }
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "config       {}", self.label)?;
        writeln!(f, "parameters   {} ({:.2} M)", self.params, self.params as f64 / 1e6)?;
        writeln!(
            f,
            "checkpoint   {} bytes ({:.2} MiB)",
            self.checkpoint_bytes,
            self.checkpoint_bytes as f64 / (1024.0 * 1024.0)
        )?;
        writeln!(f, "FLOPs        {} ({:.3} G) [{}]", self.flops, self.flops as f64 / 1e9, self.convention)?;
        match &self.latency {
            Some(l) => writeln!(f, "latency      {l}"),
            None => writeln!(f, "latency      not measured"),
        }
    }
}
