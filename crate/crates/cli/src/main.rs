use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use psanet::audio::{load_audio, write_wav, AugmentKind, AugmentPolicy, WavFormat};
use psanet::config::RunConfigFile;
use psanet::metrics::{join_keys, read_scores, write_scores, MetricsReport};
use psanet::model::{load_checkpoint, Model, PsaConfig};
use psanet::profile::{measure_latency, CostReport, FlopConvention};
use psanet::train::{evaluate, protocol_keys, save_outcome, synth_dataset, train, DatasetManifest, Split, HISTORY_HEADER};
use psanet::ExecMode;

#[derive(Parser)]
#[command(name = "psanet", version, about = "Raw-waveform spoofing countermeasure", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print or check run configuration.
    Config {
        /// Print the full default configuration as TOML.
        #[arg(long)]
        dump_defaults: bool,
        /// Parse and validate a configuration file, printing the merged result.
        #[arg(long)]
        check: Option<PathBuf>,
    },
    /// Write a two-class synthetic corpus in protocol layout.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model and write best.ckpt and history.tsv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Score one split with a checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        split: Split,
        /// Score file to write (`utterance score` per line).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// EER, min t-DCF and AUC of a score file against a protocol.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
        /// Protocol file carrying the keys.
        #[arg(long, alias = "protocol")]
        keys: PathBuf,
        /// Also write the report as TSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameters, checkpoint size, FLOPs and latency of one configuration.
    Profile {
        #[command(flatten)]
        common: Common,
        /// Profile a trained checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        prof: ProfileOverrides,
    },
    /// Cost table (and optionally training) over a grid of CxD presets.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated presets, e.g. 4x32,4x64,8x32,8x64.
        #[arg(long, default_value = "4x32,4x64,8x32,8x64")]
        grid: String,
        /// Only report costs; skip training.
        #[arg(long)]
        profile_only: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        prof: ProfileOverrides,
        #[command(flatten)]
        train: TrainOverrides,
    },
    /// Write one copy of a clip per augmentation.
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Use the reduced model (C=4, d=8, widths / 4) as the model base.
    #[arg(long, global = true)]
    reduced: bool,
    #[arg(long, global = true)]
    cardinality: Option<usize>,
    #[arg(long, global = true)]
    bottleneck_width: Option<usize>,
    #[arg(long, global = true)]
    depth: Option<usize>,
    #[arg(long, global = true)]
    input_len: Option<usize>,
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    warmup_steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    target_train_accuracy: Option<f64>,
}

#[derive(Args)]
struct ProfileOverrides {
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Include waveform preprocessing in the timed region.
    #[arg(long)]
    include_pipeline: bool,
    /// Leave norm, activation, pooling and additions out of the FLOP count.
    #[arg(long)]
    macs_only: bool,
    /// Skip latency measurement.
    #[arg(long)]
    no_latency: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfigFile> {
        let mut c = match &self.config {
            Some(p) => RunConfigFile::load(p)?,
            None => RunConfigFile::default(),
        };
        if self.reduced {
            c.model = PsaConfig {
                input_len: c.model.input_len,
                ..PsaConfig::reduced()
            };
        }
        set(&mut c.model.cardinality, self.cardinality);
        set(&mut c.model.bottleneck_width, self.bottleneck_width);
        set(&mut c.model.depth, self.depth);
        set(&mut c.model.input_len, self.input_len);
        if self.sequential {
            c.train.exec = ExecMode::Sequential;
        }
        Ok(c)
    }
}

impl TrainOverrides {
    fn apply(&self, c: &mut RunConfigFile) {
        set(&mut c.train.epochs, self.epochs);
        set(&mut c.train.batch_size, self.batch_size);
        set(&mut c.train.peak_lr, self.lr);
        set(&mut c.train.warmup_steps, self.warmup_steps);
        set(&mut c.train.seed, self.seed);
        if self.target_train_accuracy.is_some() {
            c.train.target_train_accuracy = self.target_train_accuracy;
        }
        if self.no_augment {
            c.augment = AugmentPolicy::disabled();
        }
    }
}

impl ProfileOverrides {
    fn apply(&self, c: &mut RunConfigFile) {
        set(&mut c.profile.runs, self.runs);
        set(&mut c.profile.warmup, self.warmup);
        c.profile.include_pipeline |= self.include_pipeline;
        if self.macs_only {
            c.profile.elementwise = false;
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn data_root(flag: &Option<PathBuf>, c: &RunConfigFile) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| c.data.root.clone())
        .ok_or_else(|| psanet::Error::Usage("no dataset: pass --data or set data.root".into()).into())
}

fn profile(model: &Model, c: &RunConfigFile, latency: bool) -> Result<CostReport> {
    let mut r = CostReport::analyze(model, FlopConvention { elementwise: c.profile.elementwise })?;
    if latency {
        r.latency = Some(measure_latency(model, c.profile.runs, c.profile.warmup, c.profile.include_pipeline, 0)?);
    }
    Ok(r)
}

fn parse_preset(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .trim()
        .split_once('x')
        .ok_or_else(|| psanet::Error::Usage(format!("preset {s:?} is not CxD")))?;
    let p = |v: &str| v.parse::<usize>().map_err(|_| psanet::Error::Usage(format!("preset {s:?} is not CxD")));
    Ok((p(a)?, p(b)?))
}

fn run_train(c: &RunConfigFile, root: &Path, out: &Path) -> Result<()> {
    c.validate()?;
    let manifest = DatasetManifest::load(root, c.data.sample_rate)?;
    for s in Split::ALL {
        let (b, sp) = manifest.class_counts(s);
        eprintln!("{s}: {b} bonafide, {sp} spoof");
    }
    eprintln!("{HISTORY_HEADER}");
    let outcome = train(&c.train_run(), &manifest, &mut |r| eprintln!("{}", r.tsv_row()))?;
    save_outcome(&outcome, out)?;
    std::fs::write(out.join("config.toml"), c.to_toml_string()?).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "best epoch {} dev loss {:.6} -> {}",
        outcome.best.meta.epoch,
        outcome.best.meta.dev_loss,
        out.join("best.ckpt").display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Config { dump_defaults, check } => match (dump_defaults, check) {
            (true, None) => print!("{}", RunConfigFile::default().to_toml_string()?),
            (false, Some(p)) => {
                let c = RunConfigFile::load(&p)?;
                c.validate()?;
                print!("{}", c.to_toml_string()?);
            }
            _ => bail!(psanet::Error::Usage("pass exactly one of --dump-defaults or --check".into())),
        },
        Cmd::SynthData { out, per_class, seed } => {
            let m = synth_dataset(per_class, seed, &out)?;
            for s in Split::ALL {
                let (b, sp) = m.class_counts(s);
                println!("{s}: {b} bonafide, {sp} spoof");
            }
        }
        Cmd::Train { common, data, out, train } => {
            let mut c = common.resolve()?;
            train.apply(&mut c);
            let root = data_root(&data, &c)?;
            run_train(&c, &root, &out)?;
        }
        Cmd::Evaluate {
            common,
            checkpoint,
            data,
            split,
            out,
            batch_size,
        } => {
            let mut c = common.resolve()?;
            set(&mut c.train.eval_batch_size, batch_size);
            let root = data_root(&data, &c)?;
            let ck = load_checkpoint(&checkpoint)?;
            let mut model = ck.model;
            model.set_exec(c.train.exec);
            let manifest = DatasetManifest::load(&root, c.data.sample_rate)?;
            let run = psanet::train::TrainRun {
                model: model.config().clone(),
                ..c.train_run()
            };
            let records = evaluate(&model, &manifest, split, &run.loader(c.train.eval_batch_size))?;
            let pairs: Vec<(String, f64)> = records.iter().map(|r| (r.utterance_id.clone(), r.score)).collect();
            write_scores(&out, &pairs)?;
            println!("{} scores -> {}", pairs.len(), out.display());
        }
        Cmd::Metrics {
            common,
            scores,
            keys,
            out,
        } => {
            let c = common.resolve()?;
            c.metrics.weights()?;
            let keys = protocol_keys(&keys)?;
            let records = join_keys(&read_scores(&scores)?, &keys)?;
            let report = MetricsReport::compute(&records, &c.metrics)?;
            println!("{}", report.summary());
            if let Some(p) = out {
                std::fs::write(&p, report.to_tsv()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Cmd::Profile { common, checkpoint, prof } => {
            let mut c = common.resolve()?;
            prof.apply(&mut c);
            c.validate()?;
            let model = match checkpoint {
                Some(p) => load_checkpoint(&p)?.model,
                None => Model::from_seed(&c.model, 0)?,
            };
            let r = profile(&model, &c, !prof.no_latency)?;
            print!("{r}");
            println!("{}", r.record());
        }
        Cmd::Sweep {
            common,
            grid,
            profile_only,
            data,
            out,
            prof,
            train,
        } => {
            let mut base = common.resolve()?;
            prof.apply(&mut base);
            train.apply(&mut base);
            let presets = grid.split(',').map(parse_preset).collect::<Result<Vec<_>>>()?;
            if !profile_only && out.is_none() {
                bail!(psanet::Error::Usage("sweep without --profile-only needs --out".into()));
            }
            println!("{}", CostReport::tsv_header());
            for (card, width) in presets {
                let mut c = base.clone();
                c.model.cardinality = card;
                c.model.bottleneck_width = width;
                c.validate()?;
                let model = Model::from_seed(&c.model, 0)?;
                println!("{}", profile(&model, &c, !prof.no_latency)?.tsv_row());
                if !profile_only {
                    let root = data_root(&data, &c)?;
                    let dir = out.as_ref().expect("checked above").join(c.model.label());
                    run_train(&c, &root, &dir)?;
                }
            }
        }
        Cmd::AugmentPreview { common, input, out, seed } => {
            let c = common.resolve()?;
            c.augment.validate()?;
            let clip = load_audio(&input)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for kind in AugmentKind::ALL {
                let aug = c.augment.spec(kind);
                let y = aug.apply(&clip, seed)?;
                let p = out.join(format!("{}.wav", kind.name()));
                write_wav(&p, &y, WavFormat::Float32)?;
                println!("{} {} samples -> {}", kind.name(), y.len(), p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = matches!(
                e.downcast_ref::<psanet::Error>(),
                Some(psanet::Error::Config(_) | psanet::Error::Usage(_))
            );
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
