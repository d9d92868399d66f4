use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{
    biquad_filter, codec_proxy, fix_length, load_audio, resample, write_wav, zscore_normalize, AudioClip,
    AugmentKind, AugmentPolicy, FilterKind, WavFormat, DEFAULT_SAMPLES, SAMPLE_RATE,
};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::metrics::Key;
use crate::tensor::Tensor;

/// Directory holding the countermeasure protocol files.
pub const PROTOCOL_DIR: &str = "ASVspoof2019_LA_cm_protocols";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    pub fn protocol_file(self) -> &'static str {
        match self {
            Split::Train => "ASVspoof2019.LA.cm.train.trn.txt",
            Split::Dev => "ASVspoof2019.LA.cm.dev.trl.txt",
            Split::Eval => "ASVspoof2019.LA.cm.eval.trl.txt",
        }
    }

    pub fn audio_dir(self) -> String {
        format!("ASVspoof2019_LA_{}", self.name())
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Usage(format!("unknown split {other:?} (train, dev, eval)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One protocol line: `speaker utterance environment system key`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolEntry {
    pub speaker_id: String,
    pub utterance_id: String,
    pub environment: String,
    /// Attack label, or `-` for bonafide.
    pub system_id: String,
    pub key: Key,
}

pub fn parse_protocol_str(text: &str, path: &Path) -> Result<Vec<ProtocolEntry>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Protocol {
            path: path.to_path_buf(),
            line: i + 1,
            detail,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        let [speaker, utt, env, system, key] = f[..] else {
            return Err(bad(format!("expected 5 fields, got {}", f.len())));
        };
        let key: Key = key.parse().map_err(|_| bad(format!("unknown key {key:?}")))?;
        if !seen.insert(utt.to_string()) {
            return Err(bad(format!("duplicate utterance {utt}")));
        }
        out.push(ProtocolEntry {
            speaker_id: speaker.into(),
            utterance_id: utt.into(),
            environment: env.into(),
            system_id: system.into(),
            key,
        });
    }
    if out.is_empty() {
        return Err(Error::Data(format!("protocol {} has no entries", path.display())));
    }
    Ok(out)
}

pub fn parse_protocol(path: &Path) -> Result<Vec<ProtocolEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_protocol_str(&text, path)
}

pub fn write_protocol(path: &Path, entries: &[ProtocolEntry]) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!(
            "{} {} {} {} {}\n",
            e.speaker_id, e.utterance_id, e.environment, e.system_id, e.key
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Keys of every utterance in a protocol file.
pub fn protocol_keys(path: &Path) -> Result<HashMap<String, Key>> {
    Ok(parse_protocol(path)?
        .into_iter()
        .map(|e| (e.utterance_id, e.key))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub entry: ProtocolEntry,
    pub path: PathBuf,
}

/// Protocol entries with resolved file paths, per split.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Rate every clip is resampled to before anything else.
    pub sample_rate: u32,
    splits: [Vec<ManifestEntry>; 3],
}

/// Extensions tried, in order, under `<split dir>/<subdir>/<utt>.<ext>`.
const AUDIO_LOCATIONS: [(&str, &str); 4] = [("flac", "flac"), ("wav", "wav"), ("feat", "feat"), ("", "wav")];

fn find_audio(dir: &Path, utt: &str) -> Option<PathBuf> {
    AUDIO_LOCATIONS
        .iter()
        .map(|(sub, ext)| dir.join(sub).join(format!("{utt}.{ext}")))
        .find(|p| p.is_file())
}

impl DatasetManifest {
    /// Reads whichever split protocols exist under `root` and resolves every
    /// utterance to a file. At least one split must be present.
    pub fn load(root: &Path, sample_rate: u32) -> Result<DatasetManifest> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        let mut splits: [Vec<ManifestEntry>; 3] = Default::default();
        let mut any = false;
        for split in Split::ALL {
            let proto = root.join(PROTOCOL_DIR).join(split.protocol_file());
            if !proto.is_file() {
                continue;
            }
            any = true;
            let dir = root.join(split.audio_dir());
            for entry in parse_protocol(&proto)? {
                let path = find_audio(&dir, &entry.utterance_id).ok_or_else(|| {
                    Error::Data(format!("no audio file under {}", dir.display())).for_utterance(&entry.utterance_id)
                })?;
                splits[split.index()].push(ManifestEntry { entry, path });
            }
        }
        if !any {
            return Err(Error::Data(format!(
                "no protocol files in {}",
                root.join(PROTOCOL_DIR).display()
            )));
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            sample_rate,
            splits,
        })
    }

    pub fn split(&self, split: Split) -> &[ManifestEntry] {
        &self.splits[split.index()]
    }

    /// `(bonafide, spoof)` counts.
    pub fn class_counts(&self, split: Split) -> (usize, usize) {
        let b = self.split(split).iter().filter(|e| e.entry.key == Key::Bonafide).count();
        (b, self.split(split).len() - b)
    }

    pub fn keys(&self) -> HashMap<String, Key> {
        self.splits
            .iter()
            .flatten()
            .map(|e| (e.entry.utterance_id.clone(), e.entry.key))
            .collect()
    }
}

/// splitmix64 finalizer over two words; used to derive per-clip seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn pink_noise(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (mut b0, mut b1, mut b2) = (0.0f32, 0.0f32, 0.0f32);
    (0..n)
        .map(|_| {
            let w: f32 = rng.gen_range(-1.0..1.0);
            b0 = 0.99765 * b0 + w * 0.099_046;
            b1 = 0.963 * b1 + w * 0.296_516_4;
            b2 = 0.57 * b2 + w * 1.052_691_3;
            (b0 + b1 + b2 + w * 0.1848) * 0.2
        })
        .collect()
}

/// A run of syllables, each a gliding harmonic stack under a Hann envelope
/// with its own pitch and timbre, over a pink-noise floor.
fn voiced_clip(rng: &mut ChaCha8Rng) -> Vec<f32> {
    use std::f32::consts::{PI, TAU};
    let n = DEFAULT_SAMPLES;
    let sr = SAMPLE_RATE as f32;
    let mut out = vec![0.0f32; n];
    let mut start = (rng.gen_range(0.0..0.1) * sr) as usize;
    while start < n {
        let len = ((rng.gen_range(0.12..0.35) * sr) as usize).min(n - start);
        let f0: f32 = rng.gen_range(90.0..260.0);
        let glide: f32 = rng.gen_range(0.85..1.15);
        let harmonics: Vec<(f32, f32, f32)> = (1..)
            .map(|h| h as f32)
            .take_while(|h| h * f0 * glide.max(1.0) < 7800.0)
            .map(|h| (h, rng.gen_range(0.3..1.0) / h.sqrt(), rng.gen_range(0.0..TAU)))
            .collect();
        let mut phase = 0.0f32;
        for (k, o) in out[start..start + len].iter_mut().enumerate() {
            let u = k as f32 / len as f32;
            phase = (phase + TAU * f0 * (1.0 + (glide - 1.0) * u) / sr) % TAU;
            let env = (PI * u).sin().powi(2);
            *o = env * harmonics.iter().map(|&(h, a, p)| a * (h * phase + p).sin()).sum::<f32>();
        }
        start += len + (rng.gen_range(0.02..0.12) * sr) as usize;
    }
    let rms = |v: &[f32]| (v.iter().map(|x| x * x).sum::<f32>() / v.len() as f32).sqrt();
    let noise = pink_noise(n, rng);
    let gain = rng.gen_range(0.1..0.3) * rms(&out) / rms(&noise).max(1e-12);
    out.iter_mut().zip(&noise).for_each(|(o, z)| *o += gain * z);
    let peak = out.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let target: f32 = rng.gen_range(0.4..0.8);
    out.iter_mut().for_each(|v| *v *= target / peak);
    out
}

/// Generates a balanced two-class corpus of 4 s clips in the protocol
/// layout [`DatasetManifest::load`] reads. Bonafide clips are full-band;
/// spoof clips share the construction but are lowpassed at 3.4 kHz and sent
/// through the 8-bit codec proxy. Per class, one fifth (at least one) goes to
/// dev and to eval when `n_per_class >= 3`; smaller corpora are train-only.
pub fn synth_dataset(n_per_class: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be >= 1".into()));
    }
    let held = if n_per_class >= 3 { (n_per_class / 5).max(1) } else { 0 };
    let n_train = n_per_class - 2 * held;
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&out_dir.join(PROTOCOL_DIR))?;
    let mut protocols: [Vec<ProtocolEntry>; 3] = Default::default();
    for (ci, key) in [Key::Bonafide, Key::Spoof].into_iter().enumerate() {
        for i in 0..n_per_class {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + held {
                Split::Dev
            } else {
                Split::Eval
            };
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, (ci * n_per_class + i) as u64));
            let clip = AudioClip::new(voiced_clip(&mut rng), SAMPLE_RATE)?;
            let clip = match key {
                Key::Bonafide => clip,
                Key::Spoof => codec_proxy(&biquad_filter(&clip, FilterKind::Lowpass, 3400.0, 0.707)?, 8, 2)?,
            };
            let tag = match split {
                Split::Train => 'T',
                Split::Dev => 'D',
                Split::Eval => 'E',
            };
            let utt = format!("SYN_{tag}_{:07}", ci * n_per_class + i);
            let dir = out_dir.join(split.audio_dir()).join("wav");
            mkdir(&dir)?;
            write_wav(&dir.join(format!("{utt}.wav")), &clip, WavFormat::Pcm16)?;
            protocols[split.index()].push(ProtocolEntry {
                speaker_id: format!("SYN_{:04}", i % 8),
                utterance_id: utt,
                environment: "-".into(),
                system_id: if key == Key::Bonafide { "-".into() } else { "S01".into() },
                key,
            });
        }
    }
    for split in Split::ALL {
        let entries = &protocols[split.index()];
        if !entries.is_empty() {
            write_protocol(&out_dir.join(PROTOCOL_DIR).join(split.protocol_file()), entries)?;
        }
    }
    DatasetManifest::load(out_dir, SAMPLE_RATE)
}

/// Stages applied to every waveform, in order.
pub const PIPELINE: [&str; 4] = ["resample", "fix_length", "zscore", "augment"];

/// Model-ready samples and the stages that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub samples: Vec<f32>,
    pub stages: Vec<&'static str>,
    pub augment: Option<AugmentKind>,
}

/// resample -> fix_length -> zscore -> augment. A length-changing
/// augmentation is followed by another fix_length.
pub fn prepare_clip(
    clip: &AudioClip,
    sample_rate: u32,
    input_len: usize,
    augment: Option<(&AugmentPolicy, u64)>,
) -> Result<Prepared> {
    let mut stages = Vec::with_capacity(5);
    let clip = resample(clip, sample_rate)?;
    stages.push(PIPELINE[0]);
    let clip = fix_length(&clip, input_len)?;
    stages.push(PIPELINE[1]);
    let mut clip = zscore_normalize(&clip)?;
    stages.push(PIPELINE[2]);
    let mut applied = None;
    if let Some((policy, seed)) = augment {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(aug) = policy.choose(&mut rng) {
            clip = aug.apply(&clip, rng.gen())?;
            stages.push(PIPELINE[3]);
            applied = Some(aug.kind());
            if clip.len() != input_len {
                clip = fix_length(&clip, input_len)?;
                stages.push(PIPELINE[1]);
            }
        }
    }
    Ok(Prepared {
        samples: clip.into_samples(),
        stages,
        augment: applied,
    })
}

/// Reads a whitespace-separated feature matrix (one frame per line) and
/// averages it over frames.
pub fn load_features(path: &Path) -> Result<Vec<f32>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut sum: Vec<f64> = Vec::new();
    let mut frames = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Protocol {
                path: path.to_path_buf(),
                line: i + 1,
                detail: "non-numeric feature value".into(),
            })?;
        if frames == 0 {
            sum = vec![0.0; row.len()];
        } else if row.len() != sum.len() {
            return Err(Error::Protocol {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("{} values, expected {}", row.len(), sum.len()),
            });
        }
        sum.iter_mut().zip(&row).for_each(|(s, v)| *s += v);
        frames += 1;
    }
    if frames == 0 || sum.is_empty() {
        return Err(Error::Data(format!("{}: no feature frames", path.display())));
    }
    Ok(sum.iter().map(|s| (s / frames as f64) as f32).collect())
}

fn is_feature_file(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "feat")
}

/// Loads one manifest entry. Feature files bypass resampling and
/// augmentation: the averaged vector is padded to `input_len` and z-scored.
pub fn load_entry(
    entry: &ManifestEntry,
    sample_rate: u32,
    input_len: usize,
    augment: Option<(&AugmentPolicy, u64)>,
) -> Result<Prepared> {
    let id = &entry.entry.utterance_id;
    let run = || -> Result<Prepared> {
        if is_feature_file(&entry.path) {
            let v = AudioClip::new(load_features(&entry.path)?, sample_rate)?;
            let v = zscore_normalize(&fix_length(&v, input_len)?)?;
            return Ok(Prepared {
                samples: v.into_samples(),
                stages: vec!["features", PIPELINE[1], PIPELINE[2]],
                augment: None,
            });
        }
        let clip = load_audio(&entry.path)?;
        prepare_clip(&clip, sample_rate, input_len, augment)
    };
    run().map_err(|e| e.for_utterance(id))
}

/// Batching options shared by training and scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub input_len: usize,
    pub seed: u64,
    /// Only used on the train split.
    pub augment: AugmentPolicy,
    /// Pool every attack under the spoof label.
    pub unified: bool,
    /// With `unified` off, spoof entries are restricted to these systems
    /// (all when empty).
    pub attacks: Vec<String>,
    pub exec: ExecMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<f32>,
    pub ids: Vec<String>,
    pub augments: Vec<Option<AugmentKind>>,
}

/// Iterator over the batches of one pass through a split.
pub struct BatchIter<'a> {
    manifest: &'a DatasetManifest,
    entries: Vec<&'a ManifestEntry>,
    order: Vec<usize>,
    pos: usize,
    cfg: &'a LoaderConfig,
    train: bool,
    epoch: u64,
}

fn shuffled(mut v: Vec<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    v.shuffle(rng);
    v
}

/// Balanced order for the train split: the minority class is oversampled to
/// the majority count, both classes are shuffled, then interleaved so that
/// every batch is as close to half/half as its size allows. Batches are
/// then shuffled as units.
fn balanced_order(labels: &[f32], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1.0).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0.0).collect();
    if pos.is_empty() || neg.is_empty() {
        return shuffled((0..labels.len()).collect(), rng);
    }
    let target = pos.len().max(neg.len());
    let mut fill = |class: &[usize]| {
        let mut out = Vec::with_capacity(target);
        while out.len() < target {
            let take = (target - out.len()).min(class.len());
            out.extend(shuffled(class.to_vec(), rng).into_iter().take(take));
        }
        out
    };
    let (p, n) = (fill(&pos), fill(&neg));
    let mut inter = Vec::with_capacity(2 * target);
    for (a, b) in p.into_iter().zip(n) {
        inter.push(a);
        inter.push(b);
    }
    let mut chunks: Vec<Vec<usize>> = inter.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.shuffle(rng);
    for c in &mut chunks {
        c.shuffle(rng);
    }
    chunks.concat()
}

/// Batches of `split`. The train split is class-balanced, shuffled per
/// epoch and augmented; dev and eval are served in protocol order as-is.
pub fn batch_iter<'a>(
    manifest: &'a DatasetManifest,
    split: Split,
    cfg: &'a LoaderConfig,
    epoch: u64,
) -> Result<BatchIter<'a>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let entries: Vec<&ManifestEntry> = manifest
        .split(split)
        .iter()
        .filter(|e| {
            cfg.unified
                || cfg.attacks.is_empty()
                || e.entry.key == Key::Bonafide
                || cfg.attacks.contains(&e.entry.system_id)
        })
        .collect();
    if entries.is_empty() {
        return Err(Error::Data(format!("split {split} has no entries")));
    }
    let train = split == Split::Train;
    let order = if train {
        let labels: Vec<f32> = entries.iter().map(|e| e.entry.key.label()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch));
        balanced_order(&labels, cfg.batch_size, &mut rng)
    } else {
        (0..entries.len()).collect()
    };
    Ok(BatchIter {
        manifest,
        entries,
        order,
        pos: 0,
        cfg,
        train,
        epoch,
    })
}

impl BatchIter<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.cfg.batch_size)
    }

    pub fn num_items(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Result<Batch>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.cfg.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        let start = self.pos;
        self.pos = end;
        let cfg = self.cfg;
        let (manifest, entries, train, epoch) = (self.manifest, &self.entries, self.train, self.epoch);
        let prepared = cfg.exec.map(idx.len(), |j| {
            let e = entries[idx[j]];
            let aug = train.then(|| {
                let s = mix_seed(mix_seed(cfg.seed ^ 0xA5A5, epoch), (start + j) as u64);
                (&cfg.augment, s)
            });
            load_entry(e, manifest.sample_rate, cfg.input_len, aug)
        });
        let n = idx.len();
        let mut data = Vec::with_capacity(n * cfg.input_len);
        let mut augments = Vec::with_capacity(n);
        for p in prepared {
            match p {
                Ok(p) => {
                    data.extend_from_slice(&p.samples);
                    augments.push(p.augment);
                }
                Err(e) => return Some(Err(e)),
            }
        }
        let batch = Tensor::new(&[n, 1, cfg.input_len], data).map(|inputs| Batch {
            inputs,
            labels: idx.iter().map(|&i| entries[i].entry.key.label()).collect(),
            ids: idx.iter().map(|&i| entries[i].entry.utterance_id.clone()).collect(),
            augments,
        });
        Some(batch)
    }
}
