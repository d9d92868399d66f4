//! Waveform ingestion, preprocessing and augmentation.

mod augment;
mod dsp;

pub use augment::{Augment, AugmentKind, AugmentPolicy};
pub use dsp::{
    biquad_filter, codec_proxy, convolve_truncated, fix_length, kaiser_beta, resample, reverberate,
    synth_rir, trim_silence, zscore_normalize, FilterKind, Rir, DEFAULT_SAMPLES, SAMPLE_RATE,
};

use std::fs::File;
use std::io::{BufReader, Read, Seek};
use std::path::Path;

use crate::error::{Error, Result};

/// Mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Keeps the rate, replaces the samples. Used by the DSP routines whose
    /// outputs are finite by construction.
    pub(crate) fn with_samples(&self, samples: Vec<f32>) -> AudioClip {
        AudioClip {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

/// On-disk sample encoding used by [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Reads a RIFF/WAVE file (PCM16 or IEEE float32, any channel count) or a
/// FLAC stream, chosen by extension. Multi-channel audio is averaged to mono.
pub fn load_audio(path: &Path) -> Result<AudioClip> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("flac") => load_flac(path),
        _ => load_wav(path),
    }
}

pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_wav(BufReader::new(file), &path.display().to_string())
}

fn map_hound(e: hound::Error, name: &str) -> Error {
    match e {
        hound::Error::Unsupported => Error::UnsupportedCodec(format!("{name}: format not supported")),
        hound::Error::IoError(io) => Error::io(name, io),
        hound::Error::FormatError(msg) => Error::TruncatedHeader(format!("{name}: {msg}")),
        other => Error::Data(format!("{name}: {other}")),
    }
}

fn read_wav<R: Read + Seek>(reader: R, name: &str) -> Result<AudioClip> {
    // Any read failure while parsing the header means the file stops short.
    let mut r = hound::WavReader::new(reader).map_err(|e| match e {
        hound::Error::IoError(_) => Error::TruncatedHeader(name.to_string()),
        other => map_hound(other, name),
    })?;
    let spec = r.spec();
    if spec.channels == 0 {
        return Err(Error::UnsupportedCodec(format!("{name}: zero channels")));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => r
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => r.samples::<f32>().collect::<std::result::Result<_, _>>(),
        (fmt, bits) => {
            return Err(Error::UnsupportedCodec(format!(
                "{name}: {bits}-bit {fmt:?} samples (PCM16 or float32 expected)"
            )))
        }
    }
    .map_err(|e| match e {
        hound::Error::IoError(_) | hound::Error::FormatError(_) => {
            Error::Data(format!("{name}: sample data ends early"))
        }
        other => map_hound(other, name),
    })?;
    let ch = spec.channels as usize;
    if interleaved.len() < ch {
        return Err(Error::EmptyAudio(name.to_string()));
    }
    AudioClip::new(downmix(&interleaved, ch), spec.sample_rate)
}

fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    if channels == 1 {
        return interleaved.to_vec();
    }
    interleaved
        .chunks_exact(channels)
        .map(|f| f.iter().sum::<f32>() / channels as f32)
        .collect()
}

pub fn load_flac(path: &Path) -> Result<AudioClip> {
    let name = path.display().to_string();
    let mut r = claxon::FlacReader::open(path).map_err(|e| match e {
        claxon::Error::IoError(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::TruncatedHeader(name.clone())
        }
        claxon::Error::IoError(io) => Error::io(path, io),
        claxon::Error::Unsupported(m) => Error::UnsupportedCodec(format!("{name}: {m}")),
        claxon::Error::FormatError(m) => Error::TruncatedHeader(format!("{name}: {m}")),
    })?;
    let info = r.streaminfo();
    let scale = 1.0 / (1u64 << (info.bits_per_sample - 1)) as f32;
    let interleaved: Vec<f32> = r
        .samples()
        .map(|s| s.map(|v| v as f32 * scale))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Data(format!("{name}: {e}")))?;
    let ch = info.channels as usize;
    if interleaved.len() < ch {
        return Err(Error::EmptyAudio(name));
    }
    AudioClip::new(downmix(&interleaved, ch), info.sample_rate)
}

/// Writes a mono WAV file. Float32 round-trips bit-exactly; PCM16 rounds
/// and saturates.
pub fn write_wav(path: &Path, clip: &AudioClip, format: WavFormat) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let name = path.display().to_string();
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| map_hound(e, &name))?;
    for &s in &clip.samples {
        match format {
            WavFormat::Pcm16 => w.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
            WavFormat::Float32 => w.write_sample(s),
        }
        .map_err(|e| map_hound(e, &name))?;
    }
    w.finalize().map_err(|e| map_hound(e, &name))
}
