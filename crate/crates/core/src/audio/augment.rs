use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dsp::{biquad_filter, codec_proxy, reverberate, trim_silence, FilterKind, Rir};
use super::AudioClip;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Highpass,
    Lowpass,
    Reverb,
    TrimSilence,
    CodecProxy,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 5] = [
        AugmentKind::Highpass,
        AugmentKind::Lowpass,
        AugmentKind::Reverb,
        AugmentKind::TrimSilence,
        AugmentKind::CodecProxy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Highpass => "highpass",
            AugmentKind::Lowpass => "lowpass",
            AugmentKind::Reverb => "reverb",
            AugmentKind::TrimSilence => "trim_silence",
            AugmentKind::CodecProxy => "codec_proxy",
        }
    }

    /// Only silence trimming may change the clip length.
    pub fn preserves_length(self) -> bool {
        self != AugmentKind::TrimSilence
    }
}

/// One fully parameterized augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Augment {
    Filter { kind: FilterKind, cutoff_hz: f32, q: f32 },
    Reverb { decay_s: f32 },
    TrimSilence { threshold_db: f32, frame_ms: f32 },
    CodecProxy { bit_depth: u32, factor: u32 },
}

impl Augment {
    pub fn kind(&self) -> AugmentKind {
        match self {
            Augment::Filter {
                kind: FilterKind::Highpass,
                ..
            } => AugmentKind::Highpass,
            Augment::Filter { .. } => AugmentKind::Lowpass,
            Augment::Reverb { .. } => AugmentKind::Reverb,
            Augment::TrimSilence { .. } => AugmentKind::TrimSilence,
            Augment::CodecProxy { .. } => AugmentKind::CodecProxy,
        }
    }

    /// `seed` only matters for the synthetic impulse response.
    pub fn apply(&self, clip: &AudioClip, seed: u64) -> Result<AudioClip> {
        match *self {
            Augment::Filter { kind, cutoff_hz, q } => biquad_filter(clip, kind, cutoff_hz, q),
            Augment::Reverb { decay_s } => reverberate(clip, &Rir::Synth { decay_s, seed }),
            Augment::TrimSilence {
                threshold_db,
                frame_ms,
            } => trim_silence(clip, threshold_db, frame_ms),
            Augment::CodecProxy { bit_depth, factor } => codec_proxy(clip, bit_depth, factor),
        }
    }
}

/// On-the-fly augmentation policy. With probability `probability` a clip
/// receives exactly one augmentation drawn uniformly from `kinds`; otherwise
/// it passes through untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub enabled: bool,
    pub probability: f32,
    pub kinds: Vec<AugmentKind>,
    pub highpass_hz: f32,
    pub lowpass_hz: f32,
    pub filter_q: f32,
    pub reverb_decay_s: f32,
    pub trim_threshold_db: f32,
    pub trim_frame_ms: f32,
    pub codec_bit_depth: u32,
    pub codec_factor: u32,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            enabled: true,
            probability: 0.5,
            kinds: AugmentKind::ALL.to_vec(),
            highpass_hz: 300.0,
            lowpass_hz: 3400.0,
            filter_q: 0.707,
            reverb_decay_s: 0.05,
            trim_threshold_db: -40.0,
            trim_frame_ms: 25.0,
            codec_bit_depth: 8,
            codec_factor: 2,
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        AugmentPolicy {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!(
                "augment probability {} outside [0, 1]",
                self.probability
            )));
        }
        if self.enabled && self.probability > 0.0 && self.kinds.is_empty() {
            return Err(Error::Config("augment enabled with no kinds".into()));
        }
        if !(4..=16).contains(&self.codec_bit_depth) || self.codec_factor == 0 {
            return Err(Error::Config("codec proxy needs bit depth in [4, 16] and factor >= 1".into()));
        }
        if self.reverb_decay_s <= 0.0 || self.trim_frame_ms <= 0.0 || self.filter_q <= 0.0 {
            return Err(Error::Config("reverb decay, trim frame and filter Q must be positive".into()));
        }
        Ok(())
    }

    /// Probability that a clip receives `kind`.
    pub fn kind_probability(&self, kind: AugmentKind) -> f32 {
        if !self.enabled || !self.kinds.contains(&kind) {
            return 0.0;
        }
        self.probability / self.kinds.len() as f32
    }

    pub fn spec(&self, kind: AugmentKind) -> Augment {
        match kind {
            AugmentKind::Highpass => Augment::Filter {
                kind: FilterKind::Highpass,
                cutoff_hz: self.highpass_hz,
                q: self.filter_q,
            },
            AugmentKind::Lowpass => Augment::Filter {
                kind: FilterKind::Lowpass,
                cutoff_hz: self.lowpass_hz,
                q: self.filter_q,
            },
            AugmentKind::Reverb => Augment::Reverb {
                decay_s: self.reverb_decay_s,
            },
            AugmentKind::TrimSilence => Augment::TrimSilence {
                threshold_db: self.trim_threshold_db,
                frame_ms: self.trim_frame_ms,
            },
            AugmentKind::CodecProxy => Augment::CodecProxy {
                bit_depth: self.codec_bit_depth,
                factor: self.codec_factor,
            },
        }
    }

    /// Draws at most one augmentation.
    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Augment> {
        if !self.enabled || self.kinds.is_empty() {
            return None;
        }
        let u: f32 = rng.gen();
        if u >= self.probability {
            return None;
        }
        let i = rng.gen_range(0..self.kinds.len());
        Some(self.spec(self.kinds[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..4000).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), 16000).unwrap()
    }

    #[test]
    fn weights_sum_to_probability() {
        let p = AugmentPolicy::default();
        let total: f32 = AugmentKind::ALL.iter().map(|&k| p.kind_probability(k)).sum();
        assert!((total - 0.5).abs() < 1e-6);
        assert_eq!(AugmentPolicy::disabled().kind_probability(AugmentKind::Reverb), 0.0);
    }

    #[test]
    fn choose_frequency() {
        let p = AugmentPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hits = (0..20000).filter(|_| p.choose(&mut rng).is_some()).count();
        assert!((hits as f64 / 20000.0 - 0.5).abs() < 0.02);
    }

    #[test]
    fn every_kind_preserves_rate_and_is_reproducible() {
        let p = AugmentPolicy::default();
        let x = noise(1);
        for kind in AugmentKind::ALL {
            let a = p.spec(kind).apply(&x, 11).unwrap();
            let b = p.spec(kind).apply(&x, 11).unwrap();
            assert_eq!(a, b, "{kind:?}");
            assert_eq!(a.sample_rate(), x.sample_rate());
            if kind.preserves_length() {
                assert_eq!(a.len(), x.len(), "{kind:?}");
            }
            assert_eq!(p.spec(kind).kind(), kind);
        }
    }

    #[test]
    fn validation() {
        let mut p = AugmentPolicy::default();
        assert!(p.validate().is_ok());
        p.probability = 1.5;
        assert!(p.validate().is_err());
    }
}
