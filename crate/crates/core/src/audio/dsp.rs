use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::AudioClip;
use crate::error::{Error, Result};

/// Working sample rate of the model input.
pub const SAMPLE_RATE: u32 = 16_000;
/// Four seconds at [`SAMPLE_RATE`].
pub const DEFAULT_SAMPLES: usize = 64_000;

/// Zero crossings of the sinc kernel kept on each side.
const SINC_ZEROS: usize = 16;
/// Kaiser window shape parameter (about 80 dB stopband).
const KAISER_BETA: f64 = 8.6;
/// Passband edge as a fraction of the narrower Nyquist frequency.
const ROLLOFF: f64 = 0.95;
/// Above this many phases the kernel is evaluated per output sample.
const MAX_TABLE_PHASES: usize = 4096;

pub fn kaiser_beta() -> f64 {
    KAISER_BETA
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let (mut sum, mut term, q) = (1.0, 1.0, x * x / 4.0);
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

struct SincKernel {
    cutoff: f64,
    half_width: f64,
    i0_beta: f64,
}

impl SincKernel {
    fn new(up: u64, down: u64) -> Self {
        let cutoff = ROLLOFF * (up as f64 / down as f64).min(1.0);
        SincKernel {
            cutoff,
            half_width: SINC_ZEROS as f64 / cutoff,
            i0_beta: bessel_i0(KAISER_BETA),
        }
    }

    /// Kernel value at offset `t` input samples.
    fn at(&self, t: f64) -> f64 {
        let r = t / self.half_width;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let x = self.cutoff * t;
        let sinc = if x.abs() < 1e-12 {
            1.0
        } else {
            (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
        };
        self.cutoff * sinc * bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.i0_beta
    }

    /// Taps for fractional position `frac` in [0,1), starting at input index
    /// `floor(pos) - reach + 1`, normalized to unit DC gain.
    fn taps(&self, frac: f64, reach: usize) -> Vec<f64> {
        let mut taps: Vec<f64> = (0..2 * reach)
            .map(|j| self.at(frac + reach as f64 - 1.0 - j as f64))
            .collect();
        let s: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|v| *v /= s);
        taps
    }
}

/// Rational-ratio resampling of raw samples by `up / down`. Edge samples are
/// replicated beyond both ends.
fn resample_ratio(x: &[f32], up: u64, down: u64, out_len: usize) -> Vec<f32> {
    let g = gcd(up, down);
    let (up, down) = (up / g, down / g);
    if up == down {
        let mut y = x.to_vec();
        y.resize(out_len, *x.last().unwrap_or(&0.0));
        return y;
    }
    let k = SincKernel::new(up, down);
    let reach = k.half_width.ceil() as usize + 1;
    let n = x.len() as i64;
    let sample = |i: i64| x[i.clamp(0, n - 1) as usize] as f64;
    let table: Option<Vec<Vec<f64>>> = (up as usize <= MAX_TABLE_PHASES)
        .then(|| (0..up).map(|p| k.taps(p as f64 / up as f64, reach)).collect());
    (0..out_len as u64)
        .map(|m| {
            let num = m * down;
            let base = (num / up) as i64;
            let phase = num % up;
            let owned;
            let taps = match &table {
                Some(t) => &t[phase as usize],
                None => {
                    owned = k.taps(phase as f64 / up as f64, reach);
                    &owned
                }
            };
            let start = base - reach as i64 + 1;
            taps.iter()
                .enumerate()
                .map(|(j, &h)| h * sample(start + j as i64))
                .sum::<f64>() as f32
        })
        .collect()
}

/// Kaiser-windowed sinc polyphase resampling. The output length is
/// `round(len * target / source)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    let src = clip.sample_rate();
    if src == target_rate || clip.is_empty() {
        return AudioClip::new(clip.samples().to_vec(), target_rate);
    }
    let out_len = ((clip.len() as u64 * target_rate as u64) as f64 / src as f64).round() as usize;
    let y = resample_ratio(clip.samples(), target_rate as u64, src as u64, out_len.max(1));
    AudioClip::new(y, target_rate)
}

/// Truncates to the first `target` samples or zero-pads at the tail.
pub fn fix_length(clip: &AudioClip, target: usize) -> Result<AudioClip> {
    if target == 0 {
        return Err(Error::Config("target length must be >= 1".into()));
    }
    if clip.is_empty() {
        return Err(Error::Data("cannot fix the length of an empty clip".into()));
    }
    let mut s = clip.samples().to_vec();
    s.resize(target, 0.0);
    Ok(clip.with_samples(s))
}

/// `(x - mean) / sigma` with the population sigma. Clips with sigma below
/// 1e-8 map to all zeros.
pub fn zscore_normalize(clip: &AudioClip) -> Result<AudioClip> {
    if clip.is_empty() {
        return Err(Error::Data("cannot normalize an empty clip".into()));
    }
    let n = clip.len() as f64;
    let mean = clip.samples().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = clip.samples().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    if sigma < 1e-8 {
        return Ok(clip.with_samples(vec![0.0; clip.len()]));
    }
    Ok(clip.with_samples(clip.samples().iter().map(|&v| ((v as f64 - mean) / sigma) as f32).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Highpass,
    Lowpass,
}

/// One second-order section with cookbook coefficients, zero initial state.
pub fn biquad_filter(clip: &AudioClip, kind: FilterKind, cutoff_hz: f32, q: f32) -> Result<AudioClip> {
    let fs = clip.sample_rate() as f64;
    let fc = cutoff_hz as f64;
    if !(fc > 0.0 && fc < fs / 2.0) {
        return Err(Error::Config(format!("cutoff {cutoff_hz} Hz outside (0, {}) Hz", fs / 2.0)));
    }
    if q <= 0.0 {
        return Err(Error::Config("filter Q must be positive".into()));
    }
    let w0 = 2.0 * std::f64::consts::PI * fc / fs;
    let (sin, cos) = w0.sin_cos();
    let alpha = sin / (2.0 * q as f64);
    let (b0, b1, b2) = match kind {
        FilterKind::Lowpass => ((1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0),
        FilterKind::Highpass => ((1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0),
    };
    let (a0, a1, a2) = (1.0 + alpha, -2.0 * cos, 1.0 - alpha);
    let (b0, b1, b2, a1, a2) = (b0 / a0, b1 / a0, b2 / a0, a1 / a0, a2 / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let out = clip
        .samples()
        .iter()
        .map(|&x| {
            let x = x as f64;
            let y = b0 * x + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x;
            y2 = y1;
            y1 = y;
            y as f32
        })
        .collect();
    Ok(clip.with_samples(out))
}

/// Room impulse response source for [`reverberate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Rir {
    Clip(AudioClip),
    Synth { decay_s: f32, seed: u64 },
}

/// Unit impulse followed by white noise under an `exp(-t / decay_s)`
/// envelope, six time constants long.
pub fn synth_rir(decay_s: f32, sample_rate: u32, seed: u64) -> Result<AudioClip> {
    if decay_s <= 0.0 || !decay_s.is_finite() {
        return Err(Error::Config("reverb decay must be positive".into()));
    }
    let tau = decay_s as f64 * sample_rate as f64;
    let len = (6.0 * tau).ceil() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Vec::with_capacity(len);
    h.push(1.0f32);
    for t in 1..len {
        let z: f64 = StandardNormal.sample(&mut rng);
        h.push((0.3 * z * (-(t as f64) / tau).exp()) as f32);
    }
    AudioClip::new(h, sample_rate)
}

/// Direct-form convolution `y[n] = sum_k h[k] x[n-k]` for `n < len(x)`.
pub fn convolve_truncated(x: &[f32], h: &[f32]) -> Vec<f32> {
    (0..x.len())
        .map(|n| {
            let kmax = h.len().min(n + 1);
            (0..kmax).map(|k| h[k] as f64 * x[n - k] as f64).sum::<f64>() as f32
        })
        .collect()
}

/// Convolves with an impulse response, truncates to the input length and
/// rescales to the input's peak.
pub fn reverberate(clip: &AudioClip, rir: &Rir) -> Result<AudioClip> {
    let h = match rir {
        Rir::Clip(c) => {
            if c.sample_rate() != clip.sample_rate() {
                return Err(Error::Config(format!(
                    "impulse response at {} Hz, clip at {} Hz",
                    c.sample_rate(),
                    clip.sample_rate()
                )));
            }
            c.clone()
        }
        Rir::Synth { decay_s, seed } => synth_rir(*decay_s, clip.sample_rate(), *seed)?,
    };
    let mut y = convolve_truncated(clip.samples(), h.samples());
    let (pin, pout) = (clip.peak(), y.iter().fold(0.0f32, |m, v| m.max(v.abs())));
    if pout > 0.0 && pin != pout {
        let g = pin as f64 / pout as f64;
        y.iter_mut().for_each(|v| *v = (*v as f64 * g) as f32);
    }
    Ok(clip.with_samples(y))
}

/// Drops leading and trailing frames whose RMS is more than `threshold_db`
/// below the loudest frame. An all-silent clip keeps one centered frame.
pub fn trim_silence(clip: &AudioClip, threshold_db: f32, frame_ms: f32) -> Result<AudioClip> {
    let frame = (clip.sample_rate() as f64 * frame_ms as f64 / 1000.0).round() as usize;
    if frame == 0 || clip.is_empty() {
        return Err(Error::Config(format!("frame of {frame_ms} ms yields no frame")));
    }
    let s = clip.samples();
    let rms: Vec<f64> = s
        .chunks(frame)
        .map(|f| (f.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / f.len() as f64).sqrt())
        .collect();
    let peak = rms.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        let w = frame.min(s.len());
        let start = (s.len() - w) / 2;
        return Ok(clip.with_samples(s[start..start + w].to_vec()));
    }
    let floor = peak * 10f64.powf(threshold_db as f64 / 20.0);
    let first = rms.iter().position(|&r| r >= floor).unwrap_or(0);
    let last = rms.iter().rposition(|&r| r >= floor).unwrap_or(rms.len() - 1);
    let end = ((last + 1) * frame).min(s.len());
    Ok(clip.with_samples(s[first * frame..end].to_vec()))
}

/// Lossy-codec stand-in: down-resample by `factor`, back up, then uniform
/// quantization with step `2 / 2^bit_depth` (no clipping).
pub fn codec_proxy(clip: &AudioClip, bit_depth: u32, factor: u32) -> Result<AudioClip> {
    if !(4..=16).contains(&bit_depth) {
        return Err(Error::Config(format!("bit depth {bit_depth} outside [4, 16]")));
    }
    if factor == 0 {
        return Err(Error::Config("downrate factor must be >= 1".into()));
    }
    let n = clip.len();
    let mut y = if factor == 1 || n == 0 {
        clip.samples().to_vec()
    } else {
        let short = ((n as f64) / factor as f64).round().max(1.0) as usize;
        let down = resample_ratio(clip.samples(), 1, factor as u64, short);
        resample_ratio(&down, factor as u64, 1, n)
    };
    let step = 2.0f64 / (1u64 << bit_depth) as f64;
    y.iter_mut().for_each(|v| *v = ((*v as f64 / step).round() * step) as f32);
    Ok(clip.with_samples(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rustfft::{num_complex::Complex, FftPlanner};

    fn clip(v: Vec<f32>, sr: u32) -> AudioClip {
        AudioClip::new(v, sr).unwrap()
    }

    fn sine(freq: f64, sr: u32, n: usize, amp: f64) -> AudioClip {
        clip(
            (0..n)
                .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin()) as f32)
                .collect(),
            sr,
        )
    }

    fn rms(x: &[f32]) -> f64 {
        (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn resample_same_rate_is_identity() {
        let c = sine(440.0, 16000, 1000, 0.5);
        assert_eq!(resample(&c, 16000).unwrap(), c);
    }

    #[test]
    fn resample_preserves_dc() {
        let c = clip(vec![0.7; 9600], 96000);
        let r = resample(&c, 16000).unwrap();
        assert_eq!(r.len(), 1600);
        assert!(r.samples().iter().all(|v| (v - 0.7).abs() < 1e-3));
    }

    #[test]
    fn resample_length_rule() {
        let c = clip(vec![0.1; 44101], 44100);
        assert_eq!(resample(&c, 16000).unwrap().len(), (44101.0f64 * 16000.0 / 44100.0).round() as usize);
        let c = clip(vec![0.1; 1001], 16001);
        assert_eq!(resample(&c, 16000).unwrap().len(), 1001);
    }

    #[test]
    fn resample_sine_peak() {
        let c = sine(1000.0, 96000, 96000, 0.5);
        let r = resample(&c, 16000).unwrap();
        let n = r.len();
        let mut buf: Vec<Complex<f64>> = r.samples().iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let peak = (1..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
        let bin_hz = 16000.0 / n as f64;
        assert!((peak as f64 * bin_hz - 1000.0).abs() <= bin_hz);
    }

    #[test]
    fn fix_length_cases() {
        let c = clip(vec![1.0; 80000], 16000);
        let f = fix_length(&c, DEFAULT_SAMPLES).unwrap();
        assert_eq!(f.samples(), &c.samples()[..64000]);
        let c = clip(vec![1.0; 32000], 16000);
        let f = fix_length(&c, DEFAULT_SAMPLES).unwrap();
        assert!(f.samples()[..32000].iter().all(|&v| v == 1.0));
        assert!(f.samples()[32000..].iter().all(|&v| v == 0.0));
        let c = clip(vec![0.5; 64000], 16000);
        assert_eq!(fix_length(&c, DEFAULT_SAMPLES).unwrap(), c);
        assert!(matches!(fix_length(&clip(vec![], 16000), 10), Err(Error::Data(_))));
    }

    #[test]
    fn zscore_cases() {
        assert_eq!(zscore_normalize(&clip(vec![1.0; 3], 16000)).unwrap().samples(), &[0.0; 3]);
        let z = zscore_normalize(&clip(vec![1.0, 2.0, 3.0], 16000)).unwrap();
        let sd = (2.0f64 / 3.0).sqrt();
        for (a, x) in z.samples().iter().zip([1.0, 2.0, 3.0]) {
            assert!((*a as f64 - (x - 2.0) / sd).abs() < 1e-6);
        }
        let unit = clip(vec![1.0, -1.0, 1.0, -1.0], 16000);
        let z = zscore_normalize(&unit).unwrap();
        for (a, b) in z.samples().iter().zip(unit.samples()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn biquad_dc_behaviour() {
        let dc = clip(vec![1.0; 16000], 16000);
        let hp = biquad_filter(&dc, FilterKind::Highpass, 1000.0, 0.707).unwrap();
        assert!(hp.samples()[8000..].iter().all(|v| v.abs() < 1e-3));
        let lp = biquad_filter(&dc, FilterKind::Lowpass, 1000.0, 0.707).unwrap();
        assert!(lp.samples()[8000..].iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn biquad_rms_ratios() {
        for (f, lo, hi) in [(100.0, 0.0, 0.1), (5000.0, 0.9, f64::INFINITY)] {
            let x = sine(f, 16000, 16000, 0.5);
            let y = biquad_filter(&x, FilterKind::Highpass, 1000.0, 0.707).unwrap();
            let ratio = rms(&y.samples()[4000..]) / rms(&x.samples()[4000..]);
            assert!(ratio > lo && ratio < hi, "{f} Hz ratio {ratio}");
        }
    }

    #[test]
    fn biquad_cutoff_checked() {
        let c = clip(vec![0.0; 10], 16000);
        assert!(matches!(biquad_filter(&c, FilterKind::Lowpass, 8000.0, 0.707), Err(Error::Config(_))));
        assert!(matches!(biquad_filter(&c, FilterKind::Lowpass, 0.0, 0.707), Err(Error::Config(_))));
    }

    #[test]
    fn reverb_cases() {
        let x = clip(vec![0.3, -0.2, 0.9, 0.1], 16000);
        let same = reverberate(&x, &Rir::Clip(clip(vec![1.0], 16000))).unwrap();
        for (a, b) in same.samples().iter().zip(x.samples()) {
            assert!((a - b).abs() < 1e-6);
        }
        let z = reverberate(&clip(vec![0.0; 100], 16000), &Rir::Synth { decay_s: 0.01, seed: 1 }).unwrap();
        assert!(z.samples().iter().all(|&v| v == 0.0));
        assert_eq!(convolve_truncated(&[1.0, 2.0, 3.0], &[1.0, 0.5]), vec![1.0, 2.5, 4.0]);
        let y = reverberate(&clip(vec![1.0, 2.0, 3.0], 16000), &Rir::Clip(clip(vec![1.0, 0.5], 16000))).unwrap();
        assert!((y.peak() - 3.0).abs() < 1e-6);
        assert!(reverberate(&x, &Rir::Clip(clip(vec![1.0], 8000))).is_err());
    }

    #[test]
    fn trim_cases() {
        let tone = sine(440.0, 16000, 16000, 0.5);
        assert_eq!(trim_silence(&tone, -40.0, 25.0).unwrap().len(), tone.len());

        let mut s = vec![0.0f32; 8000];
        s.extend_from_slice(tone.samples());
        s.extend(vec![0.0f32; 8000]);
        let t = trim_silence(&clip(s, 16000), -40.0, 25.0).unwrap();
        assert!((t.len() as i64 - 16000).abs() <= 400, "len {}", t.len());

        let z = trim_silence(&clip(vec![0.0; 16000], 16000), -40.0, 25.0).unwrap();
        assert_eq!(z.samples(), &[0.0; 400]);
    }

    #[test]
    fn codec_proxy_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = clip((0..1000).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), 16000);
        let y = codec_proxy(&x, 16, 1).unwrap();
        assert!(y.samples().iter().zip(x.samples()).all(|(a, b)| (a - b).abs() <= 2.0 / 65536.0));
        for n in [1, 7, 999, 1000] {
            let c = clip(vec![0.1; n], 16000);
            assert_eq!(codec_proxy(&c, 8, 2).unwrap().len(), n);
            assert_eq!(codec_proxy(&c, 8, 3).unwrap().len(), n);
        }
        let s = sine(440.0, 16000, 16000, 0.5);
        let p = codec_proxy(&s, 8, 2).unwrap();
        let noise: Vec<f32> = p.samples().iter().zip(s.samples()).map(|(a, b)| a - b).collect();
        let snr = 20.0 * (rms(s.samples()) / rms(&noise)).log10();
        assert!(snr > 10.0 && snr < 50.0, "snr {snr}");
    }

    proptest! {
        #[test]
        fn fix_length_idempotent(len in 1usize..3000, target in 1usize..3000) {
            let c = clip(vec![0.25; len], 16000);
            let once = fix_length(&c, target).unwrap();
            prop_assert_eq!(fix_length(&once, target).unwrap(), once);
        }

        #[test]
        fn zscore_moments(seed in any::<u64>(), len in 2usize..2000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = clip((0..len).map(|_| rng.gen_range(-3.0f32..3.0)).collect(), 16000);
            let z = zscore_normalize(&c).unwrap();
            let n = len as f64;
            let m = z.samples().iter().map(|&v| v as f64).sum::<f64>() / n;
            let sd = (z.samples().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(m.abs() < 1e-4);
            prop_assert!((sd - 1.0).abs() < 1e-4);
        }

        #[test]
        fn biquad_is_linear(seed in any::<u64>(), a in -2.0f32..2.0, b in -2.0f32..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f32> = (0..512).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let y: Vec<f32> = (0..512).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            let mix: Vec<f32> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            for kind in [FilterKind::Highpass, FilterKind::Lowpass] {
                let f = |v: &[f32]| biquad_filter(&clip(v.to_vec(), 16000), kind, 1200.0, 0.707).unwrap().into_samples();
                let (fx, fy, fm) = (f(&x), f(&y), f(&mix));
                for i in 0..512 {
                    prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-5);
                }
            }
        }
    }
}
