//! Audio loading, log-mel spectrograms and a compact paralinguistic descriptor.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TARGET_RATE: u32 = 16_000;
pub const TARGET_SECONDS: f64 = 15.0;
/// Search range of the pitch tracker, Hz.
pub const F0_MIN: f64 = 60.0;
pub const F0_MAX: f64 = 500.0;
pub const VOICING_THRESHOLD: f64 = 0.45;
/// Zero crossings on each side of the resampling kernel.
const SINC_HALF_WIDTH: f64 = 16.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::contract("sample rate must be positive"));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a PCM WAV file as mono 16 kHz samples in `[-1, 1]`.
pub fn read_audio(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!(
                "{}: {bits}-bit {fmt:?} samples",
                path.display()
            )))
        }
    };
    let mono: Vec<f32> = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f32>() / channels as f32)
        .collect();
    resample(&Waveform::new(mono, spec.sample_rate)?, TARGET_RATE)
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(source) => Error::io(path, source),
        hound::Error::Unsupported => Error::Unsupported(format!("{}: unsupported WAV encoding", path.display())),
        other => Error::format(path.display().to_string(), other.to_string()),
    }
}

/// Writes 16-bit mono PCM.
pub fn write_wav_i16(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &wave.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

/// Band-limited windowed-sinc resampling.
pub fn resample(wave: &Waveform, rate: u32) -> Result<Waveform> {
    if rate == 0 {
        return Err(Error::contract("target sample rate must be positive"));
    }
    if wave.sample_rate == rate {
        return Ok(wave.clone());
    }
    let ratio = wave.sample_rate as f64 / rate as f64;
    let cutoff = (1.0 / ratio).min(1.0);
    let half = SINC_HALF_WIDTH / cutoff;
    let n_out = (wave.samples.len() as f64 / ratio).round() as usize;
    let src = &wave.samples;
    let out = (0..n_out)
        .map(|i| {
            let x = i as f64 * ratio;
            let lo = (x - half).ceil().max(0.0) as usize;
            let hi = ((x + half).floor() as usize).min(src.len().saturating_sub(1));
            let mut acc = 0.0;
            for (k, &s) in src.iter().enumerate().take(hi + 1).skip(lo) {
                let t = x - k as f64;
                let win = 0.5 + 0.5 * (PI * t / half).cos();
                acc += s as f64 * cutoff * sinc(cutoff * t) * win;
            }
            acc as f32
        })
        .collect();
    Waveform::new(out, rate)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Truncates or zero-pads at the end to exactly `seconds`.
pub fn pad_or_trim(wave: &Waveform, seconds: f64) -> Waveform {
    let target = (seconds * wave.sample_rate as f64).round() as usize;
    let mut samples = wave.samples.clone();
    samples.resize(target, 0.0);
    Waveform {
        samples,
        sample_rate: wave.sample_rate,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: TARGET_RATE,
            win_ms: 25.0,
            hop_ms: 10.0,
            n_fft: 512,
            n_mels: 64,
            f_min: 60.0,
            f_max: 7800.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn win(&self) -> usize {
        (self.win_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f_min < self.f_max && self.f_max <= self.sample_rate as f64 / 2.0) {
            return Err(Error::contract(format!(
                "mel band [{}, {}] invalid for {} Hz",
                self.f_min, self.f_max, self.sample_rate
            )));
        }
        if self.win() == 0 || self.hop() == 0 || self.n_fft < self.win() || self.n_mels == 0 {
            return Err(Error::contract("invalid mel framing parameters"));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::contract("log floor must be positive"));
        }
        Ok(())
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        if n_samples < self.win() {
            0
        } else {
            1 + (n_samples - self.win()) / self.hop()
        }
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies of the triangular filters, Hz.
pub fn mel_centers(cfg: &MelConfig) -> Vec<f64> {
    mel_edges(cfg)[1..=cfg.n_mels].to_vec()
}

fn mel_edges(cfg: &MelConfig) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max));
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Triangular filterbank, `[n_mels, n_fft / 2 + 1]`.
pub fn mel_filterbank(cfg: &MelConfig) -> Tensor<f64> {
    let edges = mel_edges(cfg);
    let n_bins = cfg.n_fft / 2 + 1;
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    Tensor::from_fn(&[cfg.n_mels, n_bins], |k| {
        let (m, b) = (k / n_bins, k % n_bins);
        let f = b as f64 * bin_hz;
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > lo && f <= c {
            (f - lo) / (c - lo)
        } else if f > c && f < hi {
            (hi - f) / (hi - c)
        } else {
            0.0
        }
    })
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Frames, windows and transforms a signal into power spectra.
struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    n_fft: usize,
    win: usize,
    hop: usize,
}

impl Stft {
    fn new(n_fft: usize, win: usize, hop: usize) -> Self {
        Stft {
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            window: hann(win),
            n_fft,
            win,
            hop,
        }
    }

    fn n_frames(&self, n: usize) -> usize {
        if n < self.win {
            0
        } else {
            1 + (n - self.win) / self.hop
        }
    }

    fn power(&self, samples: &[f32], frame: usize, buf: &mut Vec<Complex<f64>>) -> Vec<f64> {
        let start = frame * self.hop;
        buf.clear();
        buf.extend(
            samples[start..start + self.win]
                .iter()
                .zip(&self.window)
                .map(|(&s, &w)| Complex::new(s as f64 * w, 0.0)),
        );
        buf.resize(self.n_fft, Complex::new(0.0, 0.0));
        self.fft.process(buf);
        buf[..self.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MelSpec {
    /// Natural-log mel energies, `[n_mels, n_frames]`.
    pub values: Tensor<f32>,
    pub hop_seconds: f64,
    pub win_seconds: f64,
}

impl MelSpec {
    pub fn n_frames(&self) -> usize {
        self.values.shape()[1]
    }

    /// Start time of frame `i`, seconds.
    pub fn frame_time(&self, i: usize) -> f64 {
        i as f64 * self.hop_seconds
    }
}

pub fn mel_spectrogram(wave: &Waveform, cfg: &MelConfig) -> Result<MelSpec> {
    cfg.validate()?;
    if wave.sample_rate != cfg.sample_rate {
        return Err(Error::contract(format!(
            "expected {} Hz audio, got {} Hz",
            cfg.sample_rate, wave.sample_rate
        )));
    }
    let n = wave.samples.len();
    if n < cfg.win() {
        return Err(Error::InputTooShort {
            needed: cfg.win(),
            got: n,
        });
    }
    let stft = Stft::new(cfg.n_fft, cfg.win(), cfg.hop());
    let fb = mel_filterbank(cfg);
    let n_bins = cfg.n_fft / 2 + 1;
    let frames = stft.n_frames(n);
    let mut out = vec![0f32; cfg.n_mels * frames];
    let mut buf = Vec::with_capacity(cfg.n_fft);
    for t in 0..frames {
        let p = stft.power(&wave.samples, t, &mut buf);
        for m in 0..cfg.n_mels {
            let row = &fb.data()[m * n_bins..(m + 1) * n_bins];
            let e: f64 = row.iter().zip(&p).map(|(w, v)| w * v).sum();
            out[m * frames + t] = e.max(cfg.log_floor).ln() as f32;
        }
    }
    Ok(MelSpec {
        values: Tensor::new(vec![cfg.n_mels, frames], out)?,
        hop_seconds: cfg.hop() as f64 / cfg.sample_rate as f64,
        win_seconds: cfg.win() as f64 / cfg.sample_rate as f64,
    })
}

/// Pitch estimate of one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PitchFrame {
    pub f0: f64,
    pub voiced: bool,
    /// Normalized autocorrelation at the chosen lag.
    pub strength: f64,
}

/// Normalized-autocorrelation pitch tracker over 60 to 500 Hz.
pub fn estimate_f0(frame: &[f32], sample_rate: u32) -> PitchFrame {
    let sr = sample_rate as f64;
    let unvoiced = PitchFrame {
        f0: 0.0,
        voiced: false,
        strength: 0.0,
    };
    let mean = frame.iter().map(|&v| v as f64).sum::<f64>() / frame.len().max(1) as f64;
    let x: Vec<f64> = frame.iter().map(|&v| v as f64 - mean).collect();
    let min_lag = (sr / F0_MAX).floor().max(1.0) as usize;
    let max_lag = ((sr / F0_MIN).ceil() as usize).min(x.len().saturating_sub(2));
    if max_lag <= min_lag + 1 || x.iter().all(|&v| v == 0.0) {
        return unvoiced;
    }
    let r: Vec<f64> = (0..=max_lag + 1)
        .map(|lag| {
            if lag < min_lag.saturating_sub(1) || lag >= x.len() {
                return 0.0;
            }
            let (a, b) = (&x[..x.len() - lag], &x[lag..]);
            let num: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let ea: f64 = a.iter().map(|p| p * p).sum();
            let eb: f64 = b.iter().map(|q| q * q).sum();
            let den = (ea * eb).sqrt();
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect();
    let best = (min_lag..=max_lag).map(|l| r[l]).fold(f64::MIN, f64::max);
    if !(best > 0.0) {
        return unvoiced;
    }
    // shortest lag that is a local peak close to the global maximum
    let lag = (min_lag..=max_lag)
        .find(|&l| r[l] >= 0.9 * best && r[l] >= r[l - 1] && r[l] >= r[l + 1])
        .unwrap_or(min_lag);
    let (y0, y1, y2) = (r[lag - 1], r[lag], r[lag + 1]);
    let denom = y0 - 2.0 * y1 + y2;
    let shift = if denom.abs() > 1e-12 {
        (0.5 * (y0 - y2) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    };
    let strength = y1.clamp(0.0, 1.0);
    PitchFrame {
        f0: sr / (lag as f64 + shift),
        voiced: strength >= VOICING_THRESHOLD,
        strength,
    }
}

pub const PARA_LLDS: [&str; 8] = [
    "logf0",
    "voicing",
    "rms",
    "zcr",
    "spectral_centroid",
    "spectral_rolloff85",
    "spectral_flux",
    "hnr",
];
pub const PARA_FUNCTIONALS: [&str; 5] = ["mean", "std", "p20", "p50", "p80"];
pub const PARA_DIM: usize = 42;

/// Feature names in vector order: LLD-major functionals, then jitter and shimmer.
pub fn para_feature_names() -> Vec<String> {
    let mut names: Vec<String> = PARA_LLDS
        .iter()
        .flat_map(|l| PARA_FUNCTIONALS.iter().map(move |f| format!("{l}_{f}")))
        .collect();
    names.push("jitter_mean".into());
    names.push("shimmer_mean".into());
    names
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParaVector(pub Vec<f32>);

impl ParaVector {
    pub fn get(&self, name: &str) -> Option<f32> {
        para_feature_names().iter().position(|n| n == name).map(|i| self.0[i])
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        let n = self.0.len();
        Tensor::from_fn(&[n], |i| self.0[i])
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn functionals(values: &[f64]) -> [f64; 5] {
    if values.is_empty() {
        return [0.0; 5];
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    [
        mean,
        std,
        percentile(&sorted, 0.2),
        percentile(&sorted, 0.5),
        percentile(&sorted, 0.8),
    ]
}

fn mean_relative_change(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if !(mean > 0.0) {
        return 0.0;
    }
    let diffs: f64 = xs.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    diffs / (xs.len() - 1) as f64 / mean
}

/// 42 utterance-level descriptors from 25 ms / 10 ms frames.
pub fn paralinguistic_vector(wave: &Waveform) -> Result<ParaVector> {
    let sr = wave.sample_rate as f64;
    let win = (0.025 * sr).round() as usize;
    let hop = (0.010 * sr).round() as usize;
    let needed = (0.1 * sr).round() as usize;
    if wave.samples.len() < needed.max(win) {
        return Err(Error::InputTooShort {
            needed: needed.max(win),
            got: wave.samples.len(),
        });
    }
    let n_fft = win.next_power_of_two();
    let stft = Stft::new(n_fft, win, hop);
    let frames = stft.n_frames(wave.samples.len());
    let bin_hz = sr / n_fft as f64;
    let mut buf = Vec::with_capacity(n_fft);

    let (mut logf0, mut voicing, mut rms, mut zcr) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut centroid, mut rolloff, mut flux, mut hnr) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut periods, mut amps) = (Vec::new(), Vec::new());
    let mut prev_mag: Option<Vec<f64>> = None;

    for t in 0..frames {
        let frame = &wave.samples[t * hop..t * hop + win];
        let energy: f64 = frame.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / win as f64;
        rms.push(energy.sqrt());
        let crossings = frame.windows(2).filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0)).count();
        zcr.push(crossings as f64 / (win - 1) as f64);

        let p = stft.power(&wave.samples, t, &mut buf);
        let total: f64 = p.iter().sum();
        if total > 0.0 {
            centroid.push(p.iter().enumerate().map(|(k, v)| k as f64 * bin_hz * v).sum::<f64>() / total);
            let mut cum = 0.0;
            let k85 = p
                .iter()
                .position(|v| {
                    cum += v;
                    cum >= 0.85 * total
                })
                .unwrap_or(p.len() - 1);
            rolloff.push(k85 as f64 * bin_hz);
        } else {
            centroid.push(0.0);
            rolloff.push(0.0);
        }
        let mag: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
        let norm: f64 = mag.iter().map(|v| v * v).sum::<f64>().sqrt();
        let unit: Vec<f64> = if norm > 0.0 {
            mag.iter().map(|v| v / norm).collect()
        } else {
            vec![0.0; mag.len()]
        };
        flux.push(match &prev_mag {
            Some(prev) => prev.iter().zip(&unit).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(),
            None => 0.0,
        });
        prev_mag = Some(unit);

        let pitch = estimate_f0(frame, wave.sample_rate);
        voicing.push(if pitch.voiced { 1.0 } else { 0.0 });
        if pitch.voiced {
            logf0.push(pitch.f0.ln());
            let r = pitch.strength.clamp(1e-6, 1.0 - 1e-6);
            hnr.push(10.0 * (r / (1.0 - r)).log10());
            periods.push(1.0 / pitch.f0);
            amps.push(frame.iter().map(|v| v.abs() as f64).fold(0.0, f64::max));
        }
    }

    let mut out = Vec::with_capacity(PARA_DIM);
    for lld in [&logf0, &voicing, &rms, &zcr, &centroid, &rolloff, &flux, &hnr] {
        out.extend(functionals(lld).iter().map(|&v| v as f32));
    }
    out.push(mean_relative_change(&periods) as f32);
    out.push(mean_relative_change(&amps) as f32);
    Ok(ParaVector(out))
}

/// CSV with an `id` column followed by the 42 named features.
pub fn para_csv(rows: &[(String, ParaVector)]) -> String {
    let mut out = format!("id,{}\n", para_feature_names().join(","));
    for (id, v) in rows {
        let vals: Vec<String> = v.0.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(out, "{id},{}", vals.join(","));
    }
    out
}

/// `amplitude * sin(2 pi f t)` sampled at `sample_rate`.
pub fn sine(freq: f64, amplitude: f64, seconds: f64, sample_rate: u32) -> Waveform {
    let n = (seconds * sample_rate as f64).round() as usize;
    let samples = (0..n)
        .map(|i| (amplitude * (2.0 * PI * freq * i as f64 / sample_rate as f64).sin()) as f32)
        .collect();
    Waveform { samples, sample_rate }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seconds: f64, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (seconds * 16000.0) as usize;
        Waveform {
            samples: (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect(),
            sample_rate: 16000,
        }
    }

    #[test]
    fn framing_formula() {
        let cfg = MelConfig::default();
        assert_eq!((cfg.win(), cfg.hop()), (400, 160));
        assert_eq!(cfg.n_frames(240_000), 1498);
        for n in [400, 401, 559, 560, 561, 1234] {
            let m = mel_spectrogram(&Waveform::new(vec![0.1; n], 16000).unwrap(), &cfg).unwrap();
            assert_eq!(m.n_frames(), 1 + (n - 400) / 160);
        }
        assert!(matches!(
            mel_spectrogram(&Waveform::new(vec![0.0; 399], 16000).unwrap(), &cfg),
            Err(Error::InputTooShort { needed: 400, got: 399 })
        ));
    }

    #[test]
    fn filterbank_coverage() {
        let cfg = MelConfig::default();
        let fb = mel_filterbank(&cfg);
        let n_bins = 257;
        for m in 0..64 {
            assert!(fb.data()[m * n_bins..(m + 1) * n_bins].iter().sum::<f64>() > 0.0);
        }
        for b in 0..n_bins {
            let f = b as f64 * 31.25;
            if f > cfg.f_min && f < cfg.f_max {
                let col: f64 = (0..64).map(|m| fb.data()[m * n_bins + b]).sum();
                assert!(col > 0.0, "bin {b}");
            }
        }
    }

    #[test]
    fn silence_hits_floor() {
        let m = mel_spectrogram(&Waveform::new(vec![0.0; 4000], 16000).unwrap(), &MelConfig::default()).unwrap();
        let floor = (1e-10f64).ln() as f32;
        assert!(m.values.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn tone_peaks_near_center() {
        let cfg = MelConfig::default();
        let m = mel_spectrogram(&sine(1000.0, 0.5, 0.5, 16000), &cfg).unwrap();
        let centers = mel_centers(&cfg);
        let nearest = (0..64)
            .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
            .unwrap();
        let frames = m.n_frames();
        for t in 0..frames {
            let arg = (0..64)
                .max_by(|&a, &b| m.values.get2(a, t).total_cmp(&m.values.get2(b, t)))
                .unwrap();
            assert_eq!(arg, nearest);
        }
    }

    #[test]
    fn pad_and_trim() {
        let w = Waveform::new(vec![0.25; 160_000], 16000).unwrap();
        let p = pad_or_trim(&w, 15.0);
        assert_eq!(p.samples.len(), 240_000);
        assert!(p.samples[160_000..].iter().all(|&v| v == 0.0));
        let long = Waveform::new((0..320_000).map(|i| i as f32).collect(), 16000).unwrap();
        assert_eq!(pad_or_trim(&long, 15.0).samples, long.samples[..240_000]);
        let exact = pad_or_trim(&p, 15.0);
        assert_eq!(exact, p);
    }

    #[test]
    fn pitch_of_tones() {
        for (f, lo, hi) in [(100.0, 97.0, 103.0), (200.0, 195.0, 205.0), (440.0, 430.0, 450.0)] {
            let w = sine(f, 0.5, 0.05, 16000);
            let p = estimate_f0(&w.samples[..400], 16000);
            assert!(p.voiced && p.f0 >= lo && p.f0 <= hi, "{f}: {p:?}");
        }
        assert!(!estimate_f0(&[0.0; 400], 16000).voiced);
    }

    #[test]
    fn para_tone_noise_silence() {
        assert_eq!(para_feature_names().len(), PARA_DIM);
        let tone = paralinguistic_vector(&sine(200.0, 0.5, 1.0, 16000)).unwrap();
        assert_eq!(tone.0.len(), PARA_DIM);
        let f0 = tone.get("logf0_mean").unwrap().exp();
        assert!((195.0..=205.0).contains(&f0), "{f0}");
        assert!(tone.get("voicing_mean").unwrap() > 0.9);
        assert!(tone.get("jitter_mean").unwrap() < 0.01);

        let wn = paralinguistic_vector(&noise(1.0, 3)).unwrap();
        assert!(wn.get("voicing_mean").unwrap() < 0.3);
        assert!(wn.get("zcr_mean").unwrap() > tone.get("zcr_mean").unwrap());

        let sil = paralinguistic_vector(&Waveform::new(vec![0.0; 16000], 16000).unwrap()).unwrap();
        for f in PARA_FUNCTIONALS {
            assert_eq!(sil.get(&format!("rms_{f}")), Some(0.0));
        }
        assert_eq!(sil.get("voicing_mean"), Some(0.0));
        assert!(sil.0.iter().all(|v| v.is_finite()));
        assert!(paralinguistic_vector(&Waveform::new(vec![0.0; 1000], 16000).unwrap()).is_err());
    }

    #[test]
    fn amplitude_invariance() {
        let a = paralinguistic_vector(&sine(150.0, 0.2, 0.5, 16000)).unwrap();
        let b = paralinguistic_vector(&sine(150.0, 0.6, 0.5, 16000)).unwrap();
        for name in ["logf0_mean", "voicing_mean", "jitter_mean", "spectral_centroid_mean"] {
            let (x, y) = (a.get(name).unwrap(), b.get(name).unwrap());
            assert!((x - y).abs() <= 1e-4 * x.abs().max(1.0), "{name}: {x} vs {y}");
        }
        assert!((b.get("rms_mean").unwrap() / a.get("rms_mean").unwrap() - 3.0).abs() < 1e-4);
    }

    #[test]
    fn resampling_rates() {
        let w = sine(440.0, 0.5, 1.0, 48000);
        let r = resample(&w, 16000).unwrap();
        assert_eq!(r.samples.len(), 16000);
        let p = estimate_f0(&r.samples[4000..4400], 16000);
        assert!((p.f0 - 440.0).abs() < 5.0);
        let same = resample(&r, 16000).unwrap();
        assert_eq!(same, r);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = sine(300.0, 0.5, 0.2, 16000);
        write_wav_i16(&path, &w).unwrap();
        let r = read_audio(&path).unwrap();
        assert_eq!(r.samples.len(), w.samples.len());
        assert!(r.samples.iter().zip(&w.samples).all(|(a, b)| (a - b).abs() < 1e-4));

        let stereo = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&stereo, spec).unwrap();
        for v in [100i16, -2000, 32767] {
            wr.write_sample(v).unwrap();
            wr.write_sample(v).unwrap();
        }
        wr.finalize().unwrap();
        let s = read_audio(&stereo).unwrap();
        assert_eq!(s.samples, vec![100.0 / 32768.0, -2000.0 / 32768.0, 32767.0 / 32768.0]);

        let bad = dir.path().join("bad.wav");
        std::fs::write(&bad, b"RIFF0000WAVEjunk").unwrap();
        assert!(matches!(
            read_audio(&bad),
            Err(Error::Format { .. }) | Err(Error::Io { .. })
        ));
    }
}
