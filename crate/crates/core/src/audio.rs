//! Waveform I/O, log-mel features and procedural prosody synthesis.
//!
//! Synthesized speech is a stand-in for TTS: every token is a short tone,
//! and the polarity of opinion tokens is carried by the direction of a pitch
//! sweep plus an emphasis gain. Text alone never reveals the sweep.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oei::{validate_spans, SpanError, SpanSet, TokenSeq};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WIN_LENGTH: usize = 400;
pub const HOP_LENGTH: usize = 160;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 80;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unsupported wav format: {0}")]
    UnsupportedFormat(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure { path: String, source: std::io::Error },
    #[error("audio too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },
    #[error(transparent)]
    InvalidSpans(#[from] SpanError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawAudio {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl RawAudio {
    pub fn new(samples: Vec<f64>) -> Self {
        Self { samples, sample_rate: SAMPLE_RATE }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn wav_error(path: &Path, e: hound::Error) -> AudioError {
    match e {
        hound::Error::IoError(source) => AudioError::IoFailure { path: path.display().to_string(), source },
        other => AudioError::UnsupportedFormat(format!("{}: {other}", path.display())),
    }
}

fn check_spec(spec: &hound::WavSpec) -> Result<(), String> {
    if spec.channels != 1 {
        return Err(format!("{} channels, expected mono", spec.channels));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(format!("{} Hz, expected {SAMPLE_RATE}", spec.sample_rate));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(format!("{}-bit {:?}, expected 16-bit PCM", spec.bits_per_sample, spec.sample_format));
    }
    Ok(())
}

/// Reads a mono 16-bit PCM 16 kHz file into samples in `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<RawAudio, AudioError> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    check_spec(&reader.spec()).map_err(|m| AudioError::UnsupportedFormat(format!("{}: {m}", path.display())))?;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| wav_error(path, e))?;
    Ok(RawAudio::new(samples))
}

/// Duration in seconds from the header alone.
pub fn wav_duration(path: &Path) -> Result<f64, AudioError> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    check_spec(&reader.spec()).map_err(|m| AudioError::UnsupportedFormat(format!("{}: {m}", path.display())))?;
    Ok(reader.duration() as f64 / SAMPLE_RATE as f64)
}

fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(audio: &RawAudio, path: &Path) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    check_spec(&spec).map_err(AudioError::UnsupportedFormat)?;
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &audio.samples {
        writer.write_sample(quantize(s)).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

/// Log-mel energies, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFeatures {
    pub frames: Array2<f64>,
    pub frame_hop: f64,
}

impl MelFeatures {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.frames.ncols()
    }
}

/// Frames produced for `n` samples (no centre padding).
pub fn frame_count(n: usize) -> usize {
    if n < WIN_LENGTH {
        0
    } else {
        1 + (n - WIN_LENGTH) / HOP_LENGTH
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters over the one-sided spectrum, shape
/// `(N_FFT/2+1, bins)`.
pub fn mel_filterbank(bins: usize) -> Array2<f64> {
    let n_freq = N_FFT / 2 + 1;
    let f_max = SAMPLE_RATE as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..bins + 2).map(|i| mel_to_hz(mel_max * i as f64 / (bins + 1) as f64)).collect();
    let mut fb = Array2::zeros((n_freq, bins));
    for k in 0..n_freq {
        let f = k as f64 * SAMPLE_RATE as f64 / N_FFT as f64;
        for m in 0..bins {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = if f >= lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f <= hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            fb[[k, m]] = w;
        }
    }
    fb
}

/// Hann-windowed 512-point power spectrum through a mel filterbank, then
/// `ln(energy + 1e-10)`.
pub fn log_mel(audio: &RawAudio, bins: usize) -> Result<MelFeatures, AudioError> {
    let n = audio.samples.len();
    if n < WIN_LENGTH {
        return Err(AudioError::TooShort { samples: n, needed: WIN_LENGTH });
    }
    let t = frame_count(n);
    let window: Vec<f64> =
        (0..WIN_LENGTH).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / WIN_LENGTH as f64).cos()).collect();
    let fb = mel_filterbank(bins);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let n_freq = N_FFT / 2 + 1;
    let mut power = Array2::<f64>::zeros((t, n_freq));
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for frame in 0..t {
        let off = frame * HOP_LENGTH;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < WIN_LENGTH {
                Complex::new(audio.samples[off + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for k in 0..n_freq {
            power[[frame, k]] = buf[k].norm_sqr();
        }
    }
    let frames = power.dot(&fb).mapv(|e| (e + LOG_FLOOR).ln());
    Ok(MelFeatures { frames, frame_hop: HOP_LENGTH as f64 / SAMPLE_RATE as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProsodyConfig {
    pub token_duration: f64,
    pub gap: f64,
    pub base_pitch: f64,
    pub pos_sweep: (f64, f64),
    pub neg_sweep: (f64, f64),
    pub emphasis_gain: f64,
    pub noise_level: f64,
    /// Peak amplitude of a neutral token.
    pub amplitude: f64,
}

impl Default for ProsodyConfig {
    fn default() -> Self {
        Self {
            token_duration: 0.2,
            gap: 0.05,
            base_pitch: 330.0,
            pos_sweep: (220.0, 440.0),
            neg_sweep: (440.0, 220.0),
            emphasis_gain: 1.5,
            noise_level: 0.01,
            amplitude: 0.5,
        }
    }
}

impl ProsodyConfig {
    pub fn token_samples(&self) -> usize {
        (self.token_duration * SAMPLE_RATE as f64).round() as usize
    }

    pub fn gap_samples(&self) -> usize {
        (self.gap * SAMPLE_RATE as f64).round() as usize
    }

    /// Sample count of an `n`-token utterance before misalignment.
    pub fn utterance_samples(&self, n: usize) -> usize {
        if n == 0 {
            0
        } else {
            n * self.token_samples() + (n - 1) * self.gap_samples()
        }
    }

    /// Sample range covered by token `i`.
    pub fn token_range(&self, i: usize) -> std::ops::Range<usize> {
        let start = i * (self.token_samples() + self.gap_samples());
        start..start + self.token_samples()
    }
}

/// Linear chirp from `f0` to `f1` over `n` samples, phase starting at zero.
fn chirp(n: usize, f0: f64, f1: f64, amp: f64, out: &mut [f64]) {
    let sr = SAMPLE_RATE as f64;
    let dur = n as f64 / sr;
    for (i, o) in out.iter_mut().enumerate().take(n) {
        let t = i as f64 / sr;
        let phase = 2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * dur));
        *o = amp * phase.sin();
    }
}

/// One tone per token separated by silent gaps, plus seeded Gaussian noise.
pub fn synth_utterance(
    tokens: &TokenSeq,
    spans: &SpanSet,
    cfg: &ProsodyConfig,
    seed: u64,
) -> Result<RawAudio, AudioError> {
    validate_spans(tokens, spans)?;
    let total = cfg.utterance_samples(tokens.len());
    let mut samples = vec![0.0; total];
    let n_tok = cfg.token_samples();
    for i in 0..tokens.len() {
        let range = cfg.token_range(i);
        let seg = &mut samples[range];
        match spans.iter().find(|s| s.start <= i && i < s.end) {
            None => chirp(n_tok, cfg.base_pitch, cfg.base_pitch, cfg.amplitude, seg),
            Some(s) => {
                let (f0, f1) = match s.polarity {
                    crate::oei::Polarity::Pos => cfg.pos_sweep,
                    crate::oei::Polarity::Neg => cfg.neg_sweep,
                };
                chirp(n_tok, f0, f1, cfg.amplitude * cfg.emphasis_gain, seg);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_level).expect("finite noise level");
    for s in &mut samples {
        *s = (*s + noise.sample(&mut rng)).clamp(-1.0, 1.0);
    }
    Ok(RawAudio::new(samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MisalignConfig {
    pub max_shift: f64,
    pub max_interjection: usize,
}

impl Default for MisalignConfig {
    fn default() -> Self {
        Self { max_shift: 0.3, max_interjection: 2 }
    }
}

pub const INTERJECTION_SECS: f64 = 0.1;
const INTERJECTION_PITCH: f64 = 150.0;
const INTERJECTION_AMP: f64 = 0.3;
const OFFSET_NOISE: f64 = 0.01;

/// Midpoints of interior quiet stretches, found with a 10 ms RMS scan.
pub fn gap_positions(audio: &RawAudio) -> Vec<usize> {
    let win = HOP_LENGTH;
    let quiet: Vec<bool> = audio
        .samples
        .chunks(win)
        .map(|c| (c.iter().map(|x| x * x).sum::<f64>() / c.len() as f64).sqrt() < 0.05)
        .collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < quiet.len() {
        if quiet[i] {
            let start = i;
            while i < quiet.len() && quiet[i] {
                i += 1;
            }
            let interior = start > 0 && i < quiet.len();
            if interior && i - start >= 3 {
                out.push((start + i) * win / 2);
            }
        } else {
            i += 1;
        }
    }
    out
}

/// Prepends a random noise offset and splices short filler tones into
/// random gaps. Never shortens the input; zero limits return it unchanged.
pub fn add_misalignment(audio: &RawAudio, max_shift: f64, max_interjection: usize, seed: u64) -> RawAudio {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift = if max_shift > 0.0 {
        (rng.random_range(0.0..=max_shift) * audio.sample_rate as f64).floor() as usize
    } else {
        0
    };
    let count = if max_interjection > 0 { rng.random_range(0..=max_interjection) } else { 0 };
    if shift == 0 && count == 0 {
        return audio.clone();
    }
    let mut gaps = gap_positions(audio);
    let mut chosen = Vec::new();
    for _ in 0..count.min(gaps.len()) {
        let k = rng.random_range(0..gaps.len());
        chosen.push(gaps.swap_remove(k));
    }
    chosen.sort_unstable();
    let n_int = (INTERJECTION_SECS * audio.sample_rate as f64).round() as usize;
    let mut filler = vec![0.0; n_int];
    chirp(n_int, INTERJECTION_PITCH, INTERJECTION_PITCH, INTERJECTION_AMP, &mut filler);

    let noise = Normal::new(0.0, OFFSET_NOISE).expect("finite");
    let mut out = Vec::with_capacity(audio.len() + shift + chosen.len() * n_int);
    out.extend((0..shift).map(|_| noise.sample(&mut rng).clamp(-1.0, 1.0)));
    let mut cursor = 0;
    for pos in chosen {
        out.extend_from_slice(&audio.samples[cursor..pos]);
        out.extend_from_slice(&filler);
        cursor = pos;
    }
    out.extend_from_slice(&audio.samples[cursor..]);
    RawAudio { samples: out, sample_rate: audio.sample_rate }
}
