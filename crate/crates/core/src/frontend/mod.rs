//! Log mel filterbank energy (LFBE) features and the train-time augmentation
//! chain: speed perturbation, time/frequency masking and frame stacking.

pub mod blob;
pub mod wav;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub const MIN_SAMPLE_RATE: u32 = 8000;

    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::CorruptAudio("no samples".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::CorruptAudio(format!(
                "sample {i} is {} (expected finite value in [-1, 1])",
                samples[i]
            )));
        }
        if sample_rate < Self::MIN_SAMPLE_RATE {
            return Err(Error::CorruptAudio(format!(
                "sample rate {sample_rate} below {}",
                Self::MIN_SAMPLE_RATE
            )));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
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

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Which transforms a feature matrix has been through.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Provenance {
    pub normalized: bool,
    pub augmented: bool,
    pub stacked: bool,
    /// Channels that had zero variance at normalization time and were zeroed.
    pub zero_variance_channels: Vec<usize>,
}

/// A `T × F` row-major matrix of frames plus a per-frame validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: Vec<f64>,
    n_frames: usize,
    n_bins: usize,
    mask: Vec<bool>,
    /// Frame shift in milliseconds; `None` when unknown (e.g. read from a blob).
    pub frame_shift_ms: Option<f64>,
    pub meta: Provenance,
}

impl FeatureMatrix {
    pub fn new(frames: Vec<f64>, n_frames: usize, n_bins: usize, mask: Vec<bool>) -> Result<Self> {
        if n_bins == 0 || n_frames == 0 {
            return Err(Error::InvalidFeatures(format!("empty shape {n_frames}x{n_bins}")));
        }
        if frames.len() != n_frames * n_bins || mask.len() != n_frames {
            return Err(Error::InvalidFeatures(format!(
                "{} values and {} mask entries for shape {n_frames}x{n_bins}",
                frames.len(),
                mask.len()
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatures("non-finite entry".into()));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::InvalidFeatures("no valid frame".into()));
        }
        Ok(FeatureMatrix {
            frames,
            n_frames,
            n_bins,
            mask,
            frame_shift_ms: None,
            meta: Provenance::default(),
        })
    }

    /// All frames valid.
    pub fn dense(frames: Vec<f64>, n_frames: usize, n_bins: usize) -> Result<Self> {
        FeatureMatrix::new(frames, n_frames, n_bins, vec![true; n_frames])
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn frames(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.frames[t * self.n_bins + f]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn valid_frames(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Extends the matrix with `extra` zero frames marked invalid.
    pub fn pad_to(&self, n_frames: usize) -> FeatureMatrix {
        let mut out = self.clone();
        if n_frames > self.n_frames {
            out.frames.resize(n_frames * self.n_bins, 0.0);
            out.mask.resize(n_frames, false);
            out.n_frames = n_frames;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub speed_factors: Vec<f64>,
    pub mask_prob: f64,
    pub time_mask_max: usize,
    pub freq_mask_max: usize,
    pub stack: usize,
    pub skip: usize,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            n_mels: 40,
            window_ms: 25.0,
            hop_ms: 10.0,
            speed_factors: vec![0.9, 1.1],
            mask_prob: 0.5,
            time_mask_max: 10,
            freq_mask_max: 8,
            stack: 3,
            skip: 2,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidFrontendConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad("mask_prob outside [0, 1]");
        }
        if !(self.hop_ms > 0.0 && self.window_ms > self.hop_ms) {
            return bad("need window_ms > hop_ms > 0");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1");
        }
        if self.speed_factors.iter().any(|&f| !(f > 0.0)) {
            return bad("speed factors must be positive");
        }
        if self.stack == 0 {
            return bad("stack must be at least 1");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    /// Feature width after stacking.
    pub fn stacked_dim(&self) -> usize {
        self.n_mels * self.stack
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the `n_mels` triangular filters spanning
/// 0 Hz to Nyquist on the HTK mel scale.
pub fn mel_center_frequencies(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    mel_edges(n_mels, sample_rate)[1..=n_mels].to_vec()
}

fn mel_edges(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filter weights, `n_mels` rows of `n_fft / 2 + 1` bins. Peaks
/// are 1 (no area normalization).
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let edges = mel_edges(n_mels, sample_rate);
    let n_bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Symmetric Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Number of frames a sliding window of `window` samples with step `hop`
/// produces over `n` samples.
pub fn frame_count(n: usize, window: usize, hop: usize) -> usize {
    if n < window {
        0
    } else {
        (n - window) / hop + 1
    }
}

pub fn extract_lfbe(wave: &Waveform, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    cfg.validate()?;
    let sr = wave.sample_rate();
    let window = cfg.window_samples(sr);
    let hop = cfg.hop_samples(sr).max(1);
    let n = wave.len();
    if window == 0 || n < window {
        return Err(Error::UtteranceTooShort { samples: n, window });
    }
    let n_fft = window.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let bank = mel_filterbank(cfg.n_mels, n_fft, sr);
    let win = hann(window);
    let n_frames = frame_count(n, window, hop);

    let mut frames = Vec::with_capacity(n_frames * cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    for t in 0..n_frames {
        let chunk = &wave.samples()[t * hop..t * hop + window];
        for (b, (&s, &w)) in buf.iter_mut().zip(chunk.iter().zip(&win)) {
            *b = Complex::new(s * w, 0.0);
        }
        buf[window..].fill(Complex::new(0.0, 0.0));
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for filter in &bank {
            let energy: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
            frames.push(energy.max(cfg.log_floor).ln());
        }
    }
    let mut out = FeatureMatrix::dense(frames, n_frames, cfg.n_mels)?;
    out.frame_shift_ms = Some(cfg.hop_ms);
    Ok(out)
}

/// Per-utterance, per-channel standardization over valid frames using
/// population statistics. Channels with zero variance become all zeros and
/// are listed in `meta.zero_variance_channels`.
pub fn normalize_per_utterance(feats: &FeatureMatrix) -> Result<FeatureMatrix> {
    let valid = feats.valid_frames();
    if valid < 2 {
        return Err(Error::DegenerateNormalization(valid));
    }
    let mut out = feats.clone();
    out.meta.zero_variance_channels.clear();
    let n = valid as f64;
    for f in 0..feats.n_bins {
        let column = || (0..feats.n_frames).filter(|&t| feats.mask[t]).map(|t| feats.get(t, f));
        let mean = column().sum::<f64>() / n;
        let var = column().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let constant = var <= 1e-24 * mean.abs().max(1.0).powi(2);
        let inv_std = 1.0 / var.sqrt();
        if constant {
            out.meta.zero_variance_channels.push(f);
        }
        for t in (0..feats.n_frames).filter(|&t| feats.mask[t]) {
            let v = &mut out.frames[t * feats.n_bins + f];
            *v = if constant { 0.0 } else { (*v - mean) * inv_std };
        }
    }
    out.meta.normalized = true;
    Ok(out)
}

/// Resamples by linear interpolation at stride `factor`: factors below 1
/// slow the audio down (more samples), above 1 speed it up.
pub fn speed_perturb(wave: &Waveform, factor: f64) -> Result<Waveform> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidSpeedFactor(factor));
    }
    let src = wave.samples();
    let n_out = ((src.len() as f64 / factor).round() as usize).max(1);
    let last = src.len() - 1;
    let samples = (0..n_out)
        .map(|i| {
            let pos = i as f64 * factor;
            let i0 = (pos.floor() as usize).min(last);
            let frac = pos - i0 as f64;
            if i0 >= last {
                src[last]
            } else {
                src[i0] * (1.0 - frac) + src[i0 + 1] * frac
            }
        })
        .collect();
    Waveform::new(samples, wave.sample_rate())
}

/// The bands a single masking call zeroed, as `(start, width)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskBands {
    pub time: Option<(usize, usize)>,
    pub freq: Option<(usize, usize)>,
}

/// Draws the bands `spec_augment` applies for a given seed and shape.
pub fn draw_mask_bands(n_frames: usize, n_bins: usize, cfg: &FrontendConfig, seed: u64) -> MaskBands {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u_time: f64 = rng.random();
    let u_freq: f64 = rng.random();
    let mut band = |len: usize, max: usize| {
        let width = rng.random_range(1..=max.min(len).max(1));
        let start = rng.random_range(0..=len - width);
        (start, width)
    };
    let time = (u_time < cfg.mask_prob).then(|| band(n_frames, cfg.time_mask_max));
    let freq = (u_freq < cfg.mask_prob).then(|| band(n_bins, cfg.freq_mask_max));
    MaskBands { time, freq }
}

/// Zeroes, each with probability `mask_prob`, one contiguous band of frames
/// and one contiguous band of channels. The validity mask is unchanged.
pub fn spec_augment(feats: &FeatureMatrix, cfg: &FrontendConfig, seed: u64) -> FeatureMatrix {
    let bands = draw_mask_bands(feats.n_frames, feats.n_bins, cfg, seed);
    let mut out = feats.clone();
    if let Some((start, width)) = bands.time {
        out.frames[start * feats.n_bins..(start + width) * feats.n_bins].fill(0.0);
    }
    if let Some((start, width)) = bands.freq {
        for t in 0..feats.n_frames {
            out.frames[t * feats.n_bins + start..t * feats.n_bins + start + width].fill(0.0);
        }
    }
    if bands.time.is_some() || bands.freq.is_some() {
        out.meta.augmented = true;
    }
    out
}

/// Concatenates `stack` consecutive frames starting every `skip + 1` frames.
/// Missing tail frames are zero; output frame `t` is valid iff input frame
/// `t·(skip + 1)` is.
pub fn stack_and_skip(feats: &FeatureMatrix, stack: usize, skip: usize) -> Result<FeatureMatrix> {
    if stack == 0 {
        return Err(Error::InvalidFrontendConfig("stack must be at least 1".into()));
    }
    let stride = skip + 1;
    let t_out = feats.n_frames.div_ceil(stride);
    let f = feats.n_bins;
    let mut frames = vec![0.0; t_out * stack * f];
    for t in 0..t_out {
        for j in 0..stack {
            let src = t * stride + j;
            if src < feats.n_frames {
                let dst = (t * stack + j) * f;
                frames[dst..dst + f].copy_from_slice(feats.frame(src));
            }
        }
    }
    let mask = (0..t_out).map(|t| feats.mask[t * stride]).collect();
    let mut out = FeatureMatrix::new(frames, t_out, stack * f, mask)?;
    out.frame_shift_ms = feats.frame_shift_ms.map(|ms| ms * stride as f64);
    out.meta = feats.meta.clone();
    out.meta.stacked = stack > 1 || skip > 0;
    Ok(out)
}
