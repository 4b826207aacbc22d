//! Deterministic synthetic corpora for smoke tests and acceptance runs.
//!
//! All audio is 16 kHz mono with a faint Gaussian noise floor.
//!
//! * `asr`: one tone per character (fixed frequency per letter of `a`..`h`),
//!   120 ms tone + 40 ms gap, 100 ms silence at both ends.
//! * `sentiment`: a fixed 3-harmonic carrier under a class envelope (see
//!   [`sentiment_envelope`]); the class decides when the carrier sounds and
//!   how loud it is on average.
//! * `avd`: a fixed-length clip of separate bands. A harmonic tone at f0
//!   (activation) is followed by a fixed 4.5 kHz reference tone; a fixed
//!   chord spanning 1.9–3.5 kHz then starts at amplitude `a` (valence) and
//!   decays exponentially until it falls below a fixed threshold, so `a` sets
//!   how long it sounds; a 6.5 kHz marker tone of variable duration
//!   (dominance) closes the clip. The reference tone keeps f0 visible after
//!   per-utterance, per-channel normalization.
//! * `combined`: character tones as in `asr` over a 3.2–4 kHz chord that
//!   carries the sentiment envelope for the whole utterance. Activation
//!   follows the per-character tone length, valence the sentiment class plus
//!   jitter, dominance the leading pause.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::frontend::Waveform;
use crate::trainer::derive_seed;

use super::manifest::{Split, UtteranceRecord};

pub const SAMPLE_RATE: u32 = 16_000;
pub const ALPHABET: &str = "abcdefgh";
pub const CHAR_FREQS: [f64; 8] = [400.0, 600.0, 800.0, 1000.0, 1300.0, 1600.0, 2000.0, 2500.0];
pub const NOISE_SIGMA: f64 = 0.003;
pub const EDGE_SILENCE_SECS: f64 = 0.1;
pub const CHAR_SECS: f64 = 0.12;
pub const GAP_SECS: f64 = 0.04;

pub const F0_RANGE: (f64, f64) = (150.0, 400.0);
pub const AMP_RANGE: (f64, f64) = (0.03, 0.8);
pub const REFERENCE_AMP: f64 = 0.3;
pub const REFERENCE_TONE_HZ: f64 = 4500.0;
pub const SENTIMENT_CHORD_HZ: [f64; 3] = [3200.0, 3600.0, 4000.0];
pub const VALENCE_CHORD_HZ: [f64; 5] = [1900.0, 2300.0, 2700.0, 3100.0, 3500.0];
pub const MARKER_TONE_HZ: f64 = 6500.0;
pub const AVD_CLIP_SECS: f64 = 2.0;
pub const AVD_SEGMENT_SECS: f64 = 0.25;
/// Time constant of the valence chord's exponential decay.
pub const VALENCE_DECAY_SECS: f64 = 0.15;
/// The valence chord stops once its amplitude drops below this.
pub const VALENCE_CUTOFF_AMP: f64 = 0.02;
/// Duration of the marker tone.
pub const DURATION_RANGE: (f64, f64) = (0.1, 0.6);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    Asr,
    Sentiment,
    Avd,
    Combined,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "asr" => Ok(SynthKind::Asr),
            "sentiment" => Ok(SynthKind::Sentiment),
            "avd" => Ok(SynthKind::Avd),
            "combined" => Ok(SynthKind::Combined),
            other => Err(Error::InvalidConfig(format!(
                "unknown synthetic kind {other:?} (asr, sentiment, avd, combined)"
            ))),
        }
    }
}

impl SynthKind {
    pub fn name(&self) -> &'static str {
        match self {
            SynthKind::Asr => "asr",
            SynthKind::Sentiment => "sentiment",
            SynthKind::Avd => "avd",
            SynthKind::Combined => "combined",
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthUtterance {
    pub wave: Waveform,
    /// `audio` is a bare file name, AVD is on the 1–7 scale.
    pub record: UtteranceRecord,
}

/// Generative factors of an `avd` utterance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AvdFactors {
    pub f0: f64,
    pub amplitude: f64,
    pub duration: f64,
}

fn lerp(range: (f64, f64), u: f64) -> f64 {
    range.0 + (range.1 - range.0) * u
}

fn unlerp(range: (f64, f64), x: f64) -> f64 {
    (x - range.0) / (range.1 - range.0)
}

/// Factors → (activation, valence, dominance) on the 1–7 scale.
pub fn avd_of_factors(f: &AvdFactors) -> [f64; 3] {
    let a = unlerp(F0_RANGE, f.f0);
    let v = (f.amplitude / AMP_RANGE.0).ln() / (AMP_RANGE.1 / AMP_RANGE.0).ln();
    let d = unlerp(DURATION_RANGE, f.duration);
    [1.0 + 6.0 * a, 1.0 + 6.0 * v, 1.0 + 6.0 * d]
}

pub fn factors_of_avd(avd: [f64; 3]) -> AvdFactors {
    let [a, v, d] = avd.map(|x| (x - 1.0) / 6.0);
    AvdFactors {
        f0: lerp(F0_RANGE, a),
        amplitude: AMP_RANGE.0 * (AMP_RANGE.1 / AMP_RANGE.0).powf(v),
        duration: lerp(DURATION_RANGE, d),
    }
}

struct Canvas {
    samples: Vec<f64>,
}

impl Canvas {
    fn silent(secs: f64) -> Self {
        Canvas {
            samples: vec![0.0; secs_to_samples(secs)],
        }
    }

    /// Adds a harmonic tone (partial `h` weighted `1/h`) with 10 ms
    /// raised-cosine ramps; `envelope(u)` gives the amplitude at relative
    /// position `u ∈ [0, 1]`.
    fn tone(&mut self, start: usize, len: usize, f0: f64, harmonics: usize, envelope: impl Fn(f64) -> f64) {
        let partials: Vec<(f64, f64)> = (1..=harmonics).map(|h| (f0 * h as f64, 1.0 / h as f64)).collect();
        self.partials(start, len, &partials, envelope);
    }

    /// Sum of `(frequency, weight)` sinusoids, normalized to unit peak weight.
    fn partials(&mut self, start: usize, len: usize, partials: &[(f64, f64)], envelope: impl Fn(f64) -> f64) {
        let ramp = secs_to_samples(0.01).min(len / 2).max(1);
        let norm: f64 = partials.iter().map(|p| p.1).sum();
        for i in 0..len {
            let t = i as f64 / SAMPLE_RATE as f64;
            let u = i as f64 / len.max(2).saturating_sub(1) as f64;
            let edge = i.min(len - 1 - i);
            let fade = if edge < ramp {
                0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            let s: f64 = partials.iter().map(|&(f, w)| w * (2.0 * PI * f * t).sin()).sum::<f64>() / norm;
            if let Some(x) = self.samples.get_mut(start + i) {
                *x += envelope(u) * fade * s;
            }
        }
    }

    fn finish(mut self, rng: &mut ChaCha8Rng) -> Result<Waveform> {
        let noise = Normal::new(0.0, NOISE_SIGMA).expect("positive sigma");
        for x in &mut self.samples {
            *x = (*x + noise.sample(rng)).clamp(-1.0, 1.0);
        }
        Waveform::new(self.samples, SAMPLE_RATE)
    }
}

fn secs_to_samples(secs: f64) -> usize {
    (secs * SAMPLE_RATE as f64).round() as usize
}

/// Amplitude below which sentiment envelopes are silenced.
pub const ENVELOPE_CUTOFF_AMP: f64 = 0.02;

/// Amplitude envelope for a sentiment class at relative position `u`:
/// negative decays from 0.3 and cuts out early, neutral holds 0.15, positive
/// fades in late and rises to 0.9. Mean energy orders the classes.
pub fn sentiment_envelope(class: usize, u: f64) -> f64 {
    let a = match class {
        0 => 0.3 * (-5.0 * u).exp(),
        1 => 0.15,
        _ => 0.9 * (-5.0 * (1.0 - u)).exp(),
    };
    if a < ENVELOPE_CUTOFF_AMP {
        0.0
    } else {
        a
    }
}

fn random_transcript(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(2..=5);
    let letters: Vec<char> = ALPHABET.chars().collect();
    (0..len).map(|_| letters[rng.random_range(0..letters.len())]).collect()
}

fn char_freq(c: char) -> f64 {
    CHAR_FREQS[ALPHABET.find(c).expect("synthetic alphabet")]
}

/// Lays out character tones after `lead` seconds of silence; `envelope`
/// spans the whole tone sequence.
fn render_chars(text: &str, lead: f64, char_secs: f64, envelope: impl Fn(f64) -> f64) -> Canvas {
    let n = text.chars().count();
    let body = n as f64 * (char_secs + GAP_SECS);
    let mut canvas = Canvas::silent(lead + body + EDGE_SILENCE_SECS);
    let char_len = secs_to_samples(char_secs);
    let stride = secs_to_samples(char_secs + GAP_SECS);
    let start0 = secs_to_samples(lead);
    let body_len = (n * stride) as f64;
    for (k, c) in text.chars().enumerate() {
        let start = start0 + k * stride;
        let offset = (k * stride) as f64;
        canvas.tone(start, char_len, char_freq(c), 1, |u| {
            envelope((offset + u * char_len as f64) / body_len)
        });
    }
    canvas
}

fn one(kind: SynthKind, index: usize, seed: u64) -> Result<SynthUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, kind as u64, index as u64]));
    let mut record = UtteranceRecord {
        audio: format!("{}_{index:04}.wav", kind.name()).into(),
        transcript: None,
        sentiment: None,
        avd: None,
        split: Split::Train,
    };
    let canvas = match kind {
        SynthKind::Asr => {
            let text = random_transcript(&mut rng);
            record.sentiment = Some(rng.random_range(0..3));
            let c = render_chars(&text, EDGE_SILENCE_SECS, CHAR_SECS, |_| 0.3);
            record.transcript = Some(text);
            c
        }
        SynthKind::Sentiment => {
            let class = index % 3;
            let secs = rng.random_range(0.6..1.0);
            let mut c = Canvas::silent(secs + 2.0 * EDGE_SILENCE_SECS);
            c.tone(secs_to_samples(EDGE_SILENCE_SECS), secs_to_samples(secs), 220.0, 3, |u| {
                sentiment_envelope(class, u)
            });
            record.sentiment = Some(class);
            record.transcript = Some(String::new());
            c
        }
        SynthKind::Avd => {
            let f = AvdFactors {
                f0: lerp(F0_RANGE, rng.random()),
                amplitude: AMP_RANGE.0 * (AMP_RANGE.1 / AMP_RANGE.0).powf(rng.random()),
                duration: lerp(DURATION_RANGE, rng.random()),
            };
            let mut c = Canvas::silent(AVD_CLIP_SECS);
            let seg = secs_to_samples(AVD_SEGMENT_SECS);
            let start = secs_to_samples(EDGE_SILENCE_SECS);
            c.tone(start, seg, f.f0, 4, |_| REFERENCE_AMP);
            c.tone(start + seg, seg, REFERENCE_TONE_HZ, 1, |_| REFERENCE_AMP);
            let chord = VALENCE_CHORD_HZ.map(|f| (f, 1.0));
            let sounding = VALENCE_DECAY_SECS * (f.amplitude / VALENCE_CUTOFF_AMP).ln();
            c.partials(start + 2 * seg, secs_to_samples(sounding), &chord, |u| {
                f.amplitude * (-u * sounding / VALENCE_DECAY_SECS).exp()
            });
            let window = secs_to_samples(VALENCE_DECAY_SECS * (AMP_RANGE.1 / VALENCE_CUTOFF_AMP).ln());
            let marker = start + 2 * seg + window + secs_to_samples(GAP_SECS);
            c.tone(marker, secs_to_samples(f.duration), MARKER_TONE_HZ, 1, |_| REFERENCE_AMP);
            record.avd = Some(avd_of_factors(&f));
            c
        }
        SynthKind::Combined => {
            let class = index % 3;
            let text = random_transcript(&mut rng);
            let char_secs = rng.random_range(0.09..0.15);
            let lead = rng.random_range(0.05..0.25);
            let valence = [2.5, 4.0, 5.5][class] + rng.random_range(-0.5..0.5);
            let mut c = render_chars(&text, lead, char_secs, |_| 0.3);
            let body = c.samples.len() - secs_to_samples(lead + EDGE_SILENCE_SECS) + secs_to_samples(GAP_SECS);
            let chord = SENTIMENT_CHORD_HZ.map(|f| (f, 1.0));
            c.partials(secs_to_samples(lead), body, &chord, |u| sentiment_envelope(class, u));
            record.transcript = Some(text);
            record.sentiment = Some(class);
            record.avd = Some([
                1.0 + 6.0 * (char_secs - 0.09) / 0.06,
                valence,
                1.0 + 6.0 * (lead - 0.05) / 0.2,
            ]);
            c
        }
    };
    Ok(SynthUtterance {
        wave: canvas.finish(&mut rng)?,
        record,
    })
}

/// `n_train` training utterances followed by `n_validation` validation
/// utterances. Identical arguments give identical audio and labels.
pub fn synthesize(kind: SynthKind, n_train: usize, n_validation: usize, seed: u64) -> Result<Vec<SynthUtterance>> {
    if n_train < 8 {
        return Err(Error::InvalidConfig(format!("synthetic corpora need n >= 8, got {n_train}")));
    }
    (0..n_train + n_validation)
        .map(|i| {
            let mut u = one(kind, i, seed)?;
            if i >= n_train {
                u.record.split = Split::Validation;
            }
            Ok(u)
        })
        .collect()
}

/// Mean of squared samples per 25 ms frame, averaged over frames.
pub fn mean_frame_energy(wave: &Waveform) -> f64 {
    let frame = secs_to_samples(0.025);
    let frames: Vec<f64> = wave
        .samples()
        .chunks(frame)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>() / c.len() as f64)
        .collect();
    frames.iter().sum::<f64>() / frames.len() as f64
}
