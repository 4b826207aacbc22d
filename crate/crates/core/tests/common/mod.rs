//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sa2sr::autodiff::{Array, Tape, Var};
use sa2sr::params::{Bound, ParameterStore};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`. Gradients that vanish identically (below
/// 1e-8 in norm on both sides) are compared in absolute terms instead.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Scalar objective built on a fresh tape from bound parameters.
pub type Objective<'a> = dyn Fn(&mut Tape, &Bound) -> Var + 'a;

/// Analytic vs numeric gradient of `f` for every parameter whose name
/// starts with one of `prefixes`. Returns `(name, relative error)`.
pub fn check_parameters(store: &ParameterStore, prefixes: &[&str], f: &Objective) -> Vec<(String, f64)> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let root = f(&mut tape, &bound);
    tape.backward(root).unwrap();
    let analytic: BTreeMap<String, Array> = bound.gradients(&tape);

    let names: Vec<String> = store
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .map(str::to_string)
        .collect();
    assert!(!names.is_empty(), "no parameters match {prefixes:?}");
    names
        .into_iter()
        .map(|name| {
            let base = store.value(&name).unwrap().clone();
            let numeric = numeric_grad(base.data(), FD_STEP, |x| {
                let mut probe = store.clone();
                probe.get_mut(&name).unwrap().value.data_mut().copy_from_slice(x);
                let mut t = Tape::new();
                let b = probe.bind(&mut t);
                let out = f(&mut t, &b);
                t.scalar(out)
            });
            let a = analytic
                .get(&name)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; base.len()]);
            let err = relative_error(&a, &numeric);
            (name, err)
        })
        .collect()
}

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// CTC loss and its gradient with respect to the `T × V` log-probability
/// inputs, by summing over every frame-level path. Masked frames are
/// skipped and receive zero gradient.
pub fn ctc_by_enumeration(log_probs: &[Vec<f64>], target: &[usize], mask: &[bool], blank: usize) -> (f64, Vec<Vec<f64>>) {
    let vocab = log_probs[0].len();
    let frames: Vec<usize> = (0..log_probs.len()).filter(|&t| mask[t]).collect();
    let n = frames.len();
    let mut total = 0.0;
    let mut occupancy = vec![vec![0.0; vocab]; log_probs.len()];
    let mut path = vec![0usize; n];
    let count = vocab.pow(n as u32);
    for code in 0..count {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % vocab;
            c /= vocab;
        }
        if collapse(&path, blank) != target {
            continue;
        }
        let logp: f64 = frames.iter().zip(&path).map(|(&t, &k)| log_probs[t][k]).sum();
        let p = logp.exp();
        total += p;
        for (&t, &k) in frames.iter().zip(&path) {
            occupancy[t][k] += p;
        }
    }
    let grad = occupancy
        .into_iter()
        .map(|row| row.into_iter().map(|o| -o / total).collect())
        .collect();
    (-total.ln(), grad)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Log mel filterbank energies of every frame by a direct O(N²) DFT of the
/// zero-padded, Hann-windowed frame.
pub fn lfbe_by_dft(samples: &[f64], sr: u32, window: usize, hop: usize, n_mels: usize, floor: f64) -> Vec<Vec<f64>> {
    let mut n_fft = 1;
    while n_fft < window {
        n_fft *= 2;
    }
    let top = hz_to_mel(sr as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    let weight = |m: usize, f: f64| {
        let (a, b, c) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > a && f <= b {
            (f - a) / (b - a)
        } else if f > b && f < c {
            (c - f) / (c - b)
        } else {
            0.0
        }
    };
    let hann: Vec<f64> = (0..window).map(|n| (PI * n as f64 / (window - 1) as f64).sin().powi(2)).collect();
    let mut out = Vec::new();
    let mut start = 0;
    while start + window <= samples.len() {
        let x: Vec<f64> = (0..window).map(|n| samples[start + n] * hann[n]).collect();
        let power: Vec<f64> = (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, v) in x.iter().enumerate() {
                    let phase = -2.0 * PI * (k * n % n_fft) as f64 / n_fft as f64;
                    re += v * phase.cos();
                    im += v * phase.sin();
                }
                re * re + im * im
            })
            .collect();
        out.push(
            (0..n_mels)
                .map(|m| {
                    let e: f64 = power
                        .iter()
                        .enumerate()
                        .map(|(k, p)| weight(m, k as f64 * sr as f64 / n_fft as f64) * p)
                        .sum();
                    e.max(floor).ln()
                })
                .collect(),
        );
        start += hop;
    }
    out
}
