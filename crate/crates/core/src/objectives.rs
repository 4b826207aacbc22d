//! Training objectives: CTC, sentiment cross-entropy, their weighted sum, and
//! the concordance correlation coefficient (CCC) loss.

use std::collections::BTreeMap;

use crate::autodiff::{Array, Tape, Var, LOG_ZERO};
use crate::error::{Error, Result};

/// Denominators below this are shifted up by it.
pub const CCC_EPS: f64 = 1e-8;

/// A differentiable total plus the named scalar parts it was built from.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub total: Var,
    pub components: BTreeMap<String, f64>,
}

/// Fewest frames that can emit `target`: one per label plus a separating
/// blank between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `log_probs` (`T × V`, blank at `blank`), summed over all alignments with
/// the log-space forward recursion. Only rows where `mask` is true are used.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, target: &[usize], mask: &[bool], blank: usize) -> Result<Var> {
    let (rows, vocab) = tape
        .value(log_probs)
        .dims2()
        .ok_or_else(|| Error::Dimension("ctc log_probs must be rank 2".into()))?;
    if mask.len() != rows {
        return Err(Error::LengthMismatch(mask.len(), rows));
    }
    if blank >= vocab {
        return Err(Error::InvalidLabel { label: blank, classes: vocab });
    }
    if let Some(&bad) = target.iter().find(|&&l| l == blank || l >= vocab) {
        return Err(Error::InvalidLabel { label: bad, classes: vocab });
    }
    let frames: Vec<usize> = (0..rows).filter(|&t| mask[t]).collect();
    let needed = ctc_min_frames(target);
    if frames.is_empty() || frames.len() < needed {
        return Err(Error::TargetUnalignable {
            needed: needed.max(1),
            available: frames.len(),
        });
    }

    // Extended label sequence: blank, l1, blank, l2, ..., blank.
    let ext: Vec<usize> = (0..2 * target.len() + 1)
        .map(|s| if s % 2 == 0 { blank } else { target[s / 2] })
        .collect();
    let s_len = ext.len();
    let emissions = |t: usize| -> Vec<Option<usize>> { ext.iter().map(|&l| Some(t * vocab + l)).collect() };
    let shift1: Vec<Option<usize>> = (0..s_len).map(|s| s.checked_sub(1)).collect();
    let shift2: Vec<Option<usize>> = (0..s_len)
        .map(|s| (s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]).then(|| s - 2))
        .collect();

    let first: Vec<Option<usize>> = ext
        .iter()
        .enumerate()
        .map(|(s, &l)| (s < 2).then_some(frames[0] * vocab + l))
        .collect();
    let mut alpha = tape.gather(log_probs, first, vec![1, s_len], LOG_ZERO)?;
    for &t in &frames[1..] {
        let from_prev = tape.gather(alpha, shift1.clone(), vec![1, s_len], LOG_ZERO)?;
        let from_skip = tape.gather(alpha, shift2.clone(), vec![1, s_len], LOG_ZERO)?;
        let paths = tape.concat(&[alpha, from_prev, from_skip], 0)?;
        let merged = tape.logsumexp(paths, 0)?;
        let emit = tape.gather(log_probs, emissions(t), vec![1, s_len], 0.0)?;
        alpha = tape.add(merged, emit)?;
    }
    let ends: Vec<Option<usize>> = if s_len > 1 {
        vec![Some(s_len - 2), Some(s_len - 1)]
    } else {
        vec![Some(0)]
    };
    let n_ends = ends.len();
    let tail = tape.gather(alpha, ends, vec![1, n_ends], LOG_ZERO)?;
    let log_likelihood = tape.logsumexp(tail, 1)?;
    let log_likelihood = tape.reshape(log_likelihood, vec![])?;
    tape.scale(log_likelihood, -1.0)
}

/// `−log p(label)` from a `1 × C` row of class log-probabilities.
pub fn sentiment_ce(tape: &mut Tape, class_log_probs: Var, label: usize) -> Result<Var> {
    let classes = tape.value(class_log_probs).len();
    if label >= classes {
        return Err(Error::InvalidLabel { label, classes });
    }
    let picked = tape.gather(class_log_probs, vec![Some(label)], vec![], 0.0)?;
    tape.scale(picked, -1.0)
}

/// `asr + λ·sentiment`.
pub fn global_loss(tape: &mut Tape, asr: Var, sentiment: Var, lambda: f64) -> Result<LossValue> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!("lambda must be non-negative, got {lambda}")));
    }
    let weighted = tape.scale(sentiment, lambda)?;
    let total = tape.add(asr, weighted)?;
    let components = BTreeMap::from([
        ("asr".to_string(), tape.scalar(asr)),
        ("sentiment".to_string(), tape.scalar(sentiment)),
    ]);
    Ok(LossValue { total, components })
}

/// Mini-batch statistics behind a CCC value (population moments).
#[derive(Clone, Debug, PartialEq)]
pub struct CccStats {
    pub mean_y: f64,
    pub mean_yhat: f64,
    pub var_y: f64,
    pub var_yhat: f64,
    pub cov: f64,
    pub batch_size: usize,
}

impl CccStats {
    pub fn compute(y: &[f64], yhat: &[f64]) -> Result<Self> {
        if y.len() != yhat.len() {
            return Err(Error::LengthMismatch(y.len(), yhat.len()));
        }
        let n = y.len();
        if n < 2 {
            return Err(Error::CccUndefined(n));
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
        let (my, mh) = (mean(y), mean(yhat));
        let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        let cov = y.iter().zip(yhat).map(|(a, b)| (a - my) * (b - mh)).sum::<f64>() / n as f64;
        Ok(CccStats {
            mean_y: my,
            mean_yhat: mh,
            var_y: var(y, my),
            var_yhat: var(yhat, mh),
            cov,
            batch_size: n,
        })
    }

    pub fn ccc(&self) -> f64 {
        let den = self.var_y + self.var_yhat + (self.mean_y - self.mean_yhat).powi(2);
        2.0 * self.cov / if den < CCC_EPS { den + CCC_EPS } else { den }
    }
}

fn as_column(tape: &mut Tape, v: Var) -> Result<Var> {
    let n = tape.value(v).len();
    tape.reshape(v, vec![n, 1])
}

/// Differentiable CCC between two equal-length batches.
pub fn ccc(tape: &mut Tape, y: Var, yhat: Var) -> Result<Var> {
    let (ny, nh) = (tape.value(y).len(), tape.value(yhat).len());
    if ny != nh {
        return Err(Error::LengthMismatch(ny, nh));
    }
    if ny < 2 {
        return Err(Error::CccUndefined(ny));
    }
    let y = as_column(tape, y)?;
    let yhat = as_column(tape, yhat)?;
    let mean_y = tape.reduce_mean(y, 0)?;
    let mean_h = tape.reduce_mean(yhat, 0)?;
    let dy = tape.sub(y, mean_y)?;
    let dh = tape.sub(yhat, mean_h)?;
    let prod = tape.mul(dy, dh)?;
    let cov = tape.reduce_mean(prod, 0)?;
    let var_y = tape.reduce_var(y, 0)?;
    let var_h = tape.reduce_var(yhat, 0)?;
    let gap = tape.sub(mean_y, mean_h)?;
    let gap2 = tape.mul(gap, gap)?;
    let spread = tape.add(var_y, var_h)?;
    let mut den = tape.add(spread, gap2)?;
    if tape.scalar(den) < CCC_EPS {
        den = tape.add_const(den, CCC_EPS)?;
    }
    let num = tape.scale(cov, 2.0)?;
    let out = tape.div(num, den)?;
    tape.reshape(out, vec![])
}

pub const AVD_NAMES: [&str; 3] = ["ccc_a", "ccc_v", "ccc_d"];

/// `−(CCC_A + CCC_V + CCC_D) / 3` over `B × 3` predictions and targets.
pub fn ccc_loss(tape: &mut Tape, pred: Var, truth: Var) -> Result<LossValue> {
    let (pv, tv) = (tape.value(pred), tape.value(truth));
    if pv.shape() != tv.shape() || pv.cols() != 3 {
        return Err(Error::ShapeMismatch {
            op: "ccc_loss",
            left: pv.shape().to_vec(),
            right: tv.shape().to_vec(),
        });
    }
    let mut components = BTreeMap::new();
    let mut sum: Option<Var> = None;
    for (d, name) in AVD_NAMES.iter().enumerate() {
        let p = tape.slice(pred, 1, d..d + 1)?;
        let t = tape.slice(truth, 1, d..d + 1)?;
        let c = ccc(tape, t, p)?;
        components.insert(name.to_string(), tape.scalar(c));
        sum = Some(match sum {
            None => c,
            Some(s) => tape.add(s, c)?,
        });
    }
    let total = tape.scale(sum.expect("three dimensions"), -1.0 / 3.0)?;
    Ok(LossValue { total, components })
}

/// Convenience: CCC of plain slices through the differentiable path.
pub fn ccc_value(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(Array::row_vector(y.to_vec()));
    let b = tape.constant(Array::row_vector(yhat.to_vec()));
    let c = ccc(&mut tape, a, b)?;
    Ok(tape.scalar(c))
}
