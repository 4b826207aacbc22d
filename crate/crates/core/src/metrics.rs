//! Evaluation statistics: character error rate, greedy CTC decoding,
//! one-vs-rest AUC, weighted average recall, Spearman correlation and the
//! sentiment/emotion confusion analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::network::SENTIMENT_CLASSES;
use crate::tokens;

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance between the character sequences over the reference length.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok(levenshtein(&r, &h) as f64 / r.len() as f64)
}

/// Corpus-level CER: total edits over total reference characters.
pub fn corpus_cer<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<f64> {
    let (mut edits, mut chars) = (0usize, 0usize);
    for (r, h) in pairs {
        let r: Vec<char> = r.chars().collect();
        let h: Vec<char> = h.chars().collect();
        edits += levenshtein(&r, &h);
        chars += r.len();
    }
    if chars == 0 {
        return Err(Error::EmptyReference);
    }
    Ok(edits as f64 / chars as f64)
}

/// Best token per valid frame with adjacent repeats collapsed and blanks
/// (the last column) removed.
pub fn greedy_path(log_probs: &Array, mask: Option<&[bool]>) -> Vec<usize> {
    let (rows, cols) = (log_probs.rows(), log_probs.cols());
    let blank = cols - 1;
    let mut out = Vec::new();
    let mut prev = None;
    for t in (0..rows).filter(|&t| mask.is_none_or(|m| m[t])) {
        let row = log_probs.row(t);
        let best = (0..cols).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

pub fn greedy_decode(log_probs: &Array) -> String {
    tokens::decode(&greedy_path(log_probs, None))
}

pub fn greedy_decode_masked(log_probs: &Array, mask: &[bool]) -> String {
    tokens::decode(&greedy_path(log_probs, Some(mask)))
}

/// Average (1-based) ranks with ties sharing the mean of their positions.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUC of `scores` for separating `positive` from the rest.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = mid_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Macro-averaged one-vs-rest AUC. Classes absent from `labels` are skipped.
pub fn auc_ovr(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    let classes = scores.first().map_or(0, Vec::len);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidLabel { label: bad, classes });
    }
    let mut aucs = Vec::new();
    for c in 0..classes {
        let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        if let Some(a) = binary_auc(&s, &pos) {
            aucs.push(a);
        }
    }
    if aucs.is_empty() {
        return Err(Error::AucUndefined("fewer than two classes present".into()));
    }
    Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Σ_c prevalence(c)·recall(c); equals plain accuracy.
pub fn weighted_average_recall(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != labels.len() {
        return Err(Error::LengthMismatch(pred.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::LengthMismatch(0, 0));
    }
    let n = labels.len() as f64;
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &l) in pred.iter().zip(labels) {
        let e = per_class.entry(l).or_default();
        e.0 += 1;
        e.1 += usize::from(p == l);
    }
    Ok(per_class
        .values()
        .map(|&(count, hit)| (count as f64 / n) * (hit as f64 / count as f64))
        .sum())
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Pearson correlation of mid-ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(Error::CorrelationUndefined(format!("{} points", x.len())));
    }
    pearson(&mid_ranks(x), &mid_ranks(y))
        .map(|r| r.clamp(-1.0, 1.0))
        .ok_or_else(|| Error::CorrelationUndefined("constant input".into()))
}

/// Maps member class names onto group names, e.g. sad/frustrated/anger onto
/// one negative-emotion class. Unmapped names pass through.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassGrouping {
    map: BTreeMap<String, String>,
}

impl ClassGrouping {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn group<I, S>(mut self, name: &str, members: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        for m in members {
            self.map.insert(m.as_ref().to_lowercase(), name.to_string());
        }
        self
    }

    pub fn apply(&self, label: &str) -> String {
        let key = label.to_lowercase();
        self.map.get(&key).cloned().unwrap_or(key)
    }

    /// Parses `group=member,member;group2=member`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut out = ClassGrouping::new();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, members) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("bad grouping '{part}'")))?;
            out = out.group(name.trim(), members.split(',').map(str::trim).filter(|m| !m.is_empty()));
        }
        Ok(out)
    }
}

/// Sentiment (rows) × emotion (columns) counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_total(&self, sentiment: usize) -> u64 {
        self.counts[sentiment].iter().sum()
    }

    /// Counts of one emotion class across the sentiment rows.
    pub fn emotion_counts(&self, emotion: &str) -> Option<Vec<u64>> {
        let key = emotion.to_lowercase();
        let c = self.col_labels.iter().position(|l| *l == key)?;
        Some(self.counts.iter().map(|row| row[c]).collect())
    }

    pub fn render(&self) -> String {
        let width = self.col_labels.iter().map(String::len).max().unwrap_or(5).max(8);
        let mut s = format!("{:<10}", "");
        for c in &self.col_labels {
            let _ = write!(s, " {c:>width$}");
        }
        let _ = writeln!(s, " {:>width$}", "total");
        for (label, row) in self.row_labels.iter().zip(&self.counts) {
            let _ = write!(s, "{label:<10}");
            for v in row {
                let _ = write!(s, " {v:>width$}");
            }
            let _ = writeln!(s, " {:>width$}", row.iter().sum::<u64>());
        }
        s
    }
}

/// Tallies aligned (sentiment class index, emotion label) pairs. Emotion
/// columns appear in order of first occurrence after grouping.
pub fn confusion<S: AsRef<str>>(
    sentiment: &[usize],
    emotion: &[S],
    grouping: Option<&ClassGrouping>,
) -> Result<ConfusionMatrix> {
    if sentiment.len() != emotion.len() {
        return Err(Error::LengthMismatch(sentiment.len(), emotion.len()));
    }
    let mut cols: Vec<String> = Vec::new();
    let mut counts: Vec<Vec<u64>> = vec![Vec::new(); SENTIMENT_CLASSES.len()];
    for (&s, e) in sentiment.iter().zip(emotion) {
        if s >= SENTIMENT_CLASSES.len() {
            return Err(Error::InvalidLabel { label: s, classes: 3 });
        }
        let label = match grouping {
            Some(g) => g.apply(e.as_ref()),
            None => e.as_ref().to_lowercase(),
        };
        let c = match cols.iter().position(|l| *l == label) {
            Some(c) => c,
            None => {
                cols.push(label);
                counts.iter_mut().for_each(|row| row.push(0));
                cols.len() - 1
            }
        };
        counts[s][c] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        row_labels: SENTIMENT_CLASSES.iter().map(|s| s.to_string()).collect(),
        col_labels: cols,
    })
}

/// Validation summary for one epoch or one evaluation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cer: f64,
    pub auc: f64,
    pub war: f64,
    pub ccc_a: f64,
    pub ccc_v: f64,
    pub ccc_d: f64,
    pub stopping_metric: f64,
}

impl EvalReport {
    pub fn new(cer: f64, auc: f64, war: f64, ccc_avd: [f64; 3]) -> Self {
        EvalReport {
            cer,
            auc,
            war,
            ccc_a: ccc_avd[0],
            ccc_v: ccc_avd[1],
            ccc_d: ccc_avd[2],
            stopping_metric: cer - auc,
        }
    }

    pub fn ccc_avd(&self) -> [f64; 3] {
        [self.ccc_a, self.ccc_v, self.ccc_d]
    }

    pub fn mean_ccc(&self) -> f64 {
        (self.ccc_a + self.ccc_v + self.ccc_d) / 3.0
    }

    pub fn to_key_value(&self) -> String {
        format!(
            "cer={}\nauc={}\nwar={}\nccc_a={}\nccc_v={}\nccc_d={}\nstopping_metric={}\n",
            self.cer, self.auc, self.war, self.ccc_a, self.ccc_v, self.ccc_d, self.stopping_metric
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numeric struct")
    }
}
