//! JSON-lines utterance manifests.
//!
//! ```text
//! {"audio": "a.wav", "transcript": "hello", "sentiment": "positive", "split": "train"}
//! {"audio": "b.wav", "activation": 4.5, "valence": 2.0, "dominance": 3.0, "split": "validation"}
//! ```
//!
//! Audio paths are resolved relative to the manifest. Activation, valence
//! and dominance arrive on the 1–7 scale and are stored as `(v − 4) / 3`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::SENTIMENT_CLASSES;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

/// Which fields a record must carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Requirement {
    /// Transcript and sentiment.
    Pretrain,
    /// Activation, valence and dominance.
    Finetune,
    /// Whatever is present.
    Any,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceRecord {
    pub audio: PathBuf,
    pub transcript: Option<String>,
    /// Index into `SENTIMENT_CLASSES`.
    pub sentiment: Option<usize>,
    /// Activation, valence, dominance.
    pub avd: Option<[f64; 3]>,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ManifestSplit {
    pub train: Vec<UtteranceRecord>,
    pub validation: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
}

impl ManifestSplit {
    pub fn get(&self, split: Split) -> &[UtteranceRecord] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all(&self) -> impl Iterator<Item = &UtteranceRecord> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    audio: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sentiment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    valence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dominance: Option<f64>,
    #[serde(default)]
    split: Split,
}

pub fn sentiment_index(label: &str) -> Option<usize> {
    SENTIMENT_CLASSES.iter().position(|c| c.eq_ignore_ascii_case(label.trim()))
}

/// 1–7 scale → [−1, 1].
pub fn normalize_avd(v: f64) -> f64 {
    (v - 4.0) / 3.0
}

/// [−1, 1] → 1–7 scale.
pub fn denormalize_avd(v: f64) -> f64 {
    3.0 * v + 4.0
}

fn validate(raw: RawRecord, req: Requirement) -> std::result::Result<UtteranceRecord, String> {
    if raw.audio.trim().is_empty() {
        return Err("empty audio path".into());
    }
    let sentiment = match &raw.sentiment {
        None => None,
        Some(s) => Some(sentiment_index(s).ok_or_else(|| {
            format!("sentiment {s:?} is not one of negative, neutral, positive")
        })?),
    };
    let dims = [raw.activation, raw.valence, raw.dominance];
    let avd = match dims {
        [Some(a), Some(v), Some(d)] => {
            for (name, x) in ["activation", "valence", "dominance"].iter().zip([a, v, d]) {
                if !(1.0..=7.0).contains(&x) {
                    return Err(format!("{name} {x} outside [1, 7]"));
                }
            }
            Some([a, v, d].map(normalize_avd))
        }
        [None, None, None] => None,
        _ => return Err("activation, valence and dominance must be given together".into()),
    };
    match req {
        Requirement::Pretrain if raw.transcript.is_none() => return Err("missing transcript".into()),
        Requirement::Pretrain if sentiment.is_none() => return Err("missing sentiment".into()),
        Requirement::Finetune if avd.is_none() => {
            return Err("missing activation/valence/dominance".into())
        }
        _ => {}
    }
    Ok(UtteranceRecord {
        audio: PathBuf::from(raw.audio),
        transcript: raw.transcript,
        sentiment,
        avd,
        split: raw.split,
    })
}

/// Parses manifest text. `base` resolves relative audio paths. Every bad
/// line is reported, not just the first.
pub fn parse_manifest(text: &str, base: &Path, req: Requirement) -> Result<ManifestSplit> {
    let mut out = ManifestSplit::default();
    let mut problems = Vec::new();
    let mut seen: BTreeMap<PathBuf, (usize, Split)> = BTreeMap::new();
    let mut any = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        any = true;
        let raw: RawRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {lineno}: {e}"));
                continue;
            }
        };
        let mut rec = match validate(raw, req) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {lineno}: {e}"));
                continue;
            }
        };
        if rec.audio.is_relative() {
            rec.audio = base.join(&rec.audio);
        }
        if let Some(&(first, split)) = seen.get(&rec.audio) {
            if split != rec.split {
                problems.push(format!(
                    "line {lineno}: {} already listed in {split:?} split on line {first}",
                    rec.audio.display()
                ));
                continue;
            }
        } else {
            seen.insert(rec.audio.clone(), (lineno, rec.split));
        }
        match rec.split {
            Split::Train => out.train.push(rec),
            Split::Validation => out.validation.push(rec),
            Split::Test => out.test.push(rec),
        }
    }
    if !any {
        return Err(Error::EmptyManifest);
    }
    if !problems.is_empty() {
        return Err(Error::Manifest(problems));
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>, req: Requirement) -> Result<ManifestSplit> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, req)
}

/// One manifest line; AVD is written on the 1–7 scale.
pub fn record_to_json(rec: &UtteranceRecord) -> String {
    let [activation, valence, dominance] = match rec.avd {
        Some(v) => v.map(|x| Some(denormalize_avd(x))),
        None => [None; 3],
    };
    let raw = RawRecord {
        audio: rec.audio.to_string_lossy().into_owned(),
        transcript: rec.transcript.clone(),
        sentiment: rec.sentiment.map(|s| SENTIMENT_CLASSES[s].to_string()),
        activation,
        valence,
        dominance,
        split: rec.split,
    };
    serde_json::to_string(&raw).expect("plain record")
}
