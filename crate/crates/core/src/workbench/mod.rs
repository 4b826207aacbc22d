//! Dataset ingestion, run configuration and synthetic corpora.

pub mod config;
pub mod fixture;
pub mod manifest;
pub mod synth;

use std::path::{Path, PathBuf};

use crate::dataset::{prepare_utterance, Labels, Utterance};
use crate::error::{Error, Result};
use crate::frontend::wav::{read_wav, write_wav};
use crate::frontend::FrontendConfig;

use manifest::{record_to_json, UtteranceRecord};
use synth::{synthesize, SynthKind};

/// Stable id derived from the audio path (FNV-1a), used to seed augmentation.
pub fn utterance_id(path: &Path) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in path.to_string_lossy().bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn labels_of(rec: &UtteranceRecord) -> Labels {
    Labels {
        transcript: rec.transcript.clone(),
        sentiment: rec.sentiment,
        avd: rec.avd,
    }
}

/// Reads the audio of `rec` and extracts its feature views.
pub fn load_utterance(rec: &UtteranceRecord, cfg: &FrontendConfig, speed_copies: bool) -> Result<Utterance> {
    let wave = read_wav(&rec.audio)?;
    prepare_utterance(utterance_id(&rec.audio), &wave, labels_of(rec), cfg, speed_copies)
}

/// In-memory synthetic corpus, ready for training. AVD is normalized.
pub fn synthetic_utterances(
    kind: SynthKind,
    n_train: usize,
    n_validation: usize,
    seed: u64,
    cfg: &FrontendConfig,
    speed_copies: bool,
) -> Result<(Vec<Utterance>, Vec<Utterance>)> {
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (i, s) in synthesize(kind, n_train, n_validation, seed)?.into_iter().enumerate() {
        let mut labels = labels_of(&s.record);
        labels.avd = labels.avd.map(|v| v.map(manifest::normalize_avd));
        let copies = speed_copies && s.record.split == manifest::Split::Train;
        let utt = prepare_utterance(i as u64, &s.wave, labels, cfg, copies)?;
        if s.record.split == manifest::Split::Train {
            train.push(utt);
        } else {
            validation.push(utt);
        }
    }
    Ok((train, validation))
}

/// Writes WAV files plus `manifest.jsonl` into `dir`; returns the manifest path.
pub fn generate_synthetic(
    kind: SynthKind,
    n_train: usize,
    n_validation: usize,
    seed: u64,
    dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::new();
    for s in synthesize(kind, n_train, n_validation, seed)? {
        write_wav(dir.join(&s.record.audio), &s.wave)?;
        let mut rec = s.record;
        rec.avd = rec.avd.map(|v| v.map(manifest::normalize_avd));
        lines.push_str(&record_to_json(&rec));
        lines.push('\n');
    }
    let path = dir.join("manifest.jsonl");
    std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
