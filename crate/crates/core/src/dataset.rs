//! Utterances prepared for training: normalized LFBE views (the original
//! plus one per speed factor) and their labels.

use crate::error::Result;
use crate::frontend::{
    extract_lfbe, normalize_per_utterance, spec_augment, speed_perturb, stack_and_skip, FeatureMatrix,
    FrontendConfig, Waveform,
};
use crate::tokens;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Labels {
    pub transcript: Option<String>,
    pub sentiment: Option<usize>,
    /// Activation, valence, dominance on the training scale.
    pub avd: Option<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct Utterance {
    /// Stable identifier; seeds per-utterance augmentation.
    pub id: u64,
    /// Normalized, unstacked features. `views[0]` is the unperturbed audio.
    pub views: Vec<FeatureMatrix>,
    pub labels: Labels,
    pub tokens: Vec<usize>,
}

impl Utterance {
    /// Stacked features of the unperturbed view, as used for validation.
    pub fn clean(&self, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
        stack_and_skip(&self.views[0], cfg.stack, cfg.skip)
    }

    /// Stacked features of `view` with time/frequency masking drawn from `seed`.
    pub fn augmented(&self, view: usize, cfg: &FrontendConfig, seed: u64) -> Result<FeatureMatrix> {
        let masked = spec_augment(&self.views[view], cfg, seed);
        stack_and_skip(&masked, cfg.stack, cfg.skip)
    }

    pub fn transcript(&self) -> &str {
        self.labels.transcript.as_deref().unwrap_or("")
    }
}

pub fn lfbe_view(wave: &Waveform, cfg: &FrontendConfig) -> Result<FeatureMatrix> {
    normalize_per_utterance(&extract_lfbe(wave, cfg)?)
}

/// Extracts the clean view and, when `speed_copies` is set, one extra view
/// per configured speed factor.
pub fn prepare_utterance(
    id: u64,
    wave: &Waveform,
    labels: Labels,
    cfg: &FrontendConfig,
    speed_copies: bool,
) -> Result<Utterance> {
    cfg.validate()?;
    let mut views = vec![lfbe_view(wave, cfg)?];
    if speed_copies {
        for &f in &cfg.speed_factors {
            views.push(lfbe_view(&speed_perturb(wave, f)?, cfg)?);
        }
    }
    let tokens = labels.transcript.as_deref().map(tokens::encode).unwrap_or_default();
    Ok(Utterance {
        id,
        views,
        labels,
        tokens,
    })
}
