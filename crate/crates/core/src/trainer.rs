//! Adam, length-bucketed mini-batching, pre-training and fine-tuning epochs,
//! validation, early stopping and the outer run loops.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape, Var};
use crate::dataset::Utterance;
use crate::error::{Error, Result};
use crate::frontend::{FeatureMatrix, FrontendConfig};
use crate::metrics::{auc_ovr, corpus_cer, greedy_decode_masked, weighted_average_recall, EvalReport};
use crate::network::{
    encoder_forward, regressor_forward, sentiment_head_forward, token_head_forward, ModelConfig,
    ENCODER_PREFIX, REGRESSOR_PREFIX, SENTIMENT_PREFIX, TOKEN_PREFIX,
};
use crate::objectives::{ccc_loss, ctc_loss, ctc_min_frames, global_loss, sentiment_ce, CccStats};
use crate::params::ParameterStore;
use crate::tokens::{self, BLANK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub mode: Mode,
    /// Sentiment weight in the pre-training loss.
    pub lambda: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Fine-tuning only: keep encoder weights fixed.
    pub freeze_encoder: bool,
    /// Pre-training only: speed copies and time/frequency masking.
    pub augment: bool,
}

impl TrainRunConfig {
    pub fn new(mode: Mode, batch_size: usize) -> Self {
        TrainRunConfig {
            mode,
            lambda: 200.0,
            adam: AdamConfig::default(),
            batch_size,
            patience: 25,
            max_epochs: 200,
            seed: 0,
            freeze_encoder: false,
            augment: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.mode == Mode::Finetune && self.batch_size < 2 {
            return bad("fine-tuning needs batch_size >= 2 for CCC statistics");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return bad("patience and max_epochs must be positive");
        }
        Ok(())
    }

    /// Model-selection metric implied by the mode and λ.
    pub fn criterion(&self) -> Criterion {
        match self.mode {
            Mode::Finetune => Criterion::NegMeanCcc,
            Mode::Pretrain if self.lambda == 0.0 => Criterion::Cer,
            Mode::Pretrain => Criterion::StoppingMetric,
        }
    }

    pub fn to_key_values(&self) -> BTreeMap<String, String> {
        let mode = match self.mode {
            Mode::Pretrain => "pretrain",
            Mode::Finetune => "finetune",
        };
        [
            ("mode", mode.to_string()),
            ("lambda", self.lambda.to_string()),
            ("lr", self.adam.lr.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("adam_eps", self.adam.eps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("patience", self.patience.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("freeze_encoder", self.freeze_encoder.to_string()),
            ("augment", self.augment.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update of every trainable parameter. Frozen
/// parameters are left untouched; a trainable parameter without a gradient
/// is an error. Consumes the gradients.
pub fn adam_step(
    params: &mut ParameterStore,
    grads: BTreeMap<String, Array>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        if p.frozen {
            continue;
        }
        match grads.get(name) {
            None => return Err(Error::MissingGradient(name.clone())),
            Some(g) if g.shape() != p.value.shape() => {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                })
            }
            Some(g) if g.data().iter().any(|v| !v.is_finite()) => return Err(Error::NonFinite("adam_step")),
            Some(_) => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        if p.frozen {
            continue;
        }
        let g = grads[name.as_str()].data();
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Mixes run seed, epoch and utterance coordinates into one stream seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

/// Groups example indices into batches of similar length and shuffles the
/// batch order. Sorting is stable, so ties keep their input order.
pub fn bucket_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

fn pad_batch(feats: Vec<FeatureMatrix>) -> Vec<FeatureMatrix> {
    let longest = feats.iter().map(FeatureMatrix::n_frames).max().unwrap_or(0);
    feats.iter().map(|f| f.pad_to(longest)).collect()
}

/// Lower is better for every criterion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Criterion {
    /// CER − AUC.
    StoppingMetric,
    Cer,
    /// −mean(CCC_A, CCC_V, CCC_D).
    NegMeanCcc,
}

impl Criterion {
    pub fn of(&self, r: &EvalReport) -> f64 {
        match self {
            Criterion::StoppingMetric => r.stopping_metric,
            Criterion::Cer => r.cer,
            Criterion::NegMeanCcc => -r.mean_ccc(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    /// `best_epoch` is 1-based.
    Stop { best_epoch: usize },
}

/// 1-based epoch of the first strict minimum; 0 for an empty history.
pub fn best_epoch(metric: &[f64]) -> usize {
    let mut best = 0;
    for (i, &m) in metric.iter().enumerate() {
        if best == 0 || m < metric[best - 1] {
            best = i + 1;
        }
    }
    best
}

/// Stops once `patience` epochs have passed without a new strict minimum.
pub fn early_stop(metric: &[f64], patience: usize) -> StopDecision {
    let best = best_epoch(metric);
    if best > 0 && metric.len() - best >= patience {
        StopDecision::Stop { best_epoch: best }
    } else {
        StopDecision::Continue
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-averaged loss components plus `total`.
    pub train_losses: BTreeMap<String, f64>,
    pub validation: EvalReport,
    /// Utterances skipped this epoch (unalignable or too short).
    pub skipped: usize,
    pub wall_time_secs: f64,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain record")
    }
}

/// Model weights plus optimizer state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParameterStore,
    pub adam: AdamState,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: ParameterStore) -> Self {
        TrainState {
            params,
            adam: AdamState::new(),
            epoch: 0,
        }
    }
}

/// Freezes whatever the given mode never reaches, so Adam sees a gradient
/// for every trainable parameter.
pub fn configure_freezing(params: &mut ParameterStore, cfg: &TrainRunConfig) {
    params.set_frozen("", false);
    match cfg.mode {
        Mode::Pretrain => params.set_frozen(REGRESSOR_PREFIX, true),
        Mode::Finetune => {
            params.set_frozen(TOKEN_PREFIX, true);
            params.set_frozen(SENTIMENT_PREFIX, true);
            if cfg.freeze_encoder {
                params.set_frozen(ENCODER_PREFIX, true);
            }
        }
    }
}

#[derive(Default)]
struct LossAccumulator {
    sums: BTreeMap<String, f64>,
    batches: usize,
}

impl LossAccumulator {
    fn add(&mut self, total: f64, parts: &BTreeMap<String, f64>) {
        *self.sums.entry("total".into()).or_default() += total;
        for (k, v) in parts {
            *self.sums.entry(k.clone()).or_default() += v;
        }
        self.batches += 1;
    }

    fn mean(self) -> BTreeMap<String, f64> {
        let n = self.batches.max(1) as f64;
        self.sums.into_iter().map(|(k, v)| (k, v / n)).collect()
    }
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    tape.scale(acc, 1.0 / vars.len() as f64)
}

fn pretrain_step(
    state: &mut TrainState,
    batch: &[(&Utterance, FeatureMatrix)],
    cfg: &TrainRunConfig,
    model: &ModelConfig,
    acc: &mut LossAccumulator,
) -> Result<usize> {
    let mut tape = Tape::new();
    let bound = state.params.bind(&mut tape);
    let (mut asr, mut sent) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for (utt, feats) in batch {
        let needed = ctc_min_frames(&utt.tokens);
        if utt.tokens.is_empty() || feats.valid_frames() < needed {
            log::warn!(
                "skipping utterance {}: {} frames cannot align {} labels",
                utt.id,
                feats.valid_frames(),
                needed
            );
            skipped += 1;
            continue;
        }
        let label = utt.labels.sentiment.ok_or_else(|| {
            Error::InvalidConfig(format!("utterance {} has no sentiment label", utt.id))
        })?;
        let enc = encoder_forward(&mut tape, &bound, feats, &model.encoder)?;
        let lp = token_head_forward(&mut tape, &bound, &enc)?;
        asr.push(ctc_loss(&mut tape, lp, &utt.tokens, &enc.mask, BLANK)?);
        let slp = sentiment_head_forward(&mut tape, &bound, &enc, &model.sentiment)?;
        sent.push(sentiment_ce(&mut tape, slp, label)?);
    }
    if asr.is_empty() {
        return Ok(skipped);
    }
    let a = mean_of(&mut tape, &asr)?;
    let s = mean_of(&mut tape, &sent)?;
    let loss = global_loss(&mut tape, a, s, cfg.lambda)?;
    acc.add(tape.scalar(loss.total), &loss.components);
    tape.backward(loss.total)?;
    let grads = bound.gradients(&tape);
    adam_step(&mut state.params, grads, &mut state.adam, &cfg.adam)?;
    Ok(skipped)
}

/// One pass over `train` with speed copies and fresh masking per epoch,
/// followed by validation on the clean features of `validation`.
pub fn pretrain_epoch(
    state: &mut TrainState,
    train: &[Utterance],
    validation: &[Utterance],
    cfg: &TrainRunConfig,
    frontend: &FrontendConfig,
    model: &ModelConfig,
) -> Result<EpochRecord> {
    let start = Instant::now();
    state.epoch += 1;
    let epoch = state.epoch as u64;
    let mut examples: Vec<(usize, usize)> = Vec::new();
    for (u, utt) in train.iter().enumerate() {
        let views = if cfg.augment { utt.views.len() } else { 1 };
        examples.extend((0..views).map(|v| (u, v)));
    }
    let lengths: Vec<usize> = examples.iter().map(|&(u, v)| train[u].views[v].n_frames()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch]));
    let mut acc = LossAccumulator::default();
    let mut skipped = 0;
    for batch in bucket_batches(&lengths, cfg.batch_size, &mut rng) {
        let mut feats = Vec::with_capacity(batch.len());
        for &i in &batch {
            let (u, v) = examples[i];
            let utt = &train[u];
            feats.push(if cfg.augment {
                utt.augmented(v, frontend, derive_seed(&[cfg.seed, epoch, utt.id, v as u64]))?
            } else {
                utt.clean(frontend)?
            });
        }
        let pairs: Vec<_> = batch.iter().map(|&i| &train[examples[i].0]).zip(pad_batch(feats)).collect();
        skipped += pretrain_step(state, &pairs, cfg, model, &mut acc)?;
    }
    let validation = evaluate_pretrain(&state.params, validation, frontend, model)?;
    Ok(EpochRecord {
        epoch: state.epoch,
        train_losses: acc.mean(),
        validation,
        skipped,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Per-utterance outputs of the pre-trained model.
#[derive(Clone, Debug)]
pub struct PretrainPrediction {
    pub hypothesis: String,
    pub sentiment_probs: Vec<f64>,
}

pub fn predict_pretrain(
    params: &ParameterStore,
    feats: &FeatureMatrix,
    model: &ModelConfig,
) -> Result<PretrainPrediction> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let enc = encoder_forward(&mut tape, &bound, feats, &model.encoder)?;
    let lp = token_head_forward(&mut tape, &bound, &enc)?;
    let hypothesis = greedy_decode_masked(tape.value(lp), &enc.mask);
    let slp = sentiment_head_forward(&mut tape, &bound, &enc, &model.sentiment)?;
    let sentiment_probs = tape.value(slp).data().iter().map(|v| v.exp()).collect();
    Ok(PretrainPrediction {
        hypothesis,
        sentiment_probs,
    })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Corpus CER from greedy decoding, macro one-vs-rest AUC and WAR of the
/// sentiment head. AUC falls back to 0.5 when fewer than two classes occur.
pub fn evaluate_pretrain(
    params: &ParameterStore,
    data: &[Utterance],
    frontend: &FrontendConfig,
    model: &ModelConfig,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation set".into()));
    }
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for utt in data {
        let pred = predict_pretrain(params, &utt.clean(frontend)?, model)?;
        refs.push(tokens::normalize_transcript(utt.transcript()));
        hyps.push(pred.hypothesis);
        if let Some(l) = utt.labels.sentiment {
            labels.push(l);
            scores.push(pred.sentiment_probs);
        }
    }
    let cer = corpus_cer(refs.iter().map(String::as_str).zip(hyps.iter().map(String::as_str)))
        .unwrap_or(0.0);
    let (auc, war) = if labels.is_empty() {
        (0.5, 0.0)
    } else {
        let auc = auc_ovr(&scores, &labels).unwrap_or_else(|e| {
            log::warn!("AUC undefined on this set ({e}); reporting 0.5");
            0.5
        });
        let pred: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        (auc, weighted_average_recall(&pred, &labels)?)
    };
    Ok(EvalReport::new(cer, auc, war, [0.0; 3]))
}

fn avd_label(utt: &Utterance) -> Result<[f64; 3]> {
    utt.labels
        .avd
        .ok_or_else(|| Error::InvalidConfig(format!("utterance {} has no activation/valence/dominance label", utt.id)))
}

/// One pass of CCC fine-tuning. Batches left with fewer than two usable
/// utterances are dropped.
pub fn finetune_epoch(
    state: &mut TrainState,
    train: &[Utterance],
    validation: &[Utterance],
    cfg: &TrainRunConfig,
    frontend: &FrontendConfig,
    model: &ModelConfig,
) -> Result<EpochRecord> {
    let start = Instant::now();
    state.epoch += 1;
    let feats: Vec<FeatureMatrix> = train.iter().map(|u| u.clean(frontend)).collect::<Result<_>>()?;
    let lengths: Vec<usize> = feats.iter().map(FeatureMatrix::n_frames).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, state.epoch as u64]));
    let min_len = model.regressor.min_length();
    let mut acc = LossAccumulator::default();
    let mut skipped = 0;
    for batch in bucket_batches(&lengths, cfg.batch_size, &mut rng) {
        let usable: Vec<usize> = batch
            .iter()
            .copied()
            .filter(|&i| {
                let ok = feats[i].valid_frames() >= min_len;
                if !ok {
                    log::warn!("skipping utterance {}: shorter than {min_len} frames", train[i].id);
                    skipped += 1;
                }
                ok
            })
            .collect();
        if usable.len() < 2 {
            skipped += usable.len();
            continue;
        }
        let padded = pad_batch(usable.iter().map(|&i| feats[i].clone()).collect());
        let mut tape = Tape::new();
        let bound = state.params.bind(&mut tape);
        let mut preds = Vec::with_capacity(usable.len());
        let mut truth = Vec::with_capacity(3 * usable.len());
        for (&i, f) in usable.iter().zip(&padded) {
            let enc = encoder_forward(&mut tape, &bound, f, &model.encoder)?;
            preds.push(regressor_forward(&mut tape, &bound, &enc, &model.regressor)?.avd);
            truth.extend(avd_label(&train[i])?);
        }
        let pred = tape.concat(&preds, 0)?;
        let truth = tape.constant(Array::matrix(usable.len(), 3, truth)?);
        let loss = ccc_loss(&mut tape, pred, truth)?;
        acc.add(tape.scalar(loss.total), &loss.components);
        tape.backward(loss.total)?;
        let grads = bound.gradients(&tape);
        adam_step(&mut state.params, grads, &mut state.adam, &cfg.adam)?;
    }
    let validation = evaluate_finetune(&state.params, validation, frontend, model)?;
    Ok(EpochRecord {
        epoch: state.epoch,
        train_losses: acc.mean(),
        validation,
        skipped,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

pub fn predict_avd(params: &ParameterStore, feats: &FeatureMatrix, model: &ModelConfig) -> Result<[f64; 3]> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let enc = encoder_forward(&mut tape, &bound, feats, &model.encoder)?;
    let out = regressor_forward(&mut tape, &bound, &enc, &model.regressor)?;
    let d = tape.value(out.avd).data();
    Ok([d[0], d[1], d[2]])
}

/// Per-dimension CCC over the whole set; too-short utterances are skipped.
pub fn evaluate_finetune(
    params: &ParameterStore,
    data: &[Utterance],
    frontend: &FrontendConfig,
    model: &ModelConfig,
) -> Result<EvalReport> {
    let mut pred: [Vec<f64>; 3] = Default::default();
    let mut truth: [Vec<f64>; 3] = Default::default();
    for utt in data {
        let feats = utt.clean(frontend)?;
        if feats.valid_frames() < model.regressor.min_length() {
            log::warn!("skipping utterance {} in evaluation: too short", utt.id);
            continue;
        }
        let p = predict_avd(params, &feats, model)?;
        let t = avd_label(utt)?;
        for d in 0..3 {
            pred[d].push(p[d]);
            truth[d].push(t[d]);
        }
    }
    if pred[0].len() < 2 {
        return Err(Error::CccUndefined(pred[0].len()));
    }
    let mut ccc = [0.0; 3];
    for d in 0..3 {
        ccc[d] = CccStats::compute(&truth[d], &pred[d])?.ccc();
    }
    Ok(EvalReport::new(0.0, 0.0, 0.0, ccc))
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Weights from the best validation epoch.
    pub best: ParameterStore,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    /// Weights after the last epoch run.
    pub last: TrainState,
}

/// Runs epochs until early stopping or `max_epochs`, tracking the best
/// weights under the configured criterion. An empty validation set falls
/// back to the training set. `on_epoch` sees each record as it completes.
pub fn run_training(
    params: ParameterStore,
    train: &[Utterance],
    validation: &[Utterance],
    cfg: &TrainRunConfig,
    frontend: &FrontendConfig,
    model: &ModelConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ParameterStore) -> Result<()>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    frontend.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let validation = if validation.is_empty() { train } else { validation };
    let mut state = TrainState::new(params);
    configure_freezing(&mut state.params, cfg);
    let criterion = cfg.criterion();
    let mut history = Vec::new();
    let mut metric = Vec::new();
    let mut best = state.params.clone();
    let mut stopped_early = false;
    for _ in 0..cfg.max_epochs {
        let record = match cfg.mode {
            Mode::Pretrain => pretrain_epoch(&mut state, train, validation, cfg, frontend, model)?,
            Mode::Finetune => finetune_epoch(&mut state, train, validation, cfg, frontend, model)?,
        };
        log::info!(
            "epoch {} loss {:.5} {}",
            record.epoch,
            record.train_losses.get("total").copied().unwrap_or(f64::NAN),
            record.validation.to_json()
        );
        metric.push(criterion.of(&record.validation));
        if best_epoch(&metric) == metric.len() {
            best = state.params.clone();
        }
        on_epoch(&record, &state.params)?;
        history.push(record);
        if let StopDecision::Stop { .. } = early_stop(&metric, cfg.patience) {
            stopped_early = true;
            break;
        }
    }
    Ok(RunOutcome {
        best,
        best_epoch: best_epoch(&metric),
        history,
        stopped_early,
        last: state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParameterStore::new();
        p.insert("w", Array::row_vector(vec![1.0, -2.0])).unwrap();
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new();
        let g = BTreeMap::from([("w".to_string(), Array::row_vector(vec![1.0, -3.0]))]);
        adam_step(&mut p, g, &mut st, &cfg).unwrap();
        let w = p.value("w").unwrap().data();
        assert!((w[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((w[1] - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_and_frozen_leave_weights() {
        let mut p = ParameterStore::new();
        p.insert("a", Array::row_vector(vec![0.5])).unwrap();
        p.insert("b", Array::row_vector(vec![0.25])).unwrap();
        p.set_frozen("b", true);
        let before = p.clone();
        let mut st = AdamState::new();
        let g = BTreeMap::from([
            ("a".to_string(), Array::row_vector(vec![0.0])),
            ("b".to_string(), Array::row_vector(vec![9.0])),
        ]);
        adam_step(&mut p, g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p.value("a").unwrap(), before.value("a").unwrap());
        assert_eq!(p.value("b").unwrap(), before.value("b").unwrap());
    }

    #[test]
    fn adam_missing_gradient_is_error() {
        let mut p = ParameterStore::new();
        p.insert("a", Array::row_vector(vec![0.5])).unwrap();
        let err = adam_step(&mut p, BTreeMap::new(), &mut AdamState::new(), &AdamConfig::default());
        assert!(matches!(err, Err(Error::MissingGradient(n)) if n == "a"));
    }

    #[test]
    fn early_stopping_rule() {
        let m = [0.4, 0.3, 0.35, 0.3, 0.32];
        assert_eq!(best_epoch(&m), 2);
        assert_eq!(early_stop(&m, 3), StopDecision::Stop { best_epoch: 2 });
        assert_eq!(early_stop(&m, 4), StopDecision::Continue);
        assert_eq!(early_stop(&[], 1), StopDecision::Continue);
    }

    #[test]
    fn buckets_group_similar_lengths() {
        let lengths = [5, 100, 6, 101, 7, 102];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut batches = bucket_batches(&lengths, 3, &mut rng);
        batches.sort();
        assert_eq!(batches, vec![vec![0, 2, 4], vec![1, 3, 5]]);
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[0, 0, 0]), derive_seed(&[0, 0, 1]));
        assert_eq!(derive_seed(&[7, 8]), derive_seed(&[7, 8]));
    }
}
