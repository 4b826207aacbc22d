//! Acceptance suite: one line per criterion, nonzero exit on any failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sa2sr::autodiff::{Array, Tape};
use sa2sr::frontend::{draw_mask_bands, extract_lfbe, stack_and_skip, FeatureMatrix, FrontendConfig, Waveform};
use sa2sr::metrics::{cer, confusion, spearman};
use sa2sr::network::*;
use sa2sr::objectives::{ccc, ccc_loss, ctc_loss, ctc_min_frames, sentiment_ce, CccStats};
use sa2sr::tokens::BLANK;
use sa2sr::trainer::*;
use sa2sr::workbench::fixture::fixture_pairs;
use sa2sr::workbench::{synth::SynthKind, synthetic_utterances};

type Check = fn() -> Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn log_softmax_rows(rows: &mut [Vec<f64>]) {
    for r in rows {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        r.iter_mut().for_each(|x| *x -= lse);
    }
}

fn ctc_oracle() -> Result<String, String> {
    let mut rng = common::rng(11);
    let (mut worst_loss, mut worst_grad) = (0.0f64, 0.0f64);
    let mut done = 0;
    while done < 200 {
        let t_len = rng.random_range(1..=6);
        let vocab = rng.random_range(2..=3);
        let blank = vocab - 1;
        let target: Vec<usize> = (0..rng.random_range(0..=3)).map(|_| rng.random_range(0..blank)).collect();
        let mask: Vec<bool> = (0..t_len).map(|_| rng.random_bool(0.85)).collect();
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 || valid < ctc_min_frames(&target) {
            continue;
        }
        let mut lp: Vec<Vec<f64>> = (0..t_len)
            .map(|_| (0..vocab).map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect())
            .collect();
        log_softmax_rows(&mut lp);

        let (want_loss, want_grad) = common::ctc_by_enumeration(&lp, &target, &mask, blank);
        let mut tape = Tape::new();
        let x = tape.leaf(Array::from_rows(&lp).map_err(err)?, true);
        let loss = ctc_loss(&mut tape, x, &target, &mask, blank).map_err(err)?;
        tape.backward(loss).map_err(err)?;
        let grad = tape.grad(x).ok_or("no gradient")?;
        worst_loss = worst_loss.max((tape.scalar(loss) - want_loss).abs());
        for (t, row) in want_grad.iter().enumerate() {
            for (k, g) in row.iter().enumerate() {
                worst_grad = worst_grad.max((grad.get(t, k) - g).abs());
            }
        }
        done += 1;
    }
    ensure(worst_loss <= 1e-10 && worst_grad <= 1e-8, || {
        format!("max |loss diff| {worst_loss:.2e}, max |grad diff| {worst_grad:.2e}")
    })?;
    Ok(format!("200 instances, max |loss diff| {worst_loss:.2e}, max |grad diff| {worst_grad:.2e}"))
}

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            layers: 2,
            hidden: 4,
            input_dim: 5,
        },
        sentiment: SentimentHeadConfig {
            summarizer_hidden: 3,
            classes: 3,
        },
        regressor: RegressorConfig {
            conv_filters: [3, 2],
            conv_strides: [2, 1],
            conv_channels: 4,
            attn_heads: 2,
            attn_dim: 4,
            ..RegressorConfig::default()
        },
    }
}

fn random_feats(rng: &mut rand_chacha::ChaCha8Rng, t: usize, dim: usize, valid: usize) -> FeatureMatrix {
    let data = common::random_array(rng, &[t, dim], 1.0).into_data();
    FeatureMatrix::new(data, t, dim, (0..t).map(|i| i < valid).collect()).unwrap()
}

fn gradient_suite() -> Result<String, String> {
    let model = small_model();
    let params = init_parameters(3, &model).map_err(err)?;
    let mut rng = common::rng(5);
    let feats = random_feats(&mut rng, 8, 5, 8);
    let padded = random_feats(&mut rng, 8, 5, 6);
    let batch: Vec<FeatureMatrix> = (0..3).map(|i| random_feats(&mut rng, 8, 5, 8 - i)).collect();
    let weights = common::random_array(&mut rng, &[8, 8], 1.0);
    let truth = common::random_array(&mut rng, &[3, 3], 1.0);

    let mut results: Vec<(&str, Vec<(String, f64)>)> = Vec::new();
    let encoder = |tape: &mut Tape, b: &sa2sr::params::Bound| {
        let enc = encoder_forward(tape, b, &padded, &model.encoder).unwrap();
        let w = tape.constant(weights.clone());
        let prod = tape.mul(enc.seq, w).unwrap();
        tape.sum(prod).unwrap()
    };
    results.push(("encoder", common::check_parameters(&params, &[ENCODER_PREFIX], &encoder)));

    let sentiment = |tape: &mut Tape, b: &sa2sr::params::Bound| {
        let enc = encoder_forward(tape, b, &padded, &model.encoder).unwrap();
        let lp = sentiment_head_forward(tape, b, &enc, &model.sentiment).unwrap();
        sentiment_ce(tape, lp, 2).unwrap()
    };
    results.push(("sentiment head", common::check_parameters(&params, &[SENTIMENT_PREFIX, ENCODER_PREFIX], &sentiment)));

    let asr = |tape: &mut Tape, b: &sa2sr::params::Bound| {
        let enc = encoder_forward(tape, b, &feats, &model.encoder).unwrap();
        let lp = token_head_forward(tape, b, &enc).unwrap();
        ctc_loss(tape, lp, &[3, 3, 7], &enc.mask, BLANK).unwrap()
    };
    results.push(("ctc", common::check_parameters(&params, &[TOKEN_PREFIX, ENCODER_PREFIX], &asr)));

    let regress = |tape: &mut Tape, b: &sa2sr::params::Bound| {
        let rows: Vec<_> = batch
            .iter()
            .map(|f| {
                let enc = encoder_forward(tape, b, f, &model.encoder).unwrap();
                regressor_forward(tape, b, &enc, &model.regressor).unwrap().avd
            })
            .collect();
        let pred = tape.concat(&rows, 0).unwrap();
        let t = tape.constant(truth.clone());
        ccc_loss(tape, pred, t).unwrap().total
    };
    results.push(("regressor", common::check_parameters(&params, &[REGRESSOR_PREFIX, ENCODER_PREFIX], &regress)));

    let y = common::random_array(&mut rng, &[1, 6], 2.0);
    let yhat = common::random_array(&mut rng, &[1, 6], 2.0);
    let ccc_of = |h: &[f64]| {
        let mut tape = Tape::new();
        let a = tape.constant(y.clone());
        let b = tape.leaf(Array::row_vector(h.to_vec()), true);
        let c = ccc(&mut tape, a, b).unwrap();
        (tape, b, c)
    };
    let (mut tape, b, c) = ccc_of(yhat.data());
    tape.backward(c).map_err(err)?;
    let analytic = tape.grad(b).ok_or("no ccc gradient")?.into_data();
    let numeric = common::numeric_grad(yhat.data(), common::FD_STEP, |h| {
        let (tape, _, c) = ccc_of(h);
        tape.scalar(c)
    });
    results.push(("ccc", vec![("yhat".into(), common::relative_error(&analytic, &numeric))]));

    let mut summary = Vec::new();
    let mut failures = Vec::new();
    for (block, errs) in &results {
        let (name, worst) = errs
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .cloned()
            .unwrap_or_default();
        summary.push(format!("{block} {worst:.1e}"));
        if !(worst <= 1e-4) {
            failures.push(format!("{block}: {name} rel err {worst:.2e}"));
        }
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(format!("max rel err: {}", summary.join(", ")))
}

fn ccc_cases() -> Result<String, String> {
    let x = [0.3, -1.2, 2.5, 0.7, 4.1];
    let cases = [
        ("identity", x.to_vec(), x.to_vec(), 1.0),
        ("constant predictor", x.to_vec(), vec![1.5; 5], 0.0),
        ("shifted", vec![1.0, 2.0, 3.0], vec![2.0, 3.0, 4.0], 4.0 / 7.0),
    ];
    let mut worst = 0.0f64;
    for (name, y, yhat, want) in cases {
        let mut tape = Tape::new();
        let a = tape.constant(Array::row_vector(y.clone()));
        let b = tape.constant(Array::row_vector(yhat.clone()));
        let c = ccc(&mut tape, a, b).map_err(err)?;
        let stats = CccStats::compute(&y, &yhat).map_err(err)?.ccc();
        for got in [tape.scalar(c), stats] {
            ensure((got - want).abs() <= 1e-12, || format!("{name}: got {got}, want {want}"))?;
            worst = worst.max((got - want).abs());
        }
    }
    Ok(format!("identity, constant, shifted; max deviation {worst:.1e}"))
}

fn reduced_model() -> ModelConfig {
    let mut model = ModelConfig::default();
    model.encoder.layers = 2;
    model.encoder.hidden = 32;
    model.sentiment.summarizer_hidden = 32;
    model
}

fn overfit_pretraining() -> Result<String, String> {
    let fe = FrontendConfig::default();
    let model = reduced_model();
    let (train, _) = synthetic_utterances(SynthKind::Combined, 8, 0, 0, &fe, false).map_err(err)?;
    let mut cfg = TrainRunConfig::new(Mode::Pretrain, 2);
    cfg.adam.lr = 3e-3;
    cfg.augment = false;
    cfg.max_epochs = 500;
    cfg.patience = 500;
    let params = init_parameters(0, &model).map_err(err)?;
    let mut reached = None;
    let out = run_training(params, &train, &train, &cfg, &fe, &model, |rec, _| {
        let v = &rec.validation;
        if reached.is_none() && v.cer <= 0.05 && v.auc >= 0.95 {
            reached = Some(rec.epoch);
        }
        Ok(())
    })
    .map_err(err)?;
    let best = evaluate_pretrain(&out.best, &train, &fe, &model).map_err(err)?;
    ensure(reached.is_some() && best.cer <= 0.05 && best.auc >= 0.95, || {
        format!("best epoch {}: train CER {:.3}, AUC {:.3}", out.best_epoch, best.cer, best.auc)
    })?;
    Ok(format!(
        "thresholds first met at epoch {}; best weights: train CER {:.3}, AUC {:.3}",
        reached.unwrap(),
        best.cer,
        best.auc
    ))
}

fn overfit_finetuning() -> Result<String, String> {
    let fe = FrontendConfig::default();
    let model = reduced_model();
    let (train, val) = synthetic_utterances(SynthKind::Avd, 32, 16, 1, &fe, false).map_err(err)?;
    let mut cfg = TrainRunConfig::new(Mode::Finetune, 8);
    cfg.adam.lr = 3e-3;
    cfg.max_epochs = 300;
    cfg.patience = 300;
    cfg.seed = 1;
    let params = init_parameters(1, &model).map_err(err)?;
    let out = run_training(params.clone(), &train, &val, &cfg, &fe, &model, |_, _| Ok(())).map_err(err)?;
    let report = evaluate_finetune(&out.best, &val, &fe, &model).map_err(err)?;
    let [a, v, d] = report.ccc_avd();
    ensure(a.min(v).min(d) >= 0.9, || {
        format!("validation CCC A {a:.3} V {v:.3} D {d:.3} (best epoch {})", out.best_epoch)
    })?;

    let mut frozen = cfg.clone();
    frozen.freeze_encoder = true;
    frozen.max_epochs = 10;
    let before = params.checksum(ENCODER_PREFIX);
    let regressor_before = params.checksum(REGRESSOR_PREFIX);
    let mut drift = Vec::new();
    let run = run_training(params, &train, &val, &frozen, &fe, &model, |rec, p| {
        if p.checksum(ENCODER_PREFIX) != before {
            drift.push(rec.epoch);
        }
        Ok(())
    })
    .map_err(err)?;
    ensure(drift.is_empty() && run.last.params.checksum(ENCODER_PREFIX) == before, || {
        format!("encoder checksum changed at epochs {drift:?}")
    })?;
    ensure(run.last.params.checksum(REGRESSOR_PREFIX) != regressor_before, || {
        "regressor did not train with a frozen encoder".into()
    })?;
    Ok(format!(
        "validation CCC A {a:.3} V {v:.3} D {d:.3} at epoch {}; frozen encoder checksum {before:016x} constant over {} epochs",
        out.best_epoch,
        run.history.len()
    ))
}

fn multitask_benefit() -> Result<String, String> {
    let fe = FrontendConfig::default();
    let model = reduced_model();
    let mut sums = [0.0; 2];
    let mut per_seed = Vec::new();
    for seed in 0..5u64 {
        let corpus = 100 + seed;
        let (ptrain, pval) = synthetic_utterances(SynthKind::Combined, 48, 16, 1000 + corpus, &fe, false).map_err(err)?;
        let (train, val) = synthetic_utterances(SynthKind::Combined, 16, 16, corpus, &fe, false).map_err(err)?;
        let mut pair = [0.0; 2];
        for (i, lambda) in [200.0, 0.0].into_iter().enumerate() {
            let mut pre = TrainRunConfig::new(Mode::Pretrain, 8);
            pre.lambda = lambda;
            pre.adam.lr = 3e-3;
            pre.augment = false;
            pre.max_epochs = 60;
            pre.patience = 60;
            pre.seed = seed;
            let params = init_parameters(seed, &model).map_err(err)?;
            let pretrained = run_training(params, &ptrain, &pval, &pre, &fe, &model, |_, _| Ok(())).map_err(err)?;

            let mut fine = TrainRunConfig::new(Mode::Finetune, 8);
            fine.adam.lr = 1e-3;
            fine.max_epochs = 40;
            fine.patience = 40;
            fine.seed = seed;
            let tuned = run_training(pretrained.best, &train, &val, &fine, &fe, &model, |_, _| Ok(())).map_err(err)?;
            pair[i] = tuned.history[tuned.best_epoch - 1].validation.ccc_v;
        }
        sums[0] += pair[0];
        sums[1] += pair[1];
        per_seed.push(format!("{:.2}/{:.2}", pair[0], pair[1]));
    }
    let (aware, asr_only) = (sums[0] / 5.0, sums[1] / 5.0);
    ensure(aware >= asr_only, || {
        format!("valence CCC lambda=200 {aware:.3} < lambda=0 {asr_only:.3} (per seed {})", per_seed.join(" "))
    })?;
    Ok(format!(
        "mean valence CCC lambda=200 {aware:.3} >= lambda=0 {asr_only:.3} (per seed {})",
        per_seed.join(" ")
    ))
}

/// First epoch at which the rule fires, feeding the sequence one epoch at a time.
fn stop_epoch(metric: &[f64], patience: usize) -> Option<(usize, usize)> {
    (1..=metric.len()).find_map(|n| match early_stop(&metric[..n], patience) {
        StopDecision::Stop { best_epoch } => Some((n, best_epoch)),
        StopDecision::Continue => None,
    })
}

fn early_stopping() -> Result<String, String> {
    let descending_then_flat: Vec<f64> = (1..=60).map(|e| if e <= 10 { 1.0 - 0.05 * e as f64 } else { 0.6 }).collect();
    let late_improvement: Vec<f64> = (1..=80)
        .map(|e| match e {
            5 => 0.2,
            29 => 0.1,
            _ => 0.5,
        })
        .collect();
    let tie_is_not_progress: Vec<f64> = (1..=50).map(|e| if e == 3 || e == 20 { 0.3 } else { 0.9 }).collect();
    let always_improving: Vec<f64> = (1..=40).map(|e| -(e as f64)).collect();
    let cases: [(&str, &[f64], Option<(usize, usize)>); 4] = [
        ("descending then flat", &descending_then_flat, Some((35, 10))),
        ("late improvement", &late_improvement, Some((54, 29))),
        ("tie is not progress", &tie_is_not_progress, Some((28, 3))),
        ("always improving", &always_improving, None),
    ];
    for (name, seq, want) in cases {
        let got = stop_epoch(seq, 25);
        ensure(got == want, || format!("{name}: stopped at {got:?}, expected {want:?}"))?;
    }
    Ok("4 scripted sequences stop at the hand-computed epochs (35, 54, 28, never)".into())
}

fn metric_fixtures() -> Result<String, String> {
    let c = cer("kitten", "sitting").map_err(err)?;
    ensure(c == 0.5, || format!("CER {c}"))?;
    let rho = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).map_err(err)?;
    ensure((rho - 0.8).abs() < 1e-12, || format!("Spearman {rho}"))?;
    let (sentiment, emotion) = fixture_pairs();
    let m = confusion(&sentiment, &emotion, None).map_err(err)?;
    let row = m.emotion_counts("neutral").ok_or("no neutral column")?;
    ensure(row == [253, 1251, 204], || format!("neutral emotion counts {row:?}"))?;
    Ok(format!("CER 0.5, Spearman {rho}, neutral emotion counts {row:?}"))
}

fn frontend_fixtures() -> Result<String, String> {
    let cfg = FrontendConfig::default();
    let wave = Waveform::new((0..16000).map(|n| (n as f64 * 0.05).sin() * 0.1).collect(), 16000).map_err(err)?;
    let frames = extract_lfbe(&wave, &cfg).map_err(err)?.n_frames();
    ensure(frames == 98, || format!("{frames} frames from 1 s"))?;
    let ten = FeatureMatrix::dense(vec![0.0; 10 * 40], 10, 40).map_err(err)?;
    let stacked = stack_and_skip(&ten, cfg.stack, cfg.skip).map_err(err)?;
    ensure(stacked.n_frames() == 4 && stacked.n_bins() == 120, || {
        format!("stacked shape {}x{}", stacked.n_frames(), stacked.n_bins())
    })?;
    let (mut time, mut freq) = (0usize, 0usize);
    for seed in 0..10_000u64 {
        let bands = draw_mask_bands(98, 40, &cfg, seed);
        time += usize::from(bands.time.is_some());
        freq += usize::from(bands.freq.is_some());
    }
    let (rt, rf) = (time as f64 / 1e4, freq as f64 / 1e4);
    ensure((0.48..=0.52).contains(&rt) && (0.48..=0.52).contains(&rf), || {
        format!("mask rates time {rt} freq {rf}")
    })?;
    Ok(format!("98 frames; stacked 4x120; mask rate time {rt:.4}, freq {rf:.4}"))
}

fn main() {
    let criteria: [(u32, &str, Check); 9] = [
        (1, "CTC matches path enumeration", ctc_oracle),
        (2, "gradient suite", gradient_suite),
        (3, "CCC analytic cases", ccc_cases),
        (4, "overfit pre-training", overfit_pretraining),
        (5, "overfit fine-tuning", overfit_finetuning),
        (6, "sentiment-aware pre-training helps valence", multitask_benefit),
        (7, "early stopping", early_stopping),
        (8, "metric fixtures", metric_fixtures),
        (9, "frontend fixtures", frontend_fixtures),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("[PASS] criterion {id} ({name}): {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] criterion {id} ({name}): {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
