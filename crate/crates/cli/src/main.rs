//! `sa2sr` command-line workbench.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use sa2sr::checkpoint::{load_checkpoint, save_checkpoint, Metadata};
use sa2sr::dataset::{lfbe_view, Utterance};
use sa2sr::frontend::blob;
use sa2sr::frontend::wav::read_wav;
use sa2sr::metrics::{confusion, spearman, ClassGrouping, EvalReport};
use sa2sr::network::init_parameters;
use sa2sr::params::ParameterStore;
use sa2sr::trainer::{evaluate_finetune, evaluate_pretrain, run_training, Mode};
use sa2sr::workbench::config::{RunSettings, KEYS, SEED_ENV};
use sa2sr::workbench::fixture::fixture_pairs;
use sa2sr::workbench::manifest::{load_manifest, sentiment_index, Requirement, Split, UtteranceRecord};
use sa2sr::workbench::synth::SynthKind;
use sa2sr::workbench::{generate_synthetic, load_utterance, utterance_id};

#[derive(Parser)]
#[command(name = "sa2sr", version, about = "Sentiment-aware speech pre-training and emotion fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write normalized LFBE feature blobs for every manifest entry.
    ExtractFeatures {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train encoder, token head and sentiment head (CTC + λ·CE).
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        /// Sentiment loss weight; 0 trains ASR only.
        #[arg(long)]
        lambda: Option<f64>,
        /// Start from these weights instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the AVD regressor on top of an encoder with the CCC loss.
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        /// Pre-trained checkpoint; omitted means a randomly initialized encoder.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        freeze_encoder: bool,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a checkpoint on one manifest split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Mode,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Sentiment × emotion confusion matrix and Spearman correlation.
    AnalyzeCorrelation {
        /// JSON lines with `sentiment` and `emotion` fields.
        #[arg(long, conflicts_with = "fixture", required_unless_present = "fixture")]
        pairs: Option<PathBuf>,
        /// Use the built-in five-emotion reference counts.
        #[arg(long)]
        fixture: bool,
        /// Emotion grouping, e.g. `negative=sad,frustrated,anger`; groups separated by `;`.
        #[arg(long)]
        group: Option<String>,
        /// Comma-separated emotion (group) names from most negative to most
        /// positive; enables the Spearman statistic.
        #[arg(long)]
        order: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a deterministic synthetic corpus (WAV files + manifest).
    GenSynth {
        #[arg(long, value_parser = parse_kind)]
        kind: SynthKind,
        /// Training utterances (at least 8).
        #[arg(long)]
        n: usize,
        /// Additional validation utterances.
        #[arg(long, default_value_t = 0)]
        validation: usize,
        /// Defaults to $SA2SR_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any config key, e.g. `--set encoder_hidden=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Disable speed perturbation and SpecAugment.
    #[arg(long)]
    no_augment: bool,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "pretrain" => Ok(Mode::Pretrain),
        "finetune" => Ok(Mode::Finetune),
        _ => Err(format!("expected pretrain or finetune, got {s:?}")),
    }
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        _ => Err(format!("expected train, validation or test, got {s:?}")),
    }
}

fn parse_kind(s: &str) -> Result<SynthKind, String> {
    s.parse().map_err(|e: sa2sr::Error| e.to_string())
}

fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok().filter(|s| !s.trim().is_empty())
}

/// Flag overrides in application order; later entries win.
fn overrides(run: &RunArgs, train: Option<&TrainArgs>, extra: Vec<(&'static str, String)>) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in &run.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(t) = train {
        let typed = [
            ("batch_size", t.batch_size.map(|v| v.to_string())),
            ("lr", t.lr.map(|v| v.to_string())),
            ("max_epochs", t.epochs.map(|v| v.to_string())),
            ("patience", t.patience.map(|v| v.to_string())),
            ("augment", t.no_augment.then(|| "false".to_string())),
        ];
        out.extend(typed.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    }
    out.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
    if let Some(seed) = run.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    Ok(out)
}

/// `defaults < SA2SR_SEED < checkpoint metadata < config file < flags`.
fn settings(mode: Mode, run: &RunArgs, base: Option<&Metadata>, flags: &[(String, String)]) -> Result<RunSettings> {
    let mut s = RunSettings::resolve(mode, env_seed().as_deref(), None, [])?;
    if let Some(meta) = base {
        let inherited: Vec<(&str, String)> = KEYS
            .iter()
            .filter(|k| !matches!(**k, "seed" | "batch_size" | "lr" | "max_epochs" | "patience" | "freeze_encoder"))
            .filter_map(|k| meta.get(*k).map(|v| (*k, v.clone())))
            .collect();
        s.apply_overrides(inherited)?;
    }
    if let Some(path) = &run.config {
        s.apply_file(path)?;
    }
    s.apply_overrides(flags.iter().map(|(k, v)| (k.as_str(), v.clone())))?;
    s.train.mode = mode;
    Ok(s)
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn echo_config(out: &Path, s: &RunSettings) -> Result<()> {
    write_text(&out.join("effective.conf"), &s.to_config_text())
}

fn metadata(s: &RunSettings, extra: &[(&str, String)]) -> Metadata {
    let mut meta: Metadata = KEYS.iter().map(|k| (k.to_string(), s.get(k).unwrap_or_default())).collect();
    meta.insert("mode".into(), mode_name(s.train.mode).into());
    for (k, v) in extra {
        meta.insert(k.to_string(), v.clone());
    }
    meta
}

fn mode_name(m: Mode) -> &'static str {
    match m {
        Mode::Pretrain => "pretrain",
        Mode::Finetune => "finetune",
    }
}

fn load_split(records: &[UtteranceRecord], s: &RunSettings, speed_copies: bool) -> Result<Vec<Utterance>> {
    records
        .par_iter()
        .map(|r| load_utterance(r, &s.frontend, speed_copies).with_context(|| format!("{}", r.audio.display())))
        .collect()
}

/// Checks that `params` has exactly the tensors the configured model expects.
fn check_architecture(params: &ParameterStore, s: &RunSettings) -> Result<()> {
    let expected = init_parameters(0, &s.model)?;
    for (name, p) in expected.iter() {
        match params.get(name) {
            None => bail!("checkpoint lacks parameter {name}; model config does not match"),
            Some(q) if q.value.shape() != p.value.shape() => bail!(
                "parameter {name} has shape {:?}, model config expects {:?}",
                q.value.shape(),
                p.value.shape()
            ),
            _ => {}
        }
    }
    if let Some(extra) = params.names().find(|n| expected.get(n).is_none()) {
        bail!("checkpoint has unexpected parameter {extra}");
    }
    Ok(())
}

fn train(mode: Mode, manifest: &Path, init: Option<&Path>, run: &RunArgs, flags: Vec<(String, String)>) -> Result<()> {
    let start = match init {
        Some(path) => Some(load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?),
        None => None,
    };
    let s = settings(mode, run, start.as_ref().map(|(_, m)| m), &flags)?;
    s.validate()?;
    prepare_out(&run.out)?;
    echo_config(&run.out, &s)?;

    let req = match mode {
        Mode::Pretrain => Requirement::Pretrain,
        Mode::Finetune => Requirement::Finetune,
    };
    let split = load_manifest(manifest, req)?;
    if split.train.is_empty() {
        bail!("{} has no train records", manifest.display());
    }
    let copies = mode == Mode::Pretrain && s.train.augment && !s.frontend.speed_factors.is_empty();
    let train_set = load_split(&split.train, &s, copies)?;
    let validation = load_split(&split.validation, &s, false)?;
    if validation.is_empty() {
        log::warn!("no validation records; model selection uses the training set");
    }

    let params = match start {
        Some((params, _)) => {
            check_architecture(&params, &s)?;
            params
        }
        None => {
            if mode == Mode::Finetune {
                log::warn!("no --init checkpoint; fine-tuning from a random encoder");
            }
            init_parameters(s.train.seed, &s.model)?
        }
    };

    let history_path = run.out.join("history.jsonl");
    let mut history = BufWriter::new(File::create(&history_path).with_context(|| history_path.display().to_string())?);
    let last_path = run.out.join("last.ckpt");
    let outcome = run_training(params, &train_set, &validation, &s.train, &s.frontend, &s.model, |rec, p| {
        writeln!(history, "{}", rec.to_json()).and_then(|_| history.flush()).map_err(|e| {
            sa2sr::Error::InvalidConfig(format!("{}: {e}", history_path.display()))
        })?;
        save_checkpoint(&last_path, p, &metadata(&s, &[("epoch", rec.epoch.to_string())]))
    })?;

    let best = &outcome.history[outcome.best_epoch - 1];
    save_checkpoint(
        run.out.join("best.ckpt"),
        &outcome.best,
        &metadata(&s, &[("epoch", outcome.best_epoch.to_string())]),
    )?;
    write_text(&run.out.join("report.json"), &best.validation.to_json())?;
    write_text(&run.out.join("report.txt"), &best.validation.to_key_value())?;
    println!(
        "best epoch {} of {}{}: {}",
        outcome.best_epoch,
        outcome.history.len(),
        if outcome.stopped_early { " (early stop)" } else { "" },
        summary(mode, &best.validation)
    );
    Ok(())
}

fn summary(mode: Mode, r: &EvalReport) -> String {
    match mode {
        Mode::Pretrain => format!("cer {:.4} auc {:.4} war {:.4}", r.cer, r.auc, r.war),
        Mode::Finetune => format!("ccc a {:.4} v {:.4} d {:.4}", r.ccc_a, r.ccc_v, r.ccc_d),
    }
}

fn extract(manifest: &Path, run: &RunArgs) -> Result<()> {
    let flags = overrides(run, None, Vec::new())?;
    let s = settings(Mode::Pretrain, run, None, &flags)?;
    s.frontend.validate()?;
    prepare_out(&run.out)?;
    echo_config(&run.out, &s)?;
    let split = load_manifest(manifest, Requirement::Any)?;
    let records: Vec<&UtteranceRecord> = split.all().collect();
    let index: Vec<String> = records
        .par_iter()
        .map(|r| -> Result<String> {
            let wave = read_wav(&r.audio).with_context(|| r.audio.display().to_string())?;
            let feats = lfbe_view(&wave, &s.frontend).with_context(|| r.audio.display().to_string())?;
            let name = format!("{:016x}.lfbe", utterance_id(&r.audio));
            let path = run.out.join(&name);
            fs::write(&path, blob::encode(&feats)).with_context(|| path.display().to_string())?;
            Ok(serde_json::json!({
                "audio": r.audio,
                "features": name,
                "frames": feats.n_frames(),
                "bins": feats.n_bins(),
            })
            .to_string())
        })
        .collect::<Result<_>>()?;
    let mut text = index.join("\n");
    text.push('\n');
    write_text(&run.out.join("features.jsonl"), &text)?;
    println!("wrote {} feature blobs to {}", index.len(), run.out.display());
    Ok(())
}

fn evaluate(checkpoint: &Path, manifest: &Path, mode: Mode, split: Split, run: &RunArgs) -> Result<()> {
    let (params, meta) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let flags = overrides(run, None, Vec::new())?;
    let s = settings(mode, run, Some(&meta), &flags)?;
    s.frontend.validate()?;
    s.model.validate()?;
    check_architecture(&params, &s)?;
    prepare_out(&run.out)?;
    echo_config(&run.out, &s)?;
    let req = match mode {
        Mode::Pretrain => Requirement::Pretrain,
        Mode::Finetune => Requirement::Finetune,
    };
    let records = load_manifest(manifest, req)?;
    let records = records.get(split);
    if records.is_empty() {
        bail!("{} has no {split:?} records", manifest.display());
    }
    let data = load_split(records, &s, false)?;
    let report = match mode {
        Mode::Pretrain => evaluate_pretrain(&params, &data, &s.frontend, &s.model)?,
        Mode::Finetune => evaluate_finetune(&params, &data, &s.frontend, &s.model)?,
    };
    write_text(&run.out.join("report.json"), &report.to_json())?;
    write_text(&run.out.join("report.txt"), &report.to_key_value())?;
    println!("{} utterances: {}", data.len(), summary(mode, &report));
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    sentiment: String,
    emotion: String,
}

fn read_pairs(path: &Path) -> Result<(Vec<usize>, Vec<String>)> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut sentiment = Vec::new();
    let mut emotion = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: PairRecord = serde_json::from_str(line).with_context(|| format!("line {}", i + 1))?;
        let s = sentiment_index(&rec.sentiment)
            .with_context(|| format!("line {}: unknown sentiment {:?}", i + 1, rec.sentiment))?;
        sentiment.push(s);
        emotion.push(rec.emotion);
    }
    if sentiment.is_empty() {
        bail!("{}: no pairs", path.display());
    }
    Ok((sentiment, emotion))
}

fn analyze(pairs: Option<&Path>, group: Option<&str>, order: Option<&str>, out: &Path) -> Result<()> {
    let (sentiment, emotion) = match pairs {
        Some(p) => read_pairs(p)?,
        None => fixture_pairs(),
    };
    let grouping = group.map(ClassGrouping::parse).transpose()?;
    let m = confusion(&sentiment, &emotion, grouping.as_ref())?;
    prepare_out(out)?;
    let mut report = m.render();
    let mut json = serde_json::json!({ "confusion": m });
    if let Some(order) = order {
        let ranks: BTreeMap<String, f64> = order
            .split(',')
            .map(|e| e.trim().to_lowercase())
            .enumerate()
            .map(|(i, e)| (e, i as f64))
            .collect();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (&s, e) in sentiment.iter().zip(&emotion) {
            let label = grouping.as_ref().map_or_else(|| e.to_lowercase(), |g| g.apply(e));
            let r = ranks
                .get(&label)
                .with_context(|| format!("emotion {label:?} missing from --order"))?;
            x.push(s as f64);
            y.push(*r);
        }
        let rho = spearman(&x, &y)?;
        report.push_str(&format!("spearman {rho:.4}\n"));
        json["spearman"] = rho.into();
    }
    write_text(&out.join("confusion.txt"), &report)?;
    write_text(&out.join("correlation.json"), &json.to_string())?;
    print!("{report}");
    Ok(())
}

fn gen_synth(kind: SynthKind, n: usize, validation: usize, seed: Option<u64>, out: &Path) -> Result<()> {
    let seed = match (seed, env_seed()) {
        (Some(s), _) => s,
        (None, Some(env)) => env.trim().parse().with_context(|| format!("{SEED_ENV}={env:?} is not an integer"))?,
        (None, None) => 0,
    };
    let manifest = generate_synthetic(kind, n, validation, seed, out)?;
    println!("wrote {} {} utterances; manifest {}", n + validation, kind.name(), manifest.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ExtractFeatures { manifest, run } => extract(&manifest, &run),
        Command::Pretrain { manifest, lambda, init, train: t, run } => {
            let extra = lambda.map(|l| vec![("lambda", l.to_string())]).unwrap_or_default();
            let flags = overrides(&run, Some(&t), extra)?;
            train(Mode::Pretrain, &manifest, init.as_deref(), &run, flags)
        }
        Command::Finetune { manifest, init, freeze_encoder, train: t, run } => {
            let extra = if freeze_encoder { vec![("freeze_encoder", "true".to_string())] } else { Vec::new() };
            let flags = overrides(&run, Some(&t), extra)?;
            train(Mode::Finetune, &manifest, init.as_deref(), &run, flags)
        }
        Command::Evaluate { checkpoint, manifest, mode, split, run } => evaluate(&checkpoint, &manifest, mode, split, &run),
        Command::AnalyzeCorrelation { pairs, fixture: _, group, order, out } => {
            analyze(pairs.as_deref(), group.as_deref(), order.as_deref(), &out)
        }
        Command::GenSynth { kind, n, validation, seed, out } => gen_synth(kind, n, validation, seed, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {}", msg.replace('\n', "; "));
            ExitCode::FAILURE
        }
    }
}

