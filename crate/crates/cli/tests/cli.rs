use std::path::Path;
use std::process::{Command, Output};

use sa2sr::checkpoint::load_checkpoint;
use sa2sr::network::ENCODER_PREFIX;

const SMALL: [&str; 8] = [
    "--set",
    "encoder_layers=1",
    "--set",
    "encoder_hidden=8",
    "--set",
    "summarizer_hidden=8",
    "--set",
    "conv_channels=8",
];

fn sa2sr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sa2sr"))
        .args(args)
        .env_remove("SA2SR_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn sa2sr")
}

fn ok(args: &[&str]) -> String {
    let out = sa2sr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = sa2sr(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn corpus(dir: &Path, kind: &str) -> String {
    let out = dir.join(kind);
    ok(&["gen-synth", "--kind", kind, "--n", "8", "--validation", "4", "--seed", "2", "--out", p(&out)]);
    p(&out.join("manifest.jsonl")).to_string()
}

fn strip_wall_time(history: &str) -> Vec<serde_json::Value> {
    history
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time_secs");
            v
        })
        .collect()
}

#[test]
fn gen_synth_is_deterministic_and_honours_env_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["gen-synth", "--kind", "avd", "--n", "8", "--seed", "7", "--out", p(&a)]);
    ok(&["gen-synth", "--kind", "avd", "--n", "8", "--seed", "7", "--out", p(&b)]);
    let status = Command::new(env!("CARGO_BIN_EXE_sa2sr"))
        .args(["gen-synth", "--kind", "avd", "--n", "8", "--out", p(&c)])
        .env("SA2SR_SEED", "7")
        .output()
        .unwrap();
    assert!(status.status.success());
    for name in ["manifest.jsonl", "avd_0000.wav", "avd_0007.wav"] {
        let first = std::fs::read(a.join(name)).unwrap();
        assert_eq!(first, std::fs::read(b.join(name)).unwrap(), "{name}");
        assert_eq!(first, std::fs::read(c.join(name)).unwrap(), "{name} via env seed");
    }
}

#[test]
fn correlation_fixture_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["analyze-correlation", "--fixture", "--out", p(dir.path())]);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 4, "{out}");
    assert_eq!(rows[0].split_whitespace().count(), 6, "five emotions plus total");
    let neutral: Vec<&str> = rows[2].split_whitespace().collect();
    assert_eq!(neutral, ["neutral", "604", "518", "1049", "1251", "848", "4270"]);
    assert!(dir.path().join("confusion.txt").exists());

    let grouped = ok(&[
        "analyze-correlation",
        "--fixture",
        "--group",
        "negative=sad,frustrated,anger",
        "--order",
        "negative,neutral,happy",
        "--out",
        p(dir.path()),
    ]);
    let rho: f64 = grouped.lines().last().unwrap().strip_prefix("spearman ").unwrap().parse().unwrap();
    assert!(rho > 0.0 && rho < 1.0);
}

#[test]
fn pretrain_echoes_config_that_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), "combined");
    let first = dir.path().join("first");
    let mut args = vec!["pretrain", "--manifest", &manifest, "--out", p(&first), "--lambda", "0"];
    args.extend(["--batch-size", "4", "--epochs", "2", "--seed", "5"]);
    args.extend(SMALL);
    ok(&args);
    for f in ["effective.conf", "history.jsonl", "best.ckpt", "last.ckpt", "report.json"] {
        assert!(first.join(f).exists(), "{f}");
    }
    let conf = std::fs::read_to_string(first.join("effective.conf")).unwrap();
    assert!(conf.contains("lambda = 0\n") && conf.contains("seed = 5\n"));

    let second = dir.path().join("second");
    let conf_path = first.join("effective.conf");
    ok(&["pretrain", "--manifest", &manifest, "--out", p(&second), "--config", p(&conf_path)]);
    let h1 = std::fs::read_to_string(first.join("history.jsonl")).unwrap();
    let h2 = std::fs::read_to_string(second.join("history.jsonl")).unwrap();
    assert_eq!(h1.lines().count(), 2);
    assert_eq!(strip_wall_time(&h1), strip_wall_time(&h2));
}

#[test]
fn frozen_finetune_keeps_encoder_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), "combined");
    let pre = dir.path().join("pre");
    let mut args = vec!["pretrain", "--manifest", &manifest, "--out", p(&pre), "--batch-size", "4", "--epochs", "1"];
    args.extend(SMALL);
    ok(&args);
    let init = pre.join("best.ckpt");
    let ft = dir.path().join("ft");
    ok(&[
        "finetune",
        "--manifest",
        &manifest,
        "--init",
        p(&init),
        "--freeze-encoder",
        "--out",
        p(&ft),
        "--batch-size",
        "4",
        "--epochs",
        "2",
    ]);
    let (before, _) = load_checkpoint(&init).unwrap();
    let (after, meta) = load_checkpoint(ft.join("last.ckpt")).unwrap();
    assert_eq!(before.checksum(ENCODER_PREFIX), after.checksum(ENCODER_PREFIX));
    assert_eq!(meta["freeze_encoder"], "true");
    assert_eq!(meta["encoder_hidden"], "8", "architecture inherited from --init");

    let ev = dir.path().join("ev");
    let ckpt = ft.join("best.ckpt");
    let out = ok(&[
        "evaluate",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        &manifest,
        "--mode",
        "finetune",
        "--split",
        "validation",
        "--out",
        p(&ev),
    ]);
    assert!(out.starts_with("4 utterances"), "{out}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert!(report["ccc_v"].is_number());
}

#[test]
fn extract_features_writes_decodable_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), "asr");
    let out = dir.path().join("feats");
    ok(&["extract-features", "--manifest", &manifest, "--out", p(&out)]);
    let index = std::fs::read_to_string(out.join("features.jsonl")).unwrap();
    assert_eq!(index.lines().count(), 12);
    for line in index.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let bytes = std::fs::read(out.join(v["features"].as_str().unwrap())).unwrap();
        let feats = sa2sr::frontend::blob::decode(&bytes).unwrap();
        assert_eq!(feats.n_bins(), 40);
        assert_eq!(feats.n_frames() as u64, v["frames"].as_u64().unwrap());
    }
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), "asr");
    let out = dir.path().join("x");

    let missing_batch = fails(&["pretrain", "--manifest", &manifest, "--out", p(&out)]);
    assert!(missing_batch.contains("batch_size is required"), "{missing_batch}");

    let mismatch = fails(&["finetune", "--manifest", &manifest, "--out", p(&out), "--batch-size", "2"]);
    assert!(mismatch.contains("missing activation/valence/dominance"), "{mismatch}");

    let no_file = fails(&["pretrain", "--manifest", "/does/not/exist.jsonl", "--out", p(&out), "--batch-size", "2"]);
    assert!(no_file.contains("exist.jsonl"));

    let bad_key = fails(&["pretrain", "--manifest", &manifest, "--out", p(&out), "--batch-size", "2", "--set", "warp=9"]);
    assert!(bad_key.contains("unknown key warp"));

    for err in [&missing_batch, &mismatch, &no_file, &bad_key] {
        let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error")).collect();
        assert_eq!(lines.len(), 1, "{err}");
    }
    fails(&["pretrain", "--bogus-flag"]);
    fails(&["gen-synth", "--kind", "speech", "--n", "8", "--out", p(&out)]);
    fails(&["gen-synth", "--kind", "asr", "--n", "3", "--out", p(&out)]);
}
