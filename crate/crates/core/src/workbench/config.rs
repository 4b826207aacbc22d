//! Flat `key = value` run configuration.
//!
//! Layers, lowest precedence first: built-in defaults, the `SA2SR_SEED`
//! environment variable, a config file, command-line overrides. The
//! effective configuration renders back into the same format, so an echoed
//! file reproduces the run.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::network::ModelConfig;
use crate::trainer::{Mode, TrainRunConfig};

pub const SEED_ENV: &str = "SA2SR_SEED";

/// Parses `key = value` lines; `#` starts a comment. Returns
/// `(line, key, value)` triples in file order.
pub fn parse_config(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(Error::Config {
                line,
                reason: format!("expected `key = value`, got {content:?}"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(Error::Config {
                line,
                reason: format!("invalid key {k:?}"),
            });
        }
        if out.iter().any(|(_, seen, _): &(usize, String, String)| seen == k) {
            return Err(Error::Config {
                line,
                reason: format!("duplicate key {k}"),
            });
        }
        out.push((line, k.to_string(), v.to_string()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub train: TrainRunConfig,
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
}

fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "lambda",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "patience",
    "max_epochs",
    "freeze_encoder",
    "augment",
    "n_mels",
    "window_ms",
    "hop_ms",
    "speed_factors",
    "mask_prob",
    "time_mask_max",
    "freq_mask_max",
    "stack",
    "skip",
    "log_floor",
    "encoder_layers",
    "encoder_hidden",
    "summarizer_hidden",
    "conv_channels",
    "attn_heads",
    "attn_dim",
    "leaky_alpha",
    "norm_eps",
];

impl RunSettings {
    /// Defaults for `mode`. `batch_size` starts unset (0) and must be supplied.
    pub fn defaults(mode: Mode) -> Self {
        RunSettings {
            train: TrainRunConfig::new(mode, 0),
            frontend: FrontendConfig::default(),
            model: ModelConfig::default(),
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let t = &mut self.train;
        let f = &mut self.frontend;
        let m = &mut self.model;
        match key {
            "seed" => t.seed = num(key, v)?,
            "lambda" => t.lambda = num(key, v)?,
            "lr" => t.adam.lr = num(key, v)?,
            "beta1" => t.adam.beta1 = num(key, v)?,
            "beta2" => t.adam.beta2 = num(key, v)?,
            "adam_eps" => t.adam.eps = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "patience" => t.patience = num(key, v)?,
            "max_epochs" => t.max_epochs = num(key, v)?,
            "freeze_encoder" => t.freeze_encoder = flag(key, v)?,
            "augment" => t.augment = flag(key, v)?,
            "n_mels" => f.n_mels = num(key, v)?,
            "window_ms" => f.window_ms = num(key, v)?,
            "hop_ms" => f.hop_ms = num(key, v)?,
            "speed_factors" => {
                f.speed_factors = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| num(key, s.trim())).collect::<std::result::Result<_, _>>()?
                }
            }
            "mask_prob" => f.mask_prob = num(key, v)?,
            "time_mask_max" => f.time_mask_max = num(key, v)?,
            "freq_mask_max" => f.freq_mask_max = num(key, v)?,
            "stack" => f.stack = num(key, v)?,
            "skip" => f.skip = num(key, v)?,
            "log_floor" => f.log_floor = num(key, v)?,
            "encoder_layers" => m.encoder.layers = num(key, v)?,
            "encoder_hidden" => m.encoder.hidden = num(key, v)?,
            "summarizer_hidden" => m.sentiment.summarizer_hidden = num(key, v)?,
            "conv_channels" => m.regressor.conv_channels = num(key, v)?,
            "attn_heads" => m.regressor.attn_heads = num(key, v)?,
            "attn_dim" => m.regressor.attn_dim = num(key, v)?,
            "leaky_alpha" => m.regressor.leaky_alpha = num(key, v)?,
            "norm_eps" => m.regressor.norm_eps = num(key, v)?,
            _ => return Err(format!("unknown key {key}")),
        }
        m.encoder.input_dim = f.stacked_dim();
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (t, f, m) = (&self.train, &self.frontend, &self.model);
        Some(match key {
            "seed" => t.seed.to_string(),
            "lambda" => t.lambda.to_string(),
            "lr" => t.adam.lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "patience" => t.patience.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "freeze_encoder" => t.freeze_encoder.to_string(),
            "augment" => t.augment.to_string(),
            "n_mels" => f.n_mels.to_string(),
            "window_ms" => f.window_ms.to_string(),
            "hop_ms" => f.hop_ms.to_string(),
            "speed_factors" => f.speed_factors.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            "mask_prob" => f.mask_prob.to_string(),
            "time_mask_max" => f.time_mask_max.to_string(),
            "freq_mask_max" => f.freq_mask_max.to_string(),
            "stack" => f.stack.to_string(),
            "skip" => f.skip.to_string(),
            "log_floor" => f.log_floor.to_string(),
            "encoder_layers" => m.encoder.layers.to_string(),
            "encoder_hidden" => m.encoder.hidden.to_string(),
            "summarizer_hidden" => m.sentiment.summarizer_hidden.to_string(),
            "conv_channels" => m.regressor.conv_channels.to_string(),
            "attn_heads" => m.regressor.attn_heads.to_string(),
            "attn_dim" => m.regressor.attn_dim.to_string(),
            "leaky_alpha" => m.regressor.leaky_alpha.to_string(),
            "norm_eps" => m.regressor.norm_eps.to_string(),
            _ => return None,
        })
    }

    /// Applies config-file text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (line, k, v) in parse_config(text)? {
            self.set(&k, &v).map_err(|reason| Error::Config { line, reason })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    /// Command-line overrides; line number 0 marks the origin.
    pub fn apply_overrides<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, String)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, &v).map_err(|reason| Error::Config { line: 0, reason })?;
        }
        Ok(())
    }

    /// `defaults < SA2SR_SEED < file < overrides`.
    pub fn resolve<'a>(
        mode: Mode,
        env_seed: Option<&str>,
        file: Option<&Path>,
        overrides: impl IntoIterator<Item = (&'a str, String)>,
    ) -> Result<Self> {
        let mut s = Self::defaults(mode);
        if let Some(seed) = env_seed {
            s.set("seed", seed)
                .map_err(|r| Error::InvalidConfig(format!("{SEED_ENV}: {r}")))?;
        }
        if let Some(path) = file {
            s.apply_file(path)?;
        }
        s.apply_overrides(overrides)?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size is required (no default)".into()));
        }
        self.train.validate()?;
        self.frontend.validate()?;
        self.model.validate()
    }

    /// Every key with its effective value, one per line, in `KEYS` order.
    pub fn to_config_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_junk() {
        let kv = parse_config("# header\nlr = 0.01  # fast\n\nbatch_size=4\n").unwrap();
        assert_eq!(kv, vec![(2, "lr".into(), "0.01".into()), (4, "batch_size".into(), "4".into())]);
        assert!(matches!(parse_config("a = 1\nbogus\n"), Err(Error::Config { line: 2, .. })));
        assert!(matches!(parse_config("a = 1\na = 2"), Err(Error::Config { line: 2, .. })));
    }

    #[test]
    fn precedence_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "seed = 5\nbatch_size = 8\nencoder_hidden = 32\n").unwrap();
        let s = RunSettings::resolve(Mode::Pretrain, Some("3"), Some(&path), [("seed", "9".to_string())]).unwrap();
        assert_eq!(s.train.seed, 9);
        assert_eq!(s.train.batch_size, 8);
        assert_eq!(s.model.encoder.hidden, 32);
        let only_env = RunSettings::resolve(Mode::Pretrain, Some("3"), None, []).unwrap();
        assert_eq!(only_env.train.seed, 3);

        let mut again = RunSettings::defaults(Mode::Pretrain);
        again.apply_text(&s.to_config_text()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn batch_size_required_and_unknown_keys_rejected() {
        let s = RunSettings::defaults(Mode::Finetune);
        assert!(s.validate().unwrap_err().to_string().contains("batch_size"));
        let mut s = RunSettings::defaults(Mode::Finetune);
        assert!(matches!(s.apply_text("\nwarp = 9"), Err(Error::Config { line: 2, .. })));
    }

    #[test]
    fn input_dim_tracks_stacking() {
        let mut s = RunSettings::defaults(Mode::Pretrain);
        s.set("n_mels", "20").unwrap();
        s.set("stack", "2").unwrap();
        assert_eq!(s.model.encoder.input_dim, 40);
    }
}
