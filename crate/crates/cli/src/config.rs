//! `key=value` run configuration.

use std::path::{Path, PathBuf};

use saliency_core::{Modality, ModelConfig};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{source_name}:{line}: {message}")]
    Syntax {
        source_name: String,
        line: usize,
        message: String,
    },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {message}")]
    BadValue { key: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("side", "64", "input side h = w, a multiple of 16"),
    ("c", "64", "low-level token width"),
    ("d", "384", "decoder token width"),
    (
        "encoder_layers",
        "4",
        "transformer layers after the last soft split",
    ),
    (
        "convertor_layers",
        "4",
        "convertor layers (even in rgbd mode)",
    ),
    (
        "decoder_layers",
        "4,2,2",
        "decoder layers at 1/16, 1/8 and 1/4",
    ),
    ("mode", "rgb", "rgb or rgbd"),
    ("heads", "6", "attention heads at width d"),
    ("encoder_heads", "1", "attention heads at width c"),
    (
        "ffn_ratio",
        "4",
        "hidden width multiplier of the feed-forward blocks",
    ),
    ("seed", "0", "weight initialization seed"),
    ("rgb", "", "P6 input image; empty uses the synthetic scene"),
    (
        "depth",
        "",
        "P5 depth map; empty uses the image's channel mean",
    ),
    (
        "gt",
        "",
        "P5 ground-truth mask; empty uses the synthetic mask",
    ),
    ("resize", "false", "nearest-neighbour resize inputs to side"),
    ("out", "out", "output directory"),
    (
        "fg_fraction",
        "0.5",
        "synthetic foreground fraction for macs",
    ),
    ("steps", "2000", "overfit gradient steps"),
    ("lr", "0.001", "overfit learning rate"),
    (
        "loss_threshold",
        "0.05",
        "overfit: maximum final total loss",
    ),
    (
        "mae_threshold",
        "0.05",
        "overfit: maximum full-resolution MAE",
    ),
    (
        "gradcheck_tolerance",
        "0.0001",
        "gradcheck: maximum relative error",
    ),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub rgb: Option<PathBuf>,
    pub depth: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub resize: bool,
    pub out: PathBuf,
    pub fg_fraction: f64,
    pub steps: usize,
    pub lr: f64,
    pub loss_threshold: f64,
    pub mae_threshold: f64,
    pub gradcheck_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = RunConfig {
            model: ModelConfig::default(),
            rgb: None,
            depth: None,
            gt: None,
            resize: false,
            out: PathBuf::new(),
            fg_fraction: 0.0,
            steps: 0,
            lr: 0.0,
            loss_threshold: 0.0,
            mae_threshold: 0.0,
            gradcheck_tolerance: 0.0,
        };
        for (key, value, _) in KEYS {
            cfg.set(key, value).expect("defaults parse");
        }
        cfg
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_owned(),
        message: format!("`{value}`: {e}"),
    })
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let m = &mut self.model;
        match key {
            "side" => m.side = parse(key, value)?,
            "c" => m.c = parse(key, value)?,
            "d" => m.d = parse(key, value)?,
            "encoder_layers" => m.encoder_layers = parse(key, value)?,
            "convertor_layers" => m.convertor_layers = parse(key, value)?,
            "decoder_layers" => {
                let parts = value
                    .split(',')
                    .map(|v| parse::<usize>(key, v.trim()))
                    .collect::<Result<Vec<_>, _>>()?;
                m.decoder_layers = parts.try_into().map_err(|_| ConfigError::BadValue {
                    key: key.to_owned(),
                    message: format!("`{value}`: expected three comma-separated counts"),
                })?;
            }
            "mode" => m.modality = parse::<Modality>(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "encoder_heads" => m.encoder_heads = parse(key, value)?,
            "ffn_ratio" => m.ffn_ratio = parse(key, value)?,
            "seed" => m.seed = parse(key, value)?,
            "rgb" => self.rgb = path(value),
            "depth" => self.depth = path(value),
            "gt" => self.gt = path(value),
            "resize" => self.resize = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "fg_fraction" => {
                let f: f64 = parse(key, value)?;
                if !(0.0..=1.0).contains(&f) {
                    return Err(ConfigError::BadValue {
                        key: key.to_owned(),
                        message: format!("{f} is outside [0, 1]"),
                    });
                }
                self.fg_fraction = f;
            }
            "steps" => self.steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "loss_threshold" => self.loss_threshold = parse(key, value)?,
            "mae_threshold" => self.mae_threshold = parse(key, value)?,
            "gradcheck_tolerance" => self.gradcheck_tolerance = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_owned())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        Some(match key {
            "side" => m.side.to_string(),
            "c" => m.c.to_string(),
            "d" => m.d.to_string(),
            "encoder_layers" => m.encoder_layers.to_string(),
            "convertor_layers" => m.convertor_layers.to_string(),
            "decoder_layers" => {
                let [a, b, c] = m.decoder_layers;
                format!("{a},{b},{c}")
            }
            "mode" => m.modality.to_string(),
            "heads" => m.heads.to_string(),
            "encoder_heads" => m.encoder_heads.to_string(),
            "ffn_ratio" => m.ffn_ratio.to_string(),
            "seed" => m.seed.to_string(),
            "rgb" => show(&self.rgb),
            "depth" => show(&self.depth),
            "gt" => show(&self.gt),
            "resize" => self.resize.to_string(),
            "out" => self.out.display().to_string(),
            "fg_fraction" => self.fg_fraction.to_string(),
            "steps" => self.steps.to_string(),
            "lr" => self.lr.to_string(),
            "loss_threshold" => self.loss_threshold.to_string(),
            "mae_threshold" => self.mae_threshold.to_string(),
            "gradcheck_tolerance" => self.gradcheck_tolerance.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str, source_name: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    source_name: source_name.to_owned(),
                    line: i + 1,
                    message: format!("expected key=value, got `{line}`"),
                });
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Every key in declaration order, one `key=value` per line.
    pub fn canonical(&self) -> String {
        KEYS.iter()
            .map(|(k, _, _)| format!("{k}={}\n", self.get(k).expect("declared key")))
            .collect()
    }

    /// SHA-256 of the canonical lines except `out`, hex encoded, so a run
    /// hashes the same wherever its artifacts go.
    pub fn hash(&self) -> String {
        let text: String = self
            .canonical()
            .lines()
            .filter(|l| !l.starts_with("out="))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_model_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.out, PathBuf::from("out"));
        assert_eq!(cfg.steps, 2000);
        assert!(cfg.rgb.is_none());
    }

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        for (key, default, _) in KEYS {
            assert_eq!(cfg.get(key).as_deref(), Some(*default), "{key}");
        }
        let mut again = RunConfig::default();
        again.apply_text(&cfg.canonical(), "canonical").unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn file_text_with_comments() {
        let mut cfg = RunConfig::default();
        let text = "# small model\nside = 32\nd=64 # width\n\nmode=rgbd\ndecoder_layers=1, 1, 2\n";
        cfg.apply_text(text, "t").unwrap();
        assert_eq!(cfg.model.side, 32);
        assert_eq!(cfg.model.d, 64);
        assert_eq!(cfg.model.modality, Modality::Rgbd);
        assert_eq!(cfg.model.decoder_layers, [1, 1, 2]);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_lines() {
        let mut cfg = RunConfig::default();
        assert!(matches!(
            cfg.apply_text("sidee=3", "t"),
            Err(ConfigError::UnknownKey(k)) if k == "sidee"
        ));
        assert!(matches!(
            cfg.apply_text("ok\nside", "t"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(cfg.set("decoder_layers", "1,2").is_err());
        assert!(cfg.set("fg_fraction", "1.5").is_err());
        assert!(cfg.set("mode", "rgbx").is_err());
    }

    #[test]
    fn hash_tracks_values() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.set("out", "elsewhere").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "1").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
